//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CCGANCKP" | u32 version
//! repeated: u32 name length | name | u64 payload length | payload
//! ```
//!
//! Blocks appear in a fixed order, so loading and re-saving a checkpoint
//! reproduces it byte for byte. Tensors are stored as `u32 ndim`, `u64` dims,
//! then `f32` values.

use std::fs;
use std::path::Path;

use ccgan_core::models::{Discriminator, Generator, ParamSet};
use ccgan_core::optim::{AdamConfig, AdamState};
use ccgan_core::train::GanState;
use ccgan_core::{RunningStats, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::modelspec;

const MAGIC: &[u8; 8] = b"CCGANCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration text of the run that produced it.
    pub config_text: String,
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub state: GanState<f32>,
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.out.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for x in t.data() {
            self.out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn block(&mut self, name: &str, f: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        f(&mut inner);
        self.str(name);
        self.u64(inner.out.len() as u64);
        self.out.extend_from_slice(&inner.out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| format!("implausible length {n}"))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
    fn f32s(&mut self) -> std::result::Result<Vec<f32>, String> {
        let n = self.len()?;
        let bytes = self.take(n.checked_mul(4).ok_or("implausible length")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn tensor(&mut self) -> std::result::Result<Tensor<f32>, String> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(format!("{ndim}-dimensional tensor"));
        }
        let shape = (0..ndim).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("implausible shape")?;
        let bytes = self.take(n.checked_mul(4).ok_or("implausible shape")?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(&shape, data).map_err(|e| e.to_string())
    }
    /// Reads the next block, which must be called `name`.
    fn block(&mut self, name: &str) -> std::result::Result<Reader<'a>, String> {
        let got = self.str()?;
        if got != name {
            return Err(format!("expected block '{name}', found '{got}'"));
        }
        let n = self.len()?;
        Ok(Reader { buf: self.take(n)?, pos: 0 })
    }
    fn peek_block(&self) -> Option<String> {
        let mut probe = Reader { buf: self.buf, pos: self.pos };
        probe.str().ok()
    }
    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

fn write_params(w: &mut Writer, p: &ParamSet<f32>, stats: &[RunningStats<f32>]) {
    w.u32(p.tensors.len() as u32);
    for (name, t) in p.names.iter().zip(&p.tensors) {
        w.str(name);
        w.tensor(t);
    }
    w.u32(stats.len() as u32);
    for s in stats {
        w.f32s(&s.mean);
        w.f32s(&s.var);
    }
}

/// Overwrites the freshly built network's parameters, checking names and shapes.
fn read_params(
    r: &mut Reader<'_>,
    p: &mut ParamSet<f32>,
    stats: &mut [RunningStats<f32>],
) -> std::result::Result<(), String> {
    let n = r.u32()? as usize;
    if n != p.tensors.len() {
        return Err(format!("{n} parameter tensors, architecture has {}", p.tensors.len()));
    }
    for i in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        if name != p.names[i] || t.shape() != p.tensors[i].shape() {
            return Err(format!("parameter {name} {:?} does not match {} {:?}", t.shape(), p.names[i], p.tensors[i].shape()));
        }
        p.tensors[i] = t;
    }
    let k = r.u32()? as usize;
    if k != stats.len() {
        return Err(format!("{k} batch-norm layers, architecture has {}", stats.len()));
    }
    for s in stats.iter_mut() {
        let (mean, var) = (r.f32s()?, r.f32s()?);
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err("running statistics have the wrong width".into());
        }
        *s = RunningStats { mean, var };
    }
    Ok(())
}

fn write_adam(w: &mut Writer, a: &AdamState<f32>) {
    let c = a.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.f64(v);
    }
    w.u64(a.step);
    w.u32(a.m.len() as u32);
    for t in a.m.iter().chain(&a.v) {
        w.tensor(t);
    }
}

fn read_adam(r: &mut Reader<'_>, params: &ParamSet<f32>) -> std::result::Result<AdamState<f32>, String> {
    let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
    let step = r.u64()?;
    let n = r.u32()? as usize;
    if n != params.tensors.len() {
        return Err(format!("optimizer tracks {n} tensors, network has {}", params.tensors.len()));
    }
    let mut moments = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let t = r.tensor()?;
        if t.shape() != params.tensors[i % n].shape() {
            return Err(format!("optimizer moment {} has shape {:?}", i % n, t.shape()));
        }
        moments.push(t);
    }
    let v = moments.split_off(n);
    Ok(AdamState { config, step, m: moments, v })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = Writer::default();
        w.out.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.block("meta", |w| {
            w.u64(s.step);
            w.u64(self.epoch);
            w.out.extend_from_slice(&self.config_hash);
        });
        w.block("config", |w| w.str(&self.config_text));
        w.block("rng", |w| {
            w.out.extend_from_slice(&s.rng.get_seed());
            w.u64(s.rng.get_stream());
            w.out.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
        });
        let d = &s.discriminator;
        w.block("discriminator.spec", |w| w.str(&modelspec::discriminator_to_text(d.spec())));
        w.block("discriminator.params", |w| write_params(w, d.params(), d.running_stats()));
        w.block("discriminator.adam", |w| write_adam(w, &s.d_opt));
        if let (Some(g), Some(opt)) = (&s.generator, &s.g_opt) {
            w.block("generator.spec", |w| w.str(&modelspec::generator_to_text(g.spec())));
            w.block("generator.params", |w| write_params(w, g.params(), g.running_stats()));
            w.block("generator.adam", |w| write_adam(w, opt));
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        Self::parse(bytes).map_err(|msg| Error::format(origin, msg))
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err("not a ccgan checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut meta = r.block("meta")?;
        let step = meta.u64()?;
        let epoch = meta.u64()?;
        let config_hash: [u8; 32] = meta.take(32)?.try_into().expect("32 bytes");
        meta.finish()?;
        let mut cfg = r.block("config")?;
        let config_text = cfg.str()?;
        cfg.finish()?;

        let mut rb = r.block("rng")?;
        let seed: [u8; 32] = rb.take(32)?.try_into().expect("32 bytes");
        let stream = rb.u64()?;
        let word_pos = u128::from_le_bytes(rb.take(16)?.try_into().expect("16 bytes"));
        rb.finish()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        // Architectures are rebuilt from their specs; the init values are then overwritten.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut spec = r.block("discriminator.spec")?;
        let d_spec = modelspec::parse_discriminator(&spec.str()?, "discriminator.spec").map_err(|e| e.to_string())?;
        spec.finish()?;
        let mut discriminator = Discriminator::build(d_spec, &mut scratch).map_err(|e| e.to_string())?;
        let mut pb = r.block("discriminator.params")?;
        let mut params = discriminator.params().clone();
        read_params(&mut pb, &mut params, discriminator.running_stats_mut())?;
        pb.finish()?;
        *discriminator.params_mut() = params;
        let mut ab = r.block("discriminator.adam")?;
        let d_opt = read_adam(&mut ab, discriminator.params())?;
        ab.finish()?;

        let (mut generator, mut g_opt) = (None, None);
        if r.peek_block().as_deref() == Some("generator.spec") {
            let mut spec = r.block("generator.spec")?;
            let g_spec = modelspec::parse_generator(&spec.str()?, "generator.spec").map_err(|e| e.to_string())?;
            spec.finish()?;
            let mut g = Generator::build(g_spec, &mut scratch).map_err(|e| e.to_string())?;
            let mut pb = r.block("generator.params")?;
            let mut params = g.params().clone();
            read_params(&mut pb, &mut params, g.running_stats_mut())?;
            pb.finish()?;
            *g.params_mut() = params;
            let mut ab = r.block("generator.adam")?;
            g_opt = Some(read_adam(&mut ab, g.params())?);
            ab.finish()?;
            generator = Some(g);
        }
        r.finish()?;
        let state = GanState { generator, discriminator, g_opt, d_opt, rng, step };
        Ok(Self { config_text, config_hash, epoch, state })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccgan_core::models::{DiscriminatorSpec, GeneratorSpec};
    use rand::Rng;

    fn sample(with_g: bool) -> Checkpoint {
        let g = with_g.then(|| GeneratorSpec::context(3, 16, &[4, 8]));
        let mut state =
            GanState::new(g, DiscriminatorSpec::vgg(3, &[&[4], &[8]], 3), AdamConfig::default(), AdamConfig::default(), 5)
                .unwrap();
        state.step = 17;
        state.d_opt.step = 17;
        state.d_opt.m[0].data_mut()[0] = 0.25;
        state.discriminator.running_stats_mut()[0].var[1] = 3.0;
        let _: u32 = state.rng.random();
        Checkpoint { config_text: "run.seed = 5\n".into(), config_hash: [7; 32], epoch: 2, state }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_g in [true, false] {
            let c = sample(with_g);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let mut c = sample(true);
        let mut back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("c")).unwrap();
        let a: [u64; 4] = c.state.rng.random();
        let b: [u64; 4] = back.state.rng.random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample(true).to_bytes();
        for bad in [&bytes[..bytes.len() - 3], &bytes[1..], b"CCGANCKP\x09\0\0\0".as_slice()] {
            let e = Checkpoint::from_bytes(bad, Path::new("c.bin")).unwrap_err();
            assert_eq!(e.exit_code(), 3, "{e}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("c")).is_err());
    }
}
