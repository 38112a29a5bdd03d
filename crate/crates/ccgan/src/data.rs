//! In-memory image sets and the training batch stream.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use ccgan_core::masking::{downsample, MaskSampler};
use ccgan_core::objectives::ClassTargets;
use ccgan_core::train::Batch;
use ccgan_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{Entry, Label, Manifest};
use crate::ppm::{self, RgbImage};

/// `x / 127.5 - 1`, planar channels.
pub fn normalize(img: &RgbImage) -> Vec<f32> {
    let plane = img.width * img.height;
    let mut out = vec![0.0; 3 * plane];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = f32::from(px[c]) / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`normalize`], rounding and clamping to 8 bits.
pub fn denormalize(planar: &[f32], width: usize, height: usize) -> RgbImage {
    let plane = width * height;
    let mut img = RgbImage::new(width, height);
    for p in 0..plane {
        for c in 0..3 {
            img.data[p * 3 + c] = ((planar[c * plane + p] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Decoded, normalized images of one size with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    /// `3 x size x size` floats per image, concatenated.
    pub pixels: Vec<f32>,
}

impl ImageSet {
    pub fn load(manifest: &Manifest, entries: &[&Entry]) -> Result<Self> {
        let mut set = Self { size: 0, ids: Vec::new(), labels: Vec::new(), pixels: Vec::new() };
        for e in entries {
            let path = manifest.path_of(e);
            let img = ppm::read(&path)?;
            if img.width != img.height {
                return Err(Error::config(format!("{}: images must be square, got {}x{}", path.display(), img.width, img.height)));
            }
            if set.size == 0 {
                set.size = img.width;
            } else if img.width != set.size {
                return Err(Error::config(format!("{}: {}x{} differs from earlier {}x{}", path.display(), img.width, img.height, set.size, set.size)));
            }
            set.pixels.extend(normalize(&img));
            set.ids.push(e.path.clone());
            set.labels.push(e.label.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn stride(&self) -> usize {
        3 * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Copies the `crop x crop` window at `(top, left)` of image `i` onto `out`.
    pub fn crop_into(&self, i: usize, top: usize, left: usize, crop: usize, out: &mut Vec<f32>) {
        let (s, img) = (self.size, self.image(i));
        for c in 0..3 {
            for y in top..top + crop {
                let row = c * s * s + y * s;
                out.extend_from_slice(&img[row + left..row + left + crop]);
            }
        }
    }

    /// Images `indices` as an `N x 3 x size x size` tensor.
    pub fn tensor(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), 3, self.size, self.size], data).expect("sizes agree")
    }

    pub fn targets(&self, indices: &[usize]) -> ClassTargets {
        targets_of(indices.iter().map(|&i| &self.labels[i]))
    }
}

fn targets_of<'a>(labels: impl Iterator<Item = &'a Label>) -> ClassTargets {
    let labels: Vec<&Label> = labels.collect();
    if labels.iter().any(|l| matches!(l, Label::Multi(_))) {
        ClassTargets::Multi(labels.iter().map(|l| if let Label::Multi(v) = l { Some(v.clone()) } else { None }).collect())
    } else {
        ClassTargets::Single(labels.iter().map(|l| if let Label::Class(c) = l { Some(*c) } else { None }).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    /// Every batch holds a fixed share of labeled images, the rest unlabeled.
    Mixed,
    LabeledOnly,
    UnlabeledOnly,
}

impl MixMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(MixMode::Mixed),
            "labeled_only" => Ok(MixMode::LabeledOnly),
            "unlabeled_only" => Ok(MixMode::UnlabeledOnly),
            _ => Err(Error::config(format!("unknown batch mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MixMode::Mixed => "mixed",
            MixMode::LabeledOnly => "labeled_only",
            MixMode::UnlabeledOnly => "unlabeled_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mode: MixMode,
    /// Labeled share of a mixed batch.
    pub labeled_fraction: f64,
    /// Square crop side; the full image when equal to the image size.
    pub crop: usize,
    pub mask: Option<MaskSampler>,
    pub lowres_factor: Option<usize>,
}

impl BatchConfig {
    /// Labeled rows per batch.
    pub fn labeled_per_batch(&self) -> usize {
        match self.mode {
            MixMode::Mixed => ((self.batch_size as f64 * self.labeled_fraction).round() as usize).clamp(1, self.batch_size - 1),
            MixMode::LabeledOnly => self.batch_size,
            MixMode::UnlabeledOnly => 0,
        }
    }
}

/// A training batch with the manifest paths of its source images.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    pub batch: Batch<f32>,
    pub ids: Vec<String>,
}

/// Cycles through shuffled passes of one pool.
#[derive(Clone, Debug)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless, seed-determined sequence of training batches.
#[derive(Clone, Debug)]
pub struct BatchStream {
    labeled: Arc<ImageSet>,
    unlabeled: Arc<ImageSet>,
    cfg: BatchConfig,
    rng: ChaCha8Rng,
    cursors: (Cursor, Cursor),
}

impl BatchStream {
    pub fn new(labeled: Arc<ImageSet>, unlabeled: Arc<ImageSet>, cfg: BatchConfig, seed: u64) -> Result<Self> {
        if cfg.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 for batch normalization"));
        }
        if !(0.0..=1.0).contains(&cfg.labeled_fraction) {
            return Err(Error::config("labeled fraction must lie in [0, 1]"));
        }
        let size = match cfg.mode {
            MixMode::LabeledOnly | MixMode::Mixed if labeled.is_empty() => {
                return Err(Error::config(format!("{} batches request labels but the labeled source is empty", cfg.mode.name())))
            }
            MixMode::UnlabeledOnly | MixMode::Mixed if unlabeled.is_empty() => {
                return Err(Error::config(format!("{} batches need unlabeled images but there are none", cfg.mode.name())))
            }
            MixMode::LabeledOnly => labeled.size,
            _ => unlabeled.size,
        };
        if cfg.mode == MixMode::Mixed && labeled.size != unlabeled.size {
            return Err(Error::config("labeled and unlabeled images differ in size"));
        }
        if cfg.crop == 0 || cfg.crop > size {
            return Err(Error::config(format!("crop {} does not fit {size}x{size} images", cfg.crop)));
        }
        if let Some(m) = cfg.mask {
            if m.image != (cfg.crop, cfg.crop) {
                return Err(Error::config("mask sampler size differs from the crop size"));
            }
        }
        if let Some(f) = cfg.lowres_factor {
            if f == 0 || !cfg.crop.is_multiple_of(f) {
                return Err(Error::config(format!("crop {} not divisible by low-res factor {f}", cfg.crop)));
            }
        }
        let cursors = (Cursor::new(labeled.len()), Cursor::new(unlabeled.len()));
        Ok(Self { labeled, unlabeled, cfg, rng: ChaCha8Rng::seed_from_u64(seed), cursors })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.cfg
    }

    /// Batches per pass over the pool that drives the epoch: the unlabeled
    /// pool for mixed and unlabeled-only streams, the labeled pool otherwise.
    pub fn steps_per_epoch(&self) -> usize {
        let (pool, per_batch) = match self.cfg.mode {
            MixMode::LabeledOnly => (self.labeled.len(), self.cfg.batch_size),
            _ => (self.unlabeled.len(), self.cfg.batch_size - self.cfg.labeled_per_batch()),
        };
        pool.div_ceil(per_batch).max(1)
    }

    pub fn next_batch(&mut self) -> Result<DataBatch> {
        let cfg = self.cfg;
        let k = cfg.labeled_per_batch();
        let mut data = Vec::with_capacity(cfg.batch_size * 3 * cfg.crop * cfg.crop);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for row in 0..cfg.batch_size {
            let (set, i) = if row < k {
                (&self.labeled, self.cursors.0.next(&mut self.rng))
            } else {
                (&self.unlabeled, self.cursors.1.next(&mut self.rng))
            };
            let slack = set.size - cfg.crop;
            let (top, left) = (self.rng.random_range(0..=slack), self.rng.random_range(0..=slack));
            set.crop_into(i, top, left, cfg.crop, &mut data);
            labels.push(if row < k { set.labels[i].clone() } else { Label::None });
            ids.push(set.ids[i].clone());
        }
        let images = Tensor::new(&[cfg.batch_size, 3, cfg.crop, cfg.crop], data)?;
        let masks = cfg.mask.map(|s| (0..cfg.batch_size).map(|_| s.sample(&mut self.rng)).collect::<ccgan_core::Result<Vec<_>>>()).transpose()?;
        let lowres = cfg.lowres_factor.map(|f| downsample(&images, f)).transpose()?;
        let batch = Batch { images, targets: targets_of(labels.iter()), masks, lowres };
        Ok(DataBatch { batch, ids })
    }

    /// Moves batch preparation to a producer thread feeding a bounded queue.
    /// The delivered sequence equals calling [`next_batch`](Self::next_batch) `count` times.
    pub fn prefetch(mut self, count: usize, capacity: usize) -> (Receiver<Result<DataBatch>>, JoinHandle<()>) {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for _ in 0..count {
                let b = self.next_batch();
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        (rx, handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccgan_core::masking::MaskScheme;

    fn set(n: usize, size: usize, labeled: bool, offset: usize) -> Arc<ImageSet> {
        let mut pixels = Vec::new();
        for i in 0..n {
            pixels.extend((0..3 * size * size).map(|p| ((i + offset) * 1000 + p) as f32));
        }
        Arc::new(ImageSet {
            size,
            ids: (0..n).map(|i| format!("img{}", i + offset)).collect(),
            labels: (0..n).map(|i| if labeled { Label::Class(i % 3) } else { Label::None }).collect(),
            pixels,
        })
    }

    fn cfg(mode: MixMode) -> BatchConfig {
        BatchConfig { batch_size: 8, mode, labeled_fraction: 0.5, crop: 4, mask: None, lowres_factor: None }
    }

    #[test]
    fn normalization_round_trips() {
        let mut img = RgbImage::new(2, 2);
        img.data = (0..12).map(|i| (i * 23) as u8).collect();
        let n = normalize(&img);
        assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(n[0], -1.0);
        assert_eq!(denormalize(&n, 2, 2), img);
        assert_eq!(denormalize(&[0.0; 3], 1, 1).data, [128, 128, 128]);
    }

    #[test]
    fn mixed_batches_hold_the_configured_share() {
        let mut s = BatchStream::new(set(5, 6, true, 0), set(50, 6, false, 100), cfg(MixMode::Mixed), 1).unwrap();
        let b = s.next_batch().unwrap();
        assert_eq!(b.batch.targets.labeled_count(), 4);
        assert_eq!(b.batch.images.shape(), [8, 3, 4, 4]);
        assert_eq!(s.steps_per_epoch(), 13);
    }

    #[test]
    fn crops_are_source_subregions() {
        let l = set(3, 6, true, 0);
        let mut s = BatchStream::new(l.clone(), set(0, 6, false, 0), cfg(MixMode::LabeledOnly), 2).unwrap();
        let b = s.next_batch().unwrap();
        for (row, id) in b.ids.iter().enumerate() {
            let i = l.ids.iter().position(|x| x == id).unwrap();
            let first = b.batch.images.data()[row * 48];
            let offset = first as usize - i * 1000;
            let (top, left) = (offset / 6, offset % 6);
            let mut want = Vec::new();
            l.crop_into(i, top, left, 4, &mut want);
            assert_eq!(&b.batch.images.data()[row * 48..(row + 1) * 48], want.as_slice());
        }
    }

    #[test]
    fn same_seed_same_stream_and_prefetch_agrees() {
        let mut c = cfg(MixMode::Mixed);
        c.mask = Some(MaskSampler::new(MaskScheme::SingleSquare, (4, 4), (2, 2)).unwrap());
        c.lowres_factor = Some(2);
        let a = BatchStream::new(set(5, 6, true, 0), set(20, 6, false, 100), c, 9).unwrap();
        let mut direct = a.clone();
        let (rx, handle) = a.prefetch(6, 2);
        for b in rx {
            assert_eq!(b.unwrap(), direct.next_batch().unwrap());
        }
        handle.join().unwrap();
    }

    #[test]
    fn label_requests_without_labels_fail() {
        assert!(BatchStream::new(set(0, 6, true, 0), set(10, 6, false, 0), cfg(MixMode::LabeledOnly), 0).is_err());
        assert!(BatchStream::new(set(0, 6, true, 0), set(10, 6, false, 0), cfg(MixMode::Mixed), 0).is_err());
        let mut tiny = cfg(MixMode::UnlabeledOnly);
        tiny.batch_size = 1;
        assert!(BatchStream::new(set(0, 6, true, 0), set(10, 6, false, 0), tiny, 0).is_err());
        let mut big = cfg(MixMode::UnlabeledOnly);
        big.crop = 7;
        assert!(BatchStream::new(set(0, 6, true, 0), set(10, 6, false, 0), big, 0).is_err());
    }
}
