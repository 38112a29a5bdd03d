use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{
    apply_stats, batch_norm, check_bound, gaussian, run_blocks, Block, BlockKind, ConvLayer, HiddenActivation,
    ParamSet, Store, INIT_STD,
};
use crate::error::{config_err, contract, Result};
use crate::{conv_output_size, conv_transpose_output_size, Activation, Mode, Scalar, Tape, Tensor, Var};

/// What the generator is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorInput {
    /// Encoder-decoder over the masked image (CC-GAN).
    Context,
    /// Noise projected to a small feature map and upsampled (unconditional DCGAN generator).
    Noise,
}

/// Where the low-resolution image enters the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LowresInjection {
    /// Nearest-neighbour upsampled to full size and concatenated with the masked image.
    Input,
    /// Resampled to the bottleneck resolution and concatenated with the encoder output.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LowresConditioning {
    /// Downsampling factor of the conditioning image.
    pub factor: usize,
    pub injection: LowresInjection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub image_channels: usize,
    pub resolution: usize,
    pub input: GeneratorInput,
    /// Noise-input only: the noise is projected to `channels x size x size`.
    pub projection: Option<(usize, usize)>,
    /// Strided convolutions, each followed by batch norm and the hidden activation.
    pub encoder: Vec<ConvLayer>,
    /// Transposed convolutions with batch norm and activation, except the
    /// last, which maps to `image_channels` and ends in tanh.
    pub decoder: Vec<ConvLayer>,
    pub lowres: Option<LowresConditioning>,
    /// Length of the noise vector `z`; 0 disables noise.
    pub noise_dim: usize,
    pub activation: HiddenActivation,
}

impl GeneratorSpec {
    /// Context encoder-decoder: `4x4` stride-2 convolutions over `ladder`,
    /// mirrored by `4x4` stride-2 transposed convolutions back to full size.
    pub fn context(image_channels: usize, resolution: usize, ladder: &[usize]) -> Self {
        let encoder: Vec<ConvLayer> = ladder.iter().map(|&c| ConvLayer::new(c, 4, 2, 1)).collect();
        let mut decoder: Vec<ConvLayer> = ladder.iter().rev().skip(1).map(|&c| ConvLayer::new(c, 4, 2, 1)).collect();
        decoder.push(ConvLayer::new(image_channels, 4, 2, 1));
        Self {
            image_channels,
            resolution,
            input: GeneratorInput::Context,
            projection: None,
            encoder,
            decoder,
            lowres: None,
            noise_dim: 0,
            activation: HiddenActivation::Relu,
        }
    }

    /// 64x64 default: encoder 64-128-256-512, mirrored decoder.
    pub fn default_64() -> Self {
        Self::context(3, 64, &[64, 128, 256, 512])
    }

    /// DCGAN-style generator from noise: project to `ladder[0] x size x size`,
    /// then transposed convolutions through the rest of the ladder.
    pub fn noise(image_channels: usize, resolution: usize, noise_dim: usize, ladder: &[usize]) -> Self {
        let size = resolution >> ladder.len();
        let mut decoder: Vec<ConvLayer> = ladder.iter().skip(1).map(|&c| ConvLayer::new(c, 4, 2, 1)).collect();
        decoder.push(ConvLayer::new(image_channels, 4, 2, 1));
        Self {
            image_channels,
            resolution,
            input: GeneratorInput::Noise,
            projection: Some((ladder.first().copied().unwrap_or(image_channels), size)),
            encoder: Vec::new(),
            decoder,
            lowres: None,
            noise_dim,
            activation: HiddenActivation::Relu,
        }
    }

    pub fn uses_noise(&self) -> bool {
        self.noise_dim > 0
    }

    /// Channels entering the first encoder layer.
    fn input_channels(&self) -> usize {
        let mut c = self.image_channels + self.noise_dim;
        if matches!(self.lowres, Some(LowresConditioning { injection: LowresInjection::Input, .. })) {
            c += self.image_channels;
        }
        c
    }

    /// Spatial size after the encoder, validating every layer.
    fn bottleneck(&self) -> Result<usize> {
        let mut s = self.resolution;
        for l in &self.encoder {
            s = conv_output_size(s, l.kernel, l.stride, l.pad)?;
        }
        Ok(s)
    }

    /// Checks that the ladder closes back to the input resolution.
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.resolution == 0 {
            return Err(config_err!("generator needs positive channels and resolution"));
        }
        let last = self.decoder.last().ok_or_else(|| config_err!("generator needs at least one decoder layer"))?;
        if last.channels != self.image_channels {
            return Err(config_err!("final layer emits {} channels, images have {}", last.channels, self.image_channels));
        }
        if self.encoder.iter().chain(&self.decoder).any(|l| l.channels == 0) {
            return Err(config_err!("layer with zero channels"));
        }
        let mut s = match self.input {
            GeneratorInput::Context => {
                if self.projection.is_some() {
                    return Err(config_err!("projection is only valid for noise-input generators"));
                }
                self.bottleneck()?
            }
            GeneratorInput::Noise => {
                if !self.encoder.is_empty() || self.lowres.is_some() || self.noise_dim == 0 {
                    return Err(config_err!("noise-input generator takes only noise: no encoder, no low-res, noise_dim > 0"));
                }
                match self.projection {
                    Some((c, s)) if c > 0 && s > 0 => s,
                    _ => return Err(config_err!("noise-input generator needs a projection")),
                }
            }
        };
        if let Some(lr) = self.lowres {
            if lr.factor == 0 || !self.resolution.is_multiple_of(lr.factor) {
                return Err(config_err!("resolution {} not divisible by low-res factor {}", self.resolution, lr.factor));
            }
            let small = self.resolution / lr.factor;
            if lr.injection == LowresInjection::Bottleneck && !small.is_multiple_of(s) && s % small != 0 {
                return Err(config_err!("low-res {small} cannot be resampled to bottleneck {s}"));
            }
        }
        for l in &self.decoder {
            s = conv_transpose_output_size(s, l.kernel, l.stride, l.pad)?;
        }
        if s != self.resolution {
            return Err(config_err!("decoder emits {s}x{s}, expected {}x{}", self.resolution, self.resolution));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        let mut total = 0;
        let mut c_in = self.input_channels();
        if let (GeneratorInput::Noise, Some((c, s))) = (self.input, self.projection) {
            total += self.noise_dim * c * s * s + c * s * s + 2 * c;
            c_in = c;
        }
        for l in &self.encoder {
            total += c_in * l.channels * l.kernel * l.kernel + 2 * l.channels;
            c_in = l.channels;
        }
        if matches!(self.lowres, Some(LowresConditioning { injection: LowresInjection::Bottleneck, .. })) {
            c_in += self.image_channels;
        }
        let n = self.decoder.len();
        for (i, l) in self.decoder.iter().enumerate() {
            total += c_in * l.channels * l.kernel * l.kernel;
            total += if i + 1 == n { l.channels } else { 2 * l.channels };
            c_in = l.channels;
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Projection {
    weight: usize,
    bias: usize,
    bn: super::BnSlot,
    channels: usize,
    size: usize,
}

/// Generator network. Emits a full image in `(-1, 1)`, not only the hole.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    store: Store<T>,
    projection: Option<Projection>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
}

impl<T: Scalar> Generator<T> {
    pub fn build<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = Store::new();
        let act = spec.activation.op();
        let mut c_in = spec.input_channels();
        let mut projection = None;
        if let (GeneratorInput::Noise, Some((c, s))) = (spec.input, spec.projection) {
            let weight = store.params.push("proj.weight".into(), gaussian(&[spec.noise_dim, c * s * s], INIT_STD, rng));
            let bias = store.params.push("proj.bias".into(), Tensor::zeros(&[c * s * s]));
            let bn = store.bn("proj", c);
            projection = Some(Projection { weight, bias, bn, channels: c, size: s });
            c_in = c;
        }
        let mut encoder = Vec::new();
        for (i, l) in spec.encoder.iter().enumerate() {
            let shape = [l.channels, c_in, l.kernel, l.kernel];
            let weight = store.params.push(format!("enc{i}.weight"), gaussian(&shape, INIT_STD, rng));
            let bn = store.bn(&format!("enc{i}"), l.channels);
            encoder.push(Block { kind: BlockKind::Conv(l.geometry()), weight: Some(weight), bias: None, bn: Some(bn), act: Some(act) });
            c_in = l.channels;
        }
        if matches!(spec.lowres, Some(LowresConditioning { injection: LowresInjection::Bottleneck, .. })) {
            c_in += spec.image_channels;
        }
        let mut decoder = Vec::new();
        let n = spec.decoder.len();
        for (i, l) in spec.decoder.iter().enumerate() {
            let shape = [c_in, l.channels, l.kernel, l.kernel];
            let weight = store.params.push(format!("dec{i}.weight"), gaussian(&shape, INIT_STD, rng));
            let block = if i + 1 == n {
                let bias = store.params.push(format!("dec{i}.bias"), Tensor::zeros(&[l.channels]));
                Block { kind: BlockKind::ConvT(l.geometry()), weight: Some(weight), bias: Some(bias), bn: None, act: Some(Activation::Tanh) }
            } else {
                let bn = store.bn(&format!("dec{i}"), l.channels);
                Block { kind: BlockKind::ConvT(l.geometry()), weight: Some(weight), bias: None, bn: Some(bn), act: Some(act) }
            };
            decoder.push(block);
            c_in = l.channels;
        }
        Ok(Self { spec, store, projection, encoder, decoder })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.store.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.store.params
    }

    pub fn running_stats(&self) -> &[crate::RunningStats<T>] {
        &self.store.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [crate::RunningStats<T>] {
        &mut self.store.stats
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.store.params.bind(tape, trainable)
    }

    /// Forward pass; in train mode the batch statistics update the running stats.
    ///
    /// `masked` is `m * x` (context input) and must be given for context
    /// generators; `lowres` is required iff the spec enables it; `noise` is
    /// `N x noise_dim` and required iff the spec uses noise.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        masked: Option<Var>,
        lowres: Option<Var>,
        noise: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        let mut collected = Vec::new();
        let out = self.run(tape, params, masked, lowres, noise, mode, &mut collected)?;
        apply_stats(&mut self.store, collected);
        Ok(out)
    }

    /// Forward pass that leaves the running statistics untouched.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        masked: Option<Var>,
        lowres: Option<Var>,
        noise: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        self.run(tape, params, masked, lowres, noise, mode, &mut Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        masked: Option<Var>,
        lowres: Option<Var>,
        noise: Option<Var>,
        mode: Mode,
        collected: &mut Vec<(usize, crate::tape::BatchStats<T>)>,
    ) -> Result<Var> {
        check_bound(params, &self.store.params)?;
        let spec = &self.spec;
        if lowres.is_some() != spec.lowres.is_some() {
            return Err(contract!(
                "low-res input {} but the generator spec {} it",
                if lowres.is_some() { "given" } else { "missing" },
                if spec.lowres.is_some() { "requires" } else { "does not use" }
            ));
        }
        if noise.is_some() != spec.uses_noise() {
            return Err(contract!("noise input must be given iff noise_dim > 0"));
        }
        let n = match (spec.input, masked, noise) {
            (GeneratorInput::Context, Some(m), _) => {
                let (n, c, h, w) = tape.value(m).dims4()?;
                if c != spec.image_channels || h != spec.resolution || w != spec.resolution {
                    return Err(contract!(
                        "generator expects {}x{}x{} input, got {c}x{h}x{w}",
                        spec.image_channels, spec.resolution, spec.resolution
                    ));
                }
                n
            }
            (GeneratorInput::Noise, None, Some(z)) => tape.shape(z)[0],
            (GeneratorInput::Context, None, _) => return Err(contract!("context generator needs a masked image")),
            (GeneratorInput::Noise, Some(_), _) => return Err(contract!("noise generator takes no image input")),
            (GeneratorInput::Noise, None, None) => return Err(contract!("noise generator needs noise")),
        };
        if let Some(z) = noise {
            if tape.shape(z) != [n, spec.noise_dim] {
                return Err(contract!("noise must be {n}x{}, got {:?}", spec.noise_dim, tape.shape(z)));
            }
        }
        let lowres_info = match (spec.lowres, lowres) {
            (Some(cfg), Some(l)) => {
                let small = spec.resolution / cfg.factor;
                if tape.shape(l) != [n, spec.image_channels, small, small] {
                    return Err(contract!(
                        "low-res input must be {n}x{}x{small}x{small}, got {:?}",
                        spec.image_channels,
                        tape.shape(l)
                    ));
                }
                Some((cfg, l, small))
            }
            _ => None,
        };

        let mut x = match spec.input {
            GeneratorInput::Noise => {
                let z = noise.expect("checked");
                let p = self.projection.expect("noise generator has a projection");
                let flat = tape.linear(z, params[p.weight], params[p.bias])?;
                let map = tape.reshape(flat, &[n, p.channels, p.size, p.size])?;
                let normed = batch_norm(&self.store, tape, params, map, p.bn, mode, collected)?;
                tape.activation(normed, spec.activation.op())?
            }
            GeneratorInput::Context => {
                let mut parts = vec![masked.expect("checked")];
                if let Some((cfg, l, _)) = lowres_info.filter(|(c, _, _)| c.injection == LowresInjection::Input) {
                    parts.push(tape.upsample_nearest(l, cfg.factor)?);
                }
                if let Some(z) = noise {
                    let z4 = tape.reshape(z, &[n, spec.noise_dim, 1, 1])?;
                    parts.push(tape.upsample_nearest(z4, spec.resolution)?);
                }
                let input = if parts.len() == 1 { parts[0] } else { tape.concat_channels(&parts)? };
                run_blocks(&self.encoder, &self.store, tape, params, input, mode, collected, "generator encoder")?
            }
        };
        if let Some((_, l, small)) = lowres_info.filter(|(c, _, _)| c.injection == LowresInjection::Bottleneck) {
            let b = tape.shape(x)[2];
            let resized = if small >= b { tape.avg_pool2d(l, small / b)? } else { tape.upsample_nearest(l, b / small)? };
            x = tape.concat_channels(&[x, resized])?;
        }
        run_blocks(&self.decoder, &self.store, tape, params, x, mode, collected, "generator decoder")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_ladder_closes() {
        let spec = GeneratorSpec::default_64();
        spec.validate().unwrap();
        assert_eq!(spec.encoder[0], ConvLayer::new(64, 4, 2, 1));
        assert_eq!(spec.encoder.iter().map(|l| l.channels).collect::<Vec<_>>(), [64, 128, 256, 512]);
        assert_eq!(spec.decoder.iter().map(|l| l.channels).collect::<Vec<_>>(), [256, 128, 64, 3]);
    }

    #[test]
    fn broken_ladder_is_rejected() {
        let mut spec = GeneratorSpec::context(3, 32, &[8, 16]);
        spec.decoder.pop();
        assert!(spec.validate().is_err());
        let mut spec = GeneratorSpec::context(3, 32, &[8, 16]);
        spec.decoder.last_mut().unwrap().channels = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn lowres_contract_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::<f32>::build(GeneratorSpec::context(3, 8, &[4]), &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = g.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let l = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
        assert!(g.forward(&mut tape, &p, Some(x), Some(l), None, Mode::Train).is_err());
        assert!(g.forward(&mut tape, &p, Some(x), None, None, Mode::Train).is_ok());
    }
}
