use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{apply_stats, check_bound, gaussian, run_blocks, Block, BlockKind, ConvLayer, HiddenActivation, ParamSet, Store, INIT_STD};
use crate::error::{config_err, contract, Result};
use crate::{Mode, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrunkLayer {
    /// Convolution followed by batch norm and the hidden activation.
    Conv(ConvLayer),
    /// Non-overlapping max pooling with the given window.
    Pool(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    pub trunk: Vec<TrunkLayer>,
    pub num_classes: usize,
    /// Dropout on the pooled features in train mode.
    pub dropout: f64,
    pub activation: HiddenActivation,
}

impl DiscriminatorSpec {
    /// VGG-style trunk: 3x3 same-padded convolutions, one 2x2 max pool after each stage.
    pub fn vgg(image_channels: usize, stages: &[&[usize]], num_classes: usize) -> Self {
        let mut trunk = Vec::new();
        for stage in stages {
            trunk.extend(stage.iter().map(|&c| TrunkLayer::Conv(ConvLayer::new(c, 3, 1, 1))));
            trunk.push(TrunkLayer::Pool(2));
        }
        Self { image_channels, trunk, num_classes, dropout: 0.0, activation: HiddenActivation::Relu }
    }

    /// The VGG-A convolutional trunk without its fully connected layers.
    pub fn vgg_a(image_channels: usize, num_classes: usize) -> Self {
        Self::vgg(image_channels, &[&[64], &[128], &[256, 256], &[512, 512], &[512, 512]], num_classes)
    }

    pub fn conv_channels(&self) -> Vec<usize> {
        self.trunk
            .iter()
            .filter_map(|l| match l {
                TrunkLayer::Conv(c) => Some(c.channels),
                TrunkLayer::Pool(_) => None,
            })
            .collect()
    }

    fn feature_width(&self) -> usize {
        self.conv_channels().last().copied().unwrap_or(self.image_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(config_err!("discriminator needs at least one class"));
        }
        if self.image_channels == 0 {
            return Err(config_err!("discriminator needs positive image channels"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        for l in &self.trunk {
            match *l {
                TrunkLayer::Conv(c) if c.channels == 0 || c.kernel == 0 || c.stride == 0 => {
                    return Err(config_err!("invalid trunk conv {c:?}"))
                }
                TrunkLayer::Pool(0) => return Err(config_err!("pool window must be positive")),
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks that an `r x r` input passes every stride and pool exactly.
    pub fn check_resolution(&self, r: usize) -> Result<usize> {
        let mut s = r;
        for l in &self.trunk {
            s = match *l {
                TrunkLayer::Conv(c) => crate::conv_output_size(s, c.kernel, c.stride, c.pad)?,
                TrunkLayer::Pool(f) if s.is_multiple_of(f) => s / f,
                TrunkLayer::Pool(f) => return Err(config_err!("resolution {r}: {s}x{s} map not divisible by pool {f}")),
            };
        }
        Ok(s)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut c_in = self.image_channels;
        let mut total = 0;
        for l in &self.trunk {
            if let TrunkLayer::Conv(c) = l {
                total += c_in * c.channels * c.kernel * c.kernel + 2 * c.channels;
                c_in = c.channels;
            }
        }
        total + (c_in + 1) + (c_in * self.num_classes + self.num_classes)
    }
}

/// Per-sample real/fake probability and class logits from one trunk pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorOutput {
    /// `N` probabilities in `(0, 1)` that the input is real.
    pub prob: Var,
    /// `N x num_classes` classifier logits.
    pub logits: Var,
    /// `N x F` pooled trunk features (after dropout in train mode).
    pub features: Var,
}

/// Convolutional trunk, global average pooling and two linear heads.
///
/// The pooled trunk makes the parameter set independent of input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    store: Store<T>,
    trunk: Vec<Block>,
    rf_head: (usize, usize),
    cls_head: (usize, usize),
}

impl<T: Scalar> Discriminator<T> {
    pub fn build<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = Store::new();
        let act = spec.activation.op();
        let mut c_in = spec.image_channels;
        let mut trunk = Vec::new();
        for (i, l) in spec.trunk.iter().enumerate() {
            match *l {
                TrunkLayer::Conv(c) => {
                    let shape = [c.channels, c_in, c.kernel, c.kernel];
                    let weight = store.params.push(format!("trunk{i}.weight"), gaussian(&shape, INIT_STD, rng));
                    let bn = store.bn(&format!("trunk{i}"), c.channels);
                    trunk.push(Block { kind: BlockKind::Conv(c.geometry()), weight: Some(weight), bias: None, bn: Some(bn), act: Some(act) });
                    c_in = c.channels;
                }
                TrunkLayer::Pool(f) => trunk.push(Block { kind: BlockKind::MaxPool(f), weight: None, bias: None, bn: None, act: None }),
            }
        }
        let f = spec.feature_width();
        let rf_w = store.params.push("head.real_fake.weight".into(), gaussian(&[f, 1], INIT_STD, rng));
        let rf_b = store.params.push("head.real_fake.bias".into(), Tensor::zeros(&[1]));
        let c = spec.num_classes;
        let cls_w = store.params.push("head.class.weight".into(), gaussian(&[f, c], INIT_STD, rng));
        let cls_b = store.params.push("head.class.bias".into(), Tensor::zeros(&[c]));
        Ok(Self { spec, store, trunk, rf_head: (rf_w, rf_b), cls_head: (cls_w, cls_b) })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
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

    /// Forward pass; train mode folds batch statistics into the running stats.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode, rng: &mut R) -> Result<DiscriminatorOutput> {
        let mut collected = Vec::new();
        let features = self.pooled(tape, params, x, mode, &mut collected)?;
        apply_stats(&mut self.store, collected);
        self.heads_with_dropout(tape, params, features, mode, rng)
    }

    /// Forward pass that leaves running statistics untouched (the frozen
    /// discriminator seen by the generator update, or evaluation).
    pub fn forward_frozen<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode, rng: &mut R) -> Result<DiscriminatorOutput> {
        let features = self.pooled(tape, params, x, mode, &mut Vec::new())?;
        self.heads_with_dropout(tape, params, features, mode, rng)
    }

    /// Trunk plus global average pooling: `N x F` features.
    pub fn trunk_features(&self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.pooled(tape, params, x, mode, &mut Vec::new())
    }

    /// Real/fake probability head on pooled features.
    pub fn real_fake_head(&self, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
        let n = tape.shape(features)[0];
        let logit = tape.linear(features, params[self.rf_head.0], params[self.rf_head.1])?;
        let prob = tape.sigmoid(logit)?;
        tape.reshape(prob, &[n])
    }

    /// Classifier logits on pooled features.
    pub fn class_head(&self, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
        tape.linear(features, params[self.cls_head.0], params[self.cls_head.1])
    }

    fn heads_with_dropout<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, params: &[Var], features: Var, mode: Mode, rng: &mut R) -> Result<DiscriminatorOutput> {
        let features = tape.dropout(features, self.spec.dropout, mode == Mode::Train, rng)?;
        let prob = self.real_fake_head(tape, params, features)?;
        let logits = self.class_head(tape, params, features)?;
        Ok(DiscriminatorOutput { prob, logits, features })
    }

    fn pooled(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        collected: &mut Vec<(usize, crate::tape::BatchStats<T>)>,
    ) -> Result<Var> {
        check_bound(params, &self.store.params)?;
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.spec.image_channels {
            return Err(contract!("discriminator expects {} channels, got {c}", self.spec.image_channels));
        }
        if h != w {
            return Err(contract!("discriminator expects square inputs, got {h}x{w}"));
        }
        self.spec.check_resolution(h)?;
        let t = run_blocks(&self.trunk, &self.store, tape, params, x, mode, collected, "discriminator")?;
        tape.global_avg_pool(t)
    }
}
