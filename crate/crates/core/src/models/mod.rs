//! Generator and two-headed discriminator networks.
//!
//! Both networks are described by plain spec values and compiled into a list
//! of blocks (convolution, optional batch norm, activation). Parameters live
//! in a [`ParamSet`] that is bound onto a [`Tape`] for each forward pass.

mod discriminator;
mod generator;

pub use discriminator::{DiscriminatorOutput, Discriminator, DiscriminatorSpec, TrunkLayer};
pub use generator::{Generator, GeneratorInput, GeneratorSpec, LowresConditioning, LowresInjection};

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::tape::BatchStats;
use crate::{Activation, ConvGeometry, Error, Mode, Normalization, RunningStats, Scalar, Tape, Tensor, Var};

/// Batch norm running-stat momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Standard deviation of the zero-mean Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HiddenActivation {
    Relu,
    LeakyRelu(f64),
}

impl HiddenActivation {
    fn op(self) -> Activation {
        match self {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::LeakyRelu(s) => Activation::LeakyRelu(s),
        }
    }
}

/// One convolution layer: output channels, square kernel, stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { channels, kernel, stride, pad }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.pad)
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BlockKind {
    Conv(ConvGeometry),
    ConvT(ConvGeometry),
    MaxPool(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// A compiled layer: op, parameter indices, optional batch norm, activation.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    kind: BlockKind,
    weight: Option<usize>,
    bias: Option<usize>,
    bn: Option<BnSlot>,
    act: Option<Activation>,
}

/// Parameters plus running statistics, with the builder helpers shared by both networks.
#[derive(Clone, Debug, PartialEq)]
struct Store<T> {
    params: ParamSet<T>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Store<T> {
    fn new() -> Self {
        Self { params: ParamSet::default(), stats: Vec::new() }
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlot {
        let gamma = self.params.push(alloc::format!("{prefix}.bn.gamma"), Tensor::ones(&[channels]));
        let beta = self.params.push(alloc::format!("{prefix}.bn.beta"), Tensor::zeros(&[channels]));
        self.stats.push(RunningStats::new(channels));
        BnSlot { gamma, beta, stats: self.stats.len() - 1 }
    }
}

/// Applies `blocks` to `x`. Batch statistics of train-mode normalization are
/// appended to `collected` keyed by running-stat index.
fn run_blocks<T: Scalar>(
    blocks: &[Block],
    store: &Store<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    mut x: Var,
    mode: Mode,
    collected: &mut Vec<(usize, BatchStats<T>)>,
    label: &str,
) -> Result<Var> {
    for (i, b) in blocks.iter().enumerate() {
        let p = |idx: Option<usize>| idx.map(|k| params[k]);
        x = match b.kind {
            BlockKind::Conv(g) => tape.conv2d(x, params[b.weight.expect("conv weight")], p(b.bias), g)?,
            BlockKind::ConvT(g) => tape.conv_transpose2d(x, params[b.weight.expect("conv weight")], p(b.bias), g)?,
            BlockKind::MaxPool(f) => tape.max_pool2d(x, f)?,
        };
        if let Some(bn) = b.bn {
            x = batch_norm(store, tape, params, x, bn, mode, collected)?;
        }
        if let Some(a) = b.act {
            x = tape.activation(x, a)?;
        }
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite(alloc::format!("{label} layer {i}")));
        }
    }
    Ok(x)
}

fn batch_norm<T: Scalar>(
    store: &Store<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    bn: BnSlot,
    mode: Mode,
    collected: &mut Vec<(usize, BatchStats<T>)>,
) -> Result<Var> {
    let norm = match mode {
        Mode::Train => Normalization::Batch,
        Mode::Infer => Normalization::Running(&store.stats[bn.stats]),
    };
    let (y, stats) = tape.batch_norm2d(x, params[bn.gamma], params[bn.beta], norm, T::of(BN_EPS))?;
    if let Some(s) = stats {
        collected.push((bn.stats, s));
    }
    Ok(y)
}

fn apply_stats<T: Scalar>(store: &mut Store<T>, collected: Vec<(usize, BatchStats<T>)>) {
    for (i, s) in collected {
        store.stats[i].update(&s, T::of(BN_MOMENTUM));
    }
}

fn check_bound<T>(params: &[Var], set: &ParamSet<T>) -> Result<()> {
    if params.len() != set.tensors.len() {
        return Err(contract!("{} bound vars for {} parameters", params.len(), set.tensors.len()));
    }
    Ok(())
}
