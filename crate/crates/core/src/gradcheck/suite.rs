//! Finite-difference checks of every differentiable operation and of the
//! complete adversarial loss, in double precision.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compare, finite_diff_grad, GradComparison};
use crate::error::{config_err, Result};
use crate::masking::{compose_inpaint_on, Mask, MaskSampler, MaskScheme};
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::objectives::{assemble_losses, ClassTargets, HeadOutputs, ObjectiveConfig, Variant};
use crate::{Activation, ConvGeometry, Mode, Normalization, RunningStats, Tape, Tensor, Var};

/// Relative tolerance for single operations.
pub const LAYER_TOL: f64 = 1e-4;
/// Relative tolerance for the composed network loss.
pub const END_TO_END_TOL: f64 = 1e-3;
/// Default finite-difference step.
pub const DEFAULT_H: f64 = 1e-5;
/// Gradient entries at or below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub comparison: GradComparison,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.comparison.passes(self.tolerance, FLOOR)
    }
}

type CheckFn = fn(f64) -> Result<GradComparison>;

const CHECKS: &[(&str, CheckFn, f64)] = &[
    ("add", add, LAYER_TOL),
    ("sub", sub, LAYER_TOL),
    ("mul", mul, LAYER_TOL),
    ("affine", affine, LAYER_TOL),
    ("relu", |h| activation(h, Activation::Relu), LAYER_TOL),
    ("leaky_relu", |h| activation(h, Activation::LeakyRelu(0.2)), LAYER_TOL),
    ("sigmoid", |h| activation(h, Activation::Sigmoid), LAYER_TOL),
    ("tanh", |h| activation(h, Activation::Tanh), LAYER_TOL),
    ("conv2d", conv2d, LAYER_TOL),
    ("conv2d_strided", conv2d_strided, LAYER_TOL),
    ("conv_transpose2d", conv_transpose2d, LAYER_TOL),
    ("batch_norm_train", batch_norm_train, LAYER_TOL),
    ("batch_norm_infer", batch_norm_infer, LAYER_TOL),
    ("dropout", dropout, LAYER_TOL),
    ("max_pool", max_pool, LAYER_TOL),
    ("avg_pool", avg_pool, LAYER_TOL),
    ("upsample", upsample, LAYER_TOL),
    ("global_avg_pool", global_avg_pool, LAYER_TOL),
    ("linear", linear, LAYER_TOL),
    ("reshape", reshape, LAYER_TOL),
    ("concat", concat, LAYER_TOL),
    ("sum", sum, LAYER_TOL),
    ("mean", mean, LAYER_TOL),
    ("log_clamped", log_clamped, LAYER_TOL),
    ("compose", compose, LAYER_TOL),
    ("softmax_cross_entropy", softmax_xent, LAYER_TOL),
    ("sigmoid_bce", sigmoid_bce, LAYER_TOL),
    ("end_to_end", end_to_end, END_TO_END_TOL),
];

/// Names accepted by [`run`], in suite order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs one named check with step `h`.
pub fn run(name: &str, h: f64) -> Result<CheckResult> {
    if !(h > 0.0 && h < 1e-1) {
        return Err(config_err!("finite-difference step {h} outside (0, 0.1)"));
    }
    let &(name, f, tolerance) = CHECKS
        .iter()
        .find(|c| c.0 == name)
        .ok_or_else(|| config_err!("unknown gradient check '{name}'"))?;
    Ok(CheckResult { name, comparison: f(h)?, tolerance })
}

/// Runs every check.
pub fn run_all(h: f64) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|c| run(c.0, h)).collect()
}

/// Values uniform in `[-1, -0.1] U [0.1, 1]`, away from activation kinks.
fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.1..0.9))
}

/// Contracts a non-scalar output with fixed random weights so every output
/// coordinate contributes its own gradient pattern.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(sample(tape.shape(out), 0xC0FFEE));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Compares the tape gradient of `scalarize(f(inputs))` with central differences.
fn check(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradComparison> {
    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let mut result = GradComparison::default();
    let mut failure = None;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf gradient").clone();
        let numeric = finite_diff_grad(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                value(&xs).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &inputs[i],
            h,
        );
        if let Some(e) = failure.take() {
            return Err(e);
        }
        result = result.merge(compare(&analytic, &numeric, FLOOR));
    }
    Ok(result)
}

fn add(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3], 1), sample(&[2, 3], 2)], h, |t, v| t.add(v[0], v[1]))
}

fn sub(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3], 1), sample(&[2, 3], 2)], h, |t, v| t.sub(v[0], v[1]))
}

fn mul(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3], 1), sample(&[2, 3], 2)], h, |t, v| t.mul(v[0], v[1]))
}

fn affine(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3], 3)], h, |t, v| t.affine(v[0], 1.7, -0.3))
}

fn activation(h: f64, kind: Activation) -> Result<GradComparison> {
    check(&[sample(&[2, 5], 4)], h, move |t, v| t.activation(v[0], kind))
}

fn conv2d(h: f64) -> Result<GradComparison> {
    let inputs = [sample(&[2, 3, 5, 5], 5), sample(&[4, 3, 3, 3], 6), sample(&[4], 7)];
    check(&inputs, h, |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(1, 1)))
}

fn conv2d_strided(h: f64) -> Result<GradComparison> {
    let inputs = [sample(&[2, 2, 6, 6], 8), sample(&[3, 2, 4, 4], 9)];
    check(&inputs, h, |t, v| t.conv2d(v[0], v[1], None, ConvGeometry::new(2, 1)))
}

fn conv_transpose2d(h: f64) -> Result<GradComparison> {
    let inputs = [sample(&[2, 3, 3, 3], 10), sample(&[3, 2, 4, 4], 11), sample(&[2], 12)];
    check(&inputs, h, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::new(2, 1)))
}

fn batch_norm_train(h: f64) -> Result<GradComparison> {
    let inputs = [sample(&[3, 2, 3, 3], 13), positive(&[2], 14), sample(&[2], 15)];
    check(&inputs, h, |t, v| Ok(t.batch_norm2d(v[0], v[1], v[2], Normalization::Batch, 1e-5)?.0))
}

fn batch_norm_infer(h: f64) -> Result<GradComparison> {
    let stats = RunningStats { mean: vec![0.2, -0.1], var: vec![0.7, 1.3] };
    let inputs = [sample(&[2, 2, 3, 3], 16), positive(&[2], 17), sample(&[2], 18)];
    check(&inputs, h, |t, v| Ok(t.batch_norm2d(v[0], v[1], v[2], Normalization::Running(&stats), 1e-5)?.0))
}

fn dropout(h: f64) -> Result<GradComparison> {
    check(&[sample(&[4, 6], 19)], h, |t, v| t.dropout(v[0], 0.5, true, &mut ChaCha8Rng::seed_from_u64(20)))
}

fn max_pool(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 2, 4, 4], 21)], h, |t, v| t.max_pool2d(v[0], 2))
}

fn avg_pool(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 2, 4, 4], 22)], h, |t, v| t.avg_pool2d(v[0], 2))
}

fn upsample(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 2, 2, 2], 23)], h, |t, v| t.upsample_nearest(v[0], 3))
}

fn global_avg_pool(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3, 3, 3], 24)], h, |t, v| t.global_avg_pool(v[0]))
}

fn linear(h: f64) -> Result<GradComparison> {
    let inputs = [sample(&[3, 4], 25), sample(&[4, 2], 26), sample(&[2], 27)];
    check(&inputs, h, |t, v| t.linear(v[0], v[1], v[2]))
}

fn reshape(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 3, 2], 28)], h, |t, v| t.reshape(v[0], &[3, 4]))
}

fn concat(h: f64) -> Result<GradComparison> {
    check(&[sample(&[2, 1, 2, 2], 29), sample(&[2, 2, 2, 2], 30)], h, |t, v| t.concat_channels(v))
}

fn sum(h: f64) -> Result<GradComparison> {
    check(&[sample(&[3, 4], 31)], h, |t, v| t.sum(v[0]))
}

fn mean(h: f64) -> Result<GradComparison> {
    check(&[sample(&[3, 4], 32)], h, |t, v| t.mean(v[0]))
}

fn log_clamped(h: f64) -> Result<GradComparison> {
    check(&[positive(&[2, 4], 33)], h, |t, v| t.log_clamped(v[0], 1e-7, 1.0 - 1e-7))
}

fn compose(h: f64) -> Result<GradComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let keep: Vec<bool> = (0..2 * 16).map(|_| rng.random_bool(0.5)).collect();
    let inputs = [sample(&[2, 3, 4, 4], 35), sample(&[2, 3, 4, 4], 36)];
    check(&inputs, h, move |t, v| t.compose(v[0], v[1], &keep))
}

fn softmax_xent(h: f64) -> Result<GradComparison> {
    let labels = [Some(0), None, Some(2), Some(1)];
    check(&[sample(&[4, 3], 37)], h, move |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn sigmoid_bce(h: f64) -> Result<GradComparison> {
    let targets = vec![Some(vec![true, false]), None, Some(vec![true, true])];
    check(&[sample(&[3, 2], 38)], h, move |t, v| t.sigmoid_bce(v[0], &targets))
}

/// The two-layer 8x8 in-painting network: generator, composition, both
/// discriminator heads, and every loss term of the two-fake objective.
fn end_to_end(h: f64) -> Result<GradComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let gen = Generator::<f64>::build(GeneratorSpec::context(3, 8, &[4]), &mut rng)?;
    let disc = Discriminator::<f64>::build(DiscriminatorSpec::vgg(3, &[&[4], &[4]], 3), &mut rng)?;
    let n = 4;
    let images = Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let sampler = MaskSampler::new(MaskScheme::SingleSquare, (8, 8), (4, 4))?;
    let masks: Vec<Mask> = (0..n).map(|_| sampler.sample(&mut rng)).collect::<Result<_>>()?;
    let masked = crate::masking::apply_mask(&images, &masks)?;
    let targets = ClassTargets::Single(vec![Some(0), None, Some(2), Some(1)]);
    let cfg = ObjectiveConfig { variant: Variant::CcGan2, ..ObjectiveConfig::default() };

    // Weights at init are too small to exercise the loss curvature; scale them up.
    let scale = |p: &Tensor<f64>| p.map(|v| v * 20.0);
    let mut inputs: Vec<Tensor<f64>> = gen.params().tensors.iter().map(scale).collect();
    let g_count = inputs.len();
    inputs.extend(disc.params().tensors.iter().map(|p| if p.shape().len() > 1 { scale(p) } else { p.clone() }));

    check(&inputs, h, |t, v| {
        let (gp, dp) = v.split_at(g_count);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(40);
        let m = t.constant(masked.clone());
        let x_g = gen.forward_frozen(t, gp, Some(m), None, None, Mode::Train)?;
        let real = t.constant(images.clone());
        let x_i = compose_inpaint_on(t, real, x_g, &masks)?;
        let d_real = disc.forward_frozen(t, dp, real, Mode::Train, &mut drop_rng)?;
        let d_i = disc.forward_frozen(t, dp, x_i, Mode::Train, &mut drop_rng)?;
        let d_g = disc.forward_frozen(t, dp, x_g, Mode::Train, &mut drop_rng)?;
        let terms = assemble_losses(
            t,
            &cfg,
            &HeadOutputs {
                d_real: Some(d_real.prob),
                d_fake_inpaint: Some(d_i.prob),
                d_fake_full: Some(d_g.prob),
                logits: Some(d_real.logits),
                targets: Some(&targets),
                g_fake_inpaint: Some(d_i.prob),
                g_fake_full: Some(d_g.prob),
            },
        )?;
        let (d, g) = (terms.total_d.expect("discriminator loss"), terms.total_g.expect("generator loss"));
        t.add(d, g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_resolvable() {
        let names = check_names();
        for (i, n) in names.iter().enumerate() {
            assert!(!names[..i].contains(n));
        }
        assert!(run("no_such_op", DEFAULT_H).is_err());
        assert!(run("add", 0.0).is_err());
    }
}
