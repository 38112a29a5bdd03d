//! One optimization step of each training variant.
//!
//! A GAN step is one discriminator update followed by one generator update.
//! The generator runs once; its output is detached for the discriminator
//! update and reused on the generator's own tape afterwards, where the
//! (already updated) discriminator is bound as constants.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, contract, Error, Result};
use crate::masking::{apply_mask, compose_inpaint, compose_inpaint_on, Mask};
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::objectives::{assemble_losses, classification_loss, ClassTargets, HeadOutputs, LossReport, ObjectiveConfig, Variant};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::{Mode, Scalar, Tape, Tensor, Var};

/// Images with their labels and conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `N x C x H x W` in `[-1, 1]`.
    pub images: Tensor<T>,
    pub targets: ClassTargets,
    /// One mask per image, for context variants.
    pub masks: Option<Vec<Mask>>,
    /// Downsampled copies of `images`.
    pub lowres: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _, h, w) = self.images.dims4()?;
        let labels = match &self.targets {
            ClassTargets::Single(l) => l.len(),
            ClassTargets::Multi(l) => l.len(),
        };
        if labels != n {
            return Err(contract!("{labels} label slots for {n} images"));
        }
        if let Some(m) = &self.masks {
            if m.len() != n {
                return Err(contract!("{} masks for {n} images", m.len()));
            }
            if m.iter().any(|m| m.height() != h || m.width() != w) {
                return Err(contract!("mask size differs from the {h}x{w} images"));
            }
        }
        if let Some(l) = &self.lowres {
            let (ln, lc, lh, lw) = l.dims4()?;
            if ln != n || lc != self.images.shape()[1] || lh == 0 || h % lh != 0 || lw == 0 || w % lw != 0 || h / lh != w / lw {
                return Err(contract!("low-res shape {:?} does not divide {:?}", l.shape(), self.images.shape()));
            }
        }
        Ok(())
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState<T> {
    pub generator: Option<Generator<T>>,
    pub discriminator: Discriminator<T>,
    pub g_opt: Option<AdamState<T>>,
    pub d_opt: AdamState<T>,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> GanState<T> {
    /// Initializes both networks from `seed`; the same rng then drives training.
    pub fn new(
        generator: Option<GeneratorSpec>,
        discriminator: DiscriminatorSpec,
        g_adam: AdamConfig,
        d_adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let discriminator = Discriminator::build(discriminator, &mut rng)?;
        let generator = generator.map(|s| Generator::build(s, &mut rng)).transpose()?;
        let g_opt = generator.as_ref().map(|g| AdamState::new(g_adam, &g.params().tensors));
        let d_opt = AdamState::new(d_adam, &discriminator.params().tensors);
        Ok(Self { generator, discriminator, g_opt, d_opt, rng, step: 0 })
    }
}

/// Runs one step of `cfg.variant`; on any error the state is restored and the
/// error names the step.
pub fn train_step<T: Scalar>(state: &mut GanState<T>, batch: &Batch<T>, cfg: &ObjectiveConfig) -> Result<LossReport> {
    let snapshot = state.clone();
    let step = state.step;
    let outcome = match cfg.variant {
        Variant::Supervised => supervised_step(state, batch, cfg),
        _ => adversarial_step(state, batch, cfg),
    };
    match outcome {
        Ok(report) if report.is_finite() => {
            state.step += 1;
            Ok(report)
        }
        Ok(report) => {
            *state = snapshot;
            Err(Error::NonFinite(alloc::format!("step {step}: non-finite loss {report:?}")))
        }
        Err(e) => {
            *state = snapshot;
            Err(match e {
                Error::NonFinite(m) => Error::NonFinite(alloc::format!("step {step}: {m}")),
                other => other,
            })
        }
    }
}

/// One classification-only update of the discriminator, as in the supervised
/// baseline and fine-tuning. Returns the loss and the training accuracy of the
/// batch's labeled rows under the pre-update weights.
pub fn classifier_step<T: Scalar, R: Rng + ?Sized>(
    disc: &mut Discriminator<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    targets: &ClassTargets,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if targets.labeled_count() == 0 {
        return Err(config_err!("classifier update needs labeled rows"));
    }
    let mut tape = Tape::new();
    let params = disc.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let out = disc.forward(&mut tape, &params, x, Mode::Train, rng)?;
    let acc = batch_accuracy(tape.value(out.logits), targets);
    let loss = classification_loss(&mut tape, out.logits, targets)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(alloc::format!("classification loss {value}")));
    }
    let grads = collect(tape.backward(loss)?, &params)?;
    adam_step(&mut disc.params_mut().tensors, &grads, opt)?;
    Ok((value, acc))
}

/// Fraction of labeled rows whose argmax logit (single label) or every
/// thresholded logit (multi-label) is right.
fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &ClassTargets) -> f64 {
    let c = logits.shape()[1];
    let rows = logits.data().chunks(c);
    let (mut hit, mut total) = (0usize, 0usize);
    match targets {
        ClassTargets::Single(l) => {
            for (row, t) in rows.zip(l) {
                if let Some(t) = t {
                    total += 1;
                    hit += usize::from(crate::metrics::argmax(row) == *t);
                }
            }
        }
        ClassTargets::Multi(l) => {
            for (row, t) in rows.zip(l) {
                if let Some(t) = t {
                    total += 1;
                    hit += usize::from(row.iter().zip(t).all(|(&z, &y)| (z > T::zero()) == y));
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn supervised_step<T: Scalar>(state: &mut GanState<T>, batch: &Batch<T>, cfg: &ObjectiveConfig) -> Result<LossReport> {
    batch.validate()?;
    if batch.masks.is_some() || batch.lowres.is_some() {
        return Err(config_err!("supervised variant takes no masks or low-res inputs"));
    }
    let (loss, _) = classifier_step(&mut state.discriminator, &mut state.d_opt, &batch.images, &batch.targets, &mut state.rng)?;
    let report = LossReport { classification: loss, total_d: loss, ..LossReport::default() };
    debug_assert!(report.is_consistent(cfg, 1e-9));
    Ok(report)
}

/// Generator inputs recorded on a tape.
struct GenInputs {
    masked: Option<Var>,
    lowres: Option<Var>,
    noise: Option<Var>,
}

fn generator_inputs<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    gen: &Generator<T>,
    batch: &Batch<T>,
    variant: Variant,
    rng: &mut R,
) -> Result<GenInputs> {
    let n = batch.len();
    let masked = if variant.uses_context() {
        let masks = batch.masks.as_ref().ok_or_else(|| config_err!("{} needs masks", variant.name()))?;
        Some(tape.constant(apply_mask(&batch.images, masks)?))
    } else {
        if batch.masks.is_some() {
            return Err(config_err!("{} takes no masks", variant.name()));
        }
        None
    };
    let lowres = batch.lowres.as_ref().map(|l| tape.constant(l.clone()));
    let noise = if gen.spec().uses_noise() {
        let d = gen.spec().noise_dim;
        let z = Tensor::from_fn(&[n, d], |_| T::of(rng.random_range(-1.0..1.0)));
        Some(tape.constant(z))
    } else {
        None
    };
    Ok(GenInputs { masked, lowres, noise })
}

fn collect<T: Scalar>(mut grads: crate::Gradients<T>, params: &[Var]) -> Result<Vec<Tensor<T>>> {
    params.iter().map(|&p| grads.take(p).ok_or_else(|| contract!("missing gradient for a parameter"))).collect()
}

fn adversarial_step<T: Scalar>(state: &mut GanState<T>, batch: &Batch<T>, cfg: &ObjectiveConfig) -> Result<LossReport> {
    cfg.validate()?;
    batch.validate()?;
    let variant = cfg.variant;
    let GanState { generator, discriminator, g_opt, d_opt, rng, .. } = state;
    let gen = generator.as_mut().ok_or_else(|| config_err!("{} needs a generator", variant.name()))?;
    let g_opt = g_opt.as_mut().ok_or_else(|| config_err!("{} needs generator optimizer state", variant.name()))?;

    // Generator forward, kept on its own tape for the later update.
    let mut tape_g = Tape::new();
    let g_params = gen.bind(&mut tape_g, true);
    let inputs = generator_inputs(&mut tape_g, gen, batch, variant, rng)?;
    let x_g = gen.forward(&mut tape_g, &g_params, inputs.masked, inputs.lowres, inputs.noise, Mode::Train)?;
    let x_g_value = tape_g.value(x_g).clone();
    let inpainted = match &batch.masks {
        Some(masks) if variant.uses_context() => compose_inpaint(&batch.images, &x_g_value, masks)?,
        _ => x_g_value.clone(),
    };

    // Discriminator update on real and detached fake batches.
    let mut tape_d = Tape::new();
    let d_params = discriminator.bind(&mut tape_d, true);
    let real = tape_d.constant(batch.images.clone());
    let out_real = discriminator.forward(&mut tape_d, &d_params, real, Mode::Train, rng)?;
    let fake_i = tape_d.constant(inpainted);
    let out_fake_i = discriminator.forward_frozen(&mut tape_d, &d_params, fake_i, Mode::Train, rng)?;
    let out_fake_g = if variant == Variant::CcGan2 {
        let fake_g = tape_d.constant(x_g_value);
        Some(discriminator.forward_frozen(&mut tape_d, &d_params, fake_g, Mode::Train, rng)?.prob)
    } else {
        None
    };
    let labeled = batch.targets.labeled_count() > 0;
    let d_terms = assemble_losses(
        &mut tape_d,
        cfg,
        &HeadOutputs {
            d_real: Some(out_real.prob),
            d_fake_inpaint: Some(out_fake_i.prob),
            d_fake_full: out_fake_g,
            logits: labeled.then_some(out_real.logits),
            targets: labeled.then_some(&batch.targets),
            ..HeadOutputs::default()
        },
    )?;
    let d_report = d_terms.report(&tape_d);
    if !d_report.is_finite() {
        return Err(Error::NonFinite(alloc::format!("discriminator loss {d_report:?}")));
    }
    let total_d = d_terms.total_d.ok_or_else(|| contract!("no discriminator loss"))?;
    let d_grads = collect(tape_d.backward(total_d)?, &d_params)?;
    adam_step(&mut discriminator.params_mut().tensors, &d_grads, d_opt)?;

    // Generator update against the updated, frozen discriminator.
    let d_frozen = discriminator.bind(&mut tape_g, false);
    let fake_i = match &batch.masks {
        Some(masks) if variant.uses_context() => {
            let real = tape_g.constant(batch.images.clone());
            compose_inpaint_on(&mut tape_g, real, x_g, masks)?
        }
        _ => x_g,
    };
    let g_fake_i = discriminator.forward_frozen(&mut tape_g, &d_frozen, fake_i, Mode::Train, rng)?.prob;
    let g_fake_g = if variant == Variant::CcGan2 {
        Some(discriminator.forward_frozen(&mut tape_g, &d_frozen, x_g, Mode::Train, rng)?.prob)
    } else {
        None
    };
    let g_terms = assemble_losses(
        &mut tape_g,
        cfg,
        &HeadOutputs { g_fake_inpaint: Some(g_fake_i), g_fake_full: g_fake_g, ..HeadOutputs::default() },
    )?;
    let g_report = g_terms.report(&tape_g);
    if !g_report.total_g.is_finite() {
        return Err(Error::NonFinite(alloc::format!("generator loss {}", g_report.total_g)));
    }
    let total_g = g_terms.total_g.ok_or_else(|| contract!("no generator loss"))?;
    let g_grads = collect(tape_g.backward(total_g)?, &g_params)?;
    adam_step(&mut gen.params_mut().tensors, &g_grads, g_opt)?;

    Ok(LossReport { g_adv: g_report.g_adv, total_g: g_report.total_g, ..d_report })
}

/// Gradient of the generator loss with respect to the generator parameters,
/// without updating anything (running statistics included).
pub fn generator_gradients<T: Scalar, R: Rng + ?Sized>(
    state: &GanState<T>,
    batch: &Batch<T>,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    batch.validate()?;
    let gen = state.generator.as_ref().ok_or_else(|| config_err!("no generator"))?;
    let disc = &state.discriminator;
    let mut tape = Tape::new();
    let g_params = gen.bind(&mut tape, true);
    let inputs = generator_inputs(&mut tape, gen, batch, cfg.variant, rng)?;
    let x_g = gen.forward_frozen(&mut tape, &g_params, inputs.masked, inputs.lowres, inputs.noise, Mode::Train)?;
    let d_params = disc.bind(&mut tape, false);
    let fake_i = match &batch.masks {
        Some(masks) if cfg.variant.uses_context() => {
            let real = tape.constant(batch.images.clone());
            compose_inpaint_on(&mut tape, real, x_g, masks)?
        }
        _ => x_g,
    };
    let p_i = disc.forward_frozen(&mut tape, &d_params, fake_i, Mode::Train, rng)?.prob;
    let p_g = if cfg.variant == Variant::CcGan2 {
        Some(disc.forward_frozen(&mut tape, &d_params, x_g, Mode::Train, rng)?.prob)
    } else {
        None
    };
    let terms = assemble_losses(&mut tape, cfg, &HeadOutputs { g_fake_inpaint: Some(p_i), g_fake_full: p_g, ..HeadOutputs::default() })?;
    let total = terms.total_g.ok_or_else(|| contract!("no generator loss"))?;
    collect(tape.backward(total)?, &g_params)
}

/// In-painting of a batch in infer mode: returns `(raw generator output, composite)`.
pub fn inpaint<T: Scalar, R: Rng + ?Sized>(gen: &Generator<T>, batch: &Batch<T>, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>)> {
    batch.validate()?;
    let masks = batch.masks.as_ref().ok_or_else(|| config_err!("in-painting needs masks"))?;
    let mut tape = Tape::new();
    let params = gen.bind(&mut tape, false);
    let inputs = generator_inputs(&mut tape, gen, batch, Variant::CcGan, rng)?;
    let x_g = gen.forward_frozen(&mut tape, &params, inputs.masked, inputs.lowres, inputs.noise, Mode::Infer)?;
    let raw = tape.value(x_g).clone();
    let composed = compose_inpaint(&batch.images, &raw, masks)?;
    Ok((raw, composed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{MaskSampler, MaskScheme};
    use crate::models::{ConvLayer, GeneratorSpec};
    use alloc::vec;

    fn tiny(variant: Variant) -> (GanState<f32>, Batch<f32>, ObjectiveConfig) {
        let g = variant.is_adversarial().then(|| match variant {
            Variant::SslGan => GeneratorSpec::noise(3, 8, 4, &[8, 4]),
            _ => GeneratorSpec::context(3, 8, &[4, 8]),
        });
        let mut d = DiscriminatorSpec::vgg(3, &[&[4], &[8]], 3);
        d.trunk[0] = crate::models::TrunkLayer::Conv(ConvLayer::new(4, 3, 1, 1));
        let state = GanState::new(g, d, AdamConfig::default(), AdamConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(-1.0f32..1.0));
        let masks = variant.uses_context().then(|| {
            let s = MaskSampler::new(MaskScheme::SingleSquare, (8, 8), (4, 4)).unwrap();
            (0..4).map(|_| s.sample(&mut rng).unwrap()).collect()
        });
        let targets = ClassTargets::Single(vec![Some(0), None, Some(2), None]);
        let cfg = ObjectiveConfig { variant, ..ObjectiveConfig::default() };
        (state, Batch { images, targets, masks, lowres: None }, cfg)
    }

    #[test]
    fn every_variant_steps_and_reports_consistently() {
        for v in [Variant::Supervised, Variant::SslGan, Variant::CcGan, Variant::CcGan2] {
            let (mut s, mut b, cfg) = tiny(v);
            if v == Variant::Supervised {
                b.targets = ClassTargets::Single(vec![Some(0), Some(1), Some(2), Some(0)]);
            }
            let before = s.clone();
            let r = train_step(&mut s, &b, &cfg).unwrap();
            assert!(r.is_consistent(&cfg, 1e-5), "{v:?}: {r:?}");
            assert_eq!(s.step, 1);
            assert_ne!(s.discriminator.params(), before.discriminator.params());
            if v.is_adversarial() {
                assert!(r.d_fake_inpaint > 0.0 && r.g_adv > 0.0);
                assert_ne!(s.generator.as_ref().unwrap().params(), before.generator.as_ref().unwrap().params());
            }
            assert_eq!(r.d_fake_full > 0.0, v == Variant::CcGan2);
        }
    }

    #[test]
    fn failed_step_rolls_back() {
        let (mut s, mut b, cfg) = tiny(Variant::CcGan);
        b.masks = None;
        let before = s.clone();
        assert!(train_step(&mut s, &b, &cfg).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn full_context_mask_gives_zero_generator_gradient() {
        let (s, mut b, cfg) = tiny(Variant::CcGan);
        b.masks = Some(vec![Mask::all_ones(8, 8); 4]);
        let grads = generator_gradients(&s, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }
}
