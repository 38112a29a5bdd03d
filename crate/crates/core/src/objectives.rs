//! Adversarial and classification losses, written as minimization objectives.
//!
//! The discriminator maximizes `E[log D(x)] + E[log(1 - D(fake))]`, which
//! here is minimizing `-mean(log D(real)) - mean(log(1 - D(fake)))`.
//! Expectations are batch means. Probabilities are clamped to `[eps, 1 - eps]`
//! before every logarithm.

use crate::error::{config_err, contract, Result};
use crate::{Scalar, Tape, Var};
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Discriminator classification head only.
    Supervised,
    /// Unconditional generator; fakes are full samples from noise.
    SslGan,
    /// Context-conditional: fakes are in-painted composites.
    CcGan,
    /// Context-conditional plus the raw generator output as a second fake.
    CcGan2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Supervised => "supervised",
            Variant::SslGan => "ssl_gan",
            Variant::CcGan => "cc_gan",
            Variant::CcGan2 => "cc_gan2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Variant::Supervised),
            "ssl_gan" => Ok(Variant::SslGan),
            "cc_gan" => Ok(Variant::CcGan),
            "cc_gan2" => Ok(Variant::CcGan2),
            other => Err(config_err!("unknown objective variant '{other}'")),
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != Variant::Supervised
    }

    pub fn uses_context(self) -> bool {
        matches!(self, Variant::CcGan | Variant::CcGan2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorLoss {
    /// `mean(log(1 - D(fake)))`, the literal min-max objective.
    Saturating,
    /// `-mean(log D(fake))`.
    NonSaturating,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Weight of the classification term in the discriminator loss.
    pub lambda_c: f64,
    pub generator_loss: GeneratorLoss,
    pub clamp_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { variant: Variant::CcGan, lambda_c: 1.0, generator_loss: GeneratorLoss::NonSaturating, clamp_eps: 1e-7 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(config_err!("lambda_c must be finite and >= 0, got {}", self.lambda_c));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 1e-3) {
            return Err(config_err!("clamp epsilon must lie in (0, 1e-3], got {}", self.clamp_eps));
        }
        Ok(())
    }
}

fn nonempty<T: Scalar>(tape: &Tape<T>, p: Var) -> Result<()> {
    if tape.value(p).is_empty() {
        return Err(contract!("empty batch of probabilities"));
    }
    Ok(())
}

fn mean_log<T: Scalar>(tape: &mut Tape<T>, p: Var, eps: f64) -> Result<Var> {
    let l = tape.log_clamped(p, T::of(eps), T::of(1.0 - eps))?;
    tape.mean(l)
}

fn mean_log_one_minus<T: Scalar>(tape: &mut Tape<T>, p: Var, eps: f64) -> Result<Var> {
    let q = tape.affine(p, -T::one(), T::one())?;
    mean_log(tape, q, eps)
}

/// `-mean(log D(x))` over real samples.
pub fn d_loss_real<T: Scalar>(tape: &mut Tape<T>, d_prob: Var, eps: f64) -> Result<Var> {
    nonempty(tape, d_prob)?;
    let m = mean_log(tape, d_prob, eps)?;
    tape.scalar_mul(m, -T::one())
}

/// `-mean(log(1 - D(x)))` over fake samples.
pub fn d_loss_fake<T: Scalar>(tape: &mut Tape<T>, d_prob: Var, eps: f64) -> Result<Var> {
    nonempty(tape, d_prob)?;
    let m = mean_log_one_minus(tape, d_prob, eps)?;
    tape.scalar_mul(m, -T::one())
}

/// Generator loss on the discriminator's output for fakes.
pub fn g_loss<T: Scalar>(tape: &mut Tape<T>, d_prob: Var, form: GeneratorLoss, eps: f64) -> Result<Var> {
    nonempty(tape, d_prob)?;
    match form {
        GeneratorLoss::Saturating => mean_log_one_minus(tape, d_prob, eps),
        GeneratorLoss::NonSaturating => {
            let m = mean_log(tape, d_prob, eps)?;
            tape.scalar_mul(m, -T::one())
        }
    }
}

/// Per-row targets for the classifier head. `None` rows are unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassTargets {
    Single(Vec<Option<usize>>),
    Multi(Vec<Option<Vec<bool>>>),
}

impl ClassTargets {
    pub fn labeled_count(&self) -> usize {
        match self {
            ClassTargets::Single(l) => l.iter().flatten().count(),
            ClassTargets::Multi(l) => l.iter().flatten().count(),
        }
    }
}

/// Softmax cross-entropy (single label) or per-class sigmoid cross-entropy (multi-label),
/// averaged over labeled rows.
pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &ClassTargets) -> Result<Var> {
    match targets {
        ClassTargets::Single(l) => tape.softmax_cross_entropy(logits, l),
        ClassTargets::Multi(t) => tape.sigmoid_bce(logits, t),
    }
}

/// Head outputs entering the losses. Discriminator-side and generator-side
/// terms are usually recorded on different tapes; absent entries are skipped.
#[derive(Clone, Debug, Default)]
pub struct HeadOutputs<'a> {
    pub d_real: Option<Var>,
    /// `D(x_I)` for CC-GAN variants, `D(G(z))` for SSL-GAN.
    pub d_fake_inpaint: Option<Var>,
    /// `D(x_G)`, CC-GAN² only.
    pub d_fake_full: Option<Var>,
    pub logits: Option<Var>,
    pub targets: Option<&'a ClassTargets>,
    /// Discriminator outputs on fakes as seen by the generator update.
    pub g_fake_inpaint: Option<Var>,
    pub g_fake_full: Option<Var>,
}

/// Loss terms recorded on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub d_real: Option<Var>,
    pub d_fake_inpaint: Option<Var>,
    pub d_fake_full: Option<Var>,
    pub classification: Option<Var>,
    pub total_d: Option<Var>,
    pub g_adv: Option<Var>,
    pub total_g: Option<Var>,
}

/// Scalar values of one training step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub d_real: f64,
    pub d_fake_inpaint: f64,
    pub d_fake_full: f64,
    pub g_adv: f64,
    pub classification: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    /// Whether the totals equal the sums of their components.
    ///
    /// The supervised variant weights its classification term by 1.
    pub fn is_consistent(&self, cfg: &ObjectiveConfig, tol: f64) -> bool {
        let w = if cfg.variant == Variant::Supervised { 1.0 } else { cfg.lambda_c };
        let d = self.d_real + self.d_fake_inpaint + self.d_fake_full + w * self.classification;
        (d - self.total_d).abs() <= tol && (self.g_adv - self.total_g).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        [self.d_real, self.d_fake_inpaint, self.d_fake_full, self.g_adv, self.classification, self.total_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn sum_terms<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Option<Var>> {
    let mut it = terms.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// Builds every loss term required by the variant from whatever head outputs are present.
///
/// `total_d = d_real + d_fake(x_I) [+ d_fake(x_G)] + lambda_c * classification`,
/// `total_g = g_loss(x_I) [+ g_loss(x_G)]`. The supervised variant keeps only
/// the classification term.
pub fn assemble_losses<T: Scalar>(tape: &mut Tape<T>, cfg: &ObjectiveConfig, out: &HeadOutputs<'_>) -> Result<LossTerms> {
    cfg.validate()?;
    let v = cfg.variant;
    let eps = cfg.clamp_eps;
    let mut terms = LossTerms::default();
    if !v.is_adversarial() && (out.d_fake_inpaint.is_some() || out.d_fake_full.is_some() || out.g_fake_inpaint.is_some()) {
        return Err(config_err!("supervised variant takes no adversarial outputs"));
    }
    if v != Variant::CcGan2 && (out.d_fake_full.is_some() || out.g_fake_full.is_some()) {
        return Err(config_err!("full-image fakes are only scored by cc_gan2"));
    }

    let mut d_parts = Vec::new();
    if v.is_adversarial() {
        if let Some(p) = out.d_real {
            let t = d_loss_real(tape, p, eps)?;
            terms.d_real = Some(t);
            d_parts.push(t);
        }
        if let Some(p) = out.d_fake_inpaint {
            let t = d_loss_fake(tape, p, eps)?;
            terms.d_fake_inpaint = Some(t);
            d_parts.push(t);
        }
        if let Some(p) = out.d_fake_full {
            let t = d_loss_fake(tape, p, eps)?;
            terms.d_fake_full = Some(t);
            d_parts.push(t);
        }
        let side = [out.d_real.is_some(), out.d_fake_inpaint.is_some()];
        if side.iter().any(|&b| b) && !side.iter().all(|&b| b) {
            return Err(config_err!("{} discriminator loss needs both real and fake outputs", v.name()));
        }
        if v == Variant::CcGan2 && out.d_real.is_some() && out.d_fake_full.is_none() {
            return Err(config_err!("cc_gan2 discriminator loss needs the full generated image"));
        }
    }
    if let (Some(logits), Some(targets)) = (out.logits, out.targets) {
        let c = classification_loss(tape, logits, targets)?;
        terms.classification = Some(c);
        if v == Variant::Supervised {
            d_parts.push(c);
        } else if cfg.lambda_c != 0.0 {
            let w = tape.scalar_mul(c, T::of(cfg.lambda_c))?;
            d_parts.push(w);
        }
    } else if v == Variant::Supervised && out.logits.is_some() {
        return Err(config_err!("supervised variant needs class targets"));
    }
    terms.total_d = sum_terms(tape, &d_parts)?;

    if v.is_adversarial() {
        let mut g_parts = Vec::new();
        if let Some(p) = out.g_fake_inpaint {
            g_parts.push(g_loss(tape, p, cfg.generator_loss, eps)?);
        }
        if let Some(p) = out.g_fake_full {
            g_parts.push(g_loss(tape, p, cfg.generator_loss, eps)?);
        }
        if v == Variant::CcGan2 && out.g_fake_inpaint.is_some() && out.g_fake_full.is_none() {
            return Err(config_err!("cc_gan2 generator loss needs the full generated image"));
        }
        terms.g_adv = sum_terms(tape, &g_parts)?;
        terms.total_g = terms.g_adv;
    }
    Ok(terms)
}

impl LossTerms {
    /// Reads the recorded values into a report; absent terms read as 0.
    pub fn report<T: Scalar>(&self, tape: &Tape<T>) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
        LossReport {
            d_real: val(self.d_real),
            d_fake_inpaint: val(self.d_fake_inpaint),
            d_fake_full: val(self.d_fake_full),
            g_adv: val(self.g_adv),
            classification: val(self.classification),
            total_d: val(self.total_d),
            total_g: val(self.total_g),
        }
    }
}
