//! Flat `key = value` run configuration.
//!
//! Every key has a default; files and `--set key=value` overrides may only
//! assign declared keys. The resolved configuration (all keys, canonical
//! order) is what gets written into a run directory and hashed into
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ccgan_core::masking::{MaskSampler, MaskScheme};
use ccgan_core::models::{DiscriminatorSpec, GeneratorSpec, HiddenActivation, LowresConditioning, LowresInjection};
use ccgan_core::objectives::{GeneratorLoss, ObjectiveConfig, Variant};
use ccgan_core::optim::AdamConfig;
use sha2::{Digest, Sha256};

use crate::data::MixMode;
use crate::error::{Error, IoContext, Result};
use crate::modelspec;

/// `(key, default)`. An empty default means "unset".
const KEYS: &[(&str, &str)] = &[
    ("run.seed", "1"),
    ("run.threads", "1"),
    ("data.manifest", ""),
    ("data.fold", "-"),
    ("data.batch_size", "64"),
    ("data.mode", "mixed"),
    ("data.labeled_fraction", "0.5"),
    ("data.crop", "0"),
    ("data.prefetch", "2"),
    ("model.g_ladder", "64,128,256,512"),
    ("model.noise_dim", "0"),
    ("model.d_stages", "64|128|256,256|512,512|512,512"),
    ("model.activation", "relu"),
    ("model.dropout", "0"),
    ("model.generator_spec", ""),
    ("model.discriminator_spec", ""),
    ("objective.variant", "cc_gan"),
    ("objective.lambda_c", "1"),
    ("objective.generator_loss", "non_saturating"),
    ("objective.clamp_eps", "1e-7"),
    ("mask.scheme", ""),
    ("mask.hole", ""),
    ("mask.count", ""),
    ("mask.percent", ""),
    ("lowres.factor", ""),
    ("lowres.injection", ""),
    ("optim.lr", "0.0002"),
    ("optim.beta1", "0.5"),
    ("optim.beta2", "0.999"),
    ("optim.eps", "1e-8"),
    ("optim.weight_decay", "0"),
    ("optim.g_weight_decay", "0"),
    ("train.epochs", "100"),
    ("train.steps_per_epoch", "0"),
    ("train.checkpoint_every", "10"),
    ("train.eval_every", "0"),
    ("train.sample_every", "0"),
    ("train.joint_classification", "true"),
    ("finetune.enabled", "false"),
    ("finetune.crop", "0"),
    ("finetune.stop", "train_acc_100"),
    ("finetune.max_epochs", "50"),
    ("finetune.lr", "0.0002"),
    ("finetune.batch_size", "0"),
    ("finetune.weight_decay", "0"),
    ("eval.crops", "1"),
    ("eval.crop", "0"),
];

const SCHEDULE_KEYS: &[&str] =
    &["train.epochs", "train.checkpoint_every", "train.eval_every", "train.sample_every", "data.prefetch"];

/// Raw key/value pairs after merging defaults, a file and overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    /// Keys assigned explicitly rather than defaulted.
    explicit: Vec<String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(), explicit: Vec::new() }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        if let Some(dir) = path.parent() {
            cfg.anchor_paths(dir);
        }
        for o in overrides {
            cfg.set_pair(o)?;
        }
        Ok(cfg)
    }

    /// Resolves relative file paths in the config against the config's directory.
    fn anchor_paths(&mut self, dir: &Path) {
        for key in ["data.manifest", "model.generator_spec", "model.discriminator_spec"] {
            let v = &self.values[key];
            if !v.is_empty() && Path::new(v).is_relative() {
                let joined = dir.join(v).display().to_string();
                self.values.insert(key.to_string(), joined);
            }
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn is_set(&self, key: &str) -> bool {
        !self.get(key).is_empty()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::config(format!("{key}: cannot parse '{v}'")))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.is_set(key) {
            self.parse(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Canonical text: every key in sorted order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Digest of every setting that shapes the trajectory. Schedule keys
    /// are left out so a resumed run may be extended or checkpointed differently.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| !SCHEDULE_KEYS.contains(&k.as_str())) {
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        h.finalize().into()
    }
}

fn parse_ladder(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|c| c.trim().parse().map_err(|_| Error::config(format!("{key}: bad channel count '{c}'"))))
        .collect()
}

/// Parses `HxW` or a single side.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("bad size '{s}', expected e.g. 32x32"));
    match s.split_once('x') {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            Ok((v, v))
        }
    }
}

pub fn parse_activation(s: &str) -> Result<HiddenActivation> {
    match s {
        "relu" => Ok(HiddenActivation::Relu),
        "leaky_relu" => Ok(HiddenActivation::LeakyRelu(0.2)),
        _ => match s.strip_prefix("leaky_relu:").map(str::parse::<f64>) {
            Some(Ok(a)) => Ok(HiddenActivation::LeakyRelu(a)),
            _ => Err(Error::config(format!("unknown activation '{s}'"))),
        },
    }
}

pub fn parse_scheme(name: &str, count: usize, percent: u8) -> Result<MaskScheme> {
    match name {
        "single_square" => Ok(MaskScheme::SingleSquare),
        "multi_square" => Ok(MaskScheme::MultiSquare { count }),
        "random_blocks" => Ok(MaskScheme::RandomBlocks { percent }),
        _ => Err(Error::config(format!("unknown mask scheme '{name}'"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    TrainAcc100,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub scheme: MaskScheme,
    pub hole: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub enabled: bool,
    /// Crop side; 0 for full images.
    pub crop: usize,
    pub stop: StopRule,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
}

/// Typed view of a resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub raw: RawConfig,
    pub seed: u64,
    pub threads: usize,
    pub manifest: PathBuf,
    pub fold: Option<usize>,
    pub batch_size: usize,
    pub mode: MixMode,
    pub labeled_fraction: f64,
    /// Training crop side; 0 for full images.
    pub crop: usize,
    pub prefetch: usize,
    pub g_ladder: Vec<usize>,
    pub noise_dim: usize,
    pub d_stages: Vec<Vec<usize>>,
    pub activation: HiddenActivation,
    pub dropout: f64,
    pub generator_spec: Option<PathBuf>,
    pub discriminator_spec: Option<PathBuf>,
    pub objective: ObjectiveConfig,
    pub mask: Option<MaskConfig>,
    pub lowres: Option<LowresConditioning>,
    pub d_adam: AdamConfig,
    pub g_adam: AdamConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub sample_every: usize,
    pub joint_classification: bool,
    pub finetune: FineTuneConfig,
    pub eval_crops: usize,
    pub eval_crop: usize,
}

impl TrainingConfig {
    pub fn from_raw(mut raw: RawConfig) -> Result<Self> {
        if let Ok(t) = std::env::var("CCGAN_THREADS") {
            raw.set("run.threads", &t)?;
        }
        let threads: usize = raw.parse("run.threads")?;
        if threads == 0 {
            return Err(Error::config("run.threads must be at least 1"));
        }
        let variant = Variant::parse(raw.get("objective.variant"))?;
        let generator_loss = match raw.get("objective.generator_loss") {
            "non_saturating" => GeneratorLoss::NonSaturating,
            "saturating" => GeneratorLoss::Saturating,
            other => return Err(Error::config(format!("unknown generator loss '{other}'"))),
        };
        let objective = ObjectiveConfig {
            variant,
            lambda_c: raw.parse("objective.lambda_c")?,
            generator_loss,
            clamp_eps: raw.parse("objective.clamp_eps")?,
        };
        objective.validate()?;

        let mask_keys = ["mask.scheme", "mask.hole", "mask.count", "mask.percent"];
        let lowres_keys = ["lowres.factor", "lowres.injection"];
        if !variant.uses_context() {
            if let Some(k) = mask_keys.iter().chain(&lowres_keys).find(|k| raw.is_set(k)) {
                return Err(Error::config(format!("{k} is not allowed with the {} variant", variant.name())));
            }
        }

        let crop: usize = raw.parse("data.crop")?;
        let mask = if variant.uses_context() {
            let scheme = parse_scheme(
                if raw.is_set("mask.scheme") { raw.get("mask.scheme") } else { "single_square" },
                raw.parse_opt("mask.count")?.unwrap_or(2),
                raw.parse_opt("mask.percent")?.unwrap_or(25),
            )?;
            // An unset hole is half the training crop, resolved once the image size is known.
            let hole = if raw.is_set("mask.hole") { parse_size(raw.get("mask.hole"))? } else { (0, 0) };
            Some(MaskConfig { scheme, hole })
        } else {
            None
        };
        let lowres = match raw.parse_opt::<usize>("lowres.factor")? {
            None | Some(1) if !raw.is_set("lowres.injection") => None,
            None => return Err(Error::config("lowres.injection given without lowres.factor")),
            Some(factor) => {
                let injection = match raw.get("lowres.injection") {
                    "" | "input" => LowresInjection::Input,
                    "bottleneck" => LowresInjection::Bottleneck,
                    other => return Err(Error::config(format!("unknown low-res injection '{other}'"))),
                };
                Some(LowresConditioning { factor, injection })
            }
        };

        let adam = |lr_key: &str, wd_key: &str| -> Result<AdamConfig> {
            Ok(AdamConfig {
                lr: raw.parse(lr_key)?,
                beta1: raw.parse("optim.beta1")?,
                beta2: raw.parse("optim.beta2")?,
                eps: raw.parse("optim.eps")?,
                weight_decay: raw.parse(wd_key)?,
            })
        };
        let d_adam = adam("optim.lr", "optim.weight_decay")?;
        let g_adam = adam("optim.lr", "optim.g_weight_decay")?;
        let finetune = FineTuneConfig {
            enabled: raw.parse("finetune.enabled")?,
            crop: raw.parse("finetune.crop")?,
            stop: match raw.get("finetune.stop") {
                "train_acc_100" => StopRule::TrainAcc100,
                "max_epochs" => StopRule::MaxEpochs,
                other => return Err(Error::config(format!("finetune.stop must be train_acc_100 or max_epochs, got '{other}'"))),
            },
            max_epochs: raw.parse("finetune.max_epochs")?,
            adam: adam("finetune.lr", "finetune.weight_decay")?,
            batch_size: raw.parse("finetune.batch_size")?,
        };
        let fold = match raw.get("data.fold") {
            "-" | "" => None,
            _ => Some(raw.parse("data.fold")?),
        };
        let path_opt = |key: &str| raw.is_set(key).then(|| PathBuf::from(raw.get(key)));
        let d_stages = raw
            .get("model.d_stages")
            .split('|')
            .map(|s| parse_ladder(s, "model.d_stages"))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            seed: raw.parse("run.seed")?,
            threads,
            manifest: path_opt("data.manifest").ok_or_else(|| Error::config("data.manifest is required"))?,
            fold,
            batch_size: raw.parse("data.batch_size")?,
            mode: MixMode::parse(raw.get("data.mode"))?,
            labeled_fraction: raw.parse("data.labeled_fraction")?,
            crop,
            prefetch: raw.parse("data.prefetch")?,
            g_ladder: parse_ladder(raw.get("model.g_ladder"), "model.g_ladder")?,
            noise_dim: raw.parse("model.noise_dim")?,
            d_stages,
            activation: parse_activation(raw.get("model.activation"))?,
            dropout: raw.parse("model.dropout")?,
            generator_spec: path_opt("model.generator_spec"),
            discriminator_spec: path_opt("model.discriminator_spec"),
            objective,
            mask,
            lowres,
            d_adam,
            g_adam,
            epochs: raw.parse("train.epochs")?,
            steps_per_epoch: raw.parse("train.steps_per_epoch")?,
            checkpoint_every: raw.parse("train.checkpoint_every")?,
            eval_every: raw.parse("train.eval_every")?,
            sample_every: raw.parse("train.sample_every")?,
            joint_classification: raw.parse("train.joint_classification")?,
            finetune,
            eval_crops: raw.parse("eval.crops")?,
            eval_crop: raw.parse("eval.crop")?,
            raw,
        };
        if cfg.batch_size < 2 {
            return Err(Error::config("data.batch_size must be at least 2 for batch normalization"));
        }
        if variant == Variant::Supervised && cfg.mode == MixMode::UnlabeledOnly {
            return Err(Error::config("the supervised variant needs labels but data.mode is unlabeled_only"));
        }
        if variant == Variant::SslGan && cfg.noise_dim == 0 && cfg.generator_spec.is_none() {
            return Err(Error::config("ssl_gan needs model.noise_dim > 0"));
        }
        if cfg.eval_crops == 0 {
            return Err(Error::config("eval.crops must be at least 1"));
        }
        Ok(cfg)
    }

    /// Batch mode actually used: the supervised variant never sees unlabeled data.
    pub fn effective_mode(&self) -> MixMode {
        if self.objective.variant == Variant::Supervised {
            MixMode::LabeledOnly
        } else {
            self.mode
        }
    }

    /// The objective seen by the training step.
    pub fn step_objective(&self) -> ObjectiveConfig {
        let mut o = self.objective;
        if !self.joint_classification && o.variant.is_adversarial() {
            o.lambda_c = 0.0;
        }
        o
    }

    pub fn mask_sampler(&self, crop: usize) -> Result<Option<MaskSampler>> {
        self.mask
            .as_ref()
            .map(|m| {
                let hole = if m.hole == (0, 0) { (crop / 2, crop / 2) } else { m.hole };
                MaskSampler::new(m.scheme, (crop, crop), hole).map_err(Error::from)
            })
            .transpose()
    }

    /// Generator spec for images of side `crop`, if the variant has one.
    pub fn generator_spec(&self, crop: usize) -> Result<Option<GeneratorSpec>> {
        let v = self.objective.variant;
        if !v.is_adversarial() {
            return Ok(None);
        }
        if let Some(p) = &self.generator_spec {
            return modelspec::read_generator(p).map(Some);
        }
        let mut spec = if v == Variant::SslGan {
            GeneratorSpec::noise(3, crop, self.noise_dim, &self.g_ladder)
        } else {
            let mut s = GeneratorSpec::context(3, crop, &self.g_ladder);
            s.noise_dim = self.noise_dim;
            s.lowres = self.lowres;
            s
        };
        spec.activation = self.activation;
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn discriminator_spec(&self, classes: usize) -> Result<DiscriminatorSpec> {
        let mut spec = match &self.discriminator_spec {
            Some(p) => modelspec::read_discriminator(p)?,
            None => {
                let stages: Vec<&[usize]> = self.d_stages.iter().map(Vec::as_slice).collect();
                let mut s = DiscriminatorSpec::vgg(3, &stages, classes);
                s.dropout = self.dropout;
                s.activation = self.activation;
                s
            }
        };
        if spec.num_classes != classes {
            return Err(Error::config(format!("discriminator has {} classes, the manifest {classes}", spec.num_classes)));
        }
        spec.dropout = self.dropout;
        spec.validate()?;
        Ok(spec)
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::config(format!("run directory {} is in use (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
