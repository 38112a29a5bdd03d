//! Subcommands of the `ccgan` binary.
//!
//! Exit codes: 0 success, 1 configuration error, 2 divergence or failed
//! check, 3 I/O or format error. Nothing is written to stderr on success.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ccgan_core::gradcheck::suite::{self, CheckResult};
use ccgan_core::masking::{Hole, Mask, MaskSampler, MaskScheme};
use ccgan_core::metrics::{mean_std, EvalResult};
use ccgan_core::train::Batch;
use ccgan_core::objectives::ClassTargets;
use ccgan_core::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_scheme, parse_size, RawConfig, TrainingConfig};
use crate::data::{normalize, ImageSet};
use crate::error::{Error, IoContext, Result};
use crate::manifest::{Manifest, Split};
use crate::synth::{self, SynthSpec};
use crate::trainer::{self, EvalProtocol, RunSummary, TrainOptions};
use crate::ppm;

#[derive(Debug, Parser)]
#[command(name = "ccgan", version, about = "Context-conditional GAN training for semi-supervised classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a recipe.
    Train(TrainArgs),
    /// Evaluate checkpoints on a manifest's test split.
    Eval(EvalArgs),
    /// Write in-painting sample grids.
    Inpaint(InpaintArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic shapes dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run directory (default: runs/<config name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under another configuration.
    #[arg(long)]
    pub allow_config_change: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "fold_glob")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub crops: usize,
    /// Crop size such as 64x64; the full image when omitted.
    #[arg(long)]
    pub crop: Option<String>,
    /// Evaluate one checkpoint per labeled fold, e.g. 'runs/ckpt_fold*.bin'.
    #[arg(long, conflicts_with = "checkpoint")]
    pub fold_glob: Option<String>,
    /// Result CSV (default: next to the checkpoint, or eval_folds.csv in the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images to in-paint; alternatively take them from --manifest.
    pub images: Vec<PathBuf>,
    #[arg(long, conflicts_with = "images")]
    pub manifest: Option<PathBuf>,
    /// Number of manifest test images to use.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Hole size such as 32x32 (default: half the image side).
    #[arg(long)]
    pub hole: Option<String>,
    /// Fixed hole position `row,col` instead of a sampled one.
    #[arg(long)]
    pub at: Option<String>,
    #[arg(long, default_value = "single_square")]
    pub scheme: String,
    #[arg(long, default_value_t = 2)]
    pub squares: usize,
    #[arg(long, default_value_t = 25)]
    pub percent: u8,
    /// Low-resolution conditioning factor; must match the generator.
    #[arg(long)]
    pub lowres: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check a single operation (see the printed names).
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = suite::DEFAULT_H)]
    pub h: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 50)]
    pub labeled: usize,
    #[arg(long, default_value_t = 5000)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    /// Equal-sized labeled folds; 0 for none.
    #[arg(long, default_value_t = 0)]
    pub folds: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let s = cmd_train(&a)?;
            print_train_summary(&s, out)
        }
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Inpaint(a) => cmd_inpaint(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn default_run_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunSummary> {
    let raw = RawConfig::load(&a.config, &a.sets)?;
    let cfg = TrainingConfig::from_raw(raw)?;
    let dir = a.out.clone().unwrap_or_else(|| default_run_dir(&a.config));
    let opts = TrainOptions { resume: a.resume.clone(), allow_config_change: a.allow_config_change, verbose: !a.quiet };
    trainer::train(&cfg, &dir, &opts)
}

fn print_train_summary(s: &RunSummary, out: &mut dyn Write) -> Result<()> {
    let mut text = format!("steps: {}\ncheckpoint: {}\ntrain accuracy: {:.4}\n", s.steps, s.checkpoint.display(), s.train_accuracy);
    if let Some(r) = &s.test {
        text.push_str(&format!("test accuracy: {:.4}\ntest mAP: {:.4}\n", r.accuracy, r.map));
    }
    emit(out, &text)
}

fn fold_of(ck: &Checkpoint) -> Result<Option<usize>> {
    let mut raw = RawConfig::default();
    raw.apply_text(&ck.config_text, "checkpoint config")?;
    match raw.get("data.fold") {
        "-" | "" => Ok(None),
        f => f.parse().map(Some).map_err(|_| Error::config(format!("checkpoint has invalid fold '{f}'"))),
    }
}

fn eval_one(ck: &Checkpoint, manifest: &Manifest, test: &ImageSet, protocol: EvalProtocol, seed: u64) -> Result<EvalResult> {
    let mode = manifest.label_mode.ok_or_else(|| Error::config("manifest has no labels"))?;
    let (have, want) = (ck.state.discriminator.spec().num_classes, mode.classes());
    if have != want {
        return Err(Error::config(format!("checkpoint classifies {have} classes, the manifest has {want}")));
    }
    trainer::evaluate_set(&ck.state.discriminator, test, protocol, trainer::score_mode(mode), seed, fold_of(ck)?)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let test = ImageSet::load(&manifest, &manifest.split(Split::Test).collect::<Vec<_>>())?;
    if test.is_empty() {
        return Err(Error::config(format!("{} has no test entries", a.manifest.display())));
    }
    let crop = match &a.crop {
        None => 0,
        Some(s) => match parse_size(s)? {
            (h, w) if h == w => h,
            (h, w) => return Err(Error::config(format!("crops must be square, got {h}x{w}"))),
        },
    };
    if a.crops == 0 {
        return Err(Error::config("--crops must be at least 1"));
    }
    let protocol = EvalProtocol { crops: a.crops, crop };
    let classes = manifest.label_mode.map_or(0, |m| m.classes());
    let mut csv = format!("{}\n", trainer::eval_csv_header(classes).replacen("stage,step", "checkpoint,step", 1));
    if let Some(pattern) = &a.fold_glob {
        let paths: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| Error::config(format!("bad --fold-glob: {e}")))?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("--fold-glob: {e}")))?;
        if paths.is_empty() {
            return Err(Error::config(format!("no checkpoints match '{pattern}'")));
        }
        let mut results = Vec::new();
        for p in &paths {
            let ck = Checkpoint::load(p)?;
            let r = eval_one(&ck, &manifest, &test, protocol, a.seed)?;
            if r.fold_id.is_none() {
                return Err(Error::config(format!("{} was not trained on a fold", p.display())));
            }
            csv.push_str(&format!("{}\n", trainer::eval_csv_row(&p.display().to_string(), ck.state.step, &r)));
            results.push(r);
        }
        let covered: Vec<usize> = results.iter().filter_map(|r| r.fold_id).collect();
        let missing: Vec<String> =
            manifest.folds().into_iter().filter(|f| !covered.contains(f)).map(|f| f.to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("missing checkpoints for folds {}", missing.join(", "))));
        }
        results.sort_by_key(|r| r.fold_id);
        let mut text = String::new();
        for r in &results {
            text.push_str(&format!("fold {}: accuracy {:.4}  mAP {:.4}\n", r.fold_id.unwrap_or(0), r.accuracy, r.map));
        }
        let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
        let (m, s) = mean_std(&accs)?;
        text.push_str(&format!("accuracy over {} folds: {:.2} ± {:.2}\n", results.len(), 100.0 * m, 100.0 * s));
        let path = a.out.clone().unwrap_or_else(|| PathBuf::from("eval_folds.csv"));
        fs::write(&path, csv).at(&path)?;
        return emit(out, &text);
    }
    let ck_path = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
    let ck = Checkpoint::load(ck_path)?;
    let r = eval_one(&ck, &manifest, &test, protocol, a.seed)?;
    csv.push_str(&format!("{}\n", trainer::eval_csv_row(&ck_path.display().to_string(), ck.state.step, &r)));
    let path = a.out.clone().unwrap_or_else(|| ck_path.with_extension("eval.csv"));
    fs::write(&path, csv).at(&path)?;
    emit(out, &trainer::summary_block(&ck_path.display().to_string(), &r))
}

/// Parses `row,col`.
fn parse_at(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("bad --at '{s}', expected row,col"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

/// Center crop of side `size`.
fn center_crop(img: &ppm::RgbImage, size: usize, origin: &Path) -> Result<Vec<f32>> {
    if img.width < size || img.height < size {
        return Err(Error::config(format!("{}: {}x{} is smaller than the generator's {size}x{size}", origin.display(), img.width, img.height)));
    }
    let (x0, y0) = ((img.width - size) / 2, (img.height - size) / 2);
    let mut cropped = ppm::RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            cropped.put(x, y, img.get(x0 + x, y0 + y));
        }
    }
    Ok(normalize(&cropped))
}

pub fn cmd_inpaint(a: &InpaintArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let gen = ck.state.generator.as_ref().ok_or_else(|| Error::config(format!("{} has no generator", a.checkpoint.display())))?;
    let spec = gen.spec();
    if spec.input != ccgan_core::models::GeneratorInput::Context {
        return Err(Error::config("in-painting needs a context-conditional generator"));
    }
    let size = spec.resolution;
    let factor = spec.lowres.map(|l| l.factor);
    match (a.lowres, factor) {
        (Some(f), Some(g)) if f != g => return Err(Error::config(format!("--lowres {f} but the generator was trained with factor {g}"))),
        (Some(f), None) => return Err(Error::config(format!("--lowres {f} but the generator takes no low-res input"))),
        (None, Some(g)) => return Err(Error::config(format!("the generator needs --lowres {g}"))),
        _ => {}
    }
    let paths: Vec<PathBuf> = match &a.manifest {
        Some(m) => {
            let manifest = Manifest::load(m)?;
            manifest.split(Split::Test).take(a.count).map(|e| manifest.path_of(e)).collect()
        }
        None => a.images.clone(),
    };
    if paths.is_empty() {
        return Err(Error::config("no images to in-paint"));
    }
    let mut data = Vec::new();
    for p in &paths {
        data.extend(center_crop(&ppm::read(p)?, size, p)?);
    }
    let n = paths.len();
    let images = Tensor::new(&[n, 3, size, size], data)?;
    let hole = match &a.hole {
        Some(h) => parse_size(h)?,
        None => (size / 2, size / 2),
    };
    let scheme = parse_scheme(&a.scheme, a.squares, a.percent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let masks = match &a.at {
        Some(at) => {
            if scheme != MaskScheme::SingleSquare {
                return Err(Error::config("--at places a single square hole"));
            }
            let (top, left) = parse_at(at)?;
            let hole = Hole { top, left, height: hole.0, width: hole.1 };
            let m = Mask::with_holes(size, size, &[hole], scheme)?;
            vec![m; n]
        }
        None => {
            let sampler = MaskSampler::new(scheme, (size, size), hole)?;
            (0..n).map(|_| sampler.sample(&mut rng)).collect::<ccgan_core::Result<Vec<_>>>()?
        }
    };
    let lowres = factor.map(|f| ccgan_core::masking::downsample(&images, f)).transpose()?;
    let batch = Batch { images, targets: ClassTargets::Single(vec![None; n]), masks: Some(masks), lowres };
    let grid = trainer::inpainting_grid(gen, &batch, &mut rng)?;
    ppm::write(&a.out, &grid)?;
    let mut holes = String::from("column\ttop\tleft\theight\twidth\n");
    for (c, m) in batch.masks.as_ref().expect("set above").iter().enumerate() {
        for h in m.holes() {
            holes.push_str(&format!("{c}\t{}\t{}\t{}\t{}\n", h.top, h.left, h.height, h.width));
        }
    }
    let holes_path = a.out.with_extension("holes.tsv");
    fs::write(&holes_path, holes).at(&holes_path)?;
    emit(out, &format!("wrote {} ({n} columns) and {}\n", a.out.display(), holes_path.display()))
}

pub fn gradcheck_results(a: &GradcheckArgs) -> Result<Vec<CheckResult>> {
    Ok(match &a.op {
        Some(op) => vec![suite::run(op, a.h).map_err(|e| {
            Error::config(format!("{e}; available: {}", suite::check_names().join(", ")))
        })?],
        None => suite::run_all(a.h)?,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let results = gradcheck_results(a)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!(
            "{:<22} worst_rel {:.3e}  tol {:.0e}  {}\n",
            r.name,
            r.comparison.worst_relative,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        emit(out, &text)
    } else {
        emit(out, &text)?;
        Err(Error::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        resolution: a.res,
        labeled: a.labeled,
        unlabeled: a.unlabeled,
        test: a.test,
        folds: a.folds,
        seed: a.seed,
    };
    let m = synth::write_dataset(&spec, &a.out)?;
    emit(out, &format!("wrote {} images and {}\n", m.entries.len(), a.out.join("manifest.tsv").display()))
}
