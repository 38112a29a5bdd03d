//! Run loop: data, alternating updates, evaluation, checkpoints and sample grids.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::thread::JoinHandle;

use ccgan_core::masking::{apply_mask, upsample, Mask, MaskSampler};
use ccgan_core::metrics::{crop_averaged_predict, evaluate, predict_scores, EvalResult, ScoreMode};
use ccgan_core::models::{Discriminator, Generator};
use ccgan_core::objectives::{ClassTargets, LossReport};
use ccgan_core::optim::AdamState;
use ccgan_core::train::{classifier_step, inpaint, train_step, Batch, GanState};
use ccgan_core::{Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{FineTuneConfig, RunLock, StopRule, TrainingConfig};
use crate::data::{denormalize, BatchConfig, BatchStream, DataBatch, ImageSet, MixMode};
use crate::error::{Error, IoContext, Result};
use crate::manifest::{LabelMode, Manifest, Split};
use crate::ppm::{self, RgbImage};

pub const METRICS_HEADER: &str = "step,epoch,d_real,d_fake_inpaint,d_fake_full,g_adv,cls,total_d,total_g";

/// Independent rng streams derived from the run seed, so auxiliary work
/// (evaluation, sample grids, fine-tuning) never perturbs the training stream.
#[derive(Clone, Copy)]
enum Stream {
    Batches = 1,
    Eval = 2,
    Samples = 3,
    FineTune = 4,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// The manifest's images, decoded once per run.
pub struct Datasets {
    pub manifest: Manifest,
    pub label_mode: LabelMode,
    pub labeled: Arc<ImageSet>,
    pub unlabeled: Arc<ImageSet>,
    pub test: Arc<ImageSet>,
}

impl Datasets {
    pub fn load(path: &Path, fold: Option<usize>, need_unlabeled: bool) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let label_mode = manifest
            .label_mode
            .ok_or_else(|| Error::config(format!("{}: manifest has no labeled entries", path.display())))?;
        let labeled = ImageSet::load(&manifest, &manifest.labeled(fold)?)?;
        let unlabeled: Vec<_> = if need_unlabeled { manifest.split(Split::Unlabeled).collect() } else { Vec::new() };
        let unlabeled = ImageSet::load(&manifest, &unlabeled)?;
        let test = ImageSet::load(&manifest, &manifest.split(Split::Test).collect::<Vec<_>>())?;
        Ok(Self { manifest, label_mode, labeled: Arc::new(labeled), unlabeled: Arc::new(unlabeled), test: Arc::new(test) })
    }

    pub fn score_mode(&self) -> ScoreMode {
        score_mode(self.label_mode)
    }
}

pub fn score_mode(mode: LabelMode) -> ScoreMode {
    match mode {
        LabelMode::Single { .. } => ScoreMode::Softmax,
        LabelMode::Multi { .. } => ScoreMode::Sigmoid,
    }
}

/// Evaluation protocol: `crops` random windows of side `crop` (0 means the whole image).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    pub crops: usize,
    pub crop: usize,
}

const EVAL_CHUNK: usize = 50;

/// Class scores for every image of `set`, in infer mode.
pub fn predict_set(disc: &Discriminator<f32>, set: &ImageSet, protocol: EvalProtocol, mode: ScoreMode, seed: u64) -> Result<Tensor<f64>> {
    let crop = if protocol.crop == 0 { set.size } else { protocol.crop };
    if crop > set.size {
        return Err(Error::config(format!("evaluation crop {crop} exceeds the {}x{} images", set.size, set.size)));
    }
    disc.spec().check_resolution(crop)?;
    let mut rng = stream_rng(seed, Stream::Eval, 0);
    let mut parts = Vec::new();
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images = set.tensor(chunk);
        parts.push(if crop == set.size && protocol.crops == 1 {
            predict_scores(disc, &images, mode)?
        } else {
            crop_averaged_predict(disc, &images, protocol.crops, crop, mode, &mut rng)?
        });
    }
    Ok(Tensor::stack_rows(&parts)?)
}

pub fn evaluate_set(
    disc: &Discriminator<f32>,
    set: &ImageSet,
    protocol: EvalProtocol,
    mode: ScoreMode,
    seed: u64,
    fold: Option<usize>,
) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let scores = predict_set(disc, set, protocol, mode, seed)?;
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(evaluate(&scores, &set.targets(&all), fold)?)
}

pub fn eval_csv_header(classes: usize) -> String {
    let mut h = "stage,step,fold,count,accuracy,map".to_string();
    for k in 0..classes {
        let _ = write!(h, ",ap_{k}");
    }
    h
}

pub fn eval_csv_row(stage: &str, step: u64, r: &EvalResult) -> String {
    let fold = r.fold_id.map_or("-".to_string(), |f| f.to_string());
    let mut row = format!("{stage},{step},{fold},{},{},{}", r.count, r.accuracy, r.map);
    for ap in &r.per_class_ap {
        let _ = match ap {
            Some(v) => write!(row, ",{v}"),
            None => write!(row, ","),
        };
    }
    row
}

pub fn summary_block(title: &str, r: &EvalResult) -> String {
    let mut s = format!("== {title} ==\nimages: {}\naccuracy: {:.4}\nmAP: {:.4}\n", r.count, r.accuracy, r.map);
    for (k, ap) in r.per_class_ap.iter().enumerate() {
        let _ = match ap {
            Some(v) => writeln!(s, "AP class {k}: {v:.4}"),
            None => writeln!(s, "AP class {k}: undefined (no positives)"),
        };
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneReport {
    pub epochs: usize,
    /// Training accuracy of the last epoch, measured before each batch's update.
    pub train_accuracy: f64,
}

/// Trains the classification head and trunk on labeled images only, at the
/// fine-tune resolution, until the stop rule fires.
pub fn fine_tune(
    disc: &mut Discriminator<f32>,
    labeled: &ImageSet,
    ft: &FineTuneConfig,
    batch_size: usize,
    seed: u64,
) -> Result<FineTuneReport> {
    let crop = if ft.crop == 0 { labeled.size } else { ft.crop };
    if crop > labeled.size {
        return Err(Error::config(format!("fine-tune resolution {crop} exceeds the {}x{} images", labeled.size, labeled.size)));
    }
    disc.spec().check_resolution(crop)?;
    if labeled.len() < 2 {
        return Err(Error::config("fine-tuning needs at least two labeled images"));
    }
    let batch_size = batch_size.clamp(2, labeled.len());
    let mut opt = AdamState::new(ft.adam, &disc.params().tensors);
    let mut rng = stream_rng(seed, Stream::FineTune, 0);
    let mut report = FineTuneReport { epochs: 0, train_accuracy: 0.0 };
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 1..=ft.max_epochs {
        order.shuffle(&mut rng);
        let (mut hits, mut seen) = (0.0, 0usize);
        // A trailing single image is folded into the previous batch for batch norm.
        let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
            let n = chunks.len();
            chunks[n - 1] = &order[(n - 1) * batch_size..];
        }
        for chunk in chunks {
            let mut data = Vec::with_capacity(chunk.len() * 3 * crop * crop);
            for &i in chunk {
                let slack = labeled.size - crop;
                let (top, left) = (rng.random_range(0..=slack), rng.random_range(0..=slack));
                labeled.crop_into(i, top, left, crop, &mut data);
            }
            let images = Tensor::new(&[chunk.len(), 3, crop, crop], data)?;
            let targets = labeled.targets(chunk);
            let (_, acc) = classifier_step(disc, &mut opt, &images, &targets, &mut rng)?;
            hits += acc * chunk.len() as f64;
            seen += chunk.len();
        }
        report = FineTuneReport { epochs: epoch, train_accuracy: hits / seen as f64 };
        if ft.stop == StopRule::TrainAcc100 && report.train_accuracy >= 1.0 {
            break;
        }
    }
    Ok(report)
}

/// Fraction of real images scored real plus composed in-paintings scored
/// fake by the discriminator's adversarial head, over `set`.
pub fn real_fake_accuracy(state: &GanState<f32>, set: &ImageSet, crop: usize, masks: MaskSampler, seed: u64) -> Result<f64> {
    let gen = state.generator.as_ref().ok_or_else(|| Error::config("no generator in this run"))?;
    let lowres = gen.spec().lowres.map(|l| l.factor);
    let mut rng = stream_rng(seed, Stream::Eval, 1);
    let (mut correct, mut total) = (0usize, 0usize);
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = center_batch(set, chunk, crop, Some(&masks), lowres, &mut rng)?;
        let (_, composed) = inpaint(gen, &batch, &mut rng)?;
        for (images, real) in [(&batch.images, true), (&composed, false)] {
            let mut tape = Tape::new();
            let params = state.discriminator.bind(&mut tape, false);
            let x = tape.constant(images.clone());
            let out = state.discriminator.forward_frozen(&mut tape, &params, x, Mode::Infer, &mut rng)?;
            correct += tape.value(out.prob).data().iter().filter(|&&p| (p > 0.5) == real).count();
            total += chunk.len();
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Center crops of `indices` with freshly sampled masks and optional low-res conditioning.
pub fn center_batch<R: Rng + ?Sized>(
    set: &ImageSet,
    indices: &[usize],
    crop: usize,
    masks: Option<&MaskSampler>,
    lowres: Option<usize>,
    rng: &mut R,
) -> Result<Batch<f32>> {
    if crop > set.size {
        return Err(Error::config(format!("crop {crop} exceeds the {}x{} images", set.size, set.size)));
    }
    let off = (set.size - crop) / 2;
    let mut data = Vec::with_capacity(indices.len() * 3 * crop * crop);
    for &i in indices {
        set.crop_into(i, off, off, crop, &mut data);
    }
    let images = Tensor::new(&[indices.len(), 3, crop, crop], data)?;
    let masks = masks.map(|s| indices.iter().map(|_| s.sample(rng)).collect::<ccgan_core::Result<Vec<Mask>>>()).transpose()?;
    let lowres = lowres.map(|f| ccgan_core::masking::downsample(&images, f)).transpose()?;
    let n = indices.len();
    Ok(Batch { images, targets: ClassTargets::Single(vec![None; n]), masks, lowres })
}

pub const GRID_GAP: usize = 2;

/// Sample grid: one column per image; rows are the original, the masked
/// input, the upsampled low-res input (when present), the composite and the
/// raw generator output. Cells are separated by `GRID_GAP` black pixels.
pub fn inpainting_grid<R: Rng + ?Sized>(gen: &Generator<f32>, batch: &Batch<f32>, rng: &mut R) -> Result<RgbImage> {
    let masks = batch.masks.as_ref().ok_or_else(|| Error::config("in-painting needs masks"))?;
    let (raw, composed) = inpaint(gen, batch, rng)?;
    let mut rows = vec![batch.images.clone(), apply_mask(&batch.images, masks)?];
    if let Some(low) = &batch.lowres {
        let (_, _, h, _) = batch.images.dims4()?;
        let (_, _, lh, _) = low.dims4()?;
        rows.push(upsample(low, h / lh)?);
    }
    rows.push(composed);
    rows.push(raw);
    let (n, _, h, w) = batch.images.dims4()?;
    let mut grid = RgbImage::new(n * w + (n + 1) * GRID_GAP, rows.len() * h + (rows.len() + 1) * GRID_GAP);
    for (r, t) in rows.iter().enumerate() {
        for c in 0..n {
            let cell = denormalize(t.slice_rows(c, 1)?.data(), w, h);
            let (x0, y0) = (GRID_GAP + c * (w + GRID_GAP), GRID_GAP + r * (h + GRID_GAP));
            for y in 0..h {
                for x in 0..w {
                    grid.put(x0 + x, y0 + y, cell.get(x, y));
                }
            }
        }
    }
    Ok(grid)
}

/// Cell `(row, column)` of a grid produced by [`inpainting_grid`].
pub fn grid_cell(grid: &RgbImage, row: usize, col: usize, w: usize, h: usize) -> RgbImage {
    let (x0, y0) = (GRID_GAP + col * (w + GRID_GAP), GRID_GAP + row * (h + GRID_GAP));
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, grid.get(x0 + x, y0 + y));
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub allow_config_change: bool,
    /// Print progress lines to stdout.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub crop: usize,
    /// Test-set result of the final discriminator, after fine-tuning if enabled.
    pub test: Option<EvalResult>,
    /// Test-set result before fine-tuning, when fine-tuning ran.
    pub pre_finetune_test: Option<EvalResult>,
    pub finetune: Option<FineTuneReport>,
    /// Accuracy of the final discriminator on the labeled training images.
    pub train_accuracy: f64,
    /// Adversarial-head accuracy on held-out real vs composed images (context variants).
    pub real_fake_accuracy: Option<f64>,
}

enum Source {
    Inline(BatchStream),
    Prefetched(Receiver<Result<DataBatch>>, Option<JoinHandle<()>>),
}

impl Source {
    fn next(&mut self) -> Result<DataBatch> {
        match self {
            Source::Inline(s) => s.next_batch(),
            Source::Prefetched(rx, _) => rx.recv().map_err(|_| Error::Runtime("data producer stopped".into()))?,
        }
    }
}

impl Drop for Source {
    fn drop(&mut self) {
        if let Source::Prefetched(rx, handle) = self {
            // Unblock the producer before joining it.
            let (_, dead) = std::sync::mpsc::sync_channel(0);
            drop(std::mem::replace(rx, dead));
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

fn csv_line(step: u64, epoch: u64, r: &LossReport) -> String {
    format!(
        "{step},{epoch},{},{},{},{},{},{},{}\n",
        r.d_real, r.d_fake_inpaint, r.d_fake_full, r.g_adv, r.classification, r.total_d, r.total_g
    )
}

/// Opens the metrics log positioned after `keep_steps` step lines.
fn open_metrics(path: &Path, keep_steps: u64) -> Result<BufWriter<File>> {
    let mut kept = String::from(METRICS_HEADER);
    kept.push('\n');
    if keep_steps > 0 && path.exists() {
        let f = File::open(path).at(path)?;
        for line in BufReader::new(f).lines().skip(1).take(keep_steps as usize) {
            kept.push_str(&line.at(path)?);
            kept.push('\n');
        }
    }
    fs::write(path, kept).at(path)?;
    Ok(BufWriter::new(OpenOptions::new().append(true).open(path).at(path)?))
}

struct RunLog {
    path: PathBuf,
    verbose: bool,
}

impl RunLog {
    fn line(&self, text: &str) -> Result<()> {
        if self.verbose {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).at(&self.path)?;
        write!(f, "{text}").at(&self.path)?;
        if !text.ends_with('\n') {
            writeln!(f).at(&self.path)?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

/// Runs (or resumes) a training run into `out`.
pub fn train(cfg: &TrainingConfig, out: &Path, opts: &TrainOptions) -> Result<RunSummary> {
    let _lock = RunLock::acquire(out)?;
    let config_text = cfg.raw.to_text();
    let config_path = out.join("config.resolved");
    fs::write(&config_path, &config_text).at(&config_path)?;
    let log = RunLog { path: out.join("run.log"), verbose: opts.verbose };

    let mode = cfg.effective_mode();
    let data = Datasets::load(&cfg.manifest, cfg.fold, mode != MixMode::LabeledOnly)?;
    let classes = data.label_mode.classes();
    let pool_size = if mode == MixMode::LabeledOnly { data.labeled.size } else { data.unlabeled.size };
    let crop = if cfg.crop == 0 { pool_size } else { cfg.crop };
    let mask = cfg.mask_sampler(crop)?;
    let lowres_factor = cfg.lowres.map(|l| l.factor);
    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        mode,
        labeled_fraction: cfg.labeled_fraction,
        crop,
        mask,
        lowres_factor,
    };
    let mut stream = BatchStream::new(data.labeled.clone(), data.unlabeled.clone(), batch_cfg, stream_rng(cfg.seed, Stream::Batches, 0).random())?;
    let steps_per_epoch = if cfg.steps_per_epoch > 0 { cfg.steps_per_epoch } else { stream.steps_per_epoch() } as u64;
    let total = cfg.epochs as u64 * steps_per_epoch;
    let hash = cfg.raw.hash();

    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash && !opts.allow_config_change {
                return Err(Error::config(format!(
                    "{} was written under a different configuration; pass --allow-config-change to resume anyway",
                    path.display()
                )));
            }
            if ck.state.step > total {
                return Err(Error::config(format!("checkpoint is at step {}, beyond the configured {total}", ck.state.step)));
            }
            ck.state
        }
        None => GanState::new(cfg.generator_spec(crop)?, cfg.discriminator_spec(classes)?, cfg.g_adam, cfg.d_adam, cfg.seed)?,
    };
    if state.discriminator.spec().num_classes != classes {
        return Err(Error::config(format!("checkpoint has {} classes, the manifest {classes}", state.discriminator.spec().num_classes)));
    }
    state.discriminator.spec().check_resolution(crop)?;
    for _ in 0..state.step {
        stream.next_batch()?;
    }
    let remaining = total - state.step;
    let mut source = if cfg.prefetch > 0 {
        let (rx, h) = stream.prefetch(remaining as usize, cfg.prefetch);
        Source::Prefetched(rx, Some(h))
    } else {
        Source::Inline(stream)
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = open_metrics(&metrics_path, state.step)?;
    let eval_path = out.join("eval.csv");
    if !eval_path.exists() {
        fs::write(&eval_path, format!("{}\n", eval_csv_header(classes))).at(&eval_path)?;
    }
    let append_eval = |row: String| -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&eval_path).at(&eval_path)?;
        writeln!(f, "{row}").at(&eval_path)
    };
    let protocol = EvalProtocol { crops: cfg.eval_crops, crop: cfg.eval_crop };
    let objective = cfg.step_objective();
    let save = |state: &GanState<f32>| -> Result<PathBuf> {
        let path = checkpoint_path(out, state.step);
        let epoch = state.step / steps_per_epoch.max(1);
        Checkpoint { config_text: config_text.clone(), config_hash: hash, epoch, state: state.clone() }.save(&path)?;
        Ok(path)
    };
    log.line(&format!(
        "variant {} | {} labeled, {} unlabeled, {} test | crop {crop} | {steps_per_epoch} steps/epoch, {total} steps | starting at step {}",
        cfg.objective.variant.name(),
        data.labeled.len(),
        data.unlabeled.len(),
        data.test.len(),
        state.step
    ))?;

    let mut last_saved = None;
    while state.step < total {
        let batch = source.next()?;
        let report = match train_step(&mut state, &batch.batch, &objective) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().at(&metrics_path)?;
                let saved = save(&state)?;
                return Err(Error::Runtime(format!("{e} (last good state saved to {})", saved.display())));
            }
        };
        let epoch = (state.step - 1) / steps_per_epoch + 1;
        if let Err(e) = metrics.write_all(csv_line(state.step, epoch, &report).as_bytes()) {
            let saved = save(&state)?;
            return Err(Error::Io { path: metrics_path.clone(), source: std::io::Error::new(e.kind(), format!("{e} (state saved to {})", saved.display())) });
        }
        if state.step % steps_per_epoch != 0 {
            continue;
        }
        metrics.flush().at(&metrics_path)?;
        let epoch = epoch as usize;
        log.line(&format!("epoch {epoch} step {} total_d {:.4} total_g {:.4} cls {:.4}", state.step, report.total_d, report.total_g, report.classification))?;
        if cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every) && !data.test.is_empty() {
            let r = evaluate_set(&state.discriminator, &data.test, protocol, data.score_mode(), cfg.seed, cfg.fold)?;
            append_eval(eval_csv_row("train", state.step, &r))?;
            log.line(&summary_block(&format!("test after epoch {epoch}"), &r))?;
        }
        if cfg.sample_every > 0 && epoch.is_multiple_of(cfg.sample_every) {
            if let (Some(gen), Some(m)) = (&state.generator, &mask) {
                let set = if data.test.is_empty() { &data.labeled } else { &data.test };
                let count = set.len().min(8);
                let mut rng = stream_rng(cfg.seed, Stream::Samples, state.step);
                let b = center_batch(set, &(0..count).collect::<Vec<_>>(), crop, Some(m), lowres_factor, &mut rng)?;
                let grid = inpainting_grid(gen, &b, &mut rng)?;
                let dir = out.join("samples");
                fs::create_dir_all(&dir).at(&dir)?;
                ppm::write(&dir.join(format!("grid_{}.ppm", state.step)), &grid)?;
            }
        }
        if cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every) {
            last_saved = Some(save(&state)?);
        }
    }
    metrics.flush().at(&metrics_path)?;
    drop(source);
    let mut checkpoint = match last_saved {
        Some(p) if p == checkpoint_path(out, state.step) => p,
        _ => save(&state)?,
    };

    let mut summary = RunSummary {
        checkpoint: checkpoint.clone(),
        steps: state.step,
        crop,
        test: None,
        pre_finetune_test: None,
        finetune: None,
        train_accuracy: 0.0,
        real_fake_accuracy: None,
    };
    let has_test = !data.test.is_empty();
    if let (Some(m), true, true) = (mask, has_test, state.generator.is_some()) {
        let acc = real_fake_accuracy(&state, &data.test, crop, m, cfg.seed)?;
        log.line(&format!("held-out real/fake accuracy: {acc:.4}"))?;
        summary.real_fake_accuracy = Some(acc);
    }
    if cfg.finetune.enabled {
        if has_test {
            let r = evaluate_set(&state.discriminator, &data.test, protocol, data.score_mode(), cfg.seed, cfg.fold)?;
            append_eval(eval_csv_row("pre_finetune", state.step, &r))?;
            log.line(&summary_block("test before fine-tuning", &r))?;
            summary.pre_finetune_test = Some(r);
        }
        let bs = if cfg.finetune.batch_size == 0 { cfg.batch_size } else { cfg.finetune.batch_size };
        let ft = fine_tune(&mut state.discriminator, &data.labeled, &cfg.finetune, bs, cfg.seed)?;
        log.line(&format!("fine-tuned for {} epochs, train accuracy {:.4}", ft.epochs, ft.train_accuracy))?;
        summary.finetune = Some(ft);
        checkpoint = out.join(format!("ckpt_{}_finetuned.bin", state.step));
        let epoch = state.step / steps_per_epoch.max(1);
        Checkpoint { config_text: config_text.clone(), config_hash: hash, epoch, state: state.clone() }.save(&checkpoint)?;
        summary.checkpoint = checkpoint.clone();
    }
    let train_protocol = EvalProtocol { crops: 1, crop: 0 };
    let tr = evaluate_set(&state.discriminator, &data.labeled, train_protocol, data.score_mode(), cfg.seed, cfg.fold)?;
    summary.train_accuracy = tr.accuracy;
    log.line(&format!("labeled-set accuracy: {:.4}", tr.accuracy))?;
    if has_test {
        let r = evaluate_set(&state.discriminator, &data.test, protocol, data.score_mode(), cfg.seed, cfg.fold)?;
        append_eval(eval_csv_row("final", state.step, &r))?;
        log.line(&summary_block("final test", &r))?;
        summary.test = Some(r);
    }
    log.line(&format!("final checkpoint: {}", checkpoint.display()))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccgan_core::masking::MaskScheme;
    use ccgan_core::models::GeneratorSpec;

    fn set(n: usize, size: usize) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ImageSet {
            size,
            ids: (0..n).map(|i| format!("i{i}")).collect(),
            labels: (0..n).map(|i| crate::manifest::Label::Class(i % 2)).collect(),
            pixels: (0..n * 3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn grid_layout_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::<f32>::build(GeneratorSpec::context(3, 8, &[4, 8]), &mut rng).unwrap();
        let s = set(3, 8);
        let sampler = MaskSampler::new(MaskScheme::SingleSquare, (8, 8), (4, 4)).unwrap();
        let batch = center_batch(&s, &[0, 1, 2], 8, Some(&sampler), None, &mut rng).unwrap();
        let grid = inpainting_grid(&gen, &batch, &mut rng).unwrap();
        assert_eq!((grid.width, grid.height), (3 * 8 + 4 * GRID_GAP, 4 * 8 + 5 * GRID_GAP));
        let masks = batch.masks.as_ref().unwrap();
        for c in 0..3 {
            let (orig, masked, comp, raw) =
                (grid_cell(&grid, 0, c, 8, 8), grid_cell(&grid, 1, c, 8, 8), grid_cell(&grid, 2, c, 8, 8), grid_cell(&grid, 3, c, 8, 8));
            for y in 0..8 {
                for x in 0..8 {
                    if masks[c].keep()[y * 8 + x] {
                        assert_eq!(comp.get(x, y), orig.get(x, y));
                    } else {
                        assert_eq!(comp.get(x, y), raw.get(x, y));
                        assert_eq!(masked.get(x, y), [128; 3]);
                    }
                }
            }
        }
        // Separators stay black.
        assert!((0..grid.width).all(|x| grid.get(x, 0) == [0; 3]));
    }

    #[test]
    fn zero_epoch_fine_tune_leaves_the_classifier_alone() {
        use ccgan_core::models::DiscriminatorSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Discriminator::<f32>::build(DiscriminatorSpec::vgg(3, &[&[4], &[8]], 2), &mut rng).unwrap();
        let before = d.clone();
        let mut ft = FineTuneConfig {
            enabled: true,
            crop: 0,
            stop: StopRule::MaxEpochs,
            max_epochs: 0,
            adam: Default::default(),
            batch_size: 4,
        };
        let s = set(6, 8);
        let r = fine_tune(&mut d, &s, &ft, 4, 1).unwrap();
        assert_eq!(r.epochs, 0);
        assert_eq!(d, before);
        ft.max_epochs = 2;
        assert_eq!(fine_tune(&mut d, &s, &ft, 4, 1).unwrap().epochs, 2);
        assert_ne!(d, before);
        ft.crop = 6;
        assert!(fine_tune(&mut d, &s, &ft, 4, 1).is_err(), "6 is not divisible by the trunk's pooling");
    }

    #[test]
    fn crop_evaluation_degenerates_to_a_plain_pass() {
        use ccgan_core::models::DiscriminatorSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::<f32>::build(DiscriminatorSpec::vgg(3, &[&[4], &[8]], 2), &mut rng).unwrap();
        let s = set(5, 8);
        let plain = predict_set(&d, &s, EvalProtocol { crops: 1, crop: 0 }, ScoreMode::Softmax, 1).unwrap();
        let cropped = predict_set(&d, &s, EvalProtocol { crops: 1, crop: 8 }, ScoreMode::Softmax, 1).unwrap();
        assert_eq!(plain, cropped);
        for row in plain.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
