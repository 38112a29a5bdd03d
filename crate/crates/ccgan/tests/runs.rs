//! End-to-end runs on a tiny synthetic dataset: logs, resume, evaluation
//! sweeps and in-painting grids.

mod common;

use std::fs;
use std::path::Path;

use ccgan::checkpoint::Checkpoint;
use ccgan::cli::{self, EvalArgs, InpaintArgs};
use ccgan::manifest::{Manifest, Split};
use ccgan::ppm::{self, RgbImage};
use ccgan::trainer::METRICS_HEADER;

fn metrics(dir: &Path) -> String {
    fs::read_to_string(dir.join("metrics.csv")).unwrap()
}

#[test]
fn metrics_has_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.eval_every = 1\ntrain.sample_every = 2\n");
    let run = dir.path().join("run");
    let s = common::train(&cfg, &run, &[]);
    assert_eq!(s.steps, 6);
    let text = metrics(&run);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 7);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), METRICS_HEADER.split(',').count());
        assert_eq!(f[0].parse::<usize>().unwrap(), i + 1);
        assert_eq!(f[1].parse::<usize>().unwrap(), i / 3 + 1);
        assert!(f[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    for step in [3, 6] {
        assert!(run.join(format!("ckpt_{step}.bin")).is_file());
    }
    assert!(run.join("samples").join("grid_6.ppm").is_file());
    let eval = fs::read_to_string(run.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().filter(|l| l.starts_with("train,")).count(), 2, "{eval}");
    assert_eq!(eval.lines().filter(|l| l.starts_with("final,6,")).count(), 1, "{eval}");
    assert!(!run.join(".lock").exists());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "");
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    common::train(&cfg, &whole, &[]);
    common::train(&cfg, &split, &["train.epochs=1"]);
    // Steps past the checkpoint are discarded on resume.
    let mut partial = metrics(&split);
    partial.push_str("4,2,9,9,9,9,9,9,9\n");
    fs::write(split.join("metrics.csv"), partial).unwrap();
    common::try_train(&cfg, &split, &[], Some(split.join("ckpt_3.bin"))).unwrap();
    assert_eq!(metrics(&whole), metrics(&split));
    assert_eq!(fs::read(whole.join("ckpt_6.bin")).unwrap(), fs::read(split.join("ckpt_6.bin")).unwrap());
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "");
    let run = dir.path().join("run");
    common::train(&cfg, &run, &["train.epochs=1"]);
    let e = common::try_train(&cfg, &run, &["optim.lr=0.001"], Some(run.join("ckpt_3.bin"))).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
}

#[test]
fn fold_sweep_reports_mean_and_missing_folds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(2));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.epochs = 1\n");
    let sweep = dir.path().join("sweep");
    fs::create_dir(&sweep).unwrap();
    for fold in 0..2 {
        let run = dir.path().join(format!("fold{fold}"));
        common::train(&cfg, &run, &[&format!("data.fold={fold}")]);
        fs::copy(run.join("ckpt_3.bin"), sweep.join(format!("ckpt_fold{fold}.bin"))).unwrap();
    }
    let args = |pattern: &str| EvalArgs {
        checkpoint: None,
        manifest: manifest.clone(),
        crops: 1,
        crop: None,
        fold_glob: Some(sweep.join(pattern).display().to_string()),
        out: Some(dir.path().join("folds.csv")),
        seed: 0,
    };
    let mut out = Vec::new();
    cli::cmd_eval(&args("ckpt_fold*.bin"), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("fold 0: accuracy"), "{text}");
    assert!(text.contains("fold 1: accuracy"), "{text}");
    assert!(text.contains("accuracy over 2 folds: "), "{text}");
    let csv = fs::read_to_string(dir.path().join("folds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let e = cli::cmd_eval(&args("ckpt_fold0.bin"), &mut Vec::new()).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("missing checkpoints for folds 1"), "{e}");
}

#[test]
fn eval_rejects_a_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.epochs = 1\n");
    let run = dir.path().join("run");
    common::train(&cfg, &run, &[]);
    let other = common::synth(&dir.path().join("five"), ccgan::synth::SynthSpec { classes: 5, ..common::tiny_spec(0) });
    let args = EvalArgs {
        checkpoint: Some(run.join("ckpt_3.bin")),
        manifest: other,
        crops: 1,
        crop: None,
        fold_glob: None,
        out: None,
        seed: 0,
    };
    let e = cli::cmd_eval(&args, &mut Vec::new()).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
}

#[test]
fn inpainting_grid_partitions_context_and_hole() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.epochs = 1\n");
    let run = dir.path().join("run");
    common::train(&cfg, &run, &[]);
    let m = Manifest::load(&manifest).unwrap();
    let originals: Vec<RgbImage> = m.split(Split::Test).take(5).map(|e| ppm::read(&m.path_of(e)).unwrap()).collect();
    for (at, hole) in [(None, None), (Some("2,5"), Some("6x9"))] {
        let out = dir.path().join("grid.ppm");
        let args = InpaintArgs {
            checkpoint: run.join("ckpt_3.bin"),
            images: Vec::new(),
            manifest: Some(manifest.clone()),
            count: 5,
            hole: hole.map(str::to_string),
            at: at.map(str::to_string),
            scheme: "single_square".into(),
            squares: 2,
            percent: 25,
            lowres: None,
            seed: 4,
            out: out.clone(),
        };
        cli::cmd_inpaint(&args, &mut Vec::new()).unwrap();
        let holes = fs::read_to_string(dir.path().join("grid.holes.tsv")).unwrap();
        assert_eq!(common::check_partition(&ppm::read(&out).unwrap(), &holes, &originals, 16), Ok(5 * 16 * 16));
        if let Some(h) = hole {
            assert!(holes.lines().skip(1).all(|l| l.ends_with(&format!("2\t5\t{}", h.replace('x', "\t")))), "{holes}");
        }
    }
}

#[test]
fn inpaint_rejects_a_mismatched_lowres_factor() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.epochs = 1\nlowres.factor = 2\nlowres.injection = input\n");
    let run = dir.path().join("run");
    common::train(&cfg, &run, &[]);
    let args = |lowres| InpaintArgs {
        checkpoint: run.join("ckpt_3.bin"),
        images: Vec::new(),
        manifest: Some(manifest.clone()),
        count: 2,
        hole: None,
        at: None,
        scheme: "single_square".into(),
        squares: 2,
        percent: 25,
        lowres,
        seed: 0,
        out: dir.path().join("g.ppm"),
    };
    assert_eq!(cli::cmd_inpaint(&args(Some(4)), &mut Vec::new()).unwrap_err().exit_code(), 1);
    assert_eq!(cli::cmd_inpaint(&args(None), &mut Vec::new()).unwrap_err().exit_code(), 1);
    cli::cmd_inpaint(&args(Some(2)), &mut Vec::new()).unwrap();
    // Rows: original, masked, low-res, composite, raw.
    let grid = ppm::read(&dir.path().join("g.ppm")).unwrap();
    assert_eq!(grid.height, 5 * 16 + 6 * 2);
}

#[test]
fn checkpoints_reload_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "train.epochs = 1\n");
    let run = dir.path().join("run");
    common::train(&cfg, &run, &[]);
    let bytes = fs::read(run.join("ckpt_3.bin")).unwrap();
    let ck = Checkpoint::load(&run.join("ckpt_3.bin")).unwrap();
    assert_eq!(ck.state.step, 3);
    assert_eq!(ck.to_bytes(), bytes);
}
