//! The `ccgan` binary: exit codes and messages.

mod common;

use std::fs;
use std::process::{Command, Output};

fn ccgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccgan")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(ccgan(&["--help"]).status.code(), Some(0));
    assert_eq!(ccgan(&["--version"]).status.code(), Some(0));
    assert_eq!(ccgan(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(ccgan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ccgan(&["train"]).status.code(), Some(1));
    assert_eq!(ccgan(&["eval", "--manifest", "m.tsv"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("manifest.tsv");
    let cfg = common::tiny_recipe(dir.path(), &missing, "");
    let out = dir.path().join("run");
    let o = ccgan(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn bad_config_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "");
    let out = dir.path().join("run");
    for set in ["data.batch_size=1", "objective.variant=wgan", "nonsense.key=3", "mask.hole=40x40"] {
        let o = ccgan(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", set]);
        assert_eq!(o.status.code(), Some(1), "{set}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "));
    }
    let o = ccgan(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "lowres.factor=2", "--set", "objective.variant=supervised"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let ck = dir.path().join("broken.bin");
    fs::write(&ck, b"CCGANCKP\x01\x00\x00\x00garbage").unwrap();
    let o = ccgan(&["eval", "--checkpoint", ck.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.bin"));
}

#[test]
fn unknown_gradcheck_op_lists_the_valid_ones() {
    let o = ccgan(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conv2d"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(&dir.path().join("data"), common::tiny_spec(0));
    let cfg = common::tiny_recipe(dir.path(), &manifest, "");
    let run = dir.path().join("run");
    let o = ccgan(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stderr.is_empty());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("steps: 6"), "{stdout}");
    let ck = run.join("ckpt_6.bin");
    let o = ccgan(&["eval", "--checkpoint", ck.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stderr.is_empty());
    let csv = fs::read_to_string(run.join("ckpt_6.eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("checkpoint,step,fold,count,accuracy,map"));
}
