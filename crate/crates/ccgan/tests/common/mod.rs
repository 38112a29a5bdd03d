//! Small datasets and recipes shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use ccgan::cli::{self, TrainArgs};
use ccgan::ppm::RgbImage;
use ccgan::synth::{self, SynthSpec};
use ccgan::trainer::{grid_cell, RunSummary};

pub fn synth(dir: &Path, spec: SynthSpec) -> PathBuf {
    synth::write_dataset(&spec, dir).unwrap();
    dir.join("manifest.tsv")
}

/// 16x16 images: 6 labeled, 60 unlabeled, 12 test.
pub fn tiny_spec(folds: usize) -> SynthSpec {
    SynthSpec { classes: 3, resolution: 16, labeled: 6, unlabeled: 60, test: 12, folds, seed: 11 }
}

/// A CC-GAN recipe small enough to train in well under a second per step.
pub fn tiny_recipe(dir: &Path, manifest: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "data.manifest = {}\n\
         data.batch_size = 4\n\
         data.labeled_fraction = 0.5\n\
         model.g_ladder = 4,8\n\
         model.d_stages = 4|8\n\
         objective.variant = cc_gan\n\
         mask.scheme = single_square\n\
         mask.hole = 8x8\n\
         train.epochs = 2\n\
         train.steps_per_epoch = 3\n\
         train.checkpoint_every = 1\n\
         {extra}",
        manifest.display()
    );
    let path = dir.join("recipe.cfg");
    fs::write(&path, text).unwrap();
    path
}

pub fn train(config: &Path, out: &Path, sets: &[&str]) -> RunSummary {
    try_train(config, out, sets, None).unwrap()
}

pub fn try_train(config: &Path, out: &Path, sets: &[&str], resume: Option<PathBuf>) -> ccgan::Result<RunSummary> {
    let args = TrainArgs {
        config: config.to_path_buf(),
        sets: sets.iter().map(|s| s.to_string()).collect(),
        out: Some(out.to_path_buf()),
        resume,
        allow_config_change: false,
        quiet: true,
    };
    cli::cmd_train(&args)
}

/// Checks every column of an in-painting grid against its hole list: the
/// original row reproduces the input, the composite equals the original
/// outside the hole and the raw output inside it, and the masked input is
/// mid-gray in the hole. Returns the number of pixels compared.
pub fn check_partition(grid: &RgbImage, holes: &str, originals: &[RgbImage], size: usize) -> Result<usize, String> {
    let mut hole_of: Vec<Option<[usize; 4]>> = vec![None; originals.len()];
    for l in holes.lines().skip(1) {
        let f: Vec<usize> = l.split('\t').map(|v| v.parse().map_err(|_| format!("bad hole line '{l}'"))).collect::<Result<_, _>>()?;
        let slot = hole_of.get_mut(f[0]).ok_or_else(|| format!("hole for unknown column {}", f[0]))?;
        *slot = Some([f[1], f[2], f[3], f[4]]);
    }
    let mut compared = 0;
    for (col, original) in originals.iter().enumerate() {
        let [top, left, h, w] = hole_of[col].ok_or_else(|| format!("column {col} has no hole"))?;
        let cells: Vec<RgbImage> = (0..4).map(|r| grid_cell(grid, r, col, size, size)).collect();
        if &cells[0] != original {
            return Err(format!("column {col}: original row differs from the input"));
        }
        for y in 0..size {
            for x in 0..size {
                let in_hole = y >= top && y < top + h && x >= left && x < left + w;
                let (composite, masked) = (cells[2].get(x, y), cells[1].get(x, y));
                let (want_composite, want_masked) =
                    if in_hole { (cells[3].get(x, y), [128; 3]) } else { (original.get(x, y), original.get(x, y)) };
                if composite != want_composite || masked != want_masked {
                    return Err(format!("column {col} pixel ({y}, {x}) in_hole={in_hole}: composite {composite:?} masked {masked:?}"));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}
