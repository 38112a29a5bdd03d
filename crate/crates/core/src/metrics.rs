//! Classification accuracy, average precision, and crop-averaged scoring.

use alloc::vec::Vec;

use rand::Rng;

use crate::augment::random_crop;
use crate::error::{config_err, contract, Result};
use crate::models::Discriminator;
use crate::objectives::ClassTargets;
use crate::{Mode, Scalar, Tape, Tensor};

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(contract!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(contract!("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of an `N x C` score matrix.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let &[_, c] = scores.shape() else {
        return Err(contract!("expected N x C scores, got {:?}", scores.shape()));
    };
    Ok(scores.data().chunks(c).map(argmax).collect())
}

/// All-points average precision.
///
/// Samples are ranked by descending score, ties kept in original order. The
/// result is the mean, over positive samples, of the precision at each
/// positive's rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(contract!("{} scores for {} targets", scores.len(), positives.len()));
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(contract!("average precision is undefined without positives"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract!("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// AP per class; `None` for classes without a positive in the evaluated set.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean of the defined per-class APs.
    pub map: f64,
    pub fold_id: Option<usize>,
    pub count: usize,
}

/// Scores an `N x C` matrix of post-activation class scores against targets.
///
/// Single-label accuracy is top-1; multi-label accuracy is the fraction of
/// `(sample, class)` decisions correct at threshold 0.5. Unlabeled rows are
/// an error.
pub fn evaluate(scores: &Tensor<f64>, targets: &ClassTargets, fold_id: Option<usize>) -> Result<EvalResult> {
    let &[n, c] = scores.shape() else {
        return Err(contract!("expected N x C scores, got {:?}", scores.shape()));
    };
    let positives: Vec<Vec<bool>> = match targets {
        ClassTargets::Single(l) if l.len() == n => l
            .iter()
            .map(|t| {
                let t = t.ok_or_else(|| contract!("evaluation rows must be labeled"))?;
                if t >= c {
                    return Err(contract!("label {t} out of range for {c} classes"));
                }
                Ok((0..c).map(|k| k == t).collect())
            })
            .collect::<Result<_>>()?,
        ClassTargets::Multi(l) if l.len() == n => l
            .iter()
            .map(|t| match t {
                Some(v) if v.len() == c => Ok(v.clone()),
                Some(v) => Err(contract!("{}-entry label vector for {c} classes", v.len())),
                None => Err(contract!("evaluation rows must be labeled")),
            })
            .collect::<Result<_>>()?,
        _ => return Err(contract!("{n} score rows but targets of another length")),
    };
    if n == 0 {
        return Err(contract!("evaluation of an empty set"));
    }
    let rows: Vec<&[f64]> = scores.data().chunks(c).collect();
    let accuracy = match targets {
        ClassTargets::Single(l) => {
            let preds: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
            let labels: Vec<usize> = l.iter().map(|t| t.expect("checked")).collect();
            accuracy(&preds, &labels)?
        }
        ClassTargets::Multi(_) => {
            let correct = rows
                .iter()
                .zip(&positives)
                .flat_map(|(r, p)| r.iter().zip(p).map(|(&s, &y)| (s >= 0.5) == y))
                .filter(|&ok| ok)
                .count();
            correct as f64 / (n * c) as f64
        }
    };
    let mut per_class_ap = Vec::with_capacity(c);
    for k in 0..c {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = positives.iter().map(|p| p[k]).collect();
        per_class_ap.push(if pos.contains(&true) { Some(average_precision(&col, &pos)?) } else { None });
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = mean_std(&defined)?.0;
    Ok(EvalResult { accuracy, per_class_ap, map, fold_id, count: n })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(contract!("mean of an empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, libm::sqrt(var)))
}

/// How logits are turned into class scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Softmax,
    Sigmoid,
}

/// Post-activation class scores of a batch, in infer mode.
pub fn predict_scores<T: Scalar>(disc: &Discriminator<T>, images: &Tensor<T>, mode: ScoreMode) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let params = disc.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    // Dropout is inactive in infer mode, so the rng is never drawn from.
    let mut idle = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = disc.forward_frozen(&mut tape, &params, x, Mode::Infer, &mut idle)?;
    let logits = tape.value(out.logits).cast::<f64>();
    let &[_, c] = logits.shape() else { unreachable!("linear head output is N x C") };
    let mut data = logits.into_data();
    match mode {
        ScoreMode::Sigmoid => data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + libm::exp(-*v))),
        ScoreMode::Softmax => {
            for row in data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
                row.iter_mut().for_each(|v| *v = libm::exp(*v - m) / z);
            }
        }
    }
    Tensor::new(&[data.len() / c, c], data)
}

/// Mean class scores over `n_crops` uniformly placed `crop x crop` windows of each image.
///
/// Crops of one image are scored together; images are processed in order so
/// the result depends only on the rng state.
pub fn crop_averaged_predict<T: Scalar, R: Rng + ?Sized>(
    disc: &Discriminator<T>,
    images: &Tensor<T>,
    n_crops: usize,
    crop: usize,
    mode: ScoreMode,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    if n_crops == 0 {
        return Err(config_err!("at least one crop is required"));
    }
    let (n, _, _, _) = images.dims4()?;
    let mut out = Vec::new();
    let mut classes = 0;
    for i in 0..n {
        let image = images.slice_rows(i, 1)?;
        let crops = (0..n_crops).map(|_| random_crop(&image, crop, rng).map(|c| c.0)).collect::<Result<Vec<_>>>()?;
        let scores = predict_scores(disc, &Tensor::stack_rows(&crops)?, mode)?;
        classes = scores.shape()[1];
        for k in 0..classes {
            let s: f64 = (0..n_crops).map(|j| scores.data()[j * classes + k]).sum();
            out.push(s / n_crops as f64);
        }
    }
    Tensor::new(&[n, classes], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[true, false, true]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = average_precision(&[5.0, 4.0, 3.0, 2.0, 1.0], &[false, false, false, false, true]).unwrap();
        assert!((ap - 0.2).abs() < 1e-15);
        assert!(average_precision(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn ties_keep_original_order() {
        assert_eq!(average_precision(&[1.0, 1.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[1.0, 1.0], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn fold_statistics() {
        let (m, s) = mean_std(&[0.6, 0.8]).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).unwrap().1, 0.0);
    }

    #[test]
    fn evaluate_single_label() {
        let scores = Tensor::new(&[4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.6, 0.4]).unwrap();
        let t = ClassTargets::Single(vec![Some(0), Some(1), Some(1), Some(0)]);
        let r = evaluate(&scores, &t, Some(3)).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.count, 4);
        let aps: Vec<f64> = r.per_class_ap.iter().flatten().copied().collect();
        assert_eq!(r.map, (aps[0] + aps[1]) / 2.0);
    }
}
