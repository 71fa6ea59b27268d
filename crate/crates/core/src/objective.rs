//! Masked reconstruction loss across modalities.

use std::collections::BTreeMap;

use eomae_grad::{Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use crate::datamodel::Modality;
use crate::error::{Error, Result};
use crate::masking::{flatten_mask, VisibilityGrid};

pub const PATCH_STD_FLOOR: f64 = 1e-6;

/// How per-modality losses are reduced to one value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Average over modalities.
    #[default]
    Mean,
    /// Plain sum over modalities.
    Sum,
}

/// Loss applied to the categorical SEG modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    /// MSE on class indices scaled to [0, 1], like every other modality.
    #[default]
    Mse,
    /// Pixel-wise softmax cross-entropy; the SEG decoder emits `patch^2 * classes` logits per patch.
    CrossEntropy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub combine: CombineMode,
    pub seg_loss: SegLoss,
    pub normalize_per_patch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_modality: BTreeMap<Modality, f64>,
    pub masked_counts: BTreeMap<Modality, usize>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.per_modality.values().all(|v| v.is_finite())
    }
}

/// Mean squared error over the elements of masked rows only; 0 without masked rows.
pub fn masked_mse(pred: &Matrix, target: &Matrix, grid: &VisibilityGrid) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rows() != grid.len() {
        return Err(Error::Schema(format!(
            "prediction {:?}, target {:?} and grid of {} positions disagree",
            pred.shape(),
            target.shape(),
            grid.len()
        )));
    }
    let (_, masked) = flatten_mask(grid);
    if masked.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = masked
        .iter()
        .map(|&r| pred.row(r).iter().zip(target.row(r)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
        .sum();
    Ok(sum / (masked.len() * pred.cols()) as f64)
}

pub fn combine_losses(per_modality: &BTreeMap<Modality, f64>, mode: CombineMode) -> Result<f64> {
    if per_modality.is_empty() {
        return Err(Error::config("no modality losses to combine"));
    }
    let sum: f64 = per_modality.values().sum();
    Ok(match mode {
        CombineMode::Mean => sum / per_modality.len() as f64,
        CombineMode::Sum => sum,
    })
}

/// Reconstruction targets from patchified (already z-scored) rasters.
///
/// SEG targets are class indices, scaled by `1 / (classes - 1)` under the MSE
/// loss and left as raw indices under cross-entropy.
pub fn build_targets(
    patches: &BTreeMap<Modality, Matrix>,
    normalize_per_patch: bool,
    seg_classes: usize,
    seg_loss: SegLoss,
) -> BTreeMap<Modality, Matrix> {
    patches
        .iter()
        .map(|(&m, rows)| {
            let t = if m.is_categorical() {
                match seg_loss {
                    SegLoss::Mse => {
                        let s = if seg_classes > 1 { 1.0 / (seg_classes - 1) as f64 } else { 0.0 };
                        rows.map(|v| v * s)
                    }
                    SegLoss::CrossEntropy => rows.clone(),
                }
            } else if normalize_per_patch {
                let mut out = rows.clone();
                let n = rows.cols() as f64;
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(PATCH_STD_FLOOR);
                    row.iter_mut().for_each(|v| *v = (*v - mean) / std);
                }
                out
            } else {
                rows.clone()
            };
            (m, t)
        })
        .collect()
}

/// Graph version of [`masked_mse`].
pub fn masked_mse_var(g: &mut Graph, pred: Var, target: &Matrix, masked: &[usize]) -> Var {
    if masked.is_empty() {
        return g.constant(Matrix::scalar(0.0));
    }
    let p = g.gather_rows(pred, masked);
    let t = g.constant(target.gather_rows(masked));
    let d = g.sub(p, t);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Pixel-wise cross-entropy over masked patches. `pred` rows hold `patch^2`
/// groups of `classes` logits; `target` rows hold `patch^2` class indices.
pub fn masked_cross_entropy_var(g: &mut Graph, pred: Var, target: &Matrix, masked: &[usize], classes: usize) -> Var {
    if masked.is_empty() {
        return g.constant(Matrix::scalar(0.0));
    }
    let pixels = target.cols();
    let p = g.gather_rows(pred, masked);
    let p = g.reshape(p, masked.len() * pixels, classes);
    let labels: Vec<usize> = masked.iter().flat_map(|&r| target.row(r).iter().map(|&v| v as usize)).collect();
    g.softmax_cross_entropy(p, &labels)
}

pub fn combine_vars(g: &mut Graph, losses: &[Var], mode: CombineMode) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or_else(|| Error::config("no modality losses to combine"))?;
    let mut total = first;
    for &l in rest {
        total = g.add(total, l);
    }
    Ok(match mode {
        CombineMode::Mean => g.scale(total, 1.0 / losses.len() as f64),
        CombineMode::Sum => total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    #[test]
    fn perfect_prediction_is_zero() {
        let m = Matrix::from_fn(4, 3, |r, c| (r * c) as f64);
        let grid = VisibilityGrid::from_visible_indices(2, 2, &[1]);
        assert_eq!(masked_mse(&m, &m, &grid).unwrap(), 0.0);
    }

    #[test]
    fn single_masked_row_offset() {
        let mut pred = Matrix::from_fn(4, 4, |r, c| (r + 3 * c) as f64);
        let target = pred.clone();
        pred.row_mut(2).iter_mut().zip(target.row(2)).for_each(|(p, t)| *p = t + 1.0);
        let grid = VisibilityGrid::from_visible_indices(2, 2, &[0, 1, 3]);
        assert_eq!(masked_mse(&pred, &target, &grid).unwrap(), 1.0);
        // Also zero-target / unit-prediction on the lone masked row.
        let t0 = Matrix::zeros(4, 4);
        let mut p1 = Matrix::filled(4, 4, 7.0);
        p1.row_mut(2).iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(masked_mse(&p1, &t0, &grid).unwrap(), 1.0);
    }

    #[test]
    fn no_masked_rows_is_zero() {
        let grid = VisibilityGrid::all(2, 2, true);
        assert_eq!(masked_mse(&Matrix::filled(4, 2, 1.0), &Matrix::zeros(4, 2), &grid).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_loop() {
        let mut rng = stream(3, Purpose::Probe, 0);
        for _ in 0..50 {
            let (gh, gw, p) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6));
            let n = gh * gw;
            let pred = Matrix::from_fn(n, p, |_, _| rng.random_range(-3.0..3.0));
            let target = Matrix::from_fn(n, p, |_, _| rng.random_range(-3.0..3.0));
            let vis: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
            let grid = VisibilityGrid::from_visible_indices(gh, gw, &vis);
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                if vis.contains(&i) {
                    continue;
                }
                for j in 0..p {
                    let d = pred.get(i, j) - target.get(i, j);
                    sum += d * d;
                    count += 1;
                }
            }
            let oracle = if count == 0 { 0.0 } else { sum / count as f64 };
            assert!((masked_mse(&pred, &target, &grid).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn combine_examples() {
        let m: BTreeMap<_, _> = [(Modality::Rgb, 1.0), (Modality::Depth, 3.0)].into();
        assert_eq!(combine_losses(&m, CombineMode::Mean).unwrap(), 2.0);
        assert_eq!(combine_losses(&m, CombineMode::Sum).unwrap(), 4.0);
        let one: BTreeMap<_, _> = [(Modality::Eb, 0.7)].into();
        assert_eq!(combine_losses(&one, CombineMode::Mean).unwrap(), 0.7);
        assert_eq!(combine_losses(&one, CombineMode::Sum).unwrap(), 0.7);
        assert!(combine_losses(&BTreeMap::new(), CombineMode::Mean).is_err());
    }

    #[test]
    fn target_construction() {
        let rgb = Matrix::from_fn(2, 4, |r, c| (r * 4 + c) as f64);
        let seg = Matrix::from_vec(1, 4, vec![0.0, 4.0, 2.0, 4.0]);
        let constant = Matrix::filled(1, 4, 3.0);
        let patches: BTreeMap<_, _> = [(Modality::Rgb, rgb.clone()), (Modality::Seg, seg.clone()), (Modality::Depth, constant)].into();
        let raw = build_targets(&patches, false, 5, SegLoss::Mse);
        assert_eq!(raw[&Modality::Rgb], rgb);
        assert_eq!(raw[&Modality::Seg].data(), &[0.0, 1.0, 0.5, 1.0]);
        let norm = build_targets(&patches, true, 5, SegLoss::CrossEntropy);
        assert!(norm[&Modality::Depth].data().iter().all(|&v| v == 0.0));
        assert_eq!(norm[&Modality::Seg], seg);
        let r0 = norm[&Modality::Rgb].row(0);
        assert!(r0.iter().sum::<f64>().abs() < 1e-12);
    }
}
