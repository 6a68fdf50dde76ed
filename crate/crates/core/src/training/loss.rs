use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLossKind {
    /// Mean squared error over every masked pixel entry.
    #[default]
    Mse,
    /// Euclidean norm of the residual of each sample, averaged over the batch.
    L2Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub normalize_pixel_targets: bool,
    #[serde(default)]
    pub recon: ReconLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 0.1,
            normalize_pixel_targets: true,
            recon: ReconLossKind::Mse,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls >= 0.0) || !self.lambda_cls.is_finite() {
            return Err(Error::Config {
                field: "lambda_cls".into(),
                reason: format!("must be a finite value >= 0, got {}", self.lambda_cls),
            });
        }
        Ok(())
    }
}

/// Standardizes each row to zero mean and unit (unbiased) variance.
pub fn normalize_target_patches(target: ArrayView2<f64>) -> Array2<f64> {
    let p = target.ncols();
    let mut out = target.to_owned();
    if p == 0 {
        return out;
    }
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / p as f64;
        let var = if p > 1 {
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p - 1) as f64
        } else {
            0.0
        };
        let denom = (var + TARGET_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

/// Reconstruction loss of one prediction/target pair and its gradient with
/// respect to the prediction. Targets are used as given; apply
/// [`normalize_target_patches`] beforehand when configured.
pub fn recon_loss(pred: &Array2<f64>, target: &Array2<f64>, kind: ReconLossKind) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.dim()),
            actual: format!("{:?}", pred.dim()),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, Array2::zeros(pred.dim())));
    }
    let diff = pred - target;
    match kind {
        ReconLossKind::Mse => {
            let count = diff.len() as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
            Ok((loss, diff * (2.0 / count)))
        }
        ReconLossKind::L2Norm => {
            let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            let grad = if norm > 0.0 { diff / norm } else { Array2::zeros(pred.dim()) };
            Ok((norm, grad))
        }
    }
}

/// `-(1/B) Σ ln o[i, t_i]` on probability rows.
pub fn cls_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} probability rows", labels.len()),
            actual: format!("{}", probs.nrows()),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (row, &t) in probs.axis_iter(Axis(0)).zip(labels) {
        if t >= k {
            return Err(Error::InvalidLabel { label: t, num_classes: k });
        }
        total -= row[t].ln();
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy of one logit vector via log-sum-exp, with `d loss / d logits`.
pub fn cross_entropy_logits(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            num_classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

pub fn total_loss(l_con: f64, l_cls: f64, cfg: &LossConfig) -> f64 {
    l_con + cfg.lambda_cls * l_cls
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::softmax;
    use ndarray::{array, Array};

    #[test]
    fn identical_prediction_has_zero_loss() {
        let g = Array::from_shape_fn((3, 12), |(i, j)| (i * 12 + j) as f64 * 0.1);
        let (l, grad) = recon_loss(&g, &g, ReconLossKind::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset_gives_one() {
        let g = Array::from_shape_fn((4, 6), |(i, j)| (i as f64) - (j as f64));
        let y = &g + 1.0;
        let (l, _) = recon_loss(&y, &g, ReconLossKind::Mse).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_zero() {
        let e = Array2::<f64>::zeros((0, 12));
        assert_eq!(recon_loss(&e, &e, ReconLossKind::Mse).unwrap().0, 0.0);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 3));
        assert!(matches!(recon_loss(&a, &b, ReconLossKind::Mse), Err(Error::Shape { .. })));
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let g = Array::from_shape_fn((2, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let y = Array::from_shape_fn((2, 5), |(i, j)| ((i + 2 * j) as f64).cos());
        for kind in [ReconLossKind::Mse, ReconLossKind::L2Norm] {
            let (_, grad) = recon_loss(&y, &g, kind).unwrap();
            let h = 1e-6;
            for idx in [(0, 0), (1, 3), (0, 4)] {
                let mut yp = y.clone();
                yp[idx] += h;
                let mut ym = y.clone();
                ym[idx] -= h;
                let fd = (recon_loss(&yp, &g, kind).unwrap().0 - recon_loss(&ym, &g, kind).unwrap().0) / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-6, "{kind:?} {idx:?}: {fd} vs {}", grad[idx]);
            }
            if kind == ReconLossKind::Mse {
                let expect = (&y - &g) * (2.0 / 10.0);
                for (a, b) in grad.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn normalized_targets_have_zero_mean_unit_variance() {
        let g = array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let n = normalize_target_patches(g.view());
        let row = n.row(0);
        assert!(row.sum().abs() < 1e-12);
        let var = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
        // Unbiased variance of [1,2,3,4] is 5/3; eps shifts it slightly.
        assert!((var - (5.0 / 3.0) / (5.0 / 3.0 + TARGET_NORM_EPS)).abs() < 1e-12);
        assert!(n.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cls_loss_values() {
        let one_hot = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cls_loss(&one_hot, &[0, 1]).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 4), 0.25);
        assert!((cls_loss(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        let probs = array![[0.9, 0.1], [0.2, 0.8]];
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let got = cls_loss(&probs, &[0, 1]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.1643).abs() < 1e-4);
        assert!(matches!(cls_loss(&probs, &[0, 2]), Err(Error::InvalidLabel { label: 2, .. })));
    }

    #[test]
    fn logit_form_equals_probability_form() {
        let logits = [2.0, -1.0, 0.5, 3.0];
        for label in 0..4 {
            let (l, grad) = cross_entropy_logits(&logits, label).unwrap();
            let p = softmax(&logits);
            let probs = Array2::from_shape_vec((1, 4), p.clone()).unwrap();
            assert!((l - cls_loss(&probs, &[label]).unwrap()).abs() < 1e-12);
            for k in 0..4 {
                let expect = p[k] - if k == label { 1.0 } else { 0.0 };
                assert!((grad[k] - expect).abs() < 1e-12);
            }
        }
        // Extreme logits stay finite.
        let (l, _) = cross_entropy_logits(&[1000.0, -1000.0], 1).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda_cls, 0.1);
        assert!((total_loss(0.5, 1.0, &cfg) - 0.6).abs() < 1e-15);
        let mae = LossConfig { lambda_cls: 0.0, ..cfg };
        assert_eq!(total_loss(0.37, 5.0, &mae), 0.37);
        assert!(LossConfig { lambda_cls: -0.1, ..cfg }.validate().is_err());
    }
}
