//! Batch-wise supervised contrastive loss over two views.
//!
//! For row-normalized view matrices `Z_a`, `Z_b` (n x d) with brand labels,
//! the total objective sums four directed terms
//!
//! ```text
//! L = l(Z_a, Z_b) + l(Z_b, Z_a) + l(Z_a, Z_a) + l(Z_b, Z_b)
//! ```
//!
//! where each directed term accumulates, for every anchor `i` and every
//! positive index `p` in `P(i)`,
//!
//! ```text
//! -log [ exp(z_i^u . z_p^v / tau) / sum_{j in D(i)} exp(z_i^u . z_j^v / tau) ]
//! ```
//!
//! Under the default configuration the denominator set `D(i)` contains the
//! batch *negatives only* (different-brand columns; the anchor's own column is
//! excluded in the same-view terms), so positive pairs never compete against
//! each other. Setting `denominator_includes_positives` widens `D(i)` to every
//! column except the same-view self column, which recovers the usual
//! supervised-contrastive normalization for comparison runs.
//!
//! Anchors with an empty positive set contribute zero, which keeps the
//! objective well-defined for batches containing singleton brands.
//!
//! Everything here computes in `f64`; the n x n term is a negligible cost next
//! to the encoder, and the gradient checks need the headroom.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::BrandId;

pub mod reference;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch must contain at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("anchor {0} has no negatives in the batch (single-brand batch?)")]
    NoNegatives(usize),
    #[error("anchor {anchor} has {positives} positive(s) but an empty denominator set")]
    EmptyDenominator { anchor: usize, positives: usize },
    #[error("embedding row {0} is not unit-norm (|norm - 1| = {1:.3e})")]
    NotUnitNorm(usize, f64),
    #[error("non-finite value in embeddings or similarities")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Positive-pair masks for one labelled batch.
///
/// `cross_view[i][p]` is true iff rows `i` and `p` share a brand; its diagonal
/// is all true because row `i` of the opposite view is the same logo.
/// `same_view` additionally clears the diagonal: a row is not its own positive
/// within one view under the default convention.
#[derive(Debug, Clone)]
pub struct PositiveMask {
    pub cross_view: Array2<bool>,
    pub same_view: Array2<bool>,
}

/// Knobs of the contrastive objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Treat row i as its own positive in the same-view terms.
    pub include_self_in_same_view: bool,
    /// Widen the denominator from negatives-only to all non-self columns.
    pub denominator_includes_positives: bool,
    /// Divide the summed loss by the number of (anchor, positive) summands.
    /// Off by default: the objective is a plain double sum. Not a manifest
    /// key; flip it programmatically when comparing learning rates.
    #[serde(skip)]
    pub mean_reduction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            include_self_in_same_view: false,
            denominator_includes_positives: false,
            mean_reduction: false,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::BadTemperature(self.tau));
        }
        Ok(())
    }
}

/// Build the positive masks for a labelled batch.
///
/// Rejects batches of fewer than two rows and single-brand batches (every
/// anchor needs at least one negative).
pub fn positive_sets(labels: &[BrandId]) -> Result<PositiveMask, LossError> {
    let n = labels.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let cross_view = Array2::from_shape_fn((n, n), |(i, p)| labels[i] == labels[p]);
    for i in 0..n {
        if (0..n).all(|j| cross_view[[i, j]]) {
            return Err(LossError::NoNegatives(i));
        }
    }
    let same_view = Array2::from_shape_fn((n, n), |(i, p)| i != p && labels[i] == labels[p]);
    Ok(PositiveMask {
        cross_view,
        same_view,
    })
}

/// Whether a directed term compares a view against itself. Same-view terms
/// never admit the anchor's own column into the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ViewRelation {
    CrossView,
    SameView,
}

struct DirectedResult {
    value: f64,
    /// d(term)/d(S) where S = Z_u . Z_v^T.
    grad_s: Array2<f64>,
    /// One entry per (anchor, positive) summand: the -log ratio itself.
    terms: Vec<f64>,
    summands: usize,
}

fn directed_core(
    zu: ArrayView2<f64>,
    zv: ArrayView2<f64>,
    mask: &Array2<bool>,
    tau: f64,
    relation: ViewRelation,
    include_positives: bool,
) -> Result<DirectedResult, LossError> {
    let n = zu.nrows();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if zv.nrows() != n || zu.ncols() != zv.ncols() {
        return Err(LossError::Shape(format!(
            "Z_u is {:?}, Z_v is {:?}",
            zu.shape(),
            zv.shape()
        )));
    }
    if mask.nrows() != n || mask.ncols() != n {
        return Err(LossError::Shape(format!(
            "mask is {:?} for batch of {n}",
            mask.shape()
        )));
    }

    let sims = zu.dot(&zv.t());
    if sims.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }

    let mut grad_s = Array2::<f64>::zeros((n, n));
    let mut terms = Vec::new();
    let mut value = 0.0;
    let mut summands = 0usize;

    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| mask[[i, p]]).collect();
        if positives.is_empty() {
            continue;
        }
        // Denominator column set. The anchor's own same-view column never
        // participates; its cross-view column is a genuine positive and
        // follows the mask (excluded by default, admitted under the widened
        // denominator).
        let denom: Vec<usize> = (0..n)
            .filter(|&j| {
                let own_column = j == i && relation == ViewRelation::SameView;
                if own_column {
                    return false;
                }
                include_positives || !mask[[i, j]]
            })
            .collect();
        if denom.is_empty() {
            return Err(LossError::EmptyDenominator {
                anchor: i,
                positives: positives.len(),
            });
        }

        // Max-shifted log-sum-exp over the denominator columns.
        let mut max_s = f64::NEG_INFINITY;
        for &j in &denom {
            max_s = max_s.max(sims[[i, j]] / tau);
        }
        let mut sum_exp = 0.0;
        for &j in &denom {
            sum_exp += (sims[[i, j]] / tau - max_s).exp();
        }
        let lse = max_s + sum_exp.ln();

        let p_count = positives.len() as f64;
        for &p in &positives {
            let term = lse - sims[[i, p]] / tau;
            terms.push(term);
            value += term;
            summands += 1;
            grad_s[[i, p]] -= 1.0 / tau;
        }
        for &j in &denom {
            let softmax = (sims[[i, j]] / tau - lse).exp();
            grad_s[[i, j]] += p_count * softmax / tau;
        }
    }

    Ok(DirectedResult {
        value,
        grad_s,
        terms,
        summands,
    })
}

/// One directed term of the objective: anchors in `Z_u`, positives/negatives
/// drawn from `Z_v` according to `mask`. This is the cross-view form; the
/// anchor's own column participates exactly as the mask dictates.
pub fn directed_loss(
    zu: ArrayView2<f64>,
    zv: ArrayView2<f64>,
    mask: &Array2<bool>,
    tau: f64,
) -> Result<f64, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    check_unit_rows(zu)?;
    check_unit_rows(zv)?;
    let relation = if (0..mask.nrows()).all(|i| !mask[[i, i]]) {
        ViewRelation::SameView
    } else {
        ViewRelation::CrossView
    };
    Ok(directed_core(zu, zv, mask, tau, relation, false)?.value)
}

/// Per-summand `-log` ratios of one directed term, for diagnostics and the
/// bound checks (each lies within `log |D(i)| ± 2/tau` for unit-norm rows).
pub fn directed_loss_terms(
    zu: ArrayView2<f64>,
    zv: ArrayView2<f64>,
    mask: &Array2<bool>,
    tau: f64,
    same_view: bool,
) -> Result<Vec<f64>, LossError> {
    let relation = if same_view {
        ViewRelation::SameView
    } else {
        ViewRelation::CrossView
    };
    Ok(directed_core(zu, zv, mask, tau, relation, false)?.terms)
}

fn check_unit_rows(z: ArrayView2<f64>) -> Result<(), LossError> {
    for (i, row) in z.outer_iter().enumerate() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(LossError::NonFinite);
        }
        if (norm - 1.0).abs() > 1e-5 {
            return Err(LossError::NotUnitNorm(i, (norm - 1.0).abs()));
        }
    }
    Ok(())
}

/// Total objective for one labelled two-view batch.
pub fn total_loss(
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
    labels: &[BrandId],
    config: &LossConfig,
) -> Result<f64, LossError> {
    Ok(total_loss_grad(za, zb, labels, config)?.0)
}

/// Total objective plus gradients with respect to the (already normalized)
/// view matrices.
pub fn total_loss_grad(
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
    labels: &[BrandId],
    config: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    config.validate()?;
    if za.nrows() != labels.len() || zb.nrows() != labels.len() {
        return Err(LossError::Shape(format!(
            "{} labels for Z_a {:?} / Z_b {:?}",
            labels.len(),
            za.shape(),
            zb.shape()
        )));
    }
    check_unit_rows(za)?;
    check_unit_rows(zb)?;
    let masks = positive_sets(labels)?;
    let same_mask = if config.include_self_in_same_view {
        &masks.cross_view
    } else {
        &masks.same_view
    };
    let tau = config.tau;
    let inc = config.denominator_includes_positives;

    let ab = directed_core(za, zb, &masks.cross_view, tau, ViewRelation::CrossView, inc)?;
    let ba = directed_core(zb, za, &masks.cross_view, tau, ViewRelation::CrossView, inc)?;
    let aa = directed_core(za, za, same_mask, tau, ViewRelation::SameView, inc)?;
    let bb = directed_core(zb, zb, same_mask, tau, ViewRelation::SameView, inc)?;

    let mut grad_a = Array2::<f64>::zeros(za.raw_dim());
    let mut grad_b = Array2::<f64>::zeros(zb.raw_dim());

    // l(Z_a, Z_b): S = Z_a Z_b^T, dZ_a += G Z_b, dZ_b += G^T Z_a.
    grad_a += &ab.grad_s.dot(&zb);
    grad_b += &ab.grad_s.t().dot(&za);
    // l(Z_b, Z_a)
    grad_b += &ba.grad_s.dot(&za);
    grad_a += &ba.grad_s.t().dot(&zb);
    // l(Z_a, Z_a): both operands are Z_a.
    grad_a += &aa.grad_s.dot(&za);
    grad_a += &aa.grad_s.t().dot(&za);
    // l(Z_b, Z_b)
    grad_b += &bb.grad_s.dot(&zb);
    grad_b += &bb.grad_s.t().dot(&zb);

    let mut value = ab.value + ba.value + aa.value + bb.value;
    let total_summands = ab.summands + ba.summands + aa.summands + bb.summands;
    if config.mean_reduction && total_summands > 0 {
        let scale = 1.0 / total_summands as f64;
        value *= scale;
        grad_a *= scale;
        grad_b *= scale;
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((value, grad_a, grad_b))
}

/// Row-normalize a matrix; returns the normalized rows and their norms.
pub fn normalize_rows(y: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>), LossError> {
    let mut z = y.to_owned();
    let mut norms = Vec::with_capacity(y.nrows());
    for (i, mut row) in z.outer_iter_mut().enumerate() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(LossError::NonFinite);
        }
        if norm < 1e-12 {
            return Err(LossError::NotUnitNorm(i, 1.0));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((z, norms))
}

/// Objective and gradients with respect to *pre-normalization* view matrices:
/// the rows of `ya`/`yb` are normalized internally and the gradient is
/// propagated back through that normalization. This is the form the training
/// loop and the finite-difference checks consume.
pub fn total_loss_grad_pre_norm(
    ya: ArrayView2<f64>,
    yb: ArrayView2<f64>,
    labels: &[BrandId],
    config: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let (za, norms_a) = normalize_rows(ya)?;
    let (zb, norms_b) = normalize_rows(yb)?;
    let (value, gza, gzb) = total_loss_grad(za.view(), zb.view(), labels, config)?;
    Ok((
        value,
        normalize_backward(&za, &norms_a, &gza),
        normalize_backward(&zb, &norms_b, &gzb),
    ))
}

/// Backprop through row normalization: for z = y/|y|,
/// dL/dy = (g - (g . z) z) / |y| with g = dL/dz.
pub fn normalize_backward(z: &Array2<f64>, norms: &[f64], grad_z: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(z.raw_dim());
    for i in 0..z.nrows() {
        let zi = z.row(i);
        let gi = grad_z.row(i);
        let dot: f64 = zi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
        for j in 0..z.ncols() {
            out[[i, j]] = (gi[j] - dot * zi[j]) / norms[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brands(names: &[&str]) -> Vec<BrandId> {
        names.iter().map(|n| BrandId::new(*n).unwrap()).collect()
    }

    #[test]
    fn masks_for_singleton_classes() {
        let m = positive_sets(&brands(&["a", "b"])).unwrap();
        assert_eq!(m.cross_view, array![[true, false], [false, true]]);
        assert_eq!(m.same_view, array![[false, false], [false, false]]);
    }

    #[test]
    fn masks_for_mixed_batch() {
        let m = positive_sets(&brands(&["a", "a", "b"])).unwrap();
        assert!(m.cross_view[[0, 1]] && m.cross_view[[1, 0]]);
        assert!(m.cross_view[[0, 0]] && m.cross_view[[2, 2]]);
        assert!(!m.cross_view[[0, 2]]);
        assert!(m.same_view[[0, 1]] && m.same_view[[1, 0]]);
        assert!(!m.same_view[[0, 0]]);
        // cross_view symmetry
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.cross_view[[i, j]], m.cross_view[[j, i]]);
            }
        }
    }

    #[test]
    fn single_brand_batch_rejected() {
        assert!(matches!(
            positive_sets(&brands(&["a", "a"])),
            Err(LossError::NoNegatives(0))
        ));
        assert!(matches!(
            positive_sets(&brands(&["x"])),
            Err(LossError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn orthonormal_two_brand_case() {
        // Z_u = Z_v = I rows; labels [A, B]; tau = 1.
        // Each anchor: -log(exp(1)/exp(0)) = -1, so the directed value is -2.
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = brands(&["a", "b"]);
        let masks = positive_sets(&labels).unwrap();
        let v = directed_loss(z.view(), z.view(), &masks.cross_view, 1.0).unwrap();
        assert!((v - (-2.0)).abs() < 1e-9, "got {v}");

        let cfg = LossConfig {
            tau: 1.0,
            ..Default::default()
        };
        let total = total_loss(z.view(), z.view(), &labels, &cfg).unwrap();
        // same-view terms have empty positive sets and contribute zero
        assert!((total - (-4.0)).abs() < 1e-9, "got {total}");
    }

    #[test]
    fn all_equal_rows_give_zero() {
        let r = [0.6f64, 0.8];
        let z = array![[r[0], r[1]], [r[0], r[1]]];
        let labels = brands(&["a", "b"]);
        let masks = positive_sets(&labels).unwrap();
        let v = directed_loss(z.view(), z.view(), &masks.cross_view, 0.07).unwrap();
        assert!(v.abs() < 1e-9, "got {v}");
    }

    #[test]
    fn swapping_views_is_symmetric() {
        let za = unit_rows(&[[0.3, -0.7, 0.2], [0.9, 0.1, 0.0], [-0.2, 0.5, 0.5]]);
        let zb = unit_rows(&[[0.1, 0.9, -0.3], [0.2, -0.6, 0.6], [0.8, 0.0, 0.4]]);
        let labels = brands(&["a", "a", "b"]);
        let cfg = LossConfig::default();
        let v1 = total_loss(za.view(), zb.view(), &labels, &cfg).unwrap();
        let v2 = total_loss(zb.view(), za.view(), &labels, &cfg).unwrap();
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn row_permutation_invariance() {
        let za = unit_rows(&[[0.3, -0.7, 0.2], [0.9, 0.1, 0.0], [-0.2, 0.5, 0.5]]);
        let zb = unit_rows(&[[0.1, 0.9, -0.3], [0.2, -0.6, 0.6], [0.8, 0.0, 0.4]]);
        let labels = brands(&["a", "a", "b"]);
        let cfg = LossConfig::default();
        let v1 = total_loss(za.view(), zb.view(), &labels, &cfg).unwrap();

        let perm = [2usize, 0, 1];
        let pa = permute_rows(&za, &perm);
        let pb = permute_rows(&zb, &perm);
        let pl: Vec<BrandId> = perm.iter().map(|&i| labels[i].clone()).collect();
        let v2 = total_loss(pa.view(), pb.view(), &pl, &cfg).unwrap();
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn non_unit_rows_rejected() {
        let z = array![[1.0, 1.0], [0.0, 1.0]];
        let labels = brands(&["a", "b"]);
        let cfg = LossConfig::default();
        assert!(matches!(
            total_loss(z.view(), z.view(), &labels, &cfg),
            Err(LossError::NotUnitNorm(0, _))
        ));
    }

    #[test]
    fn degenerate_prenorm_row_rejected() {
        let y = array![[0.0, 0.0], [0.0, 1.0]];
        assert!(normalize_rows(y.view()).is_err());
    }

    fn unit_rows<const N: usize, const D: usize>(rows: &[[f64; D]; N]) -> Array2<f64> {
        let mut z = Array2::zeros((N, D));
        for (i, r) in rows.iter().enumerate() {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in r.iter().enumerate() {
                z[[i, j]] = v / norm;
            }
        }
        z
    }

    fn permute_rows(z: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros(z.raw_dim());
        for (new_i, &old_i) in perm.iter().enumerate() {
            out.row_mut(new_i).assign(&z.row(old_i));
        }
        out
    }
}
