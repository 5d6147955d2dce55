//! Naive double-loop reference for the contrastive objective.
//!
//! Used only to verify the vectorized implementation: plain scalar loops, no
//! matrix products, no log-sum-exp shifting, no shared code with the
//! production path. Slow on purpose.

use ndarray::ArrayView2;

use crate::dataio::BrandId;

use super::LossConfig;

fn dot(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..a.ncols() {
        s += a[[i, k]] * b[[j, k]];
    }
    s
}

/// One directed term, literal form: for each anchor and each positive, the
/// negated log of exp(s_ip/tau) over the sum of exp(s_ij/tau) for j in the
/// denominator set.
fn directed_naive(
    zu: ArrayView2<f64>,
    zv: ArrayView2<f64>,
    labels: &[BrandId],
    tau: f64,
    same_view: bool,
    include_self_in_same_view: bool,
    denominator_includes_positives: bool,
) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..n {
            let is_positive = if same_view {
                labels[i] == labels[p] && (p != i || include_self_in_same_view)
            } else {
                labels[i] == labels[p]
            };
            if !is_positive {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..n {
                if same_view && j == i {
                    continue; // the anchor's own column never normalizes itself
                }
                let j_positive = if same_view {
                    labels[i] == labels[j] && (j != i || include_self_in_same_view)
                } else {
                    labels[i] == labels[j]
                };
                if j_positive && !denominator_includes_positives {
                    continue;
                }
                denom += (dot(zu, i, zv, j) / tau).exp();
            }
            total -= ((dot(zu, i, zv, p) / tau).exp() / denom).ln();
        }
    }
    total
}

fn count_summands(
    labels: &[BrandId],
    same_view: bool,
    include_self_in_same_view: bool,
) -> usize {
    let n = labels.len();
    let mut c = 0;
    for i in 0..n {
        for p in 0..n {
            let is_positive = if same_view {
                labels[i] == labels[p] && (p != i || include_self_in_same_view)
            } else {
                labels[i] == labels[p]
            };
            if is_positive {
                c += 1;
            }
        }
    }
    c
}

/// Reference value of the full four-term objective.
pub fn loss_oracle(
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
    labels: &[BrandId],
    config: &LossConfig,
) -> f64 {
    let tau = config.tau;
    let self_in = config.include_self_in_same_view;
    let inc = config.denominator_includes_positives;
    let mut v = directed_naive(za, zb, labels, tau, false, self_in, inc)
        + directed_naive(zb, za, labels, tau, false, self_in, inc)
        + directed_naive(za, za, labels, tau, true, self_in, inc)
        + directed_naive(zb, zb, labels, tau, true, self_in, inc);
    if config.mean_reduction {
        let summands =
            2 * count_summands(labels, false, self_in) + 2 * count_summands(labels, true, self_in);
        if summands > 0 {
            v /= summands as f64;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_case_minus_four() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = vec![
            BrandId::new("a").unwrap(),
            BrandId::new("b").unwrap(),
        ];
        let cfg = LossConfig {
            tau: 1.0,
            ..Default::default()
        };
        let v = loss_oracle(z.view(), z.view(), &labels, &cfg);
        assert!((v - (-4.0)).abs() < 1e-9, "got {v}");
    }
}
