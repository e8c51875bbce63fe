//! Evaluation statistics: ROC AUC with DeLong placements, the paired DeLong
//! test, percentile bootstrap intervals, sensitivity/specificity and mask
//! overlap.
//!
//! Ties are handled with midranks everywhere, so a tied positive/negative
//! pair always counts one half.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// For each positive, the fraction of negatives it outranks.
    pub placement_pos: Vec<f64>,
    /// For each negative, the fraction of positives that outrank it.
    pub placement_neg: Vec<f64>,
}

/// 1-based midranks of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end (0-based) share rank (start+1 + end) / 2
        let rank = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn check_binary(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Invalid(format!("label {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let (m, n) = (pos.len(), neg.len());
    if m == 0 || n == 0 {
        return Err(Error::UndefinedAuc);
    }
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let placement_pos: Vec<f64> = (0..m).map(|i| (r_all[i] - r_pos[i]) / n as f64).collect();
    let placement_neg: Vec<f64> = (0..n)
        .map(|j| 1.0 - (r_all[m + j] - r_neg[j]) / m as f64)
        .collect();
    let auc = placement_pos.iter().sum::<f64>() / m as f64;
    Ok(RocResult {
        auc,
        n_pos: m,
        n_neg: n,
        placement_pos,
        placement_neg,
    })
}

/// AUC of each column of `scores` against the matching label column;
/// `None` where a column has a single class.
pub fn per_class_auc(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>) -> Result<Vec<Option<f64>>> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!("scores {:?} vs labels {:?}", scores.dim(), labels.dim())));
    }
    (0..scores.ncols())
        .map(|n| {
            let s = scores.column(n).to_vec();
            let l = labels.column(n).to_vec();
            match auc(&s, &l) {
                Ok(r) => Ok(Some(r.auc)),
                Err(Error::UndefinedAuc) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeLongComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Variance of `auc_a - auc_b`.
    pub variance_diff: f64,
    pub z_statistic: f64,
    /// Two-sided, standard normal.
    pub p_value: f64,
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len();
    if k < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / k as f64;
    let my = y.iter().sum::<f64>() / k as f64;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (k - 1) as f64
}

/// Paired DeLong test of two score vectors on the same labelled samples.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLongComparison> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape(format!("{} vs {} scores", scores_a.len(), scores_b.len())));
    }
    let ra = auc(scores_a, labels)?;
    let rb = auc(scores_b, labels)?;
    let (m, n) = (ra.n_pos as f64, ra.n_neg as f64);
    let s10 = covariance(&ra.placement_pos, &ra.placement_pos) + covariance(&rb.placement_pos, &rb.placement_pos)
        - 2.0 * covariance(&ra.placement_pos, &rb.placement_pos);
    let s01 = covariance(&ra.placement_neg, &ra.placement_neg) + covariance(&rb.placement_neg, &rb.placement_neg)
        - 2.0 * covariance(&ra.placement_neg, &rb.placement_neg);
    let variance_diff = (s10 / m + s01 / n).max(0.0);
    let diff = ra.auc - rb.auc;
    let (z_statistic, p_value) = if variance_diff > 0.0 {
        let z = diff / variance_diff.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        return Err(Error::ZeroVariance {
            auc_a: ra.auc,
            auc_b: rb.auc,
        });
    };
    Ok(DeLongComparison {
        auc_a: ra.auc,
        auc_b: rb.auc,
        variance_diff,
        z_statistic,
        p_value,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the AUC at confidence `level`.
///
/// Replicate `b` draws from its own ChaCha stream `b` under `seed`, so the
/// result depends only on the inputs. Resamples holding a single class are
/// discarded and redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], n_boot: usize, seed: u64, level: f64) -> Result<(f64, f64)> {
    if n_boot < 100 {
        return Err(Error::Invalid(format!("n_boot must be >= 100, got {n_boot}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("level must lie in (0, 1), got {level}")));
    }
    auc(scores, labels)?;
    let f = scores.len();
    let mut s = vec![0.0; f];
    let mut l = vec![0u8; f];
    let mut aucs = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        loop {
            for k in 0..f {
                let idx = rng.random_range(0..f);
                s[k] = scores[idx];
                l[k] = labels[idx];
            }
            match auc(&s, &l) {
                Ok(r) => {
                    aucs.push(r.auc);
                    break;
                }
                Err(Error::UndefinedAuc) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    aucs.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((
        quantile_sorted(&aucs, alpha / 2.0),
        quantile_sorted(&aucs, 1.0 - alpha / 2.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    /// Both masks were empty; dice and iou are 1 by convention.
    pub both_empty: bool,
}

pub fn dice_iou(pred: &[bool], truth: &[bool]) -> Result<Overlap> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} vs {} mask pixels", pred.len(), truth.len())));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(Overlap {
            dice: 1.0,
            iou: 1.0,
            both_empty: true,
        });
    }
    let union = a + b - inter;
    Ok(Overlap {
        dice: 2.0 * inter as f64 / (a + b) as f64,
        iou: inter as f64 / union as f64,
        both_empty: false,
    })
}

/// `TP / P` and `TN / N` of binary predictions against binary truth.
pub fn sensitivity_specificity(pred: &[u8], truth: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    check_binary(pred)?;
    check_binary(truth)?;
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&x, &t) in pred.iter().zip(truth) {
        if t == 1 {
            p += 1;
            tp += usize::from(x == 1);
        } else {
            n += 1;
            tn += usize::from(x == 0);
        }
    }
    if p == 0 || n == 0 {
        return Err(Error::SingleClassTruth);
    }
    Ok((tp as f64 / p as f64, tn as f64 / n as f64))
}

pub fn binarize(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        acc += 1.0;
                    } else if scores[i] == scores[j] {
                        acc += 0.5;
                    }
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().auc, 1.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap().auc, 0.75);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap().auc, 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn self_comparison_has_unit_p_value() {
        let s = [0.1, 0.5, 0.3, 0.9, 0.35, 0.6];
        let l = [0, 1, 0, 1, 1, 0];
        let c = delong_test(&s, &s, &l).unwrap();
        assert_eq!(c.p_value, 1.0);
        assert_eq!(c.z_statistic, 0.0);
    }

    #[test]
    fn symmetric_construction_gives_zero_z() {
        // b permutes scores within each class, so both AUCs count the same pairs
        let a = [0.1, 0.5, 0.3, 0.9, 0.35, 0.6, 0.2, 0.7];
        let l = [0, 1, 0, 1, 1, 0, 0, 1];
        let b = [0.6, 0.9, 0.2, 0.35, 0.7, 0.1, 0.3, 0.5];
        let c = delong_test(&a, &b, &l).unwrap();
        assert_eq!(c.auc_a, c.auc_b);
        assert!(c.z_statistic.abs() < 1e-10);
    }

    #[test]
    fn zero_variance_with_different_aucs_is_an_error() {
        // a separates perfectly, b inverts perfectly: every placement is constant
        let l = [0, 0, 1, 1];
        let a = [0.1, 0.2, 0.8, 0.9];
        let b = [0.9, 0.8, 0.2, 0.1];
        assert!(matches!(delong_test(&a, &b, &l), Err(Error::ZeroVariance { .. })));
    }

    #[test]
    fn delong_variance_matches_pair_kernel() {
        // two readers scoring the same cases; variance from the explicit pair kernel
        let l = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let a = [5.0, 4.0, 4.0, 3.0, 5.0, 1.0, 2.0, 3.0, 1.0, 2.0, 1.0];
        let b = [4.0, 5.0, 3.0, 5.0, 4.0, 2.0, 1.0, 1.0, 3.0, 1.0, 2.0];
        let c = delong_test(&a, &b, &l).unwrap();
        let pos: Vec<usize> = (0..11).filter(|&i| l[i] == 1).collect();
        let neg: Vec<usize> = (0..11).filter(|&i| l[i] == 0).collect();
        let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        let v10 = |s: &[f64]| -> Vec<f64> {
            pos.iter().map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / neg.len() as f64).collect()
        };
        let v01 = |s: &[f64]| -> Vec<f64> {
            neg.iter().map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / pos.len() as f64).collect()
        };
        let d10: Vec<f64> = v10(&a).iter().zip(v10(&b)).map(|(x, y)| x - y).collect();
        let d01: Vec<f64> = v01(&a).iter().zip(v01(&b)).map(|(x, y)| x - y).collect();
        let var = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64
        };
        let expected = var(&d10) / pos.len() as f64 + var(&d01) / neg.len() as f64;
        assert!((c.variance_diff - expected).abs() < 1e-14);
        assert!((c.auc_a - pair_count_auc(&a, &l)).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_is_deterministic_and_degenerate_when_separated() {
        let s = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let l = [0, 0, 0, 1, 1, 1];
        assert_eq!(bootstrap_ci(&s, &l, 200, 7, 0.95).unwrap(), (1.0, 1.0));
        let s = [0.1, 0.6, 0.3, 0.7, 0.2, 0.9, 0.4, 0.5];
        let l = [0, 0, 1, 1, 0, 1, 1, 0];
        let a = bootstrap_ci(&s, &l, 300, 42, 0.95).unwrap();
        assert_eq!(a, bootstrap_ci(&s, &l, 300, 42, 0.95).unwrap());
        assert!(a.0 <= a.1);
        assert!(bootstrap_ci(&s, &l, 99, 42, 0.95).is_err());
    }

    #[test]
    fn overlap_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice_iou(&a, &a).unwrap().dice, 1.0);
        let o = dice_iou(&a, &[false, false, true, true]).unwrap();
        assert_eq!((o.dice, o.iou), (0.0, 0.0));
        let o = dice_iou(&[true, true, true, true, false, false], &[false, false, true, true, true, true]).unwrap();
        assert_eq!(o.dice, 0.5);
        let o = dice_iou(&[false; 3], &[false; 3]).unwrap();
        assert!(o.both_empty && o.dice == 1.0 && o.iou == 1.0);
    }

    #[test]
    fn half_overlapping_masks() {
        // |A| = |B| = 3, |A and B| = 2, |A or B| = 4
        let a = [true, true, true, false];
        let b = [false, true, true, true];
        let o = dice_iou(&a, &b).unwrap();
        assert!((o.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(o.iou, 0.5);
    }

    #[test]
    fn sens_spec_cases() {
        assert_eq!(sensitivity_specificity(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(sensitivity_specificity(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), (0.0, 0.0));
        assert_eq!(
            sensitivity_specificity(&[1, 0, 0, 0, 0, 0, 0, 1], &[1, 1, 1, 1, 0, 0, 0, 0]).unwrap(),
            (0.25, 0.75)
        );
        assert!(matches!(sensitivity_specificity(&[1, 0], &[1, 1]), Err(Error::SingleClassTruth)));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting_and_is_rank_invariant(
            data in proptest::collection::vec((0u8..20, 0u8..2), 2..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 20.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let r = auc(&scores, &labels).unwrap();
            prop_assert!((r.auc - pair_count_auc(&scores, &labels)).abs() < 1e-12);
            let mean_neg = r.placement_neg.iter().sum::<f64>() / r.n_neg as f64;
            prop_assert!((mean_neg - r.auc).abs() < 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&transformed, &labels).unwrap().auc, r.auc);
        }

        #[test]
        fn dice_is_symmetric_and_bounds_iou(
            a in proptest::collection::vec(any::<bool>(), 1..50),
            seed in any::<u64>()
        ) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let ab = dice_iou(&a, &b).unwrap();
            let ba = dice_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.iou <= ab.dice && (0.0..=1.0).contains(&ab.dice));
        }
    }
}
