//! ROC AUC, the paired Wilcoxon signed-rank test and mean ± sample std.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("AUC needs both classes present (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("every paired difference is zero; the signed-rank test is undefined")]
    AllZero,
    #[error("no observations")]
    Empty,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney U over `n_pos · n_neg`; label 1 is the positive class.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClass { pos, neg });
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Largest `n` handled by full enumeration of sign assignments.
pub const EXACT_LIMIT: usize = 15;

/// Paired signed-rank test; zero differences are dropped.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if differences.is_empty() {
        return Err(StatsError::Empty);
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&nonzero).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;

    if n <= EXACT_LIMIT {
        let (mut le, mut ge) = (0u64, 0u64);
        for signs in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|&i| signs & (1 << i) != 0).map(|i| ranks[i]).sum();
            if w <= w_plus + 1e-9 {
                le += 1;
            }
            if w >= w_plus - 1e-9 {
                ge += 1;
            }
        }
        let count = (1u64 << n) as f64;
        let p = (2.0 * le.min(ge) as f64 / count).min(1.0);
        return Ok(WilcoxonResult {
            w_plus,
            w_minus,
            n,
            p_two_sided: p,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let z = (w_plus - mean).abs() / var.sqrt();
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_two_sided: (2.0 * (1.0 - normal.cdf(z))).min(1.0),
        exact: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    hits += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        let (s, l) = ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]);
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(StatsError::SingleClass { .. })));
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.p_two_sided, 2.0 / 32.0);
        assert_eq!(wilcoxon_signed_rank(&[1.0, -1.0]).unwrap().p_two_sided, 1.0);
        let nine = [-0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let r = wilcoxon_signed_rank(&nine).unwrap();
        assert_eq!(r.w_minus, 1.0);
        assert_eq!(r.p_two_sided, 4.0 / 512.0);
        assert_eq!(wilcoxon_signed_rank(&[0.0, 0.0]).unwrap_err(), StatsError::AllZero);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = wilcoxon_signed_rank(&[0.0, 1.0, 2.0, -0.5]).unwrap();
        let b = wilcoxon_signed_rank(&[1.0, 2.0, -0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normal_approximation_for_large_n() {
        let d: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&d).unwrap();
        assert!(!r.exact);
        assert!(r.p_two_sided < 1e-3);
    }

    #[test]
    fn mean_std_of_one_two_three() {
        let m = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]).unwrap().std, 0.0);
        assert!(mean_std(&[]).is_none());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(scores in prop::collection::vec(0u8..6, 2..30), flips in prop::collection::vec(any::<bool>(), 30)) {
            let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            let mut labels: Vec<usize> = flips[..scores.len()].iter().map(|&b| b as usize).collect();
            labels[0] = 0;
            labels[1] = 1;
            let auc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((auc - brute_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn wilcoxon_p_is_a_probability(d in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            if let Ok(r) = wilcoxon_signed_rank(&d) {
                prop_assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
                prop_assert!((r.w_plus + r.w_minus - (r.n * (r.n + 1)) as f64 / 2.0).abs() < 1e-9);
            }
        }
    }
}
