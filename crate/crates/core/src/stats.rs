//! Paired nonparametric tests, effect sizes and multiple-comparison control.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest sample size for which the Wilcoxon null distribution is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
/// Exact Page test when `n_subjects * k!` does not exceed this.
pub const PAGE_ENUMERATION_BUDGET: u64 = 1_000_000;
/// Cap on the convolution work of the exact Page distribution.
pub const PAGE_CONVOLUTION_BUDGET: u64 = 500_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("degenerate: no nonzero pairs")]
    NoNonzeroPairs,
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("page test needs k >= 3 treatments, got {0}")]
    TooFewTreatments(usize),
    #[error("subject {subject} has {got} values, expected {expected}")]
    MissingCell {
        subject: usize,
        got: usize,
        expected: usize,
    },
    #[error("predicted order is not a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("relative change undefined for a zero baseline")]
    ZeroBaseline,
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
}

impl fmt::Display for PMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PMethod::Exact => "exact",
            PMethod::NormalApprox => "normal_approx",
        })
    }
}

/// Star code: `***` below 0.001, `**` below 0.01, `*` below 0.05, else `n.s.`.
pub fn significance_code(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "n.s."
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test_name: String,
    /// Pairs used (after dropping zero differences).
    pub n: usize,
    pub n_zero_dropped: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub method: PMethod,
    pub q_value: Option<f64>,
    pub effect_size: Option<f64>,
}

impl TestReport {
    /// Code from the q-value when FDR has been applied, else from p.
    pub fn significance_code(&self) -> &'static str {
        significance_code(self.q_value.unwrap_or(self.p_value))
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided paired Wilcoxon signed-rank test on the differences.
///
/// Zero differences are dropped. For up to [`WILCOXON_EXACT_MAX_N`] pairs
/// the null distribution of W+ is counted exactly over all sign assignments
/// (ranks doubled so tied half-ranks stay integral); beyond that a normal
/// approximation with tie and continuity corrections is used. The reported
/// statistic is min(W+, W−).
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestReport, StatsError> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(StatsError::NoNonzeroPairs);
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    // + 0.0 turns the -0.0 of an empty sum into 0.0
    let stat = w_plus.min(w_minus) + 0.0;

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        // counts[s] = number of sign assignments with 2·W+ == s
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] > 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let cutoff = (stat * 2.0).round() as usize;
        let tail: f64 = counts[..=cutoff].iter().sum();
        let all = 2f64.powi(n as i32);
        ((2.0 * tail / all).min(1.0), PMethod::Exact)
    } else {
        let mean = total / 2.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((stat - mean).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * standard_normal().sf(z)).min(1.0)
        };
        (p, PMethod::NormalApprox)
    };
    Ok(TestReport {
        test_name: "wilcoxon_signed_rank".to_string(),
        n,
        n_zero_dropped: diffs.len() - n,
        statistic: stat,
        p_value: p,
        method,
        q_value: None,
        effect_size: None,
    })
}

/// Paired effect size: mean difference over its sample standard deviation.
pub fn cohens_dz(diffs: &[f64]) -> Result<f64, StatsError> {
    let n = diffs.len();
    if n < 2 {
        return Err(StatsError::TooFew { needed: 2, got: n });
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean / var.sqrt())
}

/// Benjamini–Hochberg step-up adjustment; q-values come back in input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (pos, &i) in order.iter().enumerate().rev() {
        // m / rank first, so the top p-value is multiplied by exactly 1
        let adjusted = p_values[i] * (m as f64 / (pos + 1) as f64);
        running = running.min(adjusted);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

/// `100 · (after − before) / before`.
pub fn relative_delta(before: f64, after: f64) -> Result<f64, StatsError> {
    if before == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (after - before) / before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedTestReport {
    pub l_statistic: f64,
    pub n_subjects: usize,
    pub k_treatments: usize,
    pub p_value: f64,
    pub method: PMethod,
}

/// Smallest and largest per-subject contribution to L for `k` treatments.
pub fn page_contribution_bounds(k: usize) -> (f64, f64) {
    let max: usize = (1..=k).map(|j| j * j).sum();
    let min: usize = (1..=k).map(|j| j * (k + 1 - j)).sum();
    (min as f64, max as f64)
}

/// Expected value and variance of L under the null.
pub fn page_null_moments(n_subjects: usize, k: usize) -> (f64, f64) {
    let (n, k) = (n_subjects as f64, k as f64);
    let mean = n * k * (k + 1.0).powi(2) / 4.0;
    let var = n * k * k * (k + 1.0) * (k * k - 1.0) / 144.0;
    (mean, var)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn factorial(k: usize) -> u64 {
    (1..=k as u64).product()
}

/// Page test for ordered alternatives.
///
/// `matrix[subject][treatment]` holds the observations; `predicted_order`
/// lists treatment columns from hypothesised largest to hypothesised smallest.
/// Within each subject values are ranked ascending (average ranks for ties)
/// and L = Σ_j c_j R_j where c_j is the predicted rank (1 = hypothesised
/// smallest). Large L supports the ordering; the p-value is one-sided.
pub fn page_test(matrix: &[Vec<f64>], predicted_order: &[usize]) -> Result<OrderedTestReport, StatsError> {
    let k = predicted_order.len();
    if k < 3 {
        return Err(StatsError::TooFewTreatments(k));
    }
    let mut seen = vec![false; k];
    for &t in predicted_order {
        if t >= k || std::mem::replace(&mut seen[t], true) {
            return Err(StatsError::BadOrder(k));
        }
    }
    let n = matrix.len();
    if n == 0 {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    // weight[col] = predicted rank of that treatment
    let mut weight = vec![0usize; k];
    for (r, &col) in predicted_order.iter().enumerate() {
        weight[col] = k - r;
    }
    let mut subject_ranks = Vec::with_capacity(n);
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != k {
            return Err(StatsError::MissingCell {
                subject: i,
                got: row.len(),
                expected: k,
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        subject_ranks.push(average_ranks(row));
    }
    let l: f64 = subject_ranks
        .iter()
        .map(|ranks| ranks.iter().zip(&weight).map(|(r, &c)| r * c as f64).sum::<f64>())
        .sum();

    let max_contrib2 = 2 * page_contribution_bounds(k).1 as u64;
    let conv_work = factorial(k) * max_contrib2 * (n as u64) * (n as u64 + 1) / 2;
    let exact = (n as u64).saturating_mul(factorial(k)) <= PAGE_ENUMERATION_BUDGET
        && conv_work <= PAGE_CONVOLUTION_BUDGET;
    let (p, method) = if exact {
        // distribution of 2L: convolution of each subject's permutation distribution
        let perms = permutations(&(0..k).collect::<Vec<_>>());
        let mut dist = vec![1f64];
        for ranks in &subject_ranks {
            let doubled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
            let mut contrib = vec![0f64; max_contrib2 as usize + 1];
            for perm in &perms {
                let v: u64 = perm.iter().zip(&weight).map(|(&src, &c)| doubled[src] * c as u64).sum();
                contrib[v as usize] += 1.0;
            }
            let mut next = vec![0f64; dist.len() + contrib.len() - 1];
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (b, &pb) in contrib.iter().enumerate() {
                    if pb != 0.0 {
                        next[a + b] += pa * pb;
                    }
                }
            }
            let total: f64 = next.iter().sum();
            for x in &mut next {
                *x /= total;
            }
            dist = next;
        }
        let observed = (l * 2.0).round() as usize;
        let upper: f64 = dist.iter().skip(observed).sum();
        (upper.min(1.0), PMethod::Exact)
    } else {
        let (mean, var) = page_null_moments(n, k);
        let z = (l - mean) / var.sqrt();
        (standard_normal().sf(z), PMethod::NormalApprox)
    };
    Ok(OrderedTestReport {
        l_statistic: l,
        n_subjects: n,
        k_treatments: k,
        p_value: p,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_mixed_signs() {
        let r = wilcoxon_signed_rank(&[1.0, -2.0, 3.0, -4.0, 5.0]).unwrap();
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_value - 0.8125).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_all_positive() {
        let r = wilcoxon_signed_rank(&[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_drops_zeros_and_rejects_all_zero() {
        let r = wilcoxon_signed_rank(&[0.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.n_zero_dropped, 2);
        assert_eq!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(StatsError::NoNonzeroPairs));
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let diffs: Vec<f64> = (1..=40).map(|i| if i % 5 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        assert_eq!(r.method, PMethod::NormalApprox);
        // W- = 180, E = 410, sd = sqrt(5535)
        assert!(r.p_value > 0.001 && r.p_value < 0.01);
        let balanced: Vec<f64> = (1..=40).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        assert!(wilcoxon_signed_rank(&balanced).unwrap().p_value > 0.5);
    }

    #[test]
    fn dz_values() {
        assert!((cohens_dz(&[1.0, 2.0, 3.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cohens_dz(&[4.0, 4.0]), Err(StatsError::ZeroVariance));
        assert!((cohens_dz(&[-1.0, -2.0, -3.0]).unwrap() + 2.0).abs() < 1e-15);
        assert!(cohens_dz(&[1.0]).is_err());
    }

    #[test]
    fn bh_examples() {
        let q = bh_fdr(&[0.01, 0.02, 0.03, 0.04]).unwrap();
        for v in q {
            assert!((v - 0.04).abs() < 1e-15);
        }
        assert_eq!(bh_fdr(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(bh_fdr(&[0.04, 0.01]).unwrap(), vec![0.04, 0.02]);
        assert!(bh_fdr(&[1.2]).is_err());
        assert!(bh_fdr(&[]).unwrap().is_empty());
    }

    #[test]
    fn relative_deltas() {
        assert!((relative_delta(18.25, 15.57).unwrap() + 14.684931506849315).abs() < 1e-9);
        assert!((relative_delta(2.40, 2.73).unwrap() - 13.75).abs() < 1e-9);
        assert_eq!(relative_delta(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(relative_delta(0.0, 1.0), Err(StatsError::ZeroBaseline));
    }

    #[test]
    fn page_single_subject_extremes() {
        let order = [0, 1, 2, 3];
        let best = page_test(&[vec![4.0, 3.0, 2.0, 1.0]], &order).unwrap();
        assert_eq!(best.l_statistic, 30.0);
        assert!((best.p_value - 1.0 / 24.0).abs() < 1e-12);
        let worst = page_test(&[vec![1.0, 2.0, 3.0, 4.0]], &order).unwrap();
        assert_eq!(worst.l_statistic, 20.0);
        assert!((worst.p_value - 1.0).abs() < 1e-12);
        assert_eq!(page_contribution_bounds(4), (20.0, 30.0));
        let (m, v) = page_null_moments(1, 4);
        assert_eq!(m, 25.0);
        assert!((v - 25.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn page_order_argument_permutes_columns() {
        // columns in scrambled order; the prediction still matches exactly
        let p = page_test(&[vec![2.0, 4.0, 1.0, 3.0]], &[1, 3, 0, 2]).unwrap();
        assert_eq!(p.l_statistic, 30.0);
    }

    #[test]
    fn page_errors() {
        assert_eq!(page_test(&[vec![1.0, 2.0]], &[0, 1]), Err(StatsError::TooFewTreatments(2)));
        assert!(matches!(
            page_test(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0]], &[0, 1, 2]),
            Err(StatsError::MissingCell { subject: 1, .. })
        ));
        assert_eq!(page_test(&[vec![1.0, 2.0, 3.0]], &[0, 0, 2]), Err(StatsError::BadOrder(3)));
    }

    #[test]
    fn page_large_uses_normal() {
        let rows: Vec<Vec<f64>> = (0..50_000).map(|i| vec![4.0, 3.0 + (i % 2) as f64 * 0.0, 2.0, 1.0]).collect();
        let r = page_test(&rows, &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.method, PMethod::NormalApprox);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn codes() {
        assert_eq!(significance_code(0.0005), "***");
        assert_eq!(significance_code(0.005), "**");
        assert_eq!(significance_code(0.03), "*");
        assert_eq!(significance_code(0.05), "n.s.");
    }
}
