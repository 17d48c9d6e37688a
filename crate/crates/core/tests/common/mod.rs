//! Brute-force reference implementations used by the integration suites.
//! They share no code with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Population variance via the pairwise identity Σ_{i<j}(a_i − a_j)² / n².
pub fn pairwise_population_variance(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let mut acc = 0.0;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            acc += (s[i] - s[j]).powi(2);
        }
    }
    acc / (n * n)
}

pub fn successive_difference_mean(s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..s.len() {
        let d = s[i] - s[i - 1];
        acc += d * d;
    }
    acc / (s.len() - 1) as f64
}

pub fn sample_cv(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let mut pair = 0.0;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            pair += (s[i] - s[j]).powi(2);
        }
    }
    let var = pair / (n * (n - 1.0));
    let mut mean = 0.0;
    for &x in s {
        mean += x;
    }
    mean /= n;
    var.sqrt() / mean
}

/// Mid-ranks by counting: rank = #{smaller} + (#{equal} + 1) / 2.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&x| x < v).count() as f64;
            let equal = values.iter().filter(|&&x| x == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided signed-rank p by enumerating all 2ⁿ sign patterns:
/// P(min(W+, W−) ≤ observed min).
pub fn wilcoxon_enumerated(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let n = nz.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let mut wp = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                wp += r;
            }
        }
        if wp.min(total - wp) <= observed + 1e-9 {
            hits += 1;
        }
    }
    (observed, hits as f64 / (1u64 << n) as f64)
}

fn permutations(v: &[f64]) -> Vec<Vec<f64>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Page L and its one-sided p by enumerating every joint permutation of
/// each subject's within-row ranks. `weights[j]` is the predicted rank of
/// column j (1 = hypothesised smallest).
pub fn page_enumerated(matrix: &[Vec<f64>], weights: &[f64]) -> (f64, f64) {
    let rank_rows: Vec<Vec<f64>> = matrix.iter().map(|row| mid_ranks(row)).collect();
    let observed: f64 = rank_rows
        .iter()
        .map(|r| r.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    // each subject contributes one of its permuted scores
    let per_subject: Vec<Vec<f64>> = rank_rows
        .iter()
        .map(|r| {
            permutations(r)
                .into_iter()
                .map(|p| p.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect();
    fn walk(level: usize, acc: f64, per: &[Vec<f64>], threshold: f64, hits: &mut u64, total: &mut u64) {
        if level == per.len() {
            *total += 1;
            if acc >= threshold - 1e-9 {
                *hits += 1;
            }
            return;
        }
        for &s in &per[level] {
            walk(level + 1, acc + s, per, threshold, hits, total);
        }
    }
    let (mut hits, mut total) = (0, 0);
    walk(0, 0.0, &per_subject, observed, &mut hits, &mut total);
    (observed, hits as f64 / total as f64)
}

/// q_i = min(1, min over p_j ≥ p_i of p_j·m / #{p_k ≤ p_j}).
pub fn bh_direct(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter()
        .map(|&pi| {
            let mut best: f64 = 1.0;
            for &pj in p {
                if pj >= pi {
                    let rank = p.iter().filter(|&&pk| pk <= pj).count() as f64;
                    best = best.min(pj * m / rank);
                }
            }
            best
        })
        .collect()
}

/// Least squares through a QR factorisation.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty).expect("full column rank")
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
