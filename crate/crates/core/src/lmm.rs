//! Linear mixed-effects regression of unit-level information measures on
//! relative position, with per-story random intercepts and position slopes:
//!
//! ```text
//! y ~ position * condition + log(length) + (1 + position | story)
//! ```
//!
//! The random-effect covariance G (2×2) is parameterised by its log-Cholesky
//! factor and the residual variance by its log. The fixed effects are
//! profiled out by generalised least squares, and the remaining four
//! parameters are found by BFGS on the restricted (or full) log-likelihood.
//! Per-story blocks are handled through the 2×2 Woodbury identity, so the
//! cost of one evaluation is linear in the number of stories.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::stats::significance_code;
use crate::trace::Condition;

const GRADIENT_TOL: f64 = 1e-6;
const STEP_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;

/// One unit-level observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub position: f64,
    pub condition: Condition,
    /// Unit length in words.
    pub length: usize,
    pub story_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    MeanSurprisal,
    UidV,
}

impl Response {
    pub fn as_str(self) -> &'static str {
        match self {
            Response::MeanSurprisal => "mean_surprisal",
            Response::UidV => "uid_v",
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Reml,
    Ml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmmSpec {
    /// Conditions to model; empty means "whatever the rows contain".
    pub conditions: Vec<Condition>,
    pub baseline: Condition,
    pub include_log_length: bool,
    pub estimator: Estimator,
    pub max_iter: usize,
}

impl Default for LmmSpec {
    fn default() -> Self {
        Self {
            conditions: Vec::new(),
            baseline: Condition::U,
            include_log_length: true,
            estimator: Estimator::Reml,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmmError {
    #[error("need at least {needed} stories, got {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("story `{0}` has fewer than two observations")]
    SmallGroup(String),
    #[error("singular design: column `{0}` is not estimable")]
    SingularDesign(String),
    #[error("baseline condition {0} has no observations")]
    MissingBaseline(Condition),
    #[error("non-finite value in observation {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    /// Covariance of the fixed-effect estimates, row-major `terms × terms`.
    pub beta_cov: Vec<f64>,
    pub slope_by_condition: BTreeMap<Condition, f64>,
    pub slope_se: BTreeMap<Condition, f64>,
    /// Random-effect covariance (intercept, position).
    pub g: [[f64; 2]; 2],
    pub sigma2: f64,
    pub loglik: f64,
    pub estimator: Estimator,
    pub converged: bool,
    /// Response has no residual variation; estimates are least squares only.
    pub degenerate: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_obs: usize,
    pub n_groups: usize,
    /// Terms removed before fitting (e.g. a constant log length).
    pub dropped_terms: Vec<String>,
    /// Log-likelihood after each accepted optimizer step.
    pub loglik_path: Vec<f64>,
}

impl LmmFit {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.beta[i])
    }

    pub fn std_error(&self, term: &str) -> Option<f64> {
        let p = self.terms.len();
        self.terms.iter().position(|t| t == term).map(|i| self.beta_cov[i * p + i].sqrt())
    }
}

struct Group {
    ztz: Matrix2<f64>,
    /// Rows: intercept, position; columns: fixed-effect terms.
    ztx: [Vec<f64>; 2],
    zty: Vector2<f64>,
    n: usize,
}

struct Design {
    terms: Vec<String>,
    dropped: Vec<String>,
    conditions: Vec<Condition>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    groups: Vec<Group>,
}

impl Design {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn p(&self) -> usize {
        self.terms.len()
    }
}

fn interaction_name(c: Condition) -> String {
    format!("position:condition[{c}]")
}

fn build_design(rows: &[Observation], spec: &LmmSpec) -> Result<Design, LmmError> {
    for (i, r) in rows.iter().enumerate() {
        if !r.y.is_finite() || !r.position.is_finite() || r.length == 0 {
            return Err(LmmError::NonFinite(i));
        }
    }
    let mut rows: Vec<&Observation> = rows.iter().collect();
    rows.sort_by(|a, b| {
        a.story_id
            .cmp(&b.story_id)
            .then(a.condition.cmp(&b.condition))
            .then(a.position.total_cmp(&b.position))
            .then(a.length.cmp(&b.length))
            .then(a.y.total_cmp(&b.y))
    });

    let mut group_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *group_sizes.entry(r.story_id.as_str()).or_default() += 1;
    }
    if group_sizes.len() < 2 {
        return Err(LmmError::TooFewGroups { needed: 2, got: group_sizes.len() });
    }
    if let Some((id, _)) = group_sizes.iter().find(|(_, &n)| n < 2) {
        return Err(LmmError::SmallGroup(id.to_string()));
    }

    let present: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|c| rows.iter().any(|r| r.condition == *c))
        .collect();
    let conditions = if spec.conditions.is_empty() {
        present.clone()
    } else {
        let mut c = spec.conditions.clone();
        c.sort();
        c.dedup();
        c
    };
    if !present.contains(&spec.baseline) {
        return Err(LmmError::MissingBaseline(spec.baseline));
    }
    for c in &conditions {
        if !present.contains(c) {
            return Err(LmmError::SingularDesign(format!("condition[{c}]")));
        }
    }
    if let Some(r) = rows.iter().find(|r| !conditions.contains(&r.condition)) {
        return Err(LmmError::SingularDesign(format!(
            "condition[{}] (rows present but not modelled)",
            r.condition
        )));
    }
    let others: Vec<Condition> = conditions.iter().copied().filter(|&c| c != spec.baseline).collect();

    let mut terms = vec!["(Intercept)".to_string(), "position".to_string()];
    terms.extend(others.iter().map(|c| format!("condition[{c}]")));
    terms.extend(others.iter().map(|&c| interaction_name(c)));
    let mut dropped = Vec::new();
    let log_len0 = (rows[0].length as f64).ln();
    let use_len = if !spec.include_log_length {
        false
    } else if rows.iter().all(|r| (r.length as f64).ln() == log_len0) {
        dropped.push("log_length (constant)".to_string());
        false
    } else {
        true
    };
    if use_len {
        terms.push("log_length".to_string());
    }

    let n = rows.len();
    let p = terms.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, r) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = r.position;
        if let Some(k) = others.iter().position(|&c| c == r.condition) {
            x[(i, 2 + k)] = 1.0;
            x[(i, 2 + others.len() + k)] = r.position;
        }
        if use_len {
            x[(i, p - 1)] = (r.length as f64).ln();
        }
        y[i] = r.y;
    }

    check_rank(&x, &terms)?;

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let yty = y.dot(&y);
    let mut groups = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for &size in group_sizes.values() {
        let mut g = Group {
            ztz: Matrix2::zeros(),
            ztx: [vec![0.0; p], vec![0.0; p]],
            zty: Vector2::zeros(),
            n: size,
        };
        for i in start..start + size {
            let z = [1.0, x[(i, 1)]];
            for a in 0..2 {
                for b in 0..2 {
                    g.ztz[(a, b)] += z[a] * z[b];
                }
                for j in 0..p {
                    g.ztx[a][j] += z[a] * x[(i, j)];
                }
                g.zty[a] += z[a] * y[i];
            }
        }
        groups.push(g);
        start += size;
    }
    Ok(Design {
        terms,
        dropped,
        conditions,
        x,
        y,
        xtx,
        xty,
        yty,
        groups,
    })
}

/// Modified Gram–Schmidt; names the first column that is (numerically) a
/// combination of the ones before it.
fn check_rank(x: &DMatrix<f64>, terms: &[String]) -> Result<(), LmmError> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (j, term) in terms.iter().enumerate() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            return Err(LmmError::SingularDesign(term.clone()));
        }
        basis.push(v / norm);
    }
    Ok(())
}

struct Evaluation {
    loglik: f64,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
}

fn lower_cholesky_2x2(g: &[[f64; 2]; 2]) -> Matrix2<f64> {
    let l11 = g[0][0].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { g[1][0] / l11 } else { 0.0 };
    let l22 = (g[1][1] - l21 * l21).max(0.0).sqrt();
    Matrix2::new(l11, 0.0, l21, l22)
}

impl Design {
    /// Log-likelihood with G = L Lᵀ and residual variance `sigma2`.
    fn evaluate(&self, l: &Matrix2<f64>, sigma2: f64, estimator: Estimator, full: bool) -> Option<Evaluation> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return None;
        }
        let p = self.p();
        let n = self.n() as f64;
        let lambda = l / sigma2.sqrt();
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut yvy = self.yty;
        let mut logdet_v = 0.0;
        for g in &self.groups {
            let m = Matrix2::identity() + lambda.transpose() * g.ztz * lambda;
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            if !(det > 0.0) {
                return None;
            }
            logdet_v += g.n as f64 * sigma2.ln() + det.ln();
            let m_inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
            let w = lambda * m_inv * lambda.transpose();
            // u = W · ZᵀX (2 × p)
            let mut u = [vec![0.0; p], vec![0.0; p]];
            for j in 0..p {
                u[0][j] = w[(0, 0)] * g.ztx[0][j] + w[(0, 1)] * g.ztx[1][j];
                u[1][j] = w[(1, 0)] * g.ztx[0][j] + w[(1, 1)] * g.ztx[1][j];
            }
            for r in 0..p {
                for c in r..p {
                    let v = g.ztx[0][r] * u[0][c] + g.ztx[1][r] * u[1][c];
                    a[(r, c)] -= v;
                }
                b[r] -= u[0][r] * g.zty[0] + u[1][r] * g.zty[1];
            }
            let wz = w * g.zty;
            yvy -= g.zty.dot(&wz);
        }
        for r in 0..p {
            for c in 0..r {
                a[(r, c)] = a[(c, r)];
            }
        }
        a /= sigma2;
        b /= sigma2;
        yvy /= sigma2;
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(&b);
        let rvr = yvy - beta.dot(&b);
        let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let two_pi = (2.0 * std::f64::consts::PI).ln();
        let loglik = match estimator {
            Estimator::Reml => -0.5 * (logdet_v + logdet_a + rvr + (n - p as f64) * two_pi),
            Estimator::Ml => -0.5 * (logdet_v + rvr + n * two_pi),
        };
        if !loglik.is_finite() {
            return None;
        }
        let a_inv = if full { chol.inverse() } else { DMatrix::zeros(0, 0) };
        Some(Evaluation { loglik, beta, a_inv })
    }

    fn ols(&self) -> (DVector<f64>, f64) {
        let chol = self.xtx.clone().cholesky().expect("full-rank design");
        let beta = chol.solve(&self.xty);
        let resid = &self.y - &self.x * &beta;
        (beta, resid.norm_squared())
    }
}

/// Parameter vector → (Cholesky factor of G, residual variance).
fn unpack(theta: &[f64], fixed_l: Option<&Matrix2<f64>>) -> (Matrix2<f64>, f64) {
    match fixed_l {
        Some(l) => (*l, theta[0].exp()),
        None => (
            Matrix2::new(theta[0].exp(), 0.0, theta[1], theta[2].exp()),
            theta[3].exp(),
        ),
    }
}

struct OptimResult {
    theta: Vec<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    path: Vec<f64>,
}

fn numerical_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return None;
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Some(g)
}

/// BFGS minimisation of `f` with backtracking line search.
fn bfgs(f: &dyn Fn(&[f64]) -> f64, start: &[f64], max_iter: usize) -> OptimResult {
    let d = start.len();
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut path = vec![-fx];
    let mut h = DMatrix::<f64>::identity(d, d);
    let mut grad = match numerical_gradient(f, &x) {
        Some(g) => g,
        None => {
            return OptimResult {
                theta: x,
                loglik: -fx,
                converged: false,
                iterations: 0,
                gradient_norm: f64::NAN,
                path,
            }
        }
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        if norm(&grad) < GRADIENT_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(d, d);
            dir = -g.clone();
        }
        // keep trial steps inside a sane region of the log-parameters
        let dir_norm = dir.norm();
        if dir_norm > 5.0 {
            dir *= 5.0 / dir_norm;
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        while t * dir.norm() >= STEP_TOL {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no decrease along the search direction down to the step tolerance
            converged = true;
            break;
        };
        let step: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let Some(grad_new) = numerical_gradient(f, &x_new) else {
            break;
        };
        let s = DVector::from_column_slice(&step);
        let yv = DVector::from_column_slice(&grad_new) - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - rho * &s * yv.transpose();
            let right = &i - rho * &yv * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
        }
        x = x_new;
        fx = f_new;
        grad = grad_new;
        path.push(-fx);
        if norm(&step) < STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged && norm(&grad) < GRADIENT_TOL {
        converged = true;
    }
    OptimResult {
        theta: x,
        loglik: -fx,
        converged,
        iterations,
        gradient_norm: norm(&grad),
        path,
    }
}

fn assemble(
    design: &Design,
    spec: &LmmSpec,
    l: &Matrix2<f64>,
    sigma2: f64,
    opt: &OptimResult,
) -> Result<LmmFit, LmmError> {
    let eval = design
        .evaluate(l, sigma2, spec.estimator, true)
        .ok_or_else(|| LmmError::SingularDesign("fixed-effect information matrix".into()))?;
    let p = design.p();
    let g = l * l.transpose();
    let mut fit = LmmFit {
        terms: design.terms.clone(),
        beta: eval.beta.iter().copied().collect(),
        beta_cov: (0..p * p).map(|k| eval.a_inv[(k / p, k % p)]).collect(),
        slope_by_condition: BTreeMap::new(),
        slope_se: BTreeMap::new(),
        g: [[g[(0, 0)], g[(0, 1)]], [g[(1, 0)], g[(1, 1)]]],
        sigma2,
        loglik: eval.loglik,
        estimator: spec.estimator,
        converged: opt.converged,
        degenerate: false,
        iterations: opt.iterations,
        gradient_norm: opt.gradient_norm,
        n_obs: design.n(),
        n_groups: design.groups.len(),
        dropped_terms: design.dropped.clone(),
        loglik_path: opt.path.clone(),
    };
    fill_slopes(&mut fit, design, spec);
    Ok(fit)
}

fn fill_slopes(fit: &mut LmmFit, design: &Design, spec: &LmmSpec) {
    let p = fit.terms.len();
    let cov = |a: usize, b: usize| fit.beta_cov[a * p + b];
    let mut slopes = BTreeMap::new();
    let mut ses = BTreeMap::new();
    for &c in &design.conditions {
        if c == spec.baseline {
            slopes.insert(c, fit.beta[1]);
            ses.insert(c, cov(1, 1).max(0.0).sqrt());
        } else {
            let k = fit.terms.iter().position(|t| *t == interaction_name(c)).expect("term exists");
            slopes.insert(c, fit.beta[1] + fit.beta[k]);
            ses.insert(c, (cov(1, 1) + cov(k, k) + 2.0 * cov(1, k)).max(0.0).sqrt());
        }
    }
    fit.slope_by_condition = slopes;
    fit.slope_se = ses;
}

fn degenerate_fit(design: &Design, spec: &LmmSpec, beta: DVector<f64>) -> LmmFit {
    let p = design.p();
    let mut fit = LmmFit {
        terms: design.terms.clone(),
        beta: beta.iter().copied().collect(),
        beta_cov: vec![0.0; p * p],
        slope_by_condition: BTreeMap::new(),
        slope_se: BTreeMap::new(),
        g: [[0.0; 2]; 2],
        sigma2: 0.0,
        loglik: f64::NAN,
        estimator: spec.estimator,
        converged: false,
        degenerate: true,
        iterations: 0,
        gradient_norm: f64::NAN,
        n_obs: design.n(),
        n_groups: design.groups.len(),
        dropped_terms: design.dropped.clone(),
        loglik_path: Vec::new(),
    };
    fill_slopes(&mut fit, design, spec);
    fit
}

fn is_degenerate(design: &Design, rss: f64) -> bool {
    let scale = design.yty / design.n() as f64;
    rss / design.n() as f64 <= 1e-20 * (1.0 + scale)
}

/// Fits the model, maximising the restricted likelihood over G and σ².
///
/// Rows are put in a canonical order first, so the result does not depend on
/// input order. If the optimizer does not converge from the default start,
/// two further fixed starting points are tried and the best result kept.
pub fn fit_lmm(rows: &[Observation], spec: &LmmSpec) -> Result<LmmFit, LmmError> {
    let design = build_design(rows, spec)?;
    let (beta_ols, rss) = design.ols();
    if is_degenerate(&design, rss) {
        return Ok(degenerate_fit(&design, spec, beta_ols));
    }
    let dof = (design.n() - design.p()).max(1) as f64;
    let s2 = rss / dof;
    let objective = |theta: &[f64]| -> f64 {
        let (l, sigma2) = unpack(theta, None);
        design
            .evaluate(&l, sigma2, spec.estimator, false)
            .map_or(f64::INFINITY, |e| -e.loglik)
    };
    let mut best: Option<OptimResult> = None;
    for scale in [0.5, 0.1, 2.0] {
        let sd = (s2 * scale).sqrt();
        let start = [sd.ln(), 0.0, sd.ln(), s2.ln()];
        let res = bfgs(&objective, &start, spec.max_iter);
        let better = match &best {
            None => true,
            Some(b) => (res.converged && !b.converged) || (res.converged == b.converged && res.loglik > b.loglik),
        };
        let done = res.converged;
        if better {
            best = Some(res);
        }
        if done {
            break;
        }
    }
    let opt = best.expect("at least one start");
    let (l, sigma2) = unpack(&opt.theta, None);
    assemble(&design, spec, &l, sigma2, &opt)
}

/// Fits with the random-effect covariance held at `g`; only σ² is estimated.
/// With `g` zero this is ordinary least squares.
pub fn fit_lmm_fixed_covariance(
    rows: &[Observation],
    spec: &LmmSpec,
    g: [[f64; 2]; 2],
) -> Result<LmmFit, LmmError> {
    let design = build_design(rows, spec)?;
    let (beta_ols, rss) = design.ols();
    if is_degenerate(&design, rss) {
        return Ok(degenerate_fit(&design, spec, beta_ols));
    }
    let l = lower_cholesky_2x2(&g);
    let dof = match spec.estimator {
        Estimator::Reml => (design.n() - design.p()).max(1) as f64,
        Estimator::Ml => design.n() as f64,
    };
    let objective = |theta: &[f64]| -> f64 {
        let (l, sigma2) = unpack(theta, Some(&l));
        design
            .evaluate(&l, sigma2, spec.estimator, false)
            .map_or(f64::INFINITY, |e| -e.loglik)
    };
    let opt = bfgs(&objective, &[(rss / dof).ln()], spec.max_iter);
    let (l, sigma2) = unpack(&opt.theta, Some(&l));
    assemble(&design, spec, &l, sigma2, &opt)
}

/// One row of the slope table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub language: String,
    pub level: String,
    pub response: Response,
    pub condition: Condition,
    pub slope: f64,
    pub std_error: Option<f64>,
    pub p_value: Option<f64>,
    pub code: String,
    /// `ok`, `unconverged` or `degenerate`.
    pub status: String,
    pub n_obs: usize,
    pub n_groups: usize,
}

/// A fitted model with the keys it was fitted for.
#[derive(Debug, Clone)]
pub struct KeyedFit {
    pub language: String,
    pub level: String,
    pub response: Response,
    pub fit: LmmFit,
}

/// Per-condition slopes with two-sided Wald p-values (normal reference).
/// Unconverged or degenerate fits are flagged and carry no p-value.
pub fn slopes_report(fits: &[KeyedFit]) -> Vec<SlopeRow> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::new();
    for kf in fits {
        let status = if kf.fit.degenerate {
            "degenerate"
        } else if !kf.fit.converged {
            "unconverged"
        } else {
            "ok"
        };
        for (&c, &slope) in &kf.fit.slope_by_condition {
            let se = kf.fit.slope_se.get(&c).copied();
            let p = match (status, se) {
                ("ok", Some(se)) if se > 0.0 => Some(2.0 * normal.sf((slope / se).abs())),
                _ => None,
            };
            rows.push(SlopeRow {
                language: kf.language.clone(),
                level: kf.level.clone(),
                response: kf.response,
                condition: c,
                slope,
                std_error: if status == "ok" { se } else { None },
                p_value: p,
                code: p.map_or(String::new(), |p| significance_code(p).to_string()),
                status: status.to_string(),
                n_obs: kf.fit.n_obs,
                n_groups: kf.fit.n_groups,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{mixed_dataset, MixedSynthSpec};

    fn small_spec() -> MixedSynthSpec {
        MixedSynthSpec {
            n_stories: 30,
            units_per_story: 6,
            ..MixedSynthSpec::default()
        }
    }

    #[test]
    fn slope_identity_and_psd() {
        let rows = mixed_dataset(&small_spec());
        let fit = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert_eq!(fit.slope_by_condition[&Condition::U], fit.coefficient("position").unwrap());
        for c in [Condition::P, Condition::D, Condition::PD] {
            let expect = fit.coefficient("position").unwrap() + fit.coefficient(&interaction_name(c)).unwrap();
            assert_eq!(fit.slope_by_condition[&c], expect);
        }
        let g = fit.g;
        assert_eq!(g[0][1], g[1][0]);
        assert!(g[0][0] >= 0.0 && g[1][1] >= 0.0);
        assert!(g[0][0] * g[1][1] - g[0][1] * g[1][0] >= -1e-12);
        assert!(fit.sigma2 > 0.0);
        assert!(fit.loglik_path.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn row_order_does_not_matter() {
        let rows = mixed_dataset(&small_spec());
        let mut reversed = rows.clone();
        reversed.reverse();
        reversed.swap(3, 77);
        let a = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        let b = fit_lmm(&reversed, &LmmSpec::default()).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((a.sigma2 - b.sigma2).abs() < 1e-10);
    }

    #[test]
    fn missing_condition_is_named() {
        let rows: Vec<_> = mixed_dataset(&small_spec())
            .into_iter()
            .filter(|r| r.condition != Condition::D)
            .collect();
        let spec = LmmSpec {
            conditions: Condition::ALL.to_vec(),
            ..LmmSpec::default()
        };
        assert_eq!(
            fit_lmm(&rows, &spec).unwrap_err(),
            LmmError::SingularDesign("condition[D]".into())
        );
    }

    #[test]
    fn single_condition_collapses() {
        let rows: Vec<_> = mixed_dataset(&small_spec())
            .into_iter()
            .filter(|r| r.condition == Condition::U)
            .collect();
        let fit = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        assert_eq!(fit.terms, vec!["(Intercept)", "position", "log_length"]);
        assert_eq!(fit.slope_by_condition.len(), 1);
    }

    #[test]
    fn flat_baseline_and_falling_discourse_slope() {
        let spec = MixedSynthSpec {
            n_stories: 60,
            units_per_story: 8,
            conditions: vec![Condition::U, Condition::D],
            position_slope: 0.0,
            condition_effects: BTreeMap::from([(Condition::D, -1.0)]),
            slope_shifts: BTreeMap::from([(Condition::D, -1.5)]),
            seed: 11,
            ..MixedSynthSpec::default()
        };
        let fit = fit_lmm(&mixed_dataset(&spec), &LmmSpec::default()).unwrap();
        let report = slopes_report(&[KeyedFit {
            language: "syn".into(),
            level: "paragraph".into(),
            response: Response::MeanSurprisal,
            fit,
        }]);
        let u = report.iter().find(|r| r.condition == Condition::U).unwrap();
        let d = report.iter().find(|r| r.condition == Condition::D).unwrap();
        assert!(u.slope.abs() < 0.3 && u.p_value.unwrap() > 0.05, "{u:?}");
        assert!(d.slope < -1.0 && d.p_value.unwrap() < 0.001, "{d:?}");
        assert_eq!(d.code, "***");
    }

    #[test]
    fn zero_covariance_matches_least_squares() {
        let rows = mixed_dataset(&small_spec());
        let fit = fit_lmm_fixed_covariance(&rows, &LmmSpec::default(), [[0.0; 2]; 2]).unwrap();
        let design = build_design(&rows, &LmmSpec::default()).unwrap();
        let (beta, rss) = design.ols();
        for (a, b) in fit.beta.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let dof = (design.n() - design.p()) as f64;
        assert!((fit.sigma2 - rss / dof).abs() < 1e-6 * fit.sigma2);
    }

    #[test]
    fn constant_response_is_degenerate() {
        let mut rows = mixed_dataset(&small_spec());
        for r in &mut rows {
            r.y = 3.0;
        }
        let fit = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        assert!(fit.degenerate);
        for s in fit.slope_by_condition.values() {
            assert!(s.abs() < 1e-9);
        }
        let report = slopes_report(&[KeyedFit {
            language: "x".into(),
            level: "paragraph".into(),
            response: Response::UidV,
            fit,
        }]);
        assert!(report.iter().all(|r| r.status == "degenerate" && r.p_value.is_none()));
    }

    #[test]
    fn precondition_errors() {
        let rows = mixed_dataset(&MixedSynthSpec {
            n_stories: 1,
            ..small_spec()
        });
        assert!(matches!(fit_lmm(&rows, &LmmSpec::default()), Err(LmmError::TooFewGroups { .. })));
        let mut rows = mixed_dataset(&small_spec());
        rows[0].story_id = "lonely".into();
        assert_eq!(
            fit_lmm(&rows, &LmmSpec::default()).unwrap_err(),
            LmmError::SmallGroup("lonely".into())
        );
    }

    #[test]
    fn constant_length_term_is_dropped() {
        let mut rows = mixed_dataset(&small_spec());
        for r in &mut rows {
            r.length = 10;
        }
        let fit = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        assert!(!fit.terms.iter().any(|t| t == "log_length"));
        assert_eq!(fit.dropped_terms.len(), 1);
    }

    #[test]
    fn ml_likelihood_exceeds_reml_penalty_free() {
        let rows = mixed_dataset(&small_spec());
        let reml = fit_lmm(&rows, &LmmSpec::default()).unwrap();
        let ml = fit_lmm(&rows, &LmmSpec { estimator: Estimator::Ml, ..LmmSpec::default() }).unwrap();
        assert!(ml.converged);
        // ML shrinks variance components relative to REML
        assert!(ml.sigma2 <= reml.sigma2 + 1e-9);
    }
}
