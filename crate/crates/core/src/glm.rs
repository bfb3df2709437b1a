//! Weighted maximum-likelihood GLM solvers used by the M-steps.
//!
//! All non-identity fits run Fisher scoring (IRLS) with step-halving so the
//! weighted objective never decreases between iterations. Gaussian identity
//! fits are a single weighted least-squares solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DesignMatrix;
use crate::density::normal_logpdf;
use crate::error::GlmError;
use crate::numeric::{ln_factorial, sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Counts, log link, optional log-exposure offset.
    Poisson,
    /// Targets in [0, 1], logit link.
    Bernoulli,
    /// Gaussian response, identity link.
    Gaussian,
    /// Gaussian response, log link on the mean.
    GaussianLog,
}

impl Family {
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian | Family::GaussianLog)
    }

    fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Poisson | Family::GaussianLog => eta.exp(),
            Family::Bernoulli => sigmoid(eta),
            Family::Gaussian => eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    /// Wald standard errors; zero for dropped columns.
    pub std_errors: Vec<f64>,
    /// Gaussian variance `nu`; `None` for one-parameter families.
    pub dispersion: Option<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// A coefficient hit the separation cap.
    #[serde(default)]
    pub separated: bool,
    /// Zero residual variance (Gaussian families).
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_columns: Vec<usize>,
    /// Lower bound applied to the variance when evaluating densities.
    #[serde(default)]
    pub variance_floor: f64,
}

impl GlmFit {
    /// Variance to use in density evaluation, never below the degenerate-fit floor.
    pub fn effective_variance(&self) -> f64 {
        self.dispersion.unwrap_or(1.0).max(self.variance_floor)
    }

    /// Number of free parameters: coefficients plus dispersion when present.
    pub fn n_params(&self) -> usize {
        self.coefficients.len() + usize::from(self.family.has_dispersion())
    }

    /// Log-density of one observation under this fit (target is the raw response).
    pub fn log_density(&self, xrow: &[f64], y: f64, offset: f64) -> f64 {
        let eta: f64 = xrow.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>() + offset;
        obs_loglik(self.family, y, eta, self.effective_variance())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub score_tol: f64,
    /// Bound on |coefficient| for Bernoulli fits (separation guard).
    pub coef_cap: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, rel_tol: 1e-10, score_tol: 1e-8, coef_cap: 30.0 }
    }
}

fn obs_loglik(family: Family, y: f64, eta: f64, var: f64) -> f64 {
    match family {
        Family::Poisson => y * eta - eta.exp() - ln_factorial(y),
        Family::Bernoulli => y * eta - softplus(eta),
        Family::Gaussian => normal_logpdf(y, eta, var),
        Family::GaussianLog => normal_logpdf(y, eta.exp(), var),
    }
}

/// A weighted GLM problem.
#[derive(Clone, Copy)]
pub struct GlmProblem<'a> {
    pub family: Family,
    pub x: &'a DesignMatrix,
    pub y: &'a [f64],
    pub weights: &'a [f64],
    pub offset: Option<&'a [f64]>,
}

impl<'a> GlmProblem<'a> {
    fn validate(&self) -> Result<(), GlmError> {
        let n = self.x.nrows();
        if self.y.len() != n {
            return Err(GlmError::Length { what: "response", rows: n, got: self.y.len() });
        }
        if self.weights.len() != n {
            return Err(GlmError::Length { what: "weights", rows: n, got: self.weights.len() });
        }
        if let Some(o) = self.offset {
            if o.len() != n {
                return Err(GlmError::Length { what: "offset", rows: n, got: o.len() });
            }
        }
        let mut total = 0.0;
        for (row, (&w, &y)) in self.weights.iter().zip(self.y).enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(GlmError::InvalidResponse { row, value: w, reason: "weights must be finite and nonnegative" });
            }
            total += w;
            if w == 0.0 {
                continue;
            }
            let bad = match self.family {
                Family::Poisson => (!(y >= 0.0) || !y.is_finite()).then_some("counts must be nonnegative"),
                Family::Bernoulli => (!(0.0..=1.0).contains(&y)).then_some("targets must lie in [0, 1]"),
                _ => (!y.is_finite()).then_some("response must be finite"),
            };
            if let Some(reason) = bad {
                return Err(GlmError::InvalidResponse { row, value: y, reason });
            }
        }
        if !(total > 0.0) {
            return Err(GlmError::ZeroWeight);
        }
        Ok(())
    }

    fn offset(&self, i: usize) -> f64 {
        self.offset.map_or(0.0, |o| o[i])
    }

    /// Objective maximized by the solver: weighted log-likelihood without constants
    /// (or minus half the weighted residual sum of squares for Gaussian families).
    pub fn objective(&self, beta: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.nrows() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let eta = self.x.dot_row(i, beta) + self.offset(i);
            let y = self.y[i];
            total += w * match self.family {
                Family::Poisson => y * eta - eta.exp(),
                Family::Bernoulli => y * eta - softplus(eta),
                Family::Gaussian => -0.5 * (y - eta).powi(2),
                Family::GaussianLog => -0.5 * (y - eta.exp()).powi(2),
            };
        }
        if total.is_nan() {
            f64::NEG_INFINITY
        } else {
            total
        }
    }

    /// Weighted log-likelihood at `beta` (with `dispersion` for Gaussian families).
    pub fn loglik(&self, beta: &[f64], dispersion: f64) -> f64 {
        (0..self.x.nrows())
            .filter(|&i| self.weights[i] > 0.0)
            .map(|i| {
                let eta = self.x.dot_row(i, beta) + self.offset(i);
                self.weights[i] * obs_loglik(self.family, self.y[i], eta, dispersion)
            })
            .sum()
    }

    fn weighted_rss(&self, beta: &[f64]) -> (f64, f64) {
        let (mut rss, mut wsum) = (0.0, 0.0);
        for i in 0..self.x.nrows() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let mu = self.family.mean(self.x.dot_row(i, beta) + self.offset(i));
            rss += w * (self.y[i] - mu).powi(2);
            wsum += w;
        }
        (rss, wsum)
    }

    /// Score and Fisher information restricted to `cols`.
    fn score_info(&self, beta: &[f64], cols: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let q = cols.len();
        let mut g = DVector::zeros(q);
        let mut h = DMatrix::zeros(q, q);
        for i in 0..self.x.nrows() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let row = self.x.row(i);
            let eta = self.x.dot_row(i, beta) + self.offset(i);
            let y = self.y[i];
            let (s, info) = match self.family {
                Family::Poisson => {
                    let mu = eta.exp();
                    (w * (y - mu), w * mu)
                }
                Family::Bernoulli => {
                    let mu = sigmoid(eta);
                    (w * (y - mu), w * mu * (1.0 - mu))
                }
                Family::Gaussian => (w * (y - eta), w),
                Family::GaussianLog => {
                    let mu = eta.exp();
                    (w * (y - mu) * mu, w * mu * mu)
                }
            };
            for (a, &ca) in cols.iter().enumerate() {
                let xa = row[ca];
                g[a] += s * xa;
                let t = info * xa;
                for (b, &cb) in cols.iter().enumerate().take(a + 1) {
                    h[(a, b)] += t * row[cb];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        (g, h)
    }
}

/// Columns kept after dropping trailing collinear ones, judged on the rows with
/// positive weight. Earlier columns always win.
pub fn independent_columns(x: &DesignMatrix, weights: &[f64]) -> Vec<usize> {
    let p = x.ncols();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrows() {
        let w = weights[i];
        if w <= 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            for b in 0..=a {
                gram[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    // incremental Cholesky in natural order; a column whose Schur complement
    // vanishes relative to its own norm is spanned by the earlier ones
    let mut kept: Vec<usize> = Vec::new();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let diag = gram[(j, j)];
        if !(diag > 0.0) {
            continue;
        }
        let mut row_l = vec![0.0; kept.len()];
        for (a, &ka) in kept.iter().enumerate() {
            let mut s = gram[(j.max(ka), j.min(ka))];
            for b in 0..a {
                s -= l[(a, b)] * row_l[b];
            }
            row_l[a] = s / l[(a, a)];
        }
        let schur = diag - row_l.iter().map(|v| v * v).sum::<f64>();
        if schur > 1e-10 * diag {
            let a = kept.len();
            for (b, v) in row_l.iter().enumerate() {
                l[(a, b)] = *v;
            }
            l[(a, a)] = schur.sqrt();
            kept.push(j);
        }
    }
    kept
}

fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    let q = h.nrows();
    let ridge = 1e-10 * (h.trace() / q as f64).abs().max(1e-300);
    (h + DMatrix::identity(q, q) * ridge).cholesky().map(|ch| ch.solve(g))
}

fn invert_spd(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    h.clone().cholesky().map(|ch| ch.inverse())
}

fn default_start(problem: &GlmProblem<'_>, p: usize) -> Vec<f64> {
    let mut beta = vec![0.0; p];
    if p == 0 {
        return beta;
    }
    let (mut wy, mut wsum, mut wexp) = (0.0, 0.0, 0.0);
    for i in 0..problem.x.nrows() {
        let w = problem.weights[i];
        if w > 0.0 {
            wy += w * problem.y[i];
            wsum += w;
            wexp += w * problem.offset(i).exp();
        }
    }
    let mean = wy / wsum;
    beta[0] = match problem.family {
        Family::Poisson => (wy / wexp).max(1e-8).ln(),
        Family::Bernoulli => {
            let m = mean.clamp(1e-6, 1.0 - 1e-6);
            (m / (1.0 - m)).ln()
        }
        Family::GaussianLog => {
            if mean > 0.0 {
                mean.ln()
            } else {
                0.0
            }
        }
        Family::Gaussian => mean,
    };
    beta
}

/// Fits a weighted GLM. `start` warm-starts the iteration (ignored if its objective is not finite).
pub fn fit_glm(problem: &GlmProblem<'_>, start: Option<&[f64]>, opts: &IrlsOptions) -> Result<GlmFit, GlmError> {
    problem.validate()?;
    let p = problem.x.ncols();
    let cols = independent_columns(problem.x, problem.weights);
    if cols.is_empty() {
        return Err(GlmError::RankDeficient);
    }
    let dropped: Vec<usize> = (0..p).filter(|j| !cols.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!(
            "dropping collinear design columns {:?}",
            dropped.iter().map(|&j| problem.x.names()[j].as_str()).collect::<Vec<_>>()
        );
    }

    if problem.family == Family::Gaussian {
        return Ok(fit_wls(problem, &cols, dropped));
    }

    let cap = if problem.family == Family::Bernoulli { opts.coef_cap } else { f64::INFINITY };
    let clamp = |b: &mut [f64]| {
        for j in &dropped {
            b[*j] = 0.0;
        }
        for v in b.iter_mut() {
            *v = v.clamp(-cap, cap);
        }
    };

    let mut beta = match start {
        Some(s) if s.len() == p => {
            let mut b = s.to_vec();
            clamp(&mut b);
            if problem.objective(&b).is_finite() {
                b
            } else {
                default_start(problem, p)
            }
        }
        _ => default_start(problem, p),
    };
    clamp(&mut beta);
    let mut obj = problem.objective(&beta);
    if !obj.is_finite() {
        beta = vec![0.0; p];
        obj = problem.objective(&beta);
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (g, h) = problem.score_info(&beta, &cols);
        if g.amax() <= opts.score_tol {
            converged = true;
            break;
        }
        let Some(delta) = solve_spd(&h, &g) else { break };
        iterations += 1;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut cand = beta.clone();
            for (a, &c) in cols.iter().enumerate() {
                cand[c] += step * delta[a];
            }
            clamp(&mut cand);
            let cand_obj = problem.objective(&cand);
            if cand_obj >= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            // no improving step at machine precision: we are at the optimum
            let scale = 1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            converged = delta.amax() < 1e-6 * scale;
            break;
        };
        let change = cand_obj - obj;
        let moved = cand.iter().zip(&beta).any(|(a, b)| a != b);
        beta = cand;
        obj = cand_obj;
        if change.abs() <= opts.rel_tol * obj.abs() || !moved {
            converged = true;
            break;
        }
    }

    let separated = cap.is_finite() && beta.iter().any(|b| b.abs() >= cap);
    let (mut dispersion, mut degenerate, mut floor) = (None, false, 0.0);
    if problem.family.has_dispersion() {
        let (rss, wsum) = problem.weighted_rss(&beta);
        let (nu, deg, fl) = dispersion_of(problem, rss, wsum);
        dispersion = Some(nu);
        degenerate = deg;
        floor = fl;
    }
    let var = dispersion.unwrap_or(1.0).max(floor);
    let (_, h) = problem.score_info(&beta, &cols);
    let std_errors = wald_errors(&h, &cols, p, if problem.family.has_dispersion() { var } else { 1.0 });
    Ok(GlmFit {
        family: problem.family,
        loglik: problem.loglik(&beta, var),
        coefficients: beta,
        std_errors,
        dispersion,
        iterations,
        converged,
        separated,
        degenerate,
        dropped_columns: dropped,
        variance_floor: floor,
    })
}

fn dispersion_of(problem: &GlmProblem<'_>, rss: f64, wsum: f64) -> (f64, bool, f64) {
    let nu = rss / wsum;
    let second_moment = (0..problem.x.nrows())
        .filter(|&i| problem.weights[i] > 0.0)
        .map(|i| problem.weights[i] * problem.y[i] * problem.y[i])
        .sum::<f64>()
        / wsum;
    let floor = 1e-12 * second_moment.max(1e-300);
    let degenerate = !(nu > floor);
    (if degenerate && nu < 1e-300 { 0.0 } else { nu }, degenerate, if degenerate { floor } else { 0.0 })
}

fn wald_errors(h: &DMatrix<f64>, cols: &[usize], p: usize, scale: f64) -> Vec<f64> {
    let mut se = vec![0.0; p];
    if let Some(inv) = invert_spd(h) {
        for (a, &c) in cols.iter().enumerate() {
            se[c] = (scale * inv[(a, a)]).max(0.0).sqrt();
        }
    }
    se
}

fn fit_wls(problem: &GlmProblem<'_>, cols: &[usize], dropped: Vec<usize>) -> GlmFit {
    let p = problem.x.ncols();
    // score at beta = 0 is X'W(y - offset); information is X'WX
    let zero = vec![0.0; p];
    let (g, h) = problem.score_info(&zero, cols);
    let mut beta = vec![0.0; p];
    if let Some(sol) = solve_spd(&h, &g) {
        for (a, &c) in cols.iter().enumerate() {
            beta[c] = sol[a];
        }
    }
    let (rss, wsum) = problem.weighted_rss(&beta);
    let (nu, degenerate, floor) = dispersion_of(problem, rss, wsum);
    let var = nu.max(floor);
    GlmFit {
        family: Family::Gaussian,
        loglik: problem.loglik(&beta, var),
        std_errors: wald_errors(&h, cols, p, var),
        coefficients: beta,
        dispersion: Some(nu),
        iterations: 1,
        converged: true,
        separated: false,
        degenerate,
        dropped_columns: dropped,
        variance_floor: floor,
    }
}

/// Weighted Poisson regression with per-row log offset.
pub fn fit_poisson_weighted(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> Result<GlmFit, GlmError> {
    let problem = GlmProblem { family: Family::Poisson, x, y, weights, offset: Some(offset) };
    fit_glm(&problem, None, &IrlsOptions::default())
}

/// Weighted logistic regression on targets in [0, 1] (fractional targets allowed).
pub fn fit_bernoulli_weighted(x: &DesignMatrix, target: &[f64], weights: &[f64]) -> Result<GlmFit, GlmError> {
    let problem = GlmProblem { family: Family::Bernoulli, x, y: target, weights, offset: None };
    fit_glm(&problem, None, &IrlsOptions::default())
}

/// Weighted least squares with dispersion `sum w r^2 / sum w`.
pub fn fit_gaussian_weighted(x: &DesignMatrix, y: &[f64], weights: &[f64]) -> Result<GlmFit, GlmError> {
    let problem = GlmProblem { family: Family::Gaussian, x, y, weights, offset: None };
    fit_glm(&problem, None, &IrlsOptions::default())
}

/// Gaussian response with a log link on the mean.
pub fn fit_gaussian_log_weighted(x: &DesignMatrix, y: &[f64], weights: &[f64]) -> Result<GlmFit, GlmError> {
    let problem = GlmProblem { family: Family::GaussianLog, x, y, weights, offset: None };
    fit_glm(&problem, None, &IrlsOptions::default())
}
