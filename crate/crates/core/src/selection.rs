//! Information criteria, the zero-inflation likelihood-ratio test, label
//! alignment and external classification metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::em::GcwmModel;
use crate::error::{EmError, SelectionError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoCriteria {
    pub loglik: f64,
    pub n_params: usize,
    pub n: usize,
    pub aic: f64,
    pub bic: f64,
}

impl InfoCriteria {
    pub fn new(loglik: f64, n_params: usize, n: usize) -> Self {
        let nu = n_params as f64;
        Self { loglik, n_params, n, aic: -2.0 * loglik + 2.0 * nu, bic: -2.0 * loglik + nu * (n as f64).ln() }
    }
}

pub fn info_criteria(model: &GcwmModel) -> InfoCriteria {
    InfoCriteria::new(model.loglik, model.n_params, model.n)
}

/// `P(X <= x)` for `X ~ chi2(m)`.
pub fn chi2_cdf(x: f64, m: usize) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(m as f64 / 2.0, x / 2.0)
    }
}

/// Quantile of `chi2(m)` at probability `p`, by bisection to 1e-10.
pub fn chi2_quantile(p: f64, m: usize) -> f64 {
    assert!(m >= 1 && (0.0..1.0).contains(&p));
    let mut hi = (m as f64).max(1.0);
    while chi2_cdf(hi, m) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, m) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// 95th percentile of the `0.5 chi2(0) + 0.5 chi2(m)` mixture, i.e. the 90th percentile of `chi2(m)`.
pub fn mixture_critical_95(m: usize) -> f64 {
    chi2_quantile(0.90, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub phi: f64,
    pub m: usize,
    pub critical_95: f64,
    pub reject: bool,
}

impl LrTestResult {
    /// Builds the decision from a nonnegative statistic.
    pub fn from_statistic(phi: f64, m: usize) -> Self {
        let critical_95 = mixture_critical_95(m);
        Self { phi, m, critical_95, reject: phi > critical_95 }
    }
}

/// `phi = -2 (l_poisson - l_zip)` against the boundary mixture reference.
///
/// Values in `[-1e-6, 0)` are treated as optimizer noise and set to 0; anything
/// lower means the ZIP fit is worse than the Poisson fit it nests.
pub fn zero_inflation_lr_test(poisson_loglik: f64, zip_loglik: f64, m: usize) -> Result<LrTestResult, SelectionError> {
    if m == 0 {
        return Err(SelectionError::ZeroDegrees);
    }
    let phi = -2.0 * (poisson_loglik - zip_loglik);
    if phi < -1e-6 || phi.is_nan() {
        return Err(SelectionError::BrokenNesting(phi));
    }
    Ok(LrTestResult::from_statistic(phi.max(0.0), m))
}

/// Assignment maximizing `sum_j w[(j, perm[j])]`; `w` is padded to square.
/// Exhaustive over permutations up to size 8, Hungarian algorithm above.
pub fn optimal_assignment(w: &DMatrix<f64>) -> Vec<usize> {
    let k = w.nrows().max(w.ncols());
    let at = |i: usize, j: usize| if i < w.nrows() && j < w.ncols() { w[(i, j)] } else { 0.0 };
    if k == 0 {
        return Vec::new();
    }
    if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_score = f64::NEG_INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let s: f64 = p.iter().enumerate().map(|(i, &j)| at(i, j)).sum();
            if s > best_score {
                best_score = s;
                best = p.to_vec();
            }
        });
        return best;
    }
    let max = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| at(i, j)).fold(f64::MIN, f64::max);
    let cost = DMatrix::from_fn(k, k, |i, j| max - at(i, j));
    hungarian(&cost)
}

/// Lexicographic enumeration so the first maximum found is the smallest permutation.
fn permute(p: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p[start..=i].rotate_right(1);
        permute(p, start + 1, f);
        p[start..=i].rotate_left(1);
    }
}

/// Minimum-cost assignment on a square matrix (shortest augmenting path form).
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// Rows are true classes, columns the aligned predicted classes.
    pub matrix: Vec<Vec<usize>>,
    /// `mapping[t]` is the raw predicted label aligned to true class `t`.
    pub mapping: Vec<usize>,
    pub misclassification: f64,
    pub purity: f64,
    pub ari: f64,
}

fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<usize>> {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        c[x][y] += 1;
    }
    c
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::LabelLength(a.len(), b.len()));
    }
    let c = contingency(a, b);
    let index: f64 = c.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = c.iter().map(|r| choose2(r.iter().sum())).sum();
    let ncols = c.first().map_or(0, |r| r.len());
    let cols: f64 = (0..ncols).map(|j| choose2(c.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // both partitions trivial (all singletons or one block)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Aligns predicted labels to true labels and computes the classification metrics.
pub fn confusion_report(truth: &[usize], predicted: &[usize]) -> Result<ConfusionReport, SelectionError> {
    if truth.len() != predicted.len() {
        return Err(SelectionError::LabelLength(truth.len(), predicted.len()));
    }
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let kp = predicted.iter().max().map_or(0, |m| m + 1);
    let k = kt.max(kp);
    let mut c = DMatrix::<f64>::zeros(k, k);
    for (&t, &p) in truth.iter().zip(predicted) {
        c[(t, p)] += 1.0;
    }
    let mapping = optimal_assignment(&c);
    let matrix: Vec<Vec<usize>> = (0..kt).map(|t| (0..k).map(|a| c[(t, mapping[a])] as usize).collect()).collect();
    let n = truth.len();
    let trace: usize = (0..kt).map(|t| matrix[t][t]).sum();
    let per_class: Vec<f64> = matrix
        .iter()
        .enumerate()
        .filter_map(|(t, row)| {
            let s: usize = row.iter().sum();
            (s > 0).then(|| row[t] as f64 / s as f64)
        })
        .collect();
    Ok(ConfusionReport {
        matrix,
        mapping,
        misclassification: if n == 0 { 0.0 } else { 1.0 - trace as f64 / n as f64 },
        purity: if per_class.is_empty() { 1.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 },
        ari: adjusted_rand_index(truth, predicted)?,
    })
}

/// Why a candidate K produced no model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Sizing,
    Convergence,
    Input,
}

impl FailureKind {
    pub fn of(e: &EmError) -> Self {
        match e {
            EmError::Sizing { .. } => FailureKind::Sizing,
            EmError::Collapse { .. } | EmError::AllRestartsFailed { .. } | EmError::ZeroDensity(_) => {
                FailureKind::Convergence
            }
            _ => FailureKind::Input,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub criteria: Option<InfoCriteria>,
    pub converged: bool,
    pub failure: Option<FailureKind>,
    pub message: Option<String>,
    pub selected: bool,
}

/// Fits every candidate K with `fit` and returns the lowest-BIC model with
/// the full table. Failed or unconverged candidates are annotated; unconverged
/// fits only compete when no candidate converged.
pub fn select_k<F>(ks: &[usize], fit: F) -> Result<(GcwmModel, Vec<SelectionRow>), SelectionError>
where
    F: Fn(usize) -> Result<GcwmModel, EmError> + Sync,
{
    if ks.is_empty() {
        return Err(SelectionError::EmptyRange);
    }
    let fits: Vec<Result<GcwmModel, EmError>> = ks.par_iter().map(|&k| fit(k)).collect();
    let mut rows: Vec<SelectionRow> = ks
        .iter()
        .zip(&fits)
        .map(|(&k, f)| match f {
            Ok(m) => SelectionRow {
                k,
                criteria: Some(info_criteria(m)),
                converged: m.converged,
                failure: None,
                message: (!m.converged).then(|| "reached the iteration limit".to_string()),
                selected: false,
            },
            Err(e) => SelectionRow {
                k,
                criteria: None,
                converged: false,
                failure: Some(FailureKind::of(e)),
                message: Some(e.to_string()),
                selected: false,
            },
        })
        .collect();
    let any_converged = rows.iter().any(|r| r.criteria.is_some() && r.converged);
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let Some(c) = r.criteria else { continue };
        if any_converged && !r.converged {
            continue;
        }
        if best.map_or(true, |b| c.bic < rows[b].criteria.unwrap().bic) {
            best = Some(i);
        }
    }
    let Some(best) = best else {
        return Err(SelectionError::NoSuccessfulFit(rows));
    };
    rows[best].selected = true;
    let model = fits.into_iter().nth(best).unwrap().unwrap();
    Ok((model, rows))
}
