use serde::{Deserialize, Serialize};

use super::{Prepared, ResponseKind, Selections};
use crate::data::{Dataset, DesignMatrix};
use crate::density::ZipLinks;
use crate::error::{EmError, GlmError};
use crate::glm::{fit_glm, Family, GlmFit, GlmProblem, IrlsOptions};
use crate::numeric::sigmoid;

/// Intercept of the structural-zero regression that encodes "no inflation".
pub const NO_INFLATION_INTERCEPT: f64 = -30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipOptions {
    pub max_iter: usize,
    /// Stop when the log-likelihood gain is below `tol * max(1, |loglik|)`.
    pub tol: f64,
}

impl Default for ZipOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZipDegeneracy {
    /// No weighted zeros: the fit is Poisson with `psi` pinned near 0.
    NoZeros,
    /// No weighted positive counts: `psi` pinned near 1, Poisson part left at its start.
    AllZeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZipFit {
    pub beta: Vec<f64>,
    pub beta_bar: Vec<f64>,
    /// Posterior probability that each zero is structural; exactly 0 where `y > 0`.
    pub zstar: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub degenerate: Option<ZipDegeneracy>,
    /// Final Poisson M-step fit (weights `(1 - zstar) * w`).
    pub poisson: Option<GlmFit>,
}

fn links(xp: &DesignMatrix, xb: &DesignMatrix, i: usize, offset: &[f64], beta: &[f64], beta_bar: &[f64]) -> ZipLinks {
    ZipLinks { log_lambda: xp.dot_row(i, beta) + offset[i], logit_psi: xb.dot_row(i, beta_bar) }
}

/// Weighted ZIP log-likelihood `sum_i w_i ln q(y_i)`.
pub fn zip_loglik(
    xp: &DesignMatrix,
    xb: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    beta: &[f64],
    beta_bar: &[f64],
) -> f64 {
    (0..y.len())
        .filter(|&i| weights[i] > 0.0)
        .map(|i| weights[i] * links(xp, xb, i, offset, beta, beta_bar).logpmf(y[i]))
        .sum()
}

fn structural_posteriors(
    xp: &DesignMatrix,
    xb: &DesignMatrix,
    y: &[f64],
    offset: &[f64],
    beta: &[f64],
    beta_bar: &[f64],
) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            if y[i] > 0.0 {
                0.0
            } else {
                let l = links(xp, xb, i, offset, beta, beta_bar);
                sigmoid(l.logit_psi + l.lambda())
            }
        })
        .collect()
}

fn no_inflation_start(width: usize) -> Vec<f64> {
    let mut b = vec![0.0; width];
    if let Some(first) = b.first_mut() {
        *first = NO_INFLATION_INTERCEPT;
    }
    b
}

/// ZIP EM on explicit designs. `offset` is the Poisson log offset per row.
#[allow(clippy::too_many_arguments)]
pub fn fit_zip_design(
    xp: &DesignMatrix,
    xb: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    init_beta: &[f64],
    init_beta_bar: &[f64],
    opts: &ZipOptions,
) -> Result<ZipFit, EmError> {
    let n = y.len();
    for (what, len) in [("weights", weights.len()), ("offset", offset.len()), ("structural design", xb.nrows())] {
        if len != n || xp.nrows() != n {
            return Err(GlmError::Length { what, rows: xp.nrows(), got: len }.into());
        }
    }
    if init_beta.len() != xp.ncols() || init_beta_bar.len() != xb.ncols() {
        return Err(crate::error::DensityError::Dimension { expected: xp.ncols() + xb.ncols(), got: init_beta.len() + init_beta_bar.len() }.into());
    }
    if let Some((row, &value)) = y.iter().enumerate().find(|(_, v)| !crate::numeric::is_count(**v)) {
        return Err(EmError::NotCounts { row: row + 1, value });
    }
    let zero_mass: f64 = (0..n).filter(|&i| y[i] == 0.0).map(|i| weights[i]).sum();
    let pos_mass: f64 = (0..n).filter(|&i| y[i] > 0.0).map(|i| weights[i]).sum();
    if !(zero_mass + pos_mass > 0.0) {
        return Err(GlmError::ZeroWeight.into());
    }

    if pos_mass == 0.0 {
        let beta = init_beta.to_vec();
        let mut beta_bar = vec![0.0; xb.ncols()];
        if let Some(first) = beta_bar.first_mut() {
            *first = -NO_INFLATION_INTERCEPT;
        }
        let ll = zip_loglik(xp, xb, y, weights, offset, &beta, &beta_bar);
        let zstar = clamp_open(structural_posteriors(xp, xb, y, offset, &beta, &beta_bar), y);
        return Ok(ZipFit {
            beta,
            beta_bar,
            zstar,
            loglik: ll,
            converged: true,
            iterations: 0,
            trace: vec![ll],
            degenerate: Some(ZipDegeneracy::AllZeros),
            poisson: None,
        });
    }

    let degenerate = (zero_mass == 0.0).then_some(ZipDegeneracy::NoZeros);
    let mut beta = init_beta.to_vec();
    let mut beta_bar = if degenerate.is_some() { no_inflation_start(xb.ncols()) } else { init_beta_bar.to_vec() };
    let mut ll = zip_loglik(xp, xb, y, weights, offset, &beta, &beta_bar);
    let mut trace = vec![ll];
    let irls = IrlsOptions::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut poisson = None;
    let mut pw = vec![0.0; n];
    while iterations < opts.max_iter {
        iterations += 1;
        let z = structural_posteriors(xp, xb, y, offset, &beta, &beta_bar);
        for i in 0..n {
            pw[i] = weights[i] * (1.0 - z[i]);
        }
        let pfit = fit_glm(
            &GlmProblem { family: Family::Poisson, x: xp, y, weights: &pw, offset: Some(offset) },
            Some(&beta),
            &irls,
        )?;
        let bfit = fit_glm(
            &GlmProblem { family: Family::Bernoulli, x: xb, y: &z, weights, offset: None },
            Some(&beta_bar),
            &irls,
        )?;
        let new_ll = zip_loglik(xp, xb, y, weights, offset, &pfit.coefficients, &bfit.coefficients);
        if new_ll < ll - 1e-8 * ll.abs().max(1.0) {
            log::warn!("ZIP log-likelihood decreased from {ll} to {new_ll}");
        }
        beta = pfit.coefficients.clone();
        beta_bar = bfit.coefficients;
        poisson = Some(pfit);
        trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain.abs() <= opts.tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let zstar = clamp_open(structural_posteriors(xp, xb, y, offset, &beta, &beta_bar), y);
    Ok(ZipFit { beta, beta_bar, zstar, loglik: ll, converged, iterations, trace, degenerate, poisson })
}

/// Keeps zero-row posteriors strictly inside (0, 1).
fn clamp_open(mut z: Vec<f64>, y: &[f64]) -> Vec<f64> {
    for (v, &yi) in z.iter_mut().zip(y) {
        if yi == 0.0 {
            *v = v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        }
    }
    z
}

/// ZIP EM for one cluster with row weights `weights` (posteriors of the cluster).
pub fn fit_zip_cluster(
    dataset: &Dataset,
    weights: &[f64],
    selections: &Selections,
    init: (&[f64], &[f64]),
    opts: &ZipOptions,
) -> Result<ZipFit, EmError> {
    let prep = Prepared::new(dataset, ResponseKind::ZipFrequency, selections)?;
    let xb = prep.xb.as_ref().expect("ZIP preparation builds the structural design");
    fit_zip_design(&prep.x, xb, &prep.target, weights, &prep.offset, init.0, init.1, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::stream_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    fn sample(n: usize, psi: f64, lambda: f64, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        let pois = Poisson::new(lambda).unwrap();
        (0..n).map(|_| if rng.gen::<f64>() < psi { 0.0 } else { pois.sample(&mut rng) }).collect()
    }

    #[test]
    fn zero_predictors_give_known_posterior() {
        let x = DesignMatrix::intercept(2);
        let z = structural_posteriors(&x, &x, &[0.0, 3.0], &[0.0, 0.0], &[0.0], &[0.0]);
        assert!((z[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        assert!((z[0] - 0.731059).abs() < 1e-6);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn recovers_intercept_only_zip() {
        let y = sample(3000, 0.3, 2.5, 11);
        let x = DesignMatrix::intercept(y.len());
        let w = vec![1.0; y.len()];
        let fit = fit_zip_design(&x, &x, &y, &w, &vec![0.0; y.len()], &[0.0], &[0.0], &ZipOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0].exp() - 2.5).abs() < 0.2, "{:?}", fit.beta);
        assert!((sigmoid(fit.beta_bar[0]) - 0.3).abs() < 0.05, "{:?}", fit.beta_bar);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        for (zi, yi) in fit.zstar.iter().zip(&y) {
            if *yi > 0.0 {
                assert_eq!(*zi, 0.0);
            } else {
                assert!(*zi > 0.0 && *zi < 1.0);
            }
        }
    }

    #[test]
    fn no_zero_cluster_is_flagged() {
        let y = vec![1.0, 2.0, 3.0, 1.0];
        let x = DesignMatrix::intercept(4);
        let fit = fit_zip_design(&x, &x, &y, &[1.0; 4], &[0.0; 4], &[0.0], &[0.0], &ZipOptions::default()).unwrap();
        assert_eq!(fit.degenerate, Some(ZipDegeneracy::NoZeros));
        assert!((fit.beta[0] - (7.0f64 / 4.0).ln()).abs() < 1e-6);
        assert!(sigmoid(fit.beta_bar[0]) < 1e-12);
    }

    #[test]
    fn all_zero_cluster_is_flagged() {
        let x = DesignMatrix::intercept(3);
        let fit = fit_zip_design(&x, &x, &[0.0; 3], &[1.0; 3], &[0.0; 3], &[0.0], &[0.0], &ZipOptions::default()).unwrap();
        assert_eq!(fit.degenerate, Some(ZipDegeneracy::AllZeros));
        assert!(fit.loglik > -1e-10);
    }
}
