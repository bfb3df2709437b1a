//! Marginal and conditional densities of the component model, all in log scale.
//!
//! Covariance matrices are factored once into an [`MvnKernel`]; the E-step
//! prepares kernels per iteration and evaluates them row by row.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::DensityError;
use crate::numeric::{ln_factorial, log_add_exp, softplus, LN_2PI};

/// Smallest admissible multinomial cell probability before renormalization.
pub const GAMMA_FLOOR: f64 = 1e-10;

/// Symmetrizes `sigma` and adds `eps * I`, `eps = 1e-8 * tr/p`, when its smallest
/// eigenvalue falls below `1e-10 * tr/p`.
pub fn regularize_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, DensityError> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(DensityError::Dimension { expected: p, got: sigma.ncols() });
    }
    if p == 0 {
        return Ok(sigma.clone());
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(DensityError::NotPositiveDefinite);
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let scale = sym.trace() / p as f64;
    if !(scale > 0.0) {
        return Err(DensityError::NotPositiveDefinite);
    }
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    if min_eig < 1e-10 * scale {
        Ok(sym + DMatrix::identity(p, p) * (1e-8 * scale))
    } else {
        Ok(sym)
    }
}

/// Cholesky-factored multivariate normal log-density.
#[derive(Clone, Debug)]
pub struct MvnKernel {
    mu: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl MvnKernel {
    pub fn new(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self, DensityError> {
        let p = mu.len();
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(DensityError::Dimension { expected: p, got: sigma.nrows() });
        }
        let chol = sigma.clone().cholesky().ok_or(DensityError::NotPositiveDefinite)?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(DensityError::NotPositiveDefinite);
        }
        Ok(Self { mu: mu.clone(), chol_l: l, log_norm: -0.5 * (p as f64 * LN_2PI + log_det) })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Log-density at `x`; caller guarantees `x.len() == dim()`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let p = self.mu.len();
        // forward substitution L z = x - mu, on the stack for the usual small p
        let mut buf = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if p <= 16 {
            &mut buf[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..p {
            let mut s = x[i] - self.mu[i];
            for j in 0..i {
                s -= self.chol_l[(i, j)] * z[j];
            }
            z[i] = s / self.chol_l[(i, i)];
            quad += z[i] * z[i];
        }
        self.log_norm - 0.5 * quad
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianMarginal {
    /// Builds the block, applying the ridge rule to `sigma`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, DensityError> {
        if sigma.nrows() != mu.len() {
            return Err(DensityError::Dimension { expected: mu.len(), got: sigma.nrows() });
        }
        let sigma = regularize_covariance(&sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn kernel(&self) -> Result<MvnKernel, DensityError> {
        MvnKernel::new(&self.mu, &self.sigma)
    }
}

/// Multivariate log-normal: `ln u ~ N(mu, sigma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalMarginal {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LogNormalMarginal {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, DensityError> {
        if sigma.nrows() != mu.len() {
            return Err(DensityError::Dimension { expected: mu.len(), got: sigma.nrows() });
        }
        let sigma = regularize_covariance(&sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Kernel on the log scale; the Jacobian `-sum(ln u)` is added by the caller.
    pub fn log_kernel(&self) -> Result<MvnKernel, DensityError> {
        MvnKernel::new(&self.mu, &self.sigma)
    }
}

/// Product of independent categorical distributions, one per discrete covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultinomialMarginal {
    pub gamma: Vec<Vec<f64>>,
}

impl MultinomialMarginal {
    /// Floors every cell at [`GAMMA_FLOOR`] and renormalizes each vector.
    pub fn new(gamma: Vec<Vec<f64>>) -> Result<Self, DensityError> {
        let mut out = Vec::with_capacity(gamma.len());
        for (r, g) in gamma.into_iter().enumerate() {
            if g.len() < 2 || g.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(DensityError::InvalidProbabilities(r));
            }
            let floored: Vec<f64> = g.iter().map(|&p| p.max(GAMMA_FLOOR)).collect();
            let total: f64 = floored.iter().sum();
            out.push(floored.into_iter().map(|p| p / total).collect());
        }
        Ok(Self { gamma: out })
    }

    pub fn n_covariates(&self) -> usize {
        self.gamma.len()
    }
}

/// Zero-inflated Poisson conditional: Poisson coefficients `beta` (log link) and
/// structural-zero coefficients `beta_bar` (logit link).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipConditional {
    pub beta: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub offset_log_exposure: bool,
}

/// Linear predictors of a ZIP conditional at one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZipLinks {
    /// `ln lambda`, including the log-exposure offset when enabled.
    pub log_lambda: f64,
    /// `logit psi`.
    pub logit_psi: f64,
}

impl ZipLinks {
    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn psi(&self) -> f64 {
        crate::numeric::sigmoid(self.logit_psi)
    }

    pub fn log_psi(&self) -> f64 {
        -softplus(-self.logit_psi)
    }

    pub fn log_one_minus_psi(&self) -> f64 {
        -softplus(self.logit_psi)
    }

    /// Log ZIP mass at `y`.
    pub fn logpmf(&self, y: f64) -> f64 {
        let lambda = self.lambda();
        if y == 0.0 {
            log_add_exp(self.log_psi(), self.log_one_minus_psi() - lambda)
        } else {
            self.log_one_minus_psi() + poisson_logpmf(y, self.log_lambda)
        }
    }

    /// Posterior probability that a zero is structural.
    pub fn structural_zero_posterior(&self, y: f64) -> f64 {
        if y > 0.0 {
            0.0
        } else {
            crate::numeric::sigmoid(self.logit_psi + self.lambda())
        }
    }
}

pub fn gaussian_logpdf(t: &[f64], m: &GaussianMarginal) -> Result<f64, DensityError> {
    if t.len() != m.dim() {
        return Err(DensityError::Dimension { expected: m.dim(), got: t.len() });
    }
    Ok(m.kernel()?.logpdf(t))
}

pub fn lognormal_logpdf(u: &[f64], m: &LogNormalMarginal) -> Result<f64, DensityError> {
    if u.len() != m.dim() {
        return Err(DensityError::Dimension { expected: m.dim(), got: u.len() });
    }
    if let Some(&bad) = u.iter().find(|&&x| !(x > 0.0)) {
        return Err(DensityError::NonPositive(bad));
    }
    let logs: Vec<f64> = u.iter().map(|x| x.ln()).collect();
    let jacobian: f64 = logs.iter().sum();
    Ok(m.log_kernel()?.logpdf(&logs) - jacobian)
}

/// `sum_r ln gamma_{r, w_r}` with zero-based level indices `w`.
pub fn multinomial_logpmf(w: &[usize], m: &MultinomialMarginal) -> Result<f64, DensityError> {
    if w.len() != m.n_covariates() {
        return Err(DensityError::Dimension { expected: m.n_covariates(), got: w.len() });
    }
    let mut total = 0.0;
    for (r, (&s, g)) in w.iter().zip(&m.gamma).enumerate() {
        let p = g.get(s).ok_or(DensityError::LevelOutOfRange { covariate: r, index: s, levels: g.len() })?;
        total += p.ln();
    }
    Ok(total)
}

impl ZipConditional {
    /// Links at one observation, with separate design rows for the Poisson (`xp`)
    /// and structural-zero (`xb`) parts. `exposure` scales `lambda` only, and only
    /// when the conditional carries the log-exposure offset.
    pub fn links(&self, xp: &[f64], xb: &[f64], exposure: f64) -> Result<ZipLinks, DensityError> {
        if xp.len() != self.beta.len() {
            return Err(DensityError::Dimension { expected: self.beta.len(), got: xp.len() });
        }
        if xb.len() != self.beta_bar.len() {
            return Err(DensityError::Dimension { expected: self.beta_bar.len(), got: xb.len() });
        }
        if !(exposure > 0.0) {
            return Err(DensityError::InvalidExposure(exposure));
        }
        Ok(self.links_unchecked(xp, xb, exposure.ln()))
    }

    /// As [`ZipConditional::links`] with the log exposure precomputed and no checks.
    pub fn links_unchecked(&self, xp: &[f64], xb: &[f64], log_exposure: f64) -> ZipLinks {
        let eta: f64 = xp.iter().zip(&self.beta).map(|(x, b)| x * b).sum();
        let eta_bar: f64 = xb.iter().zip(&self.beta_bar).map(|(x, b)| x * b).sum();
        let offset = if self.offset_log_exposure { log_exposure } else { 0.0 };
        ZipLinks { log_lambda: eta + offset, logit_psi: eta_bar }
    }
}

/// Link evaluation when both parts share one design row.
pub fn zip_link_values(xrow: &[f64], z: &ZipConditional, exposure: f64) -> Result<ZipLinks, DensityError> {
    z.links(xrow, xrow, exposure)
}

/// Returns `(lambda, psi)`.
pub fn zip_links(xrow: &[f64], z: &ZipConditional, exposure: f64) -> Result<(f64, f64), DensityError> {
    let l = zip_link_values(xrow, z, exposure)?;
    Ok((l.lambda(), l.psi()))
}

pub fn zip_logpmf(y: f64, xrow: &[f64], z: &ZipConditional, exposure: f64) -> Result<f64, DensityError> {
    if !crate::numeric::is_count(y) {
        return Err(DensityError::InvalidCount(y));
    }
    Ok(zip_link_values(xrow, z, exposure)?.logpmf(y))
}

/// Poisson log-mass with the rate given on the log scale.
pub fn poisson_logpmf(y: f64, log_lambda: f64) -> f64 {
    if log_lambda == f64::NEG_INFINITY {
        return if y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y * log_lambda - log_lambda.exp() - ln_factorial(y)
}

/// Bernoulli log-mass of a (possibly fractional) target under a logit predictor.
pub fn bernoulli_logpmf(target: f64, eta: f64) -> f64 {
    target * eta - softplus(eta)
}

/// Gaussian log-density with variance `var`.
pub fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_gauss(mu: f64, var: f64) -> GaussianMarginal {
        GaussianMarginal::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn scalar_logn(mu: f64, var: f64) -> LogNormalMarginal {
        LogNormalMarginal::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let v = gaussian_logpdf(&[0.0], &scalar_gauss(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, -0.918_938_533_204_672_8, epsilon = 1e-15);
    }

    #[test]
    fn identity_covariance_at_mean() {
        for p in 1..5 {
            let mu = DVector::from_fn(p, |i, _| i as f64 * 0.7 - 1.0);
            let m = GaussianMarginal::new(mu.clone(), DMatrix::identity(p, p)).unwrap();
            let v = gaussian_logpdf(mu.as_slice(), &m).unwrap();
            assert_abs_diff_eq!(v, -(p as f64) / 2.0 * LN_2PI, epsilon = 1e-13);
        }
    }

    #[test]
    fn lognormal_examples() {
        let m = scalar_logn(0.0, 1.0);
        assert_abs_diff_eq!(lognormal_logpdf(&[1.0], &m).unwrap(), -0.918_938_533_204_672_8, epsilon = 1e-15);
        let m = scalar_logn(1.0, 1.0);
        let v = lognormal_logpdf(&[std::f64::consts::E], &m).unwrap();
        assert_abs_diff_eq!(v, -1.918_938_533_204_672_8, epsilon = 1e-14);
        assert!(matches!(lognormal_logpdf(&[0.0], &m), Err(DensityError::NonPositive(_))));
    }

    #[test]
    fn multinomial_examples() {
        let m = MultinomialMarginal::new(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        assert_abs_diff_eq!(multinomial_logpmf(&[2], &m).unwrap(), 0.5f64.ln(), epsilon = 1e-9);
        let m = MultinomialMarginal::new(vec![vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_abs_diff_eq!(multinomial_logpmf(&[0, 1], &m).unwrap(), 0.45f64.ln(), epsilon = 1e-9);
        let m = MultinomialMarginal::new(vec![vec![0.25; 4]]).unwrap();
        for w in 0..4 {
            assert_abs_diff_eq!(multinomial_logpmf(&[w], &m).unwrap(), -(4f64.ln()), epsilon = 1e-12);
        }
        assert!(multinomial_logpmf(&[4], &m).is_err());
    }

    #[test]
    fn gamma_floor_keeps_logs_finite() {
        let m = MultinomialMarginal::new(vec![vec![0.0, 1.0]]).unwrap();
        assert!(multinomial_logpmf(&[0], &m).unwrap().is_finite());
        assert_abs_diff_eq!(m.gamma[0].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zip_link_examples() {
        let z = ZipConditional { beta: vec![0.0, 0.0], beta_bar: vec![0.0, 0.0], offset_log_exposure: true };
        let (l, p) = zip_links(&[1.0, 3.0], &z, 1.0).unwrap();
        assert_abs_diff_eq!(l, 1.0);
        assert_abs_diff_eq!(p, 0.5);
        let z = ZipConditional { beta: vec![2f64.ln()], beta_bar: vec![0.0], offset_log_exposure: true };
        assert_abs_diff_eq!(zip_links(&[1.0], &z, 1.0).unwrap().0, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(zip_links(&[1.0], &z, 0.5).unwrap().0, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zip_mass_examples() {
        // psi = 0.5, lambda = ln 2
        let z = ZipConditional { beta: vec![2f64.ln().ln()], beta_bar: vec![0.0], offset_log_exposure: false };
        assert_abs_diff_eq!(zip_logpmf(0.0, &[1.0], &z, 1.0).unwrap(), 0.75f64.ln(), epsilon = 1e-15);
        // psi -> 0 (logit very negative), lambda = 1
        let links = ZipLinks { log_lambda: 0.0, logit_psi: f64::NEG_INFINITY };
        assert_abs_diff_eq!(links.logpmf(0.0), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn structural_zero_posterior_formula() {
        let links = ZipLinks { log_lambda: 0.0, logit_psi: 0.0 };
        assert_abs_diff_eq!(links.structural_zero_posterior(0.0), 1.0 / (1.0 + (-1f64).exp()), epsilon = 1e-15);
        assert_eq!(links.structural_zero_posterior(3.0), 0.0);
    }

    #[test]
    fn ridge_applies_only_to_degenerate_covariances() {
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(regularize_covariance(&ok).unwrap(), ok);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = regularize_covariance(&singular).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 1.0 + 1e-8, epsilon = 1e-15);
        assert!(MvnKernel::new(&DVector::zeros(2), &r).is_ok());
        assert!(regularize_covariance(&DMatrix::zeros(2, 2)).is_err());
    }
}
