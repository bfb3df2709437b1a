//! EM fitting for generalized cluster-weighted models.
//!
//! [`fit_gcwm`] runs the joint-density EM with restarts; [`fit_zip_cluster`]
//! is the inner zero-inflated Poisson EM for one cluster; [`fit_zigcwm`]
//! chains them through the Bernoulli/Poisson partitioning stage.

mod gcwm;
mod init;
mod zigcwm;
mod zip;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{build_design, Dataset, DesignMatrix};
use crate::density::{GaussianMarginal, LogNormalMarginal, MultinomialMarginal, ZipConditional};
use crate::error::EmError;
use crate::glm::{Family, GlmFit};

pub use gcwm::{estep, fit_gcwm, loglik_of, mstep, EmRun};
pub use init::{initial_posteriors, kmeans_labels};
pub use zigcwm::{
    compare_models, fit_bernoulli_partition, fit_cluster_conditional, fit_poisson_partition, fit_zigcwm, fit_zigcwm_from,
    ClusterConditional, ClusterFit, ClusterTest, ComparisonRow, ModelComparison, Partitioning, ZiConfig, ZiDetails,
    ZipStageSummary,
};
pub use zip::{fit_zip_cluster, fit_zip_design, zip_loglik, ZipDegeneracy, ZipFit, ZipOptions};

/// Which conditional density the components carry for the response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseKind {
    /// Gaussian, identity link.
    GaussianSeverity,
    /// Gaussian, log link on the mean.
    GaussianLogSeverity,
    /// Poisson counts, log link.
    PoissonFrequency,
    /// Logit model of the zero indicator `1{y = 0}`.
    BernoulliZero,
    /// Zero-inflated Poisson; fitted through [`fit_zigcwm`].
    ZipFrequency,
}

impl ResponseKind {
    /// GLM family of the component fit (the Poisson part for ZIP).
    pub fn family(self) -> Family {
        match self {
            ResponseKind::GaussianSeverity => Family::Gaussian,
            ResponseKind::GaussianLogSeverity => Family::GaussianLog,
            ResponseKind::PoissonFrequency | ResponseKind::ZipFrequency => Family::Poisson,
            ResponseKind::BernoulliZero => Family::Bernoulli,
        }
    }

    pub fn is_count(self) -> bool {
        matches!(self, ResponseKind::PoissonFrequency | ResponseKind::ZipFrequency | ResponseKind::BernoulliZero)
    }

    pub fn is_severity(self) -> bool {
        matches!(self, ResponseKind::GaussianSeverity | ResponseKind::GaussianLogSeverity)
    }
}

fn default_true() -> bool {
    true
}

/// Design terms for the component regressions. Covariate marginals always
/// cover every covariate of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selections {
    /// Terms of the response regression (Poisson part for ZIP); `log(x)` allowed.
    pub response: Vec<String>,
    /// Terms of the structural-zero regression.
    #[serde(default)]
    pub bernoulli: Vec<String>,
    /// Use `ln(exposure)` as an offset in count regressions.
    #[serde(default = "default_true")]
    pub offset_exposure: bool,
    /// Weight severity log-densities by the claim-count column.
    #[serde(default)]
    pub claim_weights: bool,
}

impl Selections {
    pub fn new<S: Into<String>>(response: impl IntoIterator<Item = S>) -> Self {
        Self {
            response: response.into_iter().map(Into::into).collect(),
            bernoulli: Vec::new(),
            offset_exposure: true,
            claim_weights: false,
        }
    }

    pub fn with_bernoulli<S: Into<String>>(mut self, terms: impl IntoIterator<Item = S>) -> Self {
        self.bernoulli = terms.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_offset(mut self, on: bool) -> Self {
        self.offset_exposure = on;
        self
    }

    pub fn with_claim_weights(mut self, on: bool) -> Self {
        self.claim_weights = on;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Aitken tolerance on the extrapolated log-likelihood gain.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 500 }
    }
}

impl StopRule {
    /// Aitken test on the last three values of `trace`.
    pub fn converged(&self, trace: &[f64]) -> bool {
        let n = trace.len();
        if n < 3 {
            return false;
        }
        let (l0, l1, l2) = (trace[n - 3], trace[n - 2], trace[n - 1]);
        let (d1, d2) = (l1 - l0, l2 - l1);
        // stalled at machine precision
        if d2.abs() <= 1e-13 * l2.abs().max(1.0) {
            return true;
        }
        let a = if d1 != 0.0 { d2 / d1 } else { 0.0 };
        if a >= 1.0 {
            return false;
        }
        let gain = d2 / (1.0 - a);
        (0.0..self.tol).contains(&gain)
    }
}

/// Starting partition of one EM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Uniform random hard labels.
    Random,
    /// k-means on standardized continuous covariates.
    Distance,
    /// Caller-supplied zero-based labels.
    Labels(Vec<usize>),
}

impl Init {
    /// Ten random starts plus one distance-based start.
    pub fn default_set() -> Vec<Init> {
        let mut v = vec![Init::Random; 10];
        v.push(Init::Distance);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k: usize,
    pub kind: ResponseKind,
    pub selections: Selections,
    pub inits: Vec<Init>,
    pub stop: StopRule,
    pub seed: u64,
    /// Run restarts on the rayon pool.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl FitConfig {
    pub fn new(k: usize, kind: ResponseKind, selections: Selections) -> Self {
        Self { k, kind, selections, inits: Init::default_set(), stop: StopRule::default(), seed: 0, parallel: true }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn inits(mut self, inits: Vec<Init>) -> Self {
        self.inits = inits;
        self
    }

    pub fn stop(mut self, stop: StopRule) -> Self {
        self.stop = stop;
        self
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub tau: f64,
    /// Response regression; for ZIP components this is the Poisson part.
    pub glm: GlmFit,
    pub gaussian: Option<GaussianMarginal>,
    pub lognormal: Option<LogNormalMarginal>,
    pub discrete: Option<MultinomialMarginal>,
    pub zip: Option<ZipConditional>,
}

impl ComponentParams {
    /// Free parameters of the covariate marginals.
    pub fn n_marginal_params(&self) -> usize {
        let mvn = |p: usize| p + p * (p + 1) / 2;
        self.gaussian.as_ref().map_or(0, |g| mvn(g.dim()))
            + self.lognormal.as_ref().map_or(0, |g| mvn(g.dim()))
            + self.discrete.as_ref().map_or(0, |d| d.gamma.iter().map(|g| g.len() - 1).sum())
    }

    /// Free parameters of the response conditional.
    pub fn n_conditional_params(&self) -> usize {
        self.glm.n_params() + self.zip.as_ref().map_or(0, |z| z.beta_bar.len())
    }
}

/// Summary of the restart search behind a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub attempted: usize,
    pub failed: usize,
    /// Index into the init list of the winning run.
    pub chosen: usize,
    /// Final log-likelihood per restart; `None` for failed runs.
    pub logliks: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcwmModel {
    pub k: usize,
    pub response_kind: ResponseKind,
    pub selections: Selections,
    pub components: Vec<ComponentParams>,
    #[serde(skip)]
    pub posteriors: DMatrix<f64>,
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub n: usize,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub restarts: RestartSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_inflation: Option<ZiDetails>,
}

impl GcwmModel {
    /// A model from given parameters, with no fit history.
    pub fn from_components(response_kind: ResponseKind, selections: Selections, components: Vec<ComponentParams>) -> Self {
        Self {
            k: components.len(),
            response_kind,
            selections,
            n_params: Self::count_params(&components),
            components,
            posteriors: DMatrix::zeros(0, 0),
            loglik_trace: Vec::new(),
            loglik: f64::NAN,
            n: 0,
            converged: false,
            iterations: 0,
            seed: 0,
            restarts: RestartSummary::default(),
            zero_inflation: None,
        }
    }

    /// Hard labels; the lowest index wins exact ties.
    pub fn labels(&self) -> Vec<usize> {
        hard_labels(&self.posteriors)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for l in self.labels() {
            sizes[l] += 1;
        }
        sizes
    }

    /// Free-parameter count of the mixture.
    pub fn count_params(components: &[ComponentParams]) -> usize {
        components.len() - 1
            + components.iter().map(|c| c.n_marginal_params() + c.n_conditional_params()).sum::<usize>()
    }

    /// Reorders components (and posterior columns) so that new index `j` holds old `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> GcwmModel {
        let mut out = self.clone();
        out.components = perm.iter().map(|&j| self.components[j].clone()).collect();
        if self.posteriors.ncols() == self.k {
            out.posteriors = DMatrix::from_fn(self.posteriors.nrows(), self.k, |i, j| self.posteriors[(i, perm[j])]);
        }
        out
    }
}

/// Row-wise argmax with the lowest index winning exact ties.
pub fn hard_labels(post: &DMatrix<f64>) -> Vec<usize> {
    (0..post.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..post.ncols() {
                if post[(i, k)] > post[(i, best)] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Collapse threshold on a component's posterior mass.
pub fn collapse_threshold(n: usize, k: usize) -> f64 {
    (1e-3 * n as f64 / k as f64).max(2.0)
}

/// Per-dataset quantities shared by every EM iteration.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<'a> {
    pub ds: &'a Dataset,
    pub kind: ResponseKind,
    pub selections: Selections,
    pub x: DesignMatrix,
    /// Structural-zero design; only built for ZIP fitting.
    pub xb: Option<DesignMatrix>,
    /// Regression target (the zero indicator for [`ResponseKind::BernoulliZero`]).
    pub target: Vec<f64>,
    /// Offset of the response regression.
    pub offset: Vec<f64>,
    /// `ln(exposure)` regardless of whether it is used.
    pub log_exposure: Vec<f64>,
    /// Weight on each row's conditional log-density.
    pub omega: Vec<f64>,
    /// Row-major Gaussian covariates, `p_gaussian` per row.
    pub t: Vec<f64>,
    /// Row-major logs of the log-normal covariates.
    pub log_u: Vec<f64>,
    /// `sum ln u_i` per row (log-normal Jacobian).
    pub jacobian: Vec<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(ds: &'a Dataset, kind: ResponseKind, selections: &Selections) -> Result<Self, EmError> {
        let y = ds.response();
        if kind.is_count() {
            if let Some((row, &value)) = y.iter().enumerate().find(|(_, v)| !crate::numeric::is_count(**v)) {
                return Err(EmError::NotCounts { row: row + 1, value });
            }
        }
        let x = build_design(ds, &selections.response)?;
        let xb = if kind == ResponseKind::ZipFrequency { Some(build_design(ds, &selections.bernoulli)?) } else { None };
        let target = match kind {
            ResponseKind::BernoulliZero => y.iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect(),
            _ => y.to_vec(),
        };
        let log_exposure: Vec<f64> = ds.exposure().iter().map(|e| e.ln()).collect();
        let offset = if selections.offset_exposure && matches!(kind, ResponseKind::PoissonFrequency | ResponseKind::ZipFrequency) {
            log_exposure.clone()
        } else {
            vec![0.0; ds.n()]
        };
        let omega = if selections.claim_weights && kind.is_severity() {
            let w = ds.claim_weights().to_vec();
            if let Some(row) = w.iter().position(|v| !(*v > 0.0)) {
                return Err(EmError::NonPositiveClaimWeight(row + 1));
            }
            w
        } else {
            vec![1.0; ds.n()]
        };
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            let mut v = Vec::with_capacity(m.len());
            for i in 0..m.nrows() {
                v.extend(m.row(i).iter().copied());
            }
            v
        };
        let t = row_major(ds.gaussian());
        let log_u = row_major(ds.log_lognormal());
        let pu = ds.p_lognormal();
        let jacobian = (0..ds.n()).map(|i| log_u[i * pu..(i + 1) * pu].iter().sum()).collect();
        Ok(Self { ds, kind, selections: selections.clone(), x, xb, target, offset, log_exposure, omega, t, log_u, jacobian })
    }

    pub fn n(&self) -> usize {
        self.ds.n()
    }

    pub fn t_row(&self, i: usize) -> &[f64] {
        let p = self.ds.p_gaussian();
        &self.t[i * p..(i + 1) * p]
    }

    pub fn log_u_row(&self, i: usize) -> &[f64] {
        let p = self.ds.p_lognormal();
        &self.log_u[i * p..(i + 1) * p]
    }
}
