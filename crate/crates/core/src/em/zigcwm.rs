use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gcwm::{
    best_run, check_sizing, column, estep_prepared, glm_from_coefficients, marginal_logdens, marginal_update,
    model_from_run, run_restarts, EmRun,
};
use super::zip::{fit_zip_design, ZipDegeneracy, ZipOptions, NO_INFLATION_INTERCEPT};
use super::{hard_labels, FitConfig, GcwmModel, Init, Prepared, ResponseKind, Selections, StopRule};
use crate::data::{Dataset, DesignMatrix};
use crate::density::ZipConditional;
use crate::error::EmError;
use crate::glm::{fit_glm, Family, GlmFit, GlmProblem, IrlsOptions};
use crate::numeric::child_seed;
use crate::selection::{optimal_assignment, zero_inflation_lr_test, LrTestResult};

/// How the starting partition of the ZIP stage is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partitioning {
    /// Average of aligned Bernoulli and Poisson GCWM posteriors.
    Bp,
    /// Poisson GCWM posteriors only.
    Poisson,
    /// Bernoulli (zero-indicator) GCWM posteriors only.
    Bernoulli,
}

impl std::str::FromStr for Partitioning {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bp" => Ok(Self::Bp),
            "poisson" => Ok(Self::Poisson),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(format!("unknown partitioning `{other}` (expected bp, poisson or bernoulli)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZiConfig {
    pub k: usize,
    pub selections: Selections,
    pub inits: Vec<Init>,
    pub stop: StopRule,
    pub seed: u64,
    pub parallel: bool,
    pub partitioning: Partitioning,
    pub zip: ZipOptions,
    /// Test each cluster for zero inflation and demote non-rejecting clusters to Poisson.
    pub lr_test: bool,
    /// Skip the ZIP stage and give every cluster a Poisson conditional.
    pub force_poisson: bool,
}

impl ZiConfig {
    pub fn new(k: usize, selections: Selections) -> Self {
        Self {
            k,
            selections,
            inits: Init::default_set(),
            stop: StopRule::default(),
            seed: 0,
            parallel: true,
            partitioning: Partitioning::Bp,
            zip: ZipOptions::default(),
            lr_test: true,
            force_poisson: false,
        }
    }

    pub fn from_fit_config(c: &FitConfig) -> Self {
        Self {
            inits: c.inits.clone(),
            stop: c.stop,
            seed: c.seed,
            parallel: c.parallel,
            ..Self::new(c.k, c.selections.clone())
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn partitioning(mut self, p: Partitioning) -> Self {
        self.partitioning = p;
        self
    }

    pub fn inits(mut self, inits: Vec<Init>) -> Self {
        self.inits = inits;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterConditional {
    Poisson,
    Zip,
}

/// Conditional fit of one cluster on fixed row weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterFit {
    pub form: ClusterConditional,
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub beta_bar: Option<Vec<f64>>,
    pub n_params: usize,
}

/// Fits a Poisson or ZIP conditional on weighted rows. The ZIP fit also runs
/// from the Poisson solution with inflation switched off and keeps the better
/// optimum, so it never falls below the nested Poisson fit.
#[allow(clippy::too_many_arguments)]
pub fn fit_cluster_conditional(
    xp: &DesignMatrix,
    xb: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    form: ClusterConditional,
    init_beta: &[f64],
    init_beta_bar: Option<&[f64]>,
    opts: &ZipOptions,
) -> Result<ClusterFit, EmError> {
    let problem = GlmProblem { family: Family::Poisson, x: xp, y, weights, offset: Some(offset) };
    let pois = fit_glm(&problem, Some(init_beta), &IrlsOptions::default())?;
    if form == ClusterConditional::Poisson {
        return Ok(ClusterFit {
            form,
            loglik: problem.loglik(&pois.coefficients, 1.0),
            n_params: pois.coefficients.len(),
            beta: pois.coefficients,
            beta_bar: None,
        });
    }
    let mut off = vec![0.0; xb.ncols()];
    if let Some(f) = off.first_mut() {
        *f = NO_INFLATION_INTERCEPT;
    }
    let mut best = fit_zip_design(xp, xb, y, weights, offset, &pois.coefficients, &off, opts)?;
    if let Some(bb) = init_beta_bar {
        let other = fit_zip_design(xp, xb, y, weights, offset, init_beta, bb, opts)?;
        if other.loglik > best.loglik {
            best = other;
        }
    }
    Ok(ClusterFit {
        form,
        loglik: best.loglik,
        n_params: best.beta.len() + best.beta_bar.len(),
        beta: best.beta,
        beta_bar: Some(best.beta_bar),
    })
}

/// Per-cluster zero-inflation test on hard-assigned rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTest {
    /// One-based cluster number.
    pub cluster: usize,
    pub rows: usize,
    pub zeros: usize,
    pub poisson_loglik: f64,
    pub zip_loglik: f64,
    /// `None` when the cluster had no rows.
    pub test: Option<LrTestResult>,
    pub zero_inflated: bool,
    /// BIC from the conditional likelihood only.
    pub bic_conditional_poisson: f64,
    pub bic_conditional_zip: f64,
    /// BIC adding the cluster's covariate-marginal likelihood and parameters.
    pub bic_joint_poisson: f64,
    pub bic_joint_zip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipStageSummary {
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub degenerate: Option<ZipDegeneracy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZiDetails {
    pub partitioning: Partitioning,
    /// The data had no zeros; the model is the Poisson GCWM.
    pub no_zeros: bool,
    pub poisson_partition_loglik: Option<f64>,
    pub bernoulli_partition_loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub poisson_partition_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bernoulli_partition_trace: Vec<f64>,
    pub zip_stage: Vec<Option<ZipStageSummary>>,
    pub cluster_tests: Vec<ClusterTest>,
    /// Sum of the per-cluster statistics and degrees of freedom.
    pub pooled: Option<LrTestResult>,
    /// Posterior weights of the partition the ZIP stage was fitted on.
    #[serde(skip)]
    pub partition: DMatrix<f64>,
}

fn weighted_fit(
    family: Family,
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    start: Option<&[f64]>,
) -> Result<GlmFit, EmError> {
    Ok(fit_glm(&GlmProblem { family, x, y, weights: w, offset }, start, &IrlsOptions::default())?)
}

fn bernoulli_selections(s: &Selections) -> Selections {
    Selections { response: s.bernoulli.clone(), bernoulli: Vec::new(), offset_exposure: false, claim_weights: false }
}

/// Poisson GCWM fit used as a partition source.
pub fn fit_poisson_partition(dataset: &Dataset, config: &ZiConfig) -> Result<EmRun, EmError> {
    let prep = Prepared::new(dataset, ResponseKind::PoissonFrequency, &config.selections)?;
    let runs = run_restarts(&prep, config.k, &config.inits, &config.stop, config.seed, config.parallel);
    Ok(best_run(runs)?.0)
}

/// Bernoulli GCWM on the zero indicator, with the structural-zero design.
pub fn fit_bernoulli_partition(dataset: &Dataset, config: &ZiConfig) -> Result<EmRun, EmError> {
    let prep = Prepared::new(dataset, ResponseKind::BernoulliZero, &bernoulli_selections(&config.selections))?;
    let runs = run_restarts(&prep, config.k, &config.inits, &config.stop, child_seed(config.seed, 1), config.parallel);
    Ok(best_run(runs)?.0)
}

fn validate_zi(dataset: &Dataset, config: &ZiConfig) -> Result<(), EmError> {
    if config.k == 0 {
        return Err(EmError::ZeroComponents);
    }
    if config.inits.is_empty() {
        return Err(EmError::BadLabels("no initialization strategies given".into()));
    }
    let prep = Prepared::new(dataset, ResponseKind::ZipFrequency, &config.selections)?;
    let wb = prep.xb.as_ref().map_or(0, |x| x.ncols());
    check_sizing(prep.n(), config.k, prep.x.ncols().max(wb))
}

/// Fits the zero-inflated GCWM: partition with Poisson and/or Bernoulli GCWM
/// fits, run the ZIP EM per cluster on the frozen partition, then evaluate
/// final posteriors under the zero-inflated joint density.
pub fn fit_zigcwm(dataset: &Dataset, config: &ZiConfig) -> Result<GcwmModel, EmError> {
    validate_zi(dataset, config)?;
    let has_zeros = dataset.response().iter().any(|&v| v == 0.0);
    let pfit = if config.partitioning != Partitioning::Bernoulli || !has_zeros {
        Some(fit_poisson_partition(dataset, config)?)
    } else {
        None
    };
    let bfit = if config.partitioning != Partitioning::Poisson && has_zeros {
        Some(fit_bernoulli_partition(dataset, config)?)
    } else {
        None
    };
    fit_zigcwm_from(dataset, config, pfit.as_ref(), bfit.as_ref())
}

/// ZIP stage on precomputed partition fits; `config.partitioning` picks which are used.
pub fn fit_zigcwm_from(
    dataset: &Dataset,
    config: &ZiConfig,
    poisson: Option<&EmRun>,
    bernoulli: Option<&EmRun>,
) -> Result<GcwmModel, EmError> {
    validate_zi(dataset, config)?;
    let k = config.k;
    let prep = Prepared::new(dataset, ResponseKind::ZipFrequency, &config.selections)?;
    let xb = prep.xb.clone().expect("ZIP preparation builds the structural design");
    let n = prep.n();
    let y = prep.target.clone();
    let missing = |what: &str| EmError::BadLabels(format!("{what} partition fit required but not supplied"));
    for run in poisson.iter().chain(bernoulli.iter()) {
        if run.posteriors.nrows() != n || run.posteriors.ncols() != k {
            return Err(EmError::PosteriorShape { rows: run.posteriors.nrows(), cols: run.posteriors.ncols(), n, k });
        }
    }

    if !y.iter().any(|&v| v == 0.0) {
        let run = poisson.ok_or_else(|| missing("Poisson"))?.clone();
        let pois_prep = Prepared::new(dataset, ResponseKind::PoissonFrequency, &config.selections)?;
        let trace = run.trace.clone();
        let mut model = model_from_run(&pois_prep, k, run, Default::default(), config.seed);
        model.response_kind = ResponseKind::ZipFrequency;
        model.zero_inflation = Some(ZiDetails {
            partitioning: config.partitioning,
            no_zeros: true,
            poisson_partition_loglik: Some(model.loglik),
            bernoulli_partition_loglik: None,
            poisson_partition_trace: trace,
            bernoulli_partition_trace: Vec::new(),
            zip_stage: vec![None; k],
            cluster_tests: Vec::new(),
            pooled: None,
            partition: model.posteriors.clone(),
        });
        return Ok(model);
    }

    let pfit = match config.partitioning {
        Partitioning::Bernoulli => None,
        _ => Some(poisson.ok_or_else(|| missing("Poisson"))?),
    };
    let bfit = match config.partitioning {
        Partitioning::Poisson => None,
        _ => Some(bernoulli.ok_or_else(|| missing("Bernoulli"))?),
    };

    // align Bernoulli components to Poisson components by soft agreement
    let (partition, bern_perm) = match (pfit, bfit) {
        (Some(p), Some(b)) => {
            let agreement = p.posteriors.transpose() * &b.posteriors;
            let perm = optimal_assignment(&agreement);
            let bp = DMatrix::from_fn(n, k, |i, j| b.posteriors[(i, perm[j])]);
            ((&p.posteriors + bp) * 0.5, perm)
        }
        (Some(p), None) => (p.posteriors.clone(), (0..k).collect()),
        (None, Some(b)) => (b.posteriors.clone(), (0..k).collect()),
        (None, None) => unreachable!("every partitioning uses at least one fit"),
    };

    let zero_target: Vec<f64> = y.iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
    let mut components = Vec::with_capacity(k);
    let mut zip_stage = Vec::with_capacity(k);
    for j in 0..k {
        let w = column(&partition, j);
        let mass: f64 = w.iter().sum();
        let threshold = super::collapse_threshold(n, k);
        if !(mass >= threshold) {
            return Err(EmError::Collapse { component: j + 1, mass, threshold });
        }
        let mut comp = marginal_update(&prep, &w)?;
        let beta0 = match &pfit {
            Some(p) => p.components[j].glm.coefficients.clone(),
            None => weighted_fit(Family::Poisson, &prep.x, &y, &w, Some(&prep.offset), None)?.coefficients,
        };
        if config.force_poisson {
            comp.glm = weighted_fit(Family::Poisson, &prep.x, &y, &w, Some(&prep.offset), Some(&beta0))?;
            components.push(comp);
            zip_stage.push(None);
            continue;
        }
        let bbar0 = match &bfit {
            Some(b) => b.components[bern_perm[j]].glm.coefficients.clone(),
            None => weighted_fit(Family::Bernoulli, &xb, &zero_target, &w, None, None)?.coefficients,
        };
        let zf = fit_zip_design(&prep.x, &xb, &y, &w, &prep.offset, &beta0, &bbar0, &config.zip)?;
        zip_stage.push(Some(ZipStageSummary {
            converged: zf.converged,
            iterations: zf.iterations,
            loglik: zf.loglik,
            degenerate: zf.degenerate,
            trace: zf.trace.clone(),
        }));
        comp.glm = zf.poisson.clone().unwrap_or_else(|| glm_from_coefficients(Family::Poisson, zf.beta.clone()));
        comp.zip = Some(ZipConditional {
            beta: zf.beta,
            beta_bar: zf.beta_bar,
            offset_log_exposure: config.selections.offset_exposure,
        });
        components.push(comp);
    }

    let (mut post, mut loglik) = estep_prepared(&prep, &components)?;
    let mut cluster_tests = Vec::new();
    let mut pooled = None;
    if config.lr_test && !config.force_poisson {
        let labels = hard_labels(&post);
        let mut demote = vec![false; k];
        let (mut phi_sum, mut m_sum) = (0.0, 0usize);
        for j in 0..k {
            let hard: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
            let rows = labels.iter().filter(|&&l| l == j).count();
            let zeros = (0..n).filter(|&i| labels[i] == j && y[i] == 0.0).count();
            let zc = components[j].zip.clone().expect("ZIP stage sets every conditional");
            if rows == 0 {
                demote[j] = true;
                continue;
            }
            let null = fit_cluster_conditional(
                &prep.x, &xb, &y, &hard, &prep.offset, ClusterConditional::Poisson, &zc.beta, None, &config.zip,
            )?;
            let alt = fit_cluster_conditional(
                &prep.x, &xb, &y, &hard, &prep.offset, ClusterConditional::Zip, &zc.beta, Some(&zc.beta_bar), &config.zip,
            )?;
            let m = xb.ncols();
            let test = zero_inflation_lr_test(null.loglik, alt.loglik, m)?;
            phi_sum += test.phi;
            m_sum += m;
            demote[j] = !test.reject;
            let marg: f64 = marginal_logdens(&prep, &components[j])?
                .iter()
                .zip(&hard)
                .map(|(v, h)| v * h)
                .sum();
            let nm = components[j].n_marginal_params() as f64;
            let ln_n = (rows as f64).ln();
            cluster_tests.push(ClusterTest {
                cluster: j + 1,
                rows,
                zeros,
                poisson_loglik: null.loglik,
                zip_loglik: alt.loglik,
                zero_inflated: test.reject,
                test: Some(test),
                bic_conditional_poisson: -2.0 * null.loglik + null.n_params as f64 * ln_n,
                bic_conditional_zip: -2.0 * alt.loglik + alt.n_params as f64 * ln_n,
                bic_joint_poisson: -2.0 * (null.loglik + marg) + (null.n_params as f64 + nm) * ln_n,
                bic_joint_zip: -2.0 * (alt.loglik + marg) + (alt.n_params as f64 + nm) * ln_n,
            });
        }
        if m_sum > 0 {
            pooled = Some(LrTestResult::from_statistic(phi_sum, m_sum));
        }
        if demote.iter().any(|&d| d) {
            for j in (0..k).filter(|&j| demote[j]) {
                let w = column(&partition, j);
                let start = components[j].glm.coefficients.clone();
                components[j].glm = weighted_fit(Family::Poisson, &prep.x, &y, &w, Some(&prep.offset), Some(&start))?;
                components[j].zip = None;
            }
            (post, loglik) = estep_prepared(&prep, &components)?;
        }
    } else if config.force_poisson {
        (post, loglik) = estep_prepared(&prep, &components)?;
    }

    Ok(GcwmModel {
        k,
        response_kind: ResponseKind::ZipFrequency,
        selections: config.selections.clone(),
        n_params: GcwmModel::count_params(&components),
        components,
        posteriors: post,
        loglik_trace: vec![loglik],
        loglik,
        n,
        converged: pfit.map_or(true, |p| p.converged)
            && bfit.map_or(true, |b| b.converged)
            && zip_stage.iter().flatten().all(|z| z.converged),
        iterations: pfit.map_or(0, |p| p.iterations) + bfit.map_or(0, |b| b.iterations),
        seed: config.seed,
        restarts: Default::default(),
        zero_inflation: Some(ZiDetails {
            partitioning: config.partitioning,
            no_zeros: false,
            poisson_partition_loglik: pfit.map(|p| p.loglik()),
            bernoulli_partition_loglik: bfit.map(|b| b.loglik()),
            poisson_partition_trace: pfit.map(|p| p.trace.clone()).unwrap_or_default(),
            bernoulli_partition_trace: bfit.map(|b| b.trace.clone()).unwrap_or_default(),
            zip_stage,
            cluster_tests,
            pooled,
            partition,
        }),
    })
}

/// One cluster of a model-against-model comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// One-based cluster number of the alternative model.
    pub cluster: usize,
    /// One-based component of the null model aligned to this cluster.
    pub null_component: usize,
    pub rows: usize,
    pub zeros: usize,
    pub null_form: ClusterConditional,
    pub alt_form: ClusterConditional,
    pub null_loglik: f64,
    pub alt_loglik: f64,
    /// Extra conditional parameters of the alternative.
    pub m: usize,
    /// `None` for an empty cluster. Equal forms give `m = 0` and never reject.
    pub test: Option<LrTestResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub rows: Vec<ComparisonRow>,
    pub pooled: Option<LrTestResult>,
    /// Adjusted Rand index between the two hard partitions.
    pub partition_agreement: f64,
}

fn conditional_form(m: &GcwmModel, j: usize) -> ClusterConditional {
    if m.components[j].zip.is_some() {
        ClusterConditional::Zip
    } else {
        ClusterConditional::Poisson
    }
}

/// Likelihood-ratio comparison of two frequency models cluster by cluster.
///
/// Rows are split by the alternative model's hard labels and null components
/// are matched to them by maximal agreement. Each cluster's conditional is
/// refitted in both forms on its rows, starting from the supplied parameters.
pub fn compare_models(
    dataset: &Dataset,
    null: &GcwmModel,
    alt: &GcwmModel,
    opts: &ZipOptions,
) -> Result<ModelComparison, EmError> {
    use ResponseKind::{PoissonFrequency, ZipFrequency};
    for (m, which) in [(null, "null"), (alt, "alternative")] {
        if !matches!(m.response_kind, PoissonFrequency | ZipFrequency) {
            return Err(EmError::Incompatible(format!("{which} model is not a count-frequency model")));
        }
    }
    if null.k != alt.k {
        return Err(EmError::Incompatible(format!("K differs ({} vs {})", null.k, alt.k)));
    }
    if null.selections.response != alt.selections.response || null.selections.offset_exposure != alt.selections.offset_exposure {
        return Err(EmError::Incompatible("response selections differ".into()));
    }
    let k = alt.k;
    let null_labels = hard_labels(&super::estep(dataset, null)?);
    let alt_labels = hard_labels(&super::estep(dataset, alt)?);
    let report = crate::selection::confusion_report(&alt_labels, &null_labels)?;
    let prep = Prepared::new(dataset, ZipFrequency, &alt.selections)?;
    let xb = prep.xb.as_ref().expect("ZIP preparation builds the Bernoulli design");
    let y = dataset.response();
    let start = |m: &GcwmModel, j: usize| -> (Vec<f64>, Option<Vec<f64>>) {
        match &m.components[j].zip {
            Some(z) => (z.beta.clone(), Some(z.beta_bar.clone())),
            None => (m.components[j].glm.coefficients.clone(), None),
        }
    };

    let mut rows = Vec::with_capacity(k);
    let (mut phi_sum, mut m_sum) = (0.0, 0usize);
    for j in 0..k {
        let jn = report.mapping.get(j).copied().filter(|&c| c < k).unwrap_or(j);
        let hard: Vec<f64> = alt_labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let n_rows = alt_labels.iter().filter(|&&l| l == j).count();
        let zeros = (0..y.len()).filter(|&i| alt_labels[i] == j && y[i] == 0.0).count();
        let (null_form, alt_form) = (conditional_form(null, jn), conditional_form(alt, j));
        let mut row = ComparisonRow {
            cluster: j + 1,
            null_component: jn + 1,
            rows: n_rows,
            zeros,
            null_form,
            alt_form,
            null_loglik: 0.0,
            alt_loglik: 0.0,
            m: 0,
            test: None,
        };
        if n_rows > 0 {
            let (nb, nbb) = start(null, jn);
            let (ab, abb) = start(alt, j);
            let nf = fit_cluster_conditional(&prep.x, xb, y, &hard, &prep.offset, null_form, &nb, nbb.as_deref(), opts)?;
            let af = fit_cluster_conditional(&prep.x, xb, y, &hard, &prep.offset, alt_form, &ab, abb.as_deref(), opts)?;
            row.null_loglik = nf.loglik;
            row.alt_loglik = af.loglik;
            row.m = af.n_params.saturating_sub(nf.n_params);
            if row.m > 0 {
                let test = zero_inflation_lr_test(nf.loglik, af.loglik, row.m)?;
                phi_sum += test.phi;
                m_sum += row.m;
                row.test = Some(test);
            } else {
                // same form on both sides: no restriction to test
                let phi = (-2.0 * (nf.loglik - af.loglik)).max(0.0);
                row.test = Some(LrTestResult { phi, m: 0, critical_95: 0.0, reject: false });
            }
        }
        rows.push(row);
    }
    Ok(ModelComparison {
        rows,
        pooled: (m_sum > 0).then(|| LrTestResult::from_statistic(phi_sum, m_sum)),
        partition_agreement: report.ari,
    })
}
