use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{
    collapse_threshold, init, ComponentParams, FitConfig, GcwmModel, Init, Prepared, ResponseKind, RestartSummary,
    Selections, StopRule,
};
use crate::data::Dataset;
use crate::density::{GaussianMarginal, LogNormalMarginal, MultinomialMarginal, MvnKernel};
use crate::error::EmError;
use crate::glm::{fit_glm, GlmProblem, IrlsOptions};
use crate::numeric::{log_sum_exp, stream_rng};

/// Per-component quantities that are fixed within one E-step.
struct Evaluator<'c> {
    log_tau: f64,
    comp: &'c ComponentParams,
    gaussian: Option<MvnKernel>,
    lognormal: Option<MvnKernel>,
    log_gamma: Vec<Vec<f64>>,
}

impl<'c> Evaluator<'c> {
    fn new(comp: &'c ComponentParams) -> Result<Self, EmError> {
        Ok(Self {
            log_tau: comp.tau.ln(),
            comp,
            gaussian: comp.gaussian.as_ref().map(|g| g.kernel()).transpose()?,
            lognormal: comp.lognormal.as_ref().map(|g| g.log_kernel()).transpose()?,
            log_gamma: comp
                .discrete
                .as_ref()
                .map(|d| d.gamma.iter().map(|g| g.iter().map(|p| p.ln()).collect()).collect())
                .unwrap_or_default(),
        })
    }

    fn marginal(&self, prep: &Prepared<'_>, i: usize) -> f64 {
        let mut v = 0.0;
        if let Some(k) = &self.gaussian {
            v += k.logpdf(prep.t_row(i));
        }
        if let Some(k) = &self.lognormal {
            v += k.logpdf(prep.log_u_row(i)) - prep.jacobian[i];
        }
        for (r, lg) in self.log_gamma.iter().enumerate() {
            v += lg.get(prep.ds.discrete()[r][i]).copied().unwrap_or(f64::NEG_INFINITY);
        }
        v
    }

    fn conditional(&self, prep: &Prepared<'_>, i: usize) -> f64 {
        let xrow = prep.x.row(i);
        match (&self.comp.zip, &prep.xb) {
            (Some(z), Some(xb)) => z.links_unchecked(xrow, xb.row(i), prep.log_exposure[i]).logpmf(prep.target[i]),
            _ => prep.omega[i] * self.comp.glm.log_density(xrow, prep.target[i], prep.offset[i]),
        }
    }
}

fn check_components(prep: &Prepared<'_>, comps: &[ComponentParams]) -> Result<(), EmError> {
    let ds = prep.ds;
    for c in comps {
        let pg = c.gaussian.as_ref().map_or(0, |g| g.dim());
        let pl = c.lognormal.as_ref().map_or(0, |g| g.dim());
        let pd = c.discrete.as_ref().map_or(0, |d| d.n_covariates());
        if pg != ds.p_gaussian() || pl != ds.p_lognormal() || pd != ds.discrete().len() {
            return Err(crate::error::DensityError::Dimension { expected: ds.covariates().len(), got: pg + pl + pd }.into());
        }
        if c.glm.coefficients.len() != prep.x.ncols() {
            return Err(crate::error::DensityError::Dimension { expected: prep.x.ncols(), got: c.glm.coefficients.len() }.into());
        }
        if let Some(z) = &c.zip {
            let wb = prep.xb.as_ref().map_or(0, |x| x.ncols());
            if z.beta_bar.len() != wb || z.beta.len() != prep.x.ncols() {
                return Err(crate::error::DensityError::Dimension { expected: wb, got: z.beta_bar.len() }.into());
            }
        }
    }
    Ok(())
}

/// Component-wise joint log-densities `ln tau_k + ln f_k(x_i, y_i)`.
pub(crate) fn log_joint(prep: &Prepared<'_>, comps: &[ComponentParams]) -> Result<DMatrix<f64>, EmError> {
    let evals: Vec<Evaluator<'_>> = comps.iter().map(Evaluator::new).collect::<Result<_, _>>()?;
    let n = prep.n();
    let mut out = DMatrix::zeros(n, comps.len());
    for (k, e) in evals.iter().enumerate() {
        for i in 0..n {
            out[(i, k)] = e.log_tau + e.marginal(prep, i) + e.conditional(prep, i);
        }
    }
    Ok(out)
}

/// Posteriors and observed log-likelihood.
pub(crate) fn estep_prepared(prep: &Prepared<'_>, comps: &[ComponentParams]) -> Result<(DMatrix<f64>, f64), EmError> {
    let mut lj = log_joint(prep, comps)?;
    let k = comps.len();
    let mut total = 0.0;
    let mut buf = vec![0.0; k];
    for i in 0..lj.nrows() {
        for j in 0..k {
            buf[j] = lj[(i, j)];
        }
        let lse = log_sum_exp(&buf);
        if !lse.is_finite() {
            return Err(EmError::ZeroDensity(i + 1));
        }
        total += lse;
        for j in 0..k {
            lj[(i, j)] = (buf[j] - lse).exp();
        }
    }
    Ok((lj, total))
}

/// Posterior membership probabilities of every row under `model`.
pub fn estep(dataset: &Dataset, model: &GcwmModel) -> Result<DMatrix<f64>, EmError> {
    let prep = Prepared::new(dataset, model.response_kind, &model.selections)?;
    check_components(&prep, &model.components)?;
    Ok(estep_prepared(&prep, &model.components)?.0)
}

/// Observed log-likelihood of `dataset` under `model`.
pub fn loglik_of(dataset: &Dataset, model: &GcwmModel) -> Result<f64, EmError> {
    let prep = Prepared::new(dataset, model.response_kind, &model.selections)?;
    check_components(&prep, &model.components)?;
    Ok(estep_prepared(&prep, &model.components)?.1)
}

fn weighted_moments(rows: &[f64], p: usize, w: &[f64], mass: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = w.len();
    let mut mu = DVector::zeros(p);
    for i in 0..n {
        for a in 0..p {
            mu[a] += w[i] * rows[i * p + a];
        }
    }
    mu /= mass;
    let mut sigma = DMatrix::zeros(p, p);
    let mut d = vec![0.0; p];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        for a in 0..p {
            d[a] = rows[i * p + a] - mu[a];
        }
        for a in 0..p {
            for b in 0..=a {
                sigma[(a, b)] += w[i] * d[a] * d[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            sigma[(b, a)] = sigma[(a, b)];
        }
    }
    (mu, sigma / mass)
}

/// Covariate-marginal updates and mixing weight for one component.
pub(crate) fn marginal_update(prep: &Prepared<'_>, w: &[f64]) -> Result<ComponentParams, EmError> {
    let ds = prep.ds;
    let mass: f64 = w.iter().sum();
    let gaussian = if ds.p_gaussian() > 0 {
        let (mu, s) = weighted_moments(&prep.t, ds.p_gaussian(), w, mass);
        Some(GaussianMarginal::new(mu, s)?)
    } else {
        None
    };
    let lognormal = if ds.p_lognormal() > 0 {
        let (mu, s) = weighted_moments(&prep.log_u, ds.p_lognormal(), w, mass);
        Some(LogNormalMarginal::new(mu, s)?)
    } else {
        None
    };
    let discrete = if ds.discrete().is_empty() {
        None
    } else {
        let gamma = ds
            .discrete()
            .iter()
            .zip(ds.discrete_levels())
            .map(|(col, c)| {
                let mut g = vec![0.0; c];
                for (i, &s) in col.iter().enumerate() {
                    g[s] += w[i];
                }
                g.iter().map(|v| v / mass).collect()
            })
            .collect();
        Some(MultinomialMarginal::new(gamma)?)
    };
    Ok(ComponentParams {
        tau: mass / prep.n() as f64,
        glm: placeholder_glm(prep),
        gaussian,
        lognormal,
        discrete,
        zip: None,
    })
}

fn placeholder_glm(prep: &Prepared<'_>) -> crate::glm::GlmFit {
    let p = prep.x.ncols();
    crate::glm::GlmFit {
        family: prep.kind.family(),
        coefficients: vec![0.0; p],
        std_errors: vec![0.0; p],
        dispersion: None,
        loglik: f64::NAN,
        iterations: 0,
        converged: false,
        separated: false,
        degenerate: false,
        dropped_columns: Vec::new(),
        variance_floor: 0.0,
    }
}

pub(crate) fn column(post: &DMatrix<f64>, k: usize) -> Vec<f64> {
    post.column(k).iter().copied().collect()
}

pub(crate) fn mstep_prepared(
    prep: &Prepared<'_>,
    post: &DMatrix<f64>,
    previous: Option<&[ComponentParams]>,
) -> Result<Vec<ComponentParams>, EmError> {
    let (n, k) = (prep.n(), post.ncols());
    if post.nrows() != n || k == 0 {
        return Err(EmError::PosteriorShape { rows: post.nrows(), cols: k, n, k: k.max(1) });
    }
    let threshold = collapse_threshold(n, k);
    let opts = IrlsOptions::default();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let w = column(post, j);
        let mass: f64 = w.iter().sum();
        if !(mass >= threshold) {
            return Err(EmError::Collapse { component: j + 1, mass, threshold });
        }
        let mut comp = marginal_update(prep, &w)?;
        let weights: Vec<f64> = w.iter().zip(&prep.omega).map(|(a, b)| a * b).collect();
        let problem = GlmProblem {
            family: prep.kind.family(),
            x: &prep.x,
            y: &prep.target,
            weights: &weights,
            offset: Some(&prep.offset),
        };
        let start = previous.map(|p| p[j].glm.coefficients.as_slice());
        comp.glm = fit_glm(&problem, start, &opts)?;
        out.push(comp);
    }
    Ok(out)
}

/// Maximizes the expected complete-data log-likelihood given posteriors.
pub fn mstep(
    dataset: &Dataset,
    posteriors: &DMatrix<f64>,
    kind: ResponseKind,
    selections: &Selections,
) -> Result<Vec<ComponentParams>, EmError> {
    let prep = Prepared::new(dataset, kind, selections)?;
    for i in 0..posteriors.nrows() {
        let s: f64 = posteriors.row(i).sum();
        if (s - 1.0).abs() > 1e-8 || posteriors.row(i).iter().any(|v| !(*v >= 0.0)) {
            return Err(EmError::BadLabels(format!("posterior row {} does not sum to 1", i + 1)));
        }
    }
    mstep_prepared(&prep, posteriors, None)
}

/// Outcome of one EM run from one starting partition.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub components: Vec<ComponentParams>,
    pub posteriors: DMatrix<f64>,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl EmRun {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

pub(crate) fn run_em(prep: &Prepared<'_>, post0: &DMatrix<f64>, stop: &StopRule) -> Result<EmRun, EmError> {
    let mut comps = mstep_prepared(prep, post0, None)?;
    let (mut post, ll) = estep_prepared(prep, &comps)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < stop.max_iter {
        iterations += 1;
        let next = mstep_prepared(prep, &post, Some(&comps))?;
        let (npost, nll) = estep_prepared(prep, &next)?;
        let prev = *trace.last().unwrap();
        if nll < prev - 1e-8 * prev.abs().max(1.0) {
            log::warn!("log-likelihood decreased from {prev} to {nll} at iteration {iterations}");
        }
        comps = next;
        post = npost;
        trace.push(nll);
        if stop.converged(&trace) {
            converged = true;
            break;
        }
    }
    Ok(EmRun { components: comps, posteriors: post, trace, converged, iterations })
}

/// Design width used in the sizing rule.
pub(crate) fn check_sizing(n: usize, k: usize, width: usize) -> Result<(), EmError> {
    let needed = 5 * k * width;
    if n < needed {
        return Err(EmError::Sizing { n, k, width, needed });
    }
    Ok(())
}

/// Runs every start in `inits` and returns the runs in init order.
pub(crate) fn run_restarts(
    prep: &Prepared<'_>,
    k: usize,
    inits: &[Init],
    stop: &StopRule,
    seed: u64,
    parallel: bool,
) -> Vec<Result<EmRun, EmError>> {
    let one = |(idx, start): (usize, &Init)| {
        let mut rng = stream_rng(seed, idx as u64);
        let post0 = init::initial_posteriors_prepared(prep, start, k, &mut rng)?;
        run_em(prep, &post0, stop)
    };
    if parallel {
        inits.par_iter().enumerate().map(one).collect()
    } else {
        inits.iter().enumerate().map(one).collect()
    }
}

/// Picks the highest final log-likelihood; the earliest start wins ties.
pub(crate) fn best_run(runs: Vec<Result<EmRun, EmError>>) -> Result<(EmRun, RestartSummary), EmError> {
    let attempted = runs.len();
    let logliks: Vec<Option<f64>> =
        runs.iter().map(|r| r.as_ref().ok().map(|r| r.loglik()).filter(|v| v.is_finite())).collect();
    let failed = logliks.iter().filter(|v| v.is_none()).count();
    let mut chosen = None;
    for (i, v) in logliks.iter().enumerate() {
        if let Some(v) = v {
            if chosen.map_or(true, |c: usize| *v > logliks[c].unwrap()) {
                chosen = Some(i);
            }
        }
    }
    let Some(chosen) = chosen else {
        let last = runs
            .into_iter()
            .rev()
            .find_map(|r| r.err())
            .map_or_else(|| "no starts".to_string(), |e| e.to_string());
        return Err(EmError::AllRestartsFailed { restarts: attempted, last });
    };
    let run = runs.into_iter().nth(chosen).unwrap().unwrap();
    Ok((run, RestartSummary { attempted, failed, chosen, logliks }))
}

/// Fits a GCWM by EM from every configured start and keeps the best.
///
/// [`ResponseKind::ZipFrequency`] is routed to [`super::fit_zigcwm`] with
/// Bernoulli/Poisson partitioning.
pub fn fit_gcwm(dataset: &Dataset, config: &FitConfig) -> Result<GcwmModel, EmError> {
    if config.k == 0 {
        return Err(EmError::ZeroComponents);
    }
    if config.kind == ResponseKind::ZipFrequency {
        return super::fit_zigcwm(dataset, &super::zigcwm::ZiConfig::from_fit_config(config));
    }
    if config.inits.is_empty() {
        return Err(EmError::BadLabels("no initialization strategies given".into()));
    }
    let prep = Prepared::new(dataset, config.kind, &config.selections)?;
    check_sizing(prep.n(), config.k, prep.x.ncols())?;
    let runs = run_restarts(&prep, config.k, &config.inits, &config.stop, config.seed, config.parallel);
    let (run, restarts) = best_run(runs)?;
    Ok(model_from_run(&prep, config.k, run, restarts, config.seed))
}

pub(crate) fn model_from_run(prep: &Prepared<'_>, k: usize, run: EmRun, restarts: RestartSummary, seed: u64) -> GcwmModel {
    GcwmModel {
        k,
        response_kind: prep.kind,
        selections: prep.selections.clone(),
        n_params: GcwmModel::count_params(&run.components),
        loglik: run.loglik(),
        components: run.components,
        posteriors: run.posteriors,
        loglik_trace: run.trace,
        n: prep.n(),
        converged: run.converged,
        iterations: run.iterations,
        seed,
        restarts,
        zero_inflation: None,
    }
}

/// Covariate-marginal log-density of every row under one component.
pub(crate) fn marginal_logdens(prep: &Prepared<'_>, comp: &ComponentParams) -> Result<Vec<f64>, EmError> {
    let e = Evaluator::new(comp)?;
    Ok((0..prep.n()).map(|i| e.marginal(prep, i)).collect())
}

/// A GLM record for coefficients that did not come out of a solver run.
pub(crate) fn glm_from_coefficients(family: crate::glm::Family, coefficients: Vec<f64>) -> crate::glm::GlmFit {
    crate::glm::GlmFit {
        family,
        std_errors: vec![0.0; coefficients.len()],
        coefficients,
        dispersion: None,
        loglik: f64::NAN,
        iterations: 0,
        converged: false,
        separated: false,
        degenerate: false,
        dropped_columns: Vec::new(),
        variance_floor: 0.0,
    }
}
