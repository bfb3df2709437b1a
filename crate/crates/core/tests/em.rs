mod common;

use common::*;
use gcwm_core::data::{build_design, DesignMatrix};
use gcwm_core::density::{GaussianMarginal, LogNormalMarginal, MultinomialMarginal};
use gcwm_core::em::{fit_zip_design, loglik_of, zip_loglik, ZipOptions};
use gcwm_core::glm::{fit_glm, GlmProblem, IrlsOptions};
use gcwm_core::numeric::{sigmoid, stream_rng};
use gcwm_core::selection::confusion_report;
use gcwm_core::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

fn glm(family: Family, coefficients: Vec<f64>, dispersion: Option<f64>) -> GlmFit {
    GlmFit {
        family,
        std_errors: vec![0.0; coefficients.len()],
        coefficients,
        dispersion,
        loglik: 0.0,
        iterations: 0,
        converged: true,
        separated: false,
        degenerate: false,
        dropped_columns: vec![],
        variance_floor: 0.0,
    }
}

fn component(tau: f64, shift: f64, beta: Vec<f64>, var: f64) -> ComponentParams {
    ComponentParams {
        tau,
        glm: glm(Family::Gaussian, beta, Some(var)),
        gaussian: Some(
            GaussianMarginal::new(
                DVector::from_vec(vec![shift, -shift]),
                DMatrix::from_row_slice(2, 2, &[1.0 + shift.abs(), 0.3, 0.3, 1.5]),
            )
            .unwrap(),
        ),
        lognormal: Some(LogNormalMarginal::new(DVector::from_element(1, 0.3 * shift), DMatrix::from_element(1, 1, 0.25)).unwrap()),
        discrete: Some(MultinomialMarginal::new(vec![vec![0.2 + 0.1 * shift, 0.5, 0.3 - 0.1 * shift]]).unwrap()),
        zip: None,
    }
}

fn sel() -> Selections {
    Selections::new(["t1", "log(u1)"])
}

#[test]
fn estep_single_component_gives_unit_posteriors() {
    let t = toy(30, 1);
    let ds = toy_dataset(&t, false);
    let model = GcwmModel::from_components(ResponseKind::GaussianSeverity, sel(), vec![component(1.0, 0.0, vec![1.0, 2.0, -1.0], 1.0)]);
    let post = estep(&ds, &model).unwrap();
    assert!(post.iter().all(|&v| v == 1.0));
}

#[test]
fn estep_identical_components_split_evenly() {
    let t = toy(30, 2);
    let ds = toy_dataset(&t, false);
    let c = component(0.5, 1.0, vec![1.0, 2.0, -1.0], 2.0);
    let model = GcwmModel::from_components(ResponseKind::GaussianSeverity, sel(), vec![c.clone(), c]);
    let post = estep(&ds, &model).unwrap();
    assert!(post.iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn estep_matches_density_ratio_oracle() {
    let t = toy(40, 3);
    let ds = toy_dataset(&t, false);
    let comps = vec![component(0.35, 0.0, vec![1.0, 2.0, -1.0], 1.5), component(0.65, 1.0, vec![0.0, 1.0, 0.5], 3.0)];
    let model = GcwmModel::from_components(ResponseKind::GaussianSeverity, sel(), comps.clone());
    let post = estep(&ds, &model).unwrap();
    for i in 0..40 {
        let f: Vec<f64> = comps
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let shift = k as f64;
                let b = &c.glm.coefficients;
                let mean = b[0] + b[1] * t.t[i][0] + b[2] * t.u[i].ln();
                let cov = [[1.0 + shift, 0.3], [0.3, 1.5]];
                let gamma = [0.2 + 0.1 * shift, 0.5, 0.3 - 0.1 * shift];
                c.tau
                    * normal_pdf(t.y[i], mean, c.glm.dispersion.unwrap())
                    * bivariate_normal_pdf(t.t[i], [shift, -shift], cov)
                    * lognormal_pdf(t.u[i], 0.3 * shift, 0.25)
                    * gamma[t.w[i]]
            })
            .collect();
        let total: f64 = f.iter().sum();
        for k in 0..2 {
            assert!((post[(i, k)] - f[k] / total).abs() < 1e-12, "row {i} component {k}");
        }
    }
}

#[test]
fn mstep_with_hard_labels_gives_group_statistics() {
    let t = toy(40, 4);
    let ds = toy_dataset(&t, false);
    let post = DMatrix::from_fn(40, 2, |i, k| if t.labels[i] == k { 1.0 } else { 0.0 });
    let comps = mstep(&ds, &post, ResponseKind::GaussianSeverity, &sel()).unwrap();
    for k in 0..2 {
        let rows: Vec<usize> = (0..40).filter(|&i| t.labels[i] == k).collect();
        assert!((comps[k].tau - rows.len() as f64 / 40.0).abs() < 1e-15);
        let mean0 = rows.iter().map(|&i| t.t[i][0]).sum::<f64>() / rows.len() as f64;
        assert!((comps[k].gaussian.as_ref().unwrap().mu[0] - mean0).abs() < 1e-12);
    }
}

#[test]
fn mstep_with_constant_posteriors_matches_single_fit() {
    let t = toy(40, 5);
    let ds = toy_dataset(&t, false);
    let post = DMatrix::from_element(40, 2, 0.5);
    let comps = mstep(&ds, &post, ResponseKind::GaussianSeverity, &sel()).unwrap();
    let x = build_design(&ds, &sel().response).unwrap();
    let single = gcwm_core::glm::fit_gaussian_weighted(&x, &t.y, &[1.0; 40]).unwrap();
    for c in &comps {
        for (a, b) in c.glm.coefficients.iter().zip(&single.coefficients) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn single_component_fit_is_the_plain_glm() {
    let t = toy(60, 6);
    let ds = toy_dataset(&t, true);
    let cfg = FitConfig::new(1, ResponseKind::PoissonFrequency, Selections::new(["t1"])).inits(vec![Init::Random]);
    let m = fit_gcwm(&ds, &cfg).unwrap();
    let x = build_design(&ds, &["t1"]).unwrap();
    let plain = gcwm_core::glm::fit_poisson_weighted(&x, &t.counts, &[1.0; 60], &[0.0; 60]).unwrap();
    for (a, b) in m.components[0].glm.coefficients.iter().zip(&plain.coefficients) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!(m.converged);
}

#[test]
fn separated_clusters_are_recovered_exactly() {
    let (ds, labels) = separated_pair(100, 8);
    let cfg = FitConfig::new(2, ResponseKind::GaussianSeverity, Selections::new(["x"])).seed(3);
    let m = fit_gcwm(&ds, &cfg).unwrap();
    let r = confusion_report(&labels, &m.labels()).unwrap();
    assert_eq!(r.misclassification, 0.0);
    for w in m.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8);
    }
    for i in 0..m.posteriors.nrows() {
        assert!((m.posteriors.row(i).sum() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn relabeling_components_keeps_the_likelihood() {
    let (ds, _) = separated_pair(60, 9);
    let m = fit_gcwm(&ds, &FitConfig::new(2, ResponseKind::GaussianSeverity, Selections::new(["x"])).seed(1)).unwrap();
    let swapped = m.permuted(&[1, 0]);
    let a = loglik_of(&ds, &m).unwrap();
    let b = loglik_of(&ds, &swapped).unwrap();
    assert!((a - b).abs() < 1e-9 * a.abs());
    assert!((a - m.loglik).abs() < 1e-9 * a.abs());
}

#[test]
fn fits_are_deterministic_given_seed() {
    let (ds, _) = separated_pair(60, 10);
    let cfg = FitConfig::new(2, ResponseKind::GaussianSeverity, Selections::new(["x"])).seed(42);
    let a = fit_gcwm(&ds, &cfg).unwrap();
    let b = fit_gcwm(&ds, &cfg.clone().parallel(false)).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.components, b.components);
}

#[test]
fn undersized_data_is_refused() {
    let (ds, _) = separated_pair(10, 11);
    let err = fit_gcwm(&ds, &FitConfig::new(3, ResponseKind::GaussianSeverity, Selections::new(["x"]))).unwrap_err();
    assert!(matches!(err, gcwm_core::error::EmError::Sizing { needed: 30, .. }));
    assert!(matches!(
        fit_gcwm(&ds, &FitConfig::new(0, ResponseKind::GaussianSeverity, Selections::new(["x"]))),
        Err(gcwm_core::error::EmError::ZeroComponents)
    ));
}

#[test]
fn claim_weight_scale_leaves_severity_coefficients_unchanged() {
    let t = toy(50, 12);
    let mut rng = stream_rng(12, 9);
    let w: Vec<f64> = (0..50).map(|_| rng.gen_range(1..4) as f64).collect();
    let base = toy_dataset(&t, false);
    let make = |scale: f64| {
        Dataset::builder()
            .gaussian("t1", t.t.iter().map(|r| r[0]).collect())
            .gaussian("t2", t.t.iter().map(|r| r[1]).collect())
            .lognormal("u1", t.u.clone())
            .discrete("w1", ["a", "b", "c"], t.w.clone())
            .response("y", t.y.clone())
            .claim_weights("n", w.iter().map(|v| v * scale).collect())
            .build()
            .unwrap()
    };
    let post = random_posteriors(50, 2, 12);
    let s = sel().with_claim_weights(true);
    let a = mstep(&make(1.0), &post, ResponseKind::GaussianLogSeverity, &s).unwrap();
    let b = mstep(&make(7.5), &post, ResponseKind::GaussianLogSeverity, &s).unwrap();
    for (ca, cb) in a.iter().zip(&b) {
        for (x, y) in ca.glm.coefficients.iter().zip(&cb.glm.coefficients) {
            assert!((x - y).abs() < 1e-6 * x.abs().max(1.0));
        }
    }
    assert_eq!(base.n(), 50);
}

fn zip_data(n: usize, seed: u64, psi_intercept: Option<f64>) -> Dataset {
    let mut rng = stream_rng(seed, 0);
    let (mut x, mut y) = (vec![], vec![]);
    for _ in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let lam = (0.5 + 0.4 * xi).exp();
        let psi = psi_intercept.map_or(0.0, |b| sigmoid(b + 0.5 * xi));
        let c = Poisson::new(lam).unwrap().sample(&mut rng);
        x.push(xi);
        y.push(if rng.gen::<f64>() < psi { 0.0 } else { c });
    }
    Dataset::builder().gaussian("x", x).response("y", y).build().unwrap()
}

#[test]
fn zero_inflated_fit_with_poisson_forced_nests_the_poisson_gcwm() {
    let ds = zip_data(300, 13, Some(-0.5));
    let s = Selections::new(["x"]).with_bernoulli(["x"]);
    let pois = fit_gcwm(&ds, &FitConfig::new(1, ResponseKind::PoissonFrequency, s.clone()).inits(vec![Init::Random])).unwrap();
    let mut zc = ZiConfig::new(1, s).inits(vec![Init::Random]);
    zc.force_poisson = true;
    let zi = fit_zigcwm(&ds, &zc).unwrap();
    assert!((zi.loglik - pois.loglik).abs() < 1e-8, "{} vs {}", zi.loglik, pois.loglik);
}

#[test]
fn data_without_zeros_reduces_to_poisson_gcwm() {
    let mut rng = stream_rng(14, 0);
    let x: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = x.iter().map(|v: &f64| 1.0 + Poisson::new((1.0 + 0.3 * v).exp()).unwrap().sample(&mut rng)).collect();
    let ds = Dataset::builder().gaussian("x", x).response("y", y).build().unwrap();
    let s = Selections::new(["x"]).with_bernoulli(["x"]);
    let pois = fit_gcwm(&ds, &FitConfig::new(2, ResponseKind::PoissonFrequency, s.clone()).seed(5)).unwrap();
    let zi = fit_zigcwm(&ds, &ZiConfig::new(2, s).seed(5)).unwrap();
    assert!(zi.components.iter().all(|c| c.zip.is_none()));
    assert_eq!(zi.loglik, pois.loglik);
    assert!(zi.zero_inflation.as_ref().unwrap().no_zeros);
}

#[test]
fn inflated_cluster_keeps_zip_and_plain_cluster_is_demoted() {
    // cluster 0 inflated, cluster 1 plain Poisson, separated in x
    let mut rng = stream_rng(15, 0);
    let (mut x, mut y) = (vec![], vec![]);
    for g in 0..2 {
        for _ in 0..400 {
            let xi: f64 = if g == 0 { 0.0 } else { 8.0 } + rng.sample::<f64, _>(StandardNormal);
            let c = Poisson::new((1.0 + 0.1 * (xi - 8.0 * g as f64)).exp()).unwrap().sample(&mut rng);
            x.push(xi);
            y.push(if g == 0 && rng.gen::<f64>() < 0.5 { 0.0 } else { c });
        }
    }
    let ds = Dataset::builder().gaussian("x", x).response("y", y).build().unwrap();
    let m = fit_zigcwm(&ds, &ZiConfig::new(2, Selections::new(["x"]).with_bernoulli(Vec::<String>::new())).seed(2)).unwrap();
    let details = m.zero_inflation.as_ref().unwrap();
    let inflated: Vec<bool> = details.cluster_tests.iter().map(|t| t.zero_inflated).collect();
    assert_eq!(inflated.iter().filter(|&&b| b).count(), 1, "{:?}", details.cluster_tests);
    let strong = details.cluster_tests.iter().find(|t| t.zero_inflated).unwrap();
    assert!(strong.test.unwrap().phi > 10.0 * strong.test.unwrap().critical_95);
    assert_eq!(m.components.iter().filter(|c| c.zip.is_some()).count(), 1);
    for t in &details.cluster_tests {
        assert!(t.bic_joint_poisson > t.bic_conditional_poisson);
    }
}

fn numeric_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let p = x.len();
    let h = 1e-4;
    DMatrix::from_fn(p, p, |i, j| {
        let at = |di: f64, dj: f64| {
            let mut y = x.to_vec();
            y[i] += di;
            y[j] += dj;
            f(&y)
        };
        (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
    })
}

#[test]
fn single_cluster_zip_is_calibrated() {
    let truth = [0.5, 0.4, -0.5, 0.5];
    let runs = 100;
    let mut within = 0;
    let mut total = 0;
    for r in 0..runs {
        let ds = zip_data(2000, 100 + r, Some(truth[2]));
        let x = build_design(&ds, &["x"]).unwrap();
        let y = ds.response().to_vec();
        let w = vec![1.0; y.len()];
        let off = vec![0.0; y.len()];
        let fit = fit_zip_design(&x, &x, &y, &w, &off, &[0.0, 0.0], &[0.0, 0.0], &ZipOptions::default()).unwrap();
        assert!(fit.converged);
        let est = [fit.beta[0], fit.beta[1], fit.beta_bar[0], fit.beta_bar[1]];
        let ll = |p: &[f64]| zip_loglik(&x, &x, &y, &w, &off, &p[..2], &p[2..]);
        let info = -numeric_hessian(&ll, &est);
        let cov = info.try_inverse().unwrap();
        for j in 0..4 {
            total += 1;
            if (est[j] - truth[j]).abs() <= 3.0 * cov[(j, j)].sqrt() {
                within += 1;
            }
        }
    }
    assert!(within as f64 >= 0.9 * total as f64, "{within}/{total}");
}

#[test]
fn zip_stage_traces_never_decrease() {
    let ds = zip_data(400, 16, Some(0.0));
    let m = fit_zigcwm(&ds, &ZiConfig::new(2, Selections::new(["x"]).with_bernoulli(["x"])).seed(7)).unwrap();
    let d = m.zero_inflation.unwrap();
    for s in d.zip_stage.iter().flatten() {
        for w in s.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }
    for w in d.poisson_partition_trace.windows(2).chain(d.bernoulli_partition_trace.windows(2)) {
        assert!(w[1] >= w[0] - 1e-8);
    }
}

#[test]
fn glm_mstep_maximizes_the_weighted_objective() {
    let t = toy(50, 17);
    let ds = toy_dataset(&t, true);
    let post = random_posteriors(50, 2, 17);
    let s = Selections::new(["t1"]);
    let comps = mstep(&ds, &post, ResponseKind::PoissonFrequency, &s).unwrap();
    let x: DesignMatrix = build_design(&ds, &["t1"]).unwrap();
    for k in 0..2 {
        let w: Vec<f64> = post.column(k).iter().copied().collect();
        let obj = |b: &[f64]| -> f64 {
            (0..50).map(|i| {
                let eta = b[0] + b[1] * t.t[i][0];
                w[i] * (t.counts[i] * eta - eta.exp())
            }).sum()
        };
        let best = numeric_maximize(&obj, &[0.0, 0.0]);
        for (a, b) in comps[k].glm.coefficients.iter().zip(&best) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let direct = fit_glm(
            &GlmProblem { family: Family::Poisson, x: &x, y: &t.counts, weights: &w, offset: None },
            None,
            &IrlsOptions::default(),
        )
        .unwrap();
        assert!((direct.coefficients[1] - comps[k].glm.coefficients[1]).abs() < 1e-9);
    }
}

#[test]
fn model_comparison_detects_inflation_and_identity() {
    use gcwm_core::em::compare_models;
    let ds = zip_data(600, 18, Some(0.0));
    let s = Selections::new(["x"]).with_bernoulli(["x"]);
    let pois = fit_gcwm(&ds, &FitConfig::new(1, ResponseKind::PoissonFrequency, s.clone()).inits(vec![Init::Random])).unwrap();
    let zi = fit_zigcwm(&ds, &ZiConfig::new(1, s.clone()).inits(vec![Init::Random])).unwrap();
    let cmp = compare_models(&ds, &pois, &zi, &ZipOptions::default()).unwrap();
    let t = cmp.rows[0].test.unwrap();
    assert_eq!(t.m, 2);
    assert!(t.reject && t.phi > 10.0 * t.critical_95);
    assert!((cmp.partition_agreement - 1.0).abs() < 1e-12);

    let same = compare_models(&ds, &zi, &zi, &ZipOptions::default()).unwrap();
    let t = same.rows[0].test.unwrap();
    assert_eq!((t.phi, t.reject), (0.0, false));

    let two = fit_gcwm(&ds, &FitConfig::new(2, ResponseKind::PoissonFrequency, s).seed(1)).unwrap();
    assert!(matches!(compare_models(&ds, &two, &zi, &ZipOptions::default()), Err(gcwm_core::error::EmError::Incompatible(_))));
}
