mod common;

use common::*;
use gcwm_core::density::{lognormal_logpdf, normal_logpdf, LogNormalMarginal, ZipConditional};
use gcwm_core::em::{fit_zip_design, ZipOptions};
use gcwm_core::selection::{adjusted_rand_index, mixture_critical_95, optimal_assignment};
use gcwm_core::simgen::{generate_gcwm_study, generate_zip_study};
use gcwm_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ari_is_invariant_under_relabeling(a in labels(30, 3), b in labels(30, 4), shift in 1usize..4) {
        let relabeled: Vec<usize> = b.iter().map(|&v| (v + shift) % 4).collect();
        let x = adjusted_rand_index(&a, &b).unwrap();
        let y = adjusted_rand_index(&a, &relabeled).unwrap();
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((adjusted_rand_index(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((x - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aligned_trace_dominates_every_permutation(truth in labels(40, 3), pred in labels(40, 3)) {
        let r = confusion_report(&truth, &pred).unwrap();
        let aligned: usize = (0..r.matrix.len()).map(|t| r.matrix[t][t]).sum();
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let trace = truth.iter().zip(&pred).filter(|(&t, &p)| perm[p] == t).count();
            prop_assert!(aligned >= trace);
        }
    }

    #[test]
    fn bic_order_survives_a_common_shift(l1 in -1e4..0.0f64, l2 in -1e4..0.0f64, c in -1e3..1e3f64, nu in 1usize..20, n in 50usize..5000) {
        let (a, b) = (InfoCriteria::new(l1, nu, n), InfoCriteria::new(l2, nu, n));
        let (sa, sb) = (InfoCriteria::new(l1 + c, nu, n), InfoCriteria::new(l2 + c, nu, n));
        prop_assert_eq!(a.bic < b.bic, sa.bic < sb.bic);
    }

    #[test]
    fn critical_value_increases_with_df(m in 1usize..30) {
        prop_assert!(mixture_critical_95(m + 1) > mixture_critical_95(m));
    }

    #[test]
    fn assignment_is_a_permutation(vals in prop::collection::vec(0.0..10.0f64, 16)) {
        let w = DMatrix::from_row_slice(4, 4, &vals);
        let mut a = optimal_assignment(&w);
        a.sort();
        prop_assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn lognormal_is_normal_of_log_times_jacobian(mu in -2.0..2.0f64, var in 0.05..3.0f64, u in 0.01..50.0f64) {
        let m = LogNormalMarginal::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap();
        let lhs = lognormal_logpdf(&[u], &m).unwrap();
        let rhs = normal_logpdf(u.ln(), mu, var) - u.ln();
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!((lhs.exp() - lognormal_pdf(u, mu, var)).abs() < 1e-12 * lognormal_pdf(u, mu, var).max(1.0));
    }

    #[test]
    fn zip_pmf_sums_to_one(b in -2.0..2.5f64, bb in -6.0..4.0f64) {
        let z = ZipConditional { beta: vec![b], beta_bar: vec![bb], offset_log_exposure: false };
        let links = z.links(&[1.0], &[1.0], 1.0).unwrap();
        let total: f64 = (0..400).map(|y| links.logpmf(y as f64).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posteriors_are_distributions(seed in 0u64..1000) {
        let t = toy(25, seed);
        let ds = toy_dataset(&t, false);
        let post = random_posteriors(25, 3, seed);
        let sel = Selections::new(["t1"]);
        let comps = mstep(&ds, &post, ResponseKind::GaussianSeverity, &sel).unwrap();
        let model = GcwmModel::from_components(ResponseKind::GaussianSeverity, sel, comps);
        let p = estep(&ds, &model).unwrap();
        for i in 0..25 {
            prop_assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zip_never_loses_to_the_nested_poisson(seed in 0u64..10_000, inflate in prop::bool::ANY) {
        use gcwm_core::glm::fit_poisson_weighted;
        let design = SimDesign::zip_default();
        let out = generate_zip_study(&design, seed, Condition::Normal).unwrap();
        let rows: Vec<usize> = (0..out.labels.len()).filter(|&i| out.labels[i] == usize::from(!inflate) + 1).collect();
        let ds = out.dataset.subset(&rows);
        let x = build_design(&ds, &["SimDriverAge"]).unwrap();
        let y = ds.response().to_vec();
        let w = vec![1.0; y.len()];
        let off: Vec<f64> = ds.exposure().iter().map(|e| e.ln()).collect();
        let pois = fit_poisson_weighted(&x, &y, &w, &off).unwrap();
        let mut init_bar = vec![0.0; x.ncols()];
        init_bar[0] = -30.0;
        let zip = fit_zip_design(&x, &x, &y, &w, &off, &pois.coefficients, &init_bar, &ZipOptions::default()).unwrap();
        prop_assert!(-2.0 * (pois.loglik - zip.loglik) >= -1e-6);
    }

    #[test]
    fn generators_are_deterministic(seed in 0u64..1_000_000) {
        let mut d = SimDesign::severity_model(1).unwrap();
        d.n_per_component = 20;
        let a = generate_gcwm_study(&d, seed).unwrap();
        let b = generate_gcwm_study(&d, seed).unwrap();
        prop_assert_eq!(a.dataset.fingerprint(), b.dataset.fingerprint());
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn model_documents_round_trip(seed in 0u64..1000) {
        let (ds, _) = separated_pair(30, seed);
        let m = fit_gcwm(&ds, &FitConfig::new(2, ResponseKind::GaussianSeverity, Selections::new(["x"])).seed(seed)).unwrap();
        let mut m = m;
        // posteriors are recomputed from data, not stored
        m.posteriors = DMatrix::zeros(0, 0);
        let doc = ModelDocument::new("gcwm", seed, ds.covariates().to_vec(), ds.fingerprint(), m, vec![]);
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, doc);
    }
}
