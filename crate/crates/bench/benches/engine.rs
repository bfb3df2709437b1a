use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gcwm_bench::{severity_sample, zip_sample};
use gcwm_core::data::build_design;
use gcwm_core::em::{fit_zip_design, ZipOptions};
use gcwm_core::glm::{fit_glm, GlmProblem, IrlsOptions};
use gcwm_core::{estep, fit_gcwm, fit_zigcwm, mstep, Family, FitConfig, GcwmModel, Init, ResponseKind, Selections, ZiConfig};
use nalgebra::DMatrix;

fn severity_selections() -> Selections {
    Selections::new(["X1", "X2", "X3"])
}

fn bench_estep(c: &mut Criterion) {
    let mut g = c.benchmark_group("estep");
    for n in [100, 1000] {
        let s = severity_sample(n, 1);
        let post = DMatrix::from_fn(s.dataset.n(), 3, |i, k| if s.labels[i] == k { 1.0 } else { 0.0 });
        let comps = mstep(&s.dataset, &post, ResponseKind::GaussianSeverity, &severity_selections()).unwrap();
        let model = GcwmModel::from_components(ResponseKind::GaussianSeverity, severity_selections(), comps);
        g.bench_with_input(BenchmarkId::from_parameter(3 * n), &model, |b, m| b.iter(|| estep(black_box(&s.dataset), m).unwrap()));
    }
    g.finish();
}

fn bench_irls(c: &mut Criterion) {
    let s = zip_sample(1000, 2);
    let x = build_design(&s.dataset, &["log(SimDensity)", "SimDriverAge", "SimCarAge"]).unwrap();
    let y = s.dataset.response().to_vec();
    let w = vec![1.0; y.len()];
    let off: Vec<f64> = s.dataset.exposure().iter().map(|e| e.ln()).collect();
    c.bench_function("irls_poisson_3000", |b| {
        b.iter(|| {
            let p = GlmProblem { family: Family::Poisson, x: &x, y: &y, weights: &w, offset: Some(&off) };
            fit_glm(black_box(&p), None, &IrlsOptions::default()).unwrap()
        })
    });
    let intercept_bar = [-1.0, 0.0, 0.0, 0.0];
    c.bench_function("zip_em_3000", |b| {
        b.iter(|| fit_zip_design(&x, &x, &y, &w, &off, &[0.0; 4], &intercept_bar, &ZipOptions::default()).unwrap())
    });
}

fn bench_fits(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    let s = severity_sample(100, 3);
    let cfg = FitConfig::new(3, ResponseKind::GaussianSeverity, severity_selections()).seed(1).inits(vec![Init::Distance]);
    g.bench_function("gcwm_severity_300", |b| b.iter(|| fit_gcwm(black_box(&s.dataset), &cfg).unwrap()));
    let z = zip_sample(300, 4);
    let sel = Selections::new(["log(SimDensity)", "SimDriverAge", "SimCarAge"]).with_bernoulli(["log(SimDensity)", "SimDriverAge", "SimCarAge"]);
    let zc = ZiConfig::new(3, sel).seed(1).inits(vec![Init::Distance]);
    g.bench_function("zigcwm_900", |b| b.iter(|| fit_zigcwm(black_box(&z.dataset), &zc).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_estep, bench_irls, bench_fits);
criterion_main!(benches);
