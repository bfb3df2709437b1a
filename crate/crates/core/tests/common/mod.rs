#![allow(dead_code)]
//! Test fixtures and independent reference computations.

use gcwm_core::numeric::stream_rng;
use gcwm_core::Dataset;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

/// Mixed-role toy data: Gaussian `t1`, `t2`, log-normal `u1`, discrete `w1`
/// with three levels, a continuous response and a count response.
pub struct Toy {
    pub t: Vec<[f64; 2]>,
    pub u: Vec<f64>,
    pub w: Vec<usize>,
    pub y: Vec<f64>,
    pub counts: Vec<f64>,
    pub labels: Vec<usize>,
}

pub fn toy(n: usize, seed: u64) -> Toy {
    let mut rng = stream_rng(seed, 0);
    let mut out = Toy { t: vec![], u: vec![], w: vec![], y: vec![], counts: vec![], labels: vec![] };
    for i in 0..n {
        let g = i % 2;
        let shift = if g == 0 { 0.0 } else { 3.0 };
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let z3: f64 = rng.sample(StandardNormal);
        let t = [shift + z1, -shift + 0.5 * z1 + z2];
        let u = (0.3 * shift + 0.5 * z3).exp();
        out.t.push(t);
        out.u.push(u);
        out.w.push(rng.gen_range(0..3));
        out.y.push(1.0 + 2.0 * t[0] - u + rng.sample::<f64, _>(StandardNormal));
        let lam = (0.2 + 0.3 * t[0].clamp(-3.0, 6.0) / 3.0).exp();
        out.counts.push(Poisson::new(lam).unwrap().sample(&mut rng));
        out.labels.push(g);
    }
    out
}

pub fn toy_dataset(toy: &Toy, counts: bool) -> Dataset {
    Dataset::builder()
        .gaussian("t1", toy.t.iter().map(|r| r[0]).collect())
        .gaussian("t2", toy.t.iter().map(|r| r[1]).collect())
        .lognormal("u1", toy.u.clone())
        .discrete("w1", ["a", "b", "c"], toy.w.clone())
        .response("y", if counts { toy.counts.clone() } else { toy.y.clone() })
        .build()
        .unwrap()
}

/// Random posterior matrix with rows summing to 1 (row-major `n x k`).
pub fn random_posteriors(n: usize, k: usize, seed: u64) -> nalgebra::DMatrix<f64> {
    let mut rng = stream_rng(seed, 1);
    let mut m = nalgebra::DMatrix::zeros(n, k);
    for i in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        for j in 0..k {
            m[(i, j)] = raw[j] / s;
        }
    }
    m
}

/// Density of `N(mu, sigma)` in two dimensions by the explicit 2x2 formula.
pub fn bivariate_normal_pdf(x: [f64; 2], mu: [f64; 2], s: [[f64; 2]; 2]) -> f64 {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let d = [x[0] - mu[0], x[1] - mu[1]];
    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

pub fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

pub fn lognormal_pdf(u: f64, mu: f64, var: f64) -> f64 {
    normal_pdf(u.ln(), mu, var) / u
}

pub fn poisson_pmf(y: u64, lambda: f64) -> f64 {
    let mut f = 1.0;
    for j in 1..=y {
        f *= j as f64;
    }
    lambda.powi(y as i32) * (-lambda).exp() / f
}

/// Weighted mean and (1/sum w) covariance of row vectors, by plain loops.
pub fn weighted_stats(rows: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = rows[0].len();
    let sw: f64 = w.iter().sum();
    let mut mu = vec![0.0; p];
    for (r, wi) in rows.iter().zip(w) {
        for a in 0..p {
            mu[a] += wi * r[a] / sw;
        }
    }
    let mut cov = vec![vec![0.0; p]; p];
    for (r, wi) in rows.iter().zip(w) {
        for a in 0..p {
            for b in 0..p {
                cov[a][b] += wi * (r[a] - mu[a]) * (r[b] - mu[b]) / sw;
            }
        }
    }
    (mu, cov)
}

/// Maximizes `f` by Newton's method on central finite differences.
pub fn numeric_maximize(f: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> Vec<f64> {
    let p = start.len();
    let mut x = start.to_vec();
    for _ in 0..200 {
        let h = 1e-4;
        let mut g = vec![0.0; p];
        let mut hess = nalgebra::DMatrix::zeros(p, p);
        let at = |x: &[f64], i: usize, di: f64, j: usize, dj: f64| {
            let mut y = x.to_vec();
            y[i] += di;
            y[j] += dj;
            f(&y)
        };
        for i in 0..p {
            g[i] = (at(&x, i, h, i, 0.0) - at(&x, i, -h, i, 0.0)) / (2.0 * h);
            for j in 0..p {
                hess[(i, j)] = (at(&x, i, h, j, h) - at(&x, i, h, j, -h) - at(&x, i, -h, j, h) + at(&x, i, -h, j, -h))
                    / (4.0 * h * h);
            }
        }
        let Some(step) = (-hess.clone()).lu().solve(&nalgebra::DVector::from_vec(g.clone())) else { break };
        let mut t = 1.0;
        let f0 = f(&x);
        loop {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if f(&cand) >= f0 || t < 1e-8 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
        if step.amax() < 1e-10 {
            break;
        }
    }
    x
}

/// Adjusted Rand index by counting agreements over all pairs.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total = both + only_a + only_b + neither;
    let expected = (both + only_a) * (both + only_b) / total;
    let max = 0.5 * ((both + only_a) + (both + only_b));
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Two well-separated Gaussian clusters with a linear response per cluster.
pub fn separated_pair(n_each: usize, seed: u64) -> (Dataset, Vec<usize>) {
    let mut rng = stream_rng(seed, 5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (mut x, mut y, mut labels) = (vec![], vec![], vec![]);
    for g in 0..2 {
        for _ in 0..n_each {
            let xi = if g == 0 { 0.0 } else { 10.0 } + noise.sample(&mut rng);
            x.push(xi);
            y.push(if g == 0 { 1.0 + 2.0 * xi } else { 5.0 - xi } + 0.5 * noise.sample(&mut rng));
            labels.push(g);
        }
    }
    (Dataset::builder().gaussian("x", x).response("y", y).build().unwrap(), labels)
}
