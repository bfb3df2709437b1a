use nalgebra::DMatrix;
use rand::Rng;

use super::{Init, Prepared, ResponseKind, Selections};
use crate::data::Dataset;
use crate::error::EmError;

fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = 1.0;
    }
    m
}

/// Standardized clustering features: Gaussian covariates, logs of log-normal
/// covariates and, for severity responses or when no continuous covariates
/// exist, the response (log1p for counts).
fn distance_features(prep: &Prepared<'_>) -> DMatrix<f64> {
    let ds = prep.ds;
    let n = ds.n();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..ds.p_gaussian() {
        cols.push(ds.gaussian().column(j).iter().copied().collect());
    }
    for j in 0..ds.p_lognormal() {
        cols.push(ds.log_lognormal().column(j).iter().copied().collect());
    }
    if prep.kind.is_severity() || cols.is_empty() {
        let y = ds.response();
        cols.push(if prep.kind.is_count() { y.iter().map(|v| v.ln_1p()).collect() } else { y.to_vec() });
    }
    let cols: Vec<Vec<f64>> = cols
        .into_iter()
        .filter_map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            (sd > 0.0 && sd.is_finite()).then(|| c.iter().map(|v| (v - mean) / sd).collect())
        })
        .collect();
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

fn sq_dist(data: &DMatrix<f64>, i: usize, c: &[f64]) -> f64 {
    c.iter().enumerate().map(|(j, v)| (data[(i, j)] - v).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding on the rows of `data`.
pub fn kmeans_labels<R: Rng + ?Sized>(data: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let (n, d) = (data.nrows(), data.ncols());
    if k <= 1 || n == 0 || d == 0 {
        return vec![0; n];
    }
    let row = |i: usize| -> Vec<f64> { data.row(i).iter().copied().collect() };
    let mut centers = vec![row(rng.gen_range(0..n))];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(data, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, b) in best.iter().enumerate() {
                if u < *b {
                    idx = i;
                    break;
                }
                u -= b;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(row(pick));
        for i in 0..n {
            best[i] = best[i].min(sq_dist(data, i, centers.last().unwrap()));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut arg = 0;
            let mut dmin = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = sq_dist(data, i, center);
                if dd < dmin {
                    dmin = dd;
                    arg = c;
                }
            }
            if labels[i] != arg {
                labels[i] = arg;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i]][j] += data[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    labels
}

pub(crate) fn initial_posteriors_prepared<R: Rng + ?Sized>(
    prep: &Prepared<'_>,
    init: &Init,
    k: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>, EmError> {
    let n = prep.n();
    let labels = match init {
        Init::Random => (0..n).map(|_| rng.gen_range(0..k)).collect(),
        Init::Distance => kmeans_labels(&distance_features(prep), k, rng),
        Init::Labels(l) => {
            if l.len() != n {
                return Err(EmError::BadLabels(format!("{} labels for {} rows", l.len(), n)));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= k) {
                return Err(EmError::BadLabels(format!("label {bad} outside 0..{k}")));
            }
            l.clone()
        }
    };
    Ok(one_hot(&labels, k))
}

/// Hard starting posteriors for one EM run.
pub fn initial_posteriors<R: Rng + ?Sized>(
    dataset: &Dataset,
    kind: ResponseKind,
    selections: &Selections,
    init: &Init,
    k: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>, EmError> {
    let prep = Prepared::new(dataset, kind, selections)?;
    initial_posteriors_prepared(&prep, init, k, rng)
}
