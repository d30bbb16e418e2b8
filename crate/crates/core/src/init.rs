//! Starting values for EM: pooled-lasso screening, a two-component Gaussian
//! mixture on `(y, x_S)`, then an elastic net fitted within each cluster.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lasso::{solve_weighted_lasso, PenalizedLsProblem, SolverOptions};
use crate::model::{MlrDataset, ThetaParams};

/// A tuning value that is either fixed or derived from the data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum Tuning {
    #[default]
    Auto,
    Value(f64),
}

impl Tuning {
    pub fn resolve(self, auto: impl FnOnce() -> f64) -> f64 {
        match self {
            Tuning::Auto => auto(),
            Tuning::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterMethod {
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub screen_lambda: Tuning,
    pub cluster_method: ClusterMethod,
    pub enet_mix: f64,
    pub enet_lambda: Tuning,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            screen_lambda: Tuning::Auto,
            cluster_method: ClusterMethod::Gmm,
            enet_mix: 0.5,
            enet_lambda: Tuning::Auto,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

/// Which route produced the two groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitSource {
    Gmm { attempt: usize },
    MedianResidual,
}

#[derive(Debug, Clone)]
pub struct InitReport {
    pub theta: ThetaParams,
    pub support: Vec<usize>,
    /// Cluster label per observation; cluster 0 is the larger one.
    pub labels: Vec<u8>,
    pub source: SplitSource,
}

/// Universal-threshold scale `√(2 ln p / n)`.
pub fn universal_lambda(n: usize, p: usize) -> f64 {
    (2.0 * (p.max(2) as f64).ln() / n as f64).sqrt()
}

/// Covariates whose square correlates with `y²`: `√n·|corr(y², x_j²)|` at
/// least `max(3, √(2 ln p))`.
pub fn second_moment_screen(data: &MlrDataset) -> Vec<usize> {
    let (n, p) = (data.n(), data.p());
    let centred = |v: DVector<f64>| {
        let m = v.mean();
        v.add_scalar(-m)
    };
    let y2 = centred(data.y().map(|v| v * v));
    let cut = 3f64.max((2.0 * (p.max(2) as f64).ln()).sqrt());
    (0..p)
        .filter(|&j| {
            let x2 = centred(data.x().column(j).map(|v| v * v));
            let denom = (y2.norm_squared() * x2.norm_squared()).sqrt();
            denom > 0.0 && (n as f64).sqrt() * (y2.dot(&x2) / denom).abs() >= cut
        })
        .collect()
}

/// Smallest cluster a split may have: `max(2, ⌈n/100⌉)`. A handful of
/// outlying points is not a second regime.
fn min_cluster(n: usize) -> usize {
    n.div_ceil(100).max(2)
}

/// Support of the pooled (unweighted) lasso fit.
pub fn screen(data: &MlrDataset, lambda: f64) -> Result<(Vec<usize>, DVector<f64>)> {
    let problem = PenalizedLsProblem::lasso(data.x(), data.y(), lambda);
    let sol = solve_weighted_lasso(&problem, SolverOptions::default())?;
    let support = (0..data.p()).filter(|&j| sol.beta[j] != 0.0).collect();
    Ok((support, sol.beta))
}

pub fn initialize(data: &MlrDataset, config: &InitConfig) -> Result<ThetaParams> {
    initialize_with_report(data, config).map(|r| r.theta)
}

pub fn initialize_with_report(data: &MlrDataset, config: &InitConfig) -> Result<InitReport> {
    let (n, p) = (data.n(), data.p());
    if n < 20 {
        return invalid(format!("initialisation needs at least 20 observations, got {n}"));
    }
    if !(0.0..=1.0).contains(&config.enet_mix) {
        return invalid(format!("enet_mix must lie in [0, 1], got {}", config.enet_mix));
    }
    let screen_lambda = config.screen_lambda.resolve(|| universal_lambda(n, p));
    let (mut support, pooled) = screen(data, screen_lambda)?;
    if support.is_empty() {
        // regimes with opposite signs cancel in the pooled fit but still
        // show up in the second moments
        support = second_moment_screen(data);
    }

    let features = DMatrix::from_fn(n, 1 + support.len(), |i, c| {
        if c == 0 {
            data.y()[i]
        } else {
            data.x()[(i, support[c - 1])]
        }
    });
    let min_size = min_cluster(n);
    let mut split = None;
    for attempt in 0..config.kmeans_restarts.max(1) {
        let seed = config.seed.wrapping_add(attempt as u64 * 0x9E37_79B9);
        let labels = match config.cluster_method {
            ClusterMethod::Gmm => gmm_split(&features, config.kmeans_restarts.max(1), seed, min_size),
        };
        if let Some(labels) = labels {
            split = Some((labels, SplitSource::Gmm { attempt }));
            break;
        }
    }
    let (labels, source) = split.unwrap_or_else(|| (median_residual_split(data, &pooled), SplitSource::MedianResidual));

    // cluster 0 = larger
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let labels: Vec<u8> = if ones > n - ones { labels.iter().map(|&l| 1 - l).collect() } else { labels };
    let rows = |c: u8| (0..n).filter(|&i| labels[i] == c).collect::<Vec<_>>();
    let (rows0, rows1) = (rows(0), rows(1));

    let mut rss = 0.0;
    let mut fit_cluster = |rows: &[usize]| -> Result<DVector<f64>> {
        let sub = data.subset(rows)?;
        let lambda = config.enet_lambda.resolve(|| universal_lambda(rows.len(), p));
        let problem = PenalizedLsProblem::lasso(sub.x(), sub.y(), lambda).with_mix(config.enet_mix);
        let beta = solve_weighted_lasso(&problem, SolverOptions::default())?.beta;
        rss += sub.residuals(&beta).norm_squared();
        Ok(beta)
    };
    let beta1 = fit_cluster(&rows0)?;
    let beta2 = fit_cluster(&rows1)?;
    let omega = (rows0.len() as f64 / n as f64).min(0.999);
    let sigma2 = (rss / n as f64).max(1e-6);
    let theta = ThetaParams::new(omega, beta1, beta2, sigma2)?;
    Ok(InitReport { theta, support, labels, source })
}

fn median_residual_split(data: &MlrDataset, pooled: &DVector<f64>) -> Vec<u8> {
    let r = data.residuals(pooled);
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    let mut labels = vec![0u8; r.len()];
    for &i in &order[r.len() / 2..] {
        labels[i] = 1;
    }
    labels
}

fn standardize_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let mut out = z.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Two-means with k-means++ seeding; best of `restarts` by inertia.
pub fn kmeans_two(points: &DMatrix<f64>, restarts: usize, seed: u64) -> Vec<u8> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().copied().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<u8>)> = None;
    for _ in 0..restarts.max(1) {
        let first = rng.random_range(0..n);
        let d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[first])).collect();
        let total: f64 = d2.iter().sum();
        let second = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            (first + 1) % n
        };
        let mut centers = [rows[first].clone(), rows[second].clone()];
        let mut labels = vec![0u8; n];
        for iter in 0..100 {
            let mut changed = false;
            for (i, r) in rows.iter().enumerate() {
                let l = u8::from(sq_dist(r, &centers[1]) < sq_dist(r, &centers[0]));
                if l != labels[i] || iter == 0 {
                    changed |= l != labels[i];
                    labels[i] = l;
                }
            }
            if !changed && iter > 0 {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l as usize == c).map(|(r, _)| r).collect();
                if members.is_empty() {
                    continue;
                }
                for (k, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = rows.iter().zip(&labels).map(|(r, &l)| sq_dist(r, &centers[l as usize])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

struct Component {
    weight: f64,
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_det: f64,
}

impl Component {
    fn fit(rows: &[DVector<f64>], resp: &[f64], ridge: f64) -> Option<Self> {
        let (n, d) = (rows.len(), rows[0].len());
        let nk: f64 = resp.iter().sum();
        if nk <= 1e-8 {
            return None;
        }
        let mut mean = DVector::zeros(d);
        for (r, &w) in rows.iter().zip(resp) {
            mean.axpy(w, r, 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        let mut c = DVector::zeros(d);
        for (r, &w) in rows.iter().zip(resp) {
            c.copy_from(r);
            c -= &mean;
            cov.ger(w / nk, &c, &c, 1.0);
        }
        for k in 0..d {
            cov[(k, k)] += ridge;
        }
        let chol = cov.cholesky()?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(Self { weight: nk / n as f64, mean, chol_l, log_det })
    }

    /// `buf` is scratch space of the same length as `x`.
    fn log_density(&self, x: &DVector<f64>, buf: &mut DVector<f64>) -> f64 {
        let d = x.len() as f64;
        buf.copy_from(x);
        *buf -= &self.mean;
        let ok = self.chol_l.solve_lower_triangular_mut(buf);
        debug_assert!(ok, "positive diagonal");
        self.weight.ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + buf.norm_squared())
    }
}

/// EM from hard starting labels; returns the final log-likelihood and labels.
fn gmm_em(rows: &[DVector<f64>], start: &[u8], ridge: f64) -> (f64, Vec<u8>) {
    let mut resp1: Vec<f64> = start.iter().map(|&l| l as f64).collect();
    let mut labels = start.to_vec();
    let mut last_ll = f64::NEG_INFINITY;
    let mut buf = DVector::zeros(rows[0].len());
    let mut resp0 = vec![0.0; rows.len()];
    for _ in 0..200 {
        for (r0, r1) in resp0.iter_mut().zip(&resp1) {
            *r0 = 1.0 - r1;
        }
        let (Some(c0), Some(c1)) = (Component::fit(rows, &resp0, ridge), Component::fit(rows, &resp1, ridge)) else {
            break;
        };
        let mut ll = 0.0;
        for (i, x) in rows.iter().enumerate() {
            let (a, b) = (c0.log_density(x, &mut buf), c1.log_density(x, &mut buf));
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            resp1[i] = (b - lse).exp();
            ll += lse;
        }
        labels = resp1.iter().map(|&r| u8::from(r > 0.5)).collect();
        let done = (ll - last_ll).abs() <= 1e-8 * ll.abs().max(1.0);
        last_ll = ll;
        if done {
            break;
        }
    }
    (last_ll, labels)
}

/// Full-covariance two-component Gaussian mixture fitted by EM; returns hard
/// assignments of the best of several starts.
///
/// Starts are the k-means split and `restarts` neighbourhood seeds: a random
/// point together with its nearest quarter of the sample. The latter let EM
/// find components that differ only in shape, which k-means cannot.
pub fn gmm_two_clusters(z: &DMatrix<f64>, restarts: usize, seed: u64) -> Vec<u8> {
    gmm_split(z, restarts, seed, 1).unwrap_or_else(|| kmeans_two(&standardize_columns(z), restarts, seed))
}

/// Like [`gmm_two_clusters`], but only splits whose smaller cluster has at
/// least `min_size` members compete; `None` when no start yields one.
pub fn gmm_split(z: &DMatrix<f64>, restarts: usize, seed: u64, min_size: usize) -> Option<Vec<u8>> {
    let (n, d) = z.shape();
    let zs = standardize_columns(z);
    let ridge = 1e-6 + 1e-3 * (d as f64 / n as f64);
    let rows: Vec<DVector<f64>> = (0..n).map(|i| zs.row(i).transpose()).collect();
    let mut starts = vec![kmeans_two(&zs, restarts, seed)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    let k = (n / 4).max(d + 2).min(n - 1);
    for _ in 0..restarts.max(1) {
        let c = &rows[rng.random_range(0..n)];
        let mut order: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| ((r - c).norm_squared(), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut labels = vec![0u8; n];
        for &(_, i) in &order[..k] {
            labels[i] = 1;
        }
        starts.push(labels);
    }
    let mut best: Option<(f64, Vec<u8>)> = None;
    for start in &starts {
        let (ll, labels) = gmm_em(&rows, start, ridge);
        let ones = labels.iter().filter(|&&l| l == 1).count();
        if ones.min(n - ones) < min_size.max(1) || !ll.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, labels));
        }
    }
    best.map(|(_, l)| l)
}
