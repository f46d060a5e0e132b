//! Starting states: k-means partitions or a diagonal Gaussian mixture,
//! turned into per-component kernel density estimates on the grid.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DensityField, TensorGrid};
use crate::kernel::BandwidthMatrix;
use crate::mm::MixtureState;
use crate::smoothing::KernelRows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    KMeans,
    /// Diagonal-covariance Gaussian mixture fitted by EM.
    Gmm,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::KMeans => "kmeans",
            InitMode::Gmm => "gmm",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(InitMode::KMeans),
            "gmm" => Ok(InitMode::Gmm),
            other => Err(Error::input(format!("unknown init mode '{other}' (expected kmeans or gmm)"))),
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia run of
/// `restarts` is kept.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub restarts: usize,
    pub max_iter: usize,
    /// Runs ending with an empty cluster are discarded; at most this many
    /// runs are attempted in total.
    pub max_attempts: usize,
}

impl Default for KMeans {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            max_attempts: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
}

impl KMeans {
    pub fn fit(&self, data: ArrayView2<f64>, m: usize, seed: u64) -> Result<KMeansResult> {
        let n = data.nrows();
        if m == 0 {
            return Err(Error::input("need at least one cluster"));
        }
        if n < m {
            return Err(Error::input(format!("cannot form {m} clusters from {n} observations")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<KMeansResult> = None;
        let mut completed = 0;
        for _ in 0..self.max_attempts {
            if completed == self.restarts {
                break;
            }
            if let Some(run) = self.single_run(data, m, &mut rng) {
                completed += 1;
                if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                    best = Some(run);
                }
            }
        }
        best.ok_or_else(|| Error::Estimation(format!("k-means left a cluster empty in all {} attempts", self.max_attempts)))
    }

    fn single_run(&self, data: ArrayView2<f64>, m: usize, rng: &mut ChaCha8Rng) -> Option<KMeansResult> {
        let n = data.nrows();
        let d = data.ncols();
        let mut centers = plus_plus_seeds(data, m, rng);
        let mut labels = vec![usize::MAX; n];
        for _ in 0..self.max_iter {
            let mut changed = false;
            for (i, row) in data.rows().into_iter().enumerate() {
                let (best, _) = nearest(&centers, row.as_slice().unwrap_or(&row.to_vec()));
                if labels[i] != best {
                    labels[i] = best;
                    changed = true;
                }
            }
            let mut sums = Array2::<f64>::zeros((m, d));
            let mut counts = vec![0usize; m];
            for (i, row) in data.rows().into_iter().enumerate() {
                let mut s = sums.row_mut(labels[i]);
                s += &row;
                counts[labels[i]] += 1;
            }
            if counts.contains(&0) {
                return None;
            }
            for (j, &c) in counts.iter().enumerate() {
                let mut s = sums.row_mut(j);
                s /= c as f64;
            }
            centers = sums;
            if !changed {
                break;
            }
        }
        let inertia = data
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| sq_dist(centers.row(labels[i]).iter(), row.iter()))
            .sum();
        Some(KMeansResult {
            labels,
            centers,
            inertia,
        })
    }
}

fn sq_dist<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centers: &Array2<f64>, x: &[f64]) -> (usize, f64) {
    centers
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(c.iter(), x.iter())))
        .fold((0, f64::INFINITY), |acc, (j, v)| if v < acc.1 { (j, v) } else { acc })
}

fn plus_plus_seeds(data: ArrayView2<f64>, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers = Array2::zeros((m, data.ncols()));
    centers.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r.iter(), centers.row(0).iter())).collect();
    for j in 1..m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter()
                .position(|&w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(r.iter(), centers.row(j).iter()));
        }
    }
    centers
}

/// k-means labels with the default settings.
pub fn kmeans(data: ArrayView2<f64>, m: usize, seed: u64) -> Result<Vec<usize>> {
    KMeans::default().fit(data, m, seed).map(|r| r.labels)
}

/// `lambda_j = n_j / n`, `f_j` = kernel density estimate of cluster `j`'s
/// points with the shared bandwidth, `rho_j = 0`.
pub fn init_state_from_labels(
    data: ArrayView2<f64>,
    labels: &[usize],
    m: usize,
    grid: &Arc<TensorGrid>,
    bandwidth: &BandwidthMatrix,
) -> Result<MixtureState> {
    let rows = KernelRows::new(grid.clone(), bandwidth, data)?;
    state_from_labels(&rows, labels, m)
}

pub(crate) fn state_from_labels(rows: &KernelRows, labels: &[usize], m: usize) -> Result<MixtureState> {
    if labels.len() != rows.len() {
        return Err(Error::contract(format!("{} labels for {} observations", labels.len(), rows.len())));
    }
    let mut resp = Array2::zeros((labels.len(), m));
    for (i, &l) in labels.iter().enumerate() {
        if l >= m {
            return Err(Error::contract(format!("label {l} out of range for {m} components")));
        }
        resp[[i, l]] = 1.0;
    }
    state_from_responsibilities(rows, resp.view())
}

/// Soft version of [`init_state_from_labels`]: `lambda_j` is the mean
/// responsibility and `f_j` the responsibility-weighted kernel estimate.
pub fn init_state_from_responsibilities(
    data: ArrayView2<f64>,
    responsibilities: ArrayView2<f64>,
    grid: &Arc<TensorGrid>,
    bandwidth: &BandwidthMatrix,
) -> Result<MixtureState> {
    let rows = KernelRows::new(grid.clone(), bandwidth, data)?;
    state_from_responsibilities(&rows, responsibilities)
}

pub(crate) fn state_from_responsibilities(rows: &KernelRows, resp: ArrayView2<f64>) -> Result<MixtureState> {
    let n = rows.len();
    if resp.nrows() != n {
        return Err(Error::contract("one responsibility row per observation required"));
    }
    let m = resp.ncols();
    let mut lambda = Vec::with_capacity(m);
    let mut densities = Vec::with_capacity(m);
    for (j, col) in resp.axis_iter(Axis(1)).enumerate() {
        let mass: f64 = col.sum();
        if !(mass > 0.0) {
            return Err(Error::contract(format!("component {j} has no assigned observations")));
        }
        lambda.push(mass / n as f64);
        let weights: Vec<f64> = col.iter().map(|r| r / mass).collect();
        let values = rows.scatter(&weights);
        densities.push(DensityField::normalized(rows.grid().clone(), values)?);
    }
    let total: f64 = lambda.iter().sum();
    for l in &mut lambda {
        *l /= total;
    }
    MixtureState::new(lambda, densities, vec![0.0; m])
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub responsibilities: Array2<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
}

const GMM_MAX_ITER: usize = 100;

/// EM for a diagonal Gaussian mixture started from k-means; variances are
/// floored at `1e-6` times the per-coordinate data variance.
pub fn fit_diagonal_gmm(data: ArrayView2<f64>, m: usize, seed: u64) -> Result<DiagonalGmm> {
    let (n, d) = data.dim();
    if n < 2 * m {
        return Err(Error::input(format!("GMM initialization needs n >= 2m, got n = {n}, m = {m}")));
    }
    let labels = kmeans(data, m, seed)?;
    let floor: Vec<f64> = data
        .columns()
        .into_iter()
        .map(|c| 1e-6 * c.var(1.0).max(f64::MIN_POSITIVE))
        .collect();

    let mut resp = Array2::<f64>::zeros((n, m));
    for (i, &l) in labels.iter().enumerate() {
        resp[[i, l]] = 1.0;
    }
    let mut weights = vec![0.0; m];
    let mut means = Array2::zeros((m, d));
    let mut variances = Array2::zeros((m, d));
    let mut log_likelihood = f64::NEG_INFINITY;
    let mut iterations = 0;
    for it in 0..GMM_MAX_ITER {
        // M-step
        for j in 0..m {
            let rj = resp.column(j);
            let nj: f64 = rj.sum().max(1e-300);
            weights[j] = nj / n as f64;
            for k in 0..d {
                let mu = rj.iter().zip(data.column(k)).map(|(r, x)| r * x).sum::<f64>() / nj;
                let var = rj.iter().zip(data.column(k)).map(|(r, x)| r * (x - mu).powi(2)).sum::<f64>() / nj;
                means[[j, k]] = mu;
                variances[[j, k]] = var.max(floor[k]);
            }
        }
        // E-step in log space
        let mut ll = 0.0;
        for i in 0..n {
            let logs: Vec<f64> = (0..m)
                .map(|j| {
                    weights[j].max(1e-300).ln()
                        + (0..d)
                            .map(|k| {
                                let v = variances[[j, k]];
                                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (data[[i, k]] - means[[j, k]]).powi(2) / v)
                            })
                            .sum::<f64>()
                })
                .collect();
            let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
            ll += mx + s.ln();
            for j in 0..m {
                resp[[i, j]] = (logs[j] - mx).exp() / s;
            }
        }
        iterations = it + 1;
        let done = (ll - log_likelihood).abs() <= 1e-10 * ll.abs();
        log_likelihood = ll;
        if done {
            break;
        }
    }
    Ok(DiagonalGmm {
        weights,
        means,
        variances,
        responsibilities: resp,
        log_likelihood,
        iterations,
    })
}

pub fn gmm_diag_init(
    data: ArrayView2<f64>,
    m: usize,
    seed: u64,
    grid: &Arc<TensorGrid>,
    bandwidth: &BandwidthMatrix,
) -> Result<MixtureState> {
    let gmm = fit_diagonal_gmm(data, m, seed)?;
    init_state_from_responsibilities(data, gmm.responsibilities.view(), grid, bandwidth)
}
