//! Synthetic data from mixtures of copula-coupled marginals, and the
//! replication study built on it.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::copula::CopulaFamily;
use crate::error::{Error, Result};
use crate::init::InitMode;
use crate::metrics::{bias_variance, misclassification};
use crate::mm::{FitConfig, MmEstimator};
use crate::special::{normal_cdf, normal_quantile};

/// One-dimensional marginal, parameterized by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Normal { mean: f64, sd: f64 },
    /// Laplace with scale `sd / sqrt(2)`.
    Laplace { mean: f64, sd: f64 },
}

impl Marginal {
    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Normal { mean, .. } | Marginal::Laplace { mean, .. } => mean,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            Marginal::Normal { sd, .. } | Marginal::Laplace { sd, .. } => sd,
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, sd } => mean + sd * normal_quantile(p),
            Marginal::Laplace { mean, sd } => {
                let q = p - 0.5;
                mean - sd / std::f64::consts::SQRT_2 * q.signum() * (1.0 - 2.0 * q.abs()).ln()
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, sd } => normal_cdf((x - mean) / sd),
            Marginal::Laplace { mean, sd } => {
                let z = (x - mean) * std::f64::consts::SQRT_2 / sd;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sd() > 0.0) || !self.mean().is_finite() || !self.sd().is_finite() {
            return Err(Error::input(format!("invalid marginal {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Marginal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marginal::Normal { mean, sd } => write!(f, "N({mean}, {sd}^2)"),
            Marginal::Laplace { mean, sd } => write!(f, "L({mean}, {sd}^2)"),
        }
    }
}

/// Bivariate mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub marginals: [Marginal; 2],
    pub copula: CopulaFamily,
    pub rho: f64,
    pub weight: f64,
}

impl ComponentSpec {
    pub fn validate(&self) -> Result<()> {
        for m in &self.marginals {
            m.validate()?;
        }
        if !self.copula.contains(self.rho) {
            return Err(Error::input(format!("rho {} outside the {} range", self.rho, self.copula)));
        }
        if !(self.weight > 0.0) {
            return Err(Error::input(format!("component weight {} is not positive", self.weight)));
        }
        Ok(())
    }
}

/// The three-cluster benchmark: normal first coordinates, Laplace second
/// coordinates, FGM dependence with parameters -0.5, 0.5 and 0, equal weights.
pub fn table1() -> Vec<ComponentSpec> {
    let spec = |m1: f64, s1: f64, m2: f64, s2: f64, rho: f64| ComponentSpec {
        marginals: [
            Marginal::Normal { mean: m1, sd: s1 },
            Marginal::Laplace { mean: m2, sd: s2 },
        ],
        copula: CopulaFamily::Fgm,
        rho,
        weight: 1.0 / 3.0,
    };
    vec![
        spec(-3.0, 2.0, 0.0, 0.7, -0.5),
        spec(0.0, 0.7, 3.0, 1.4, 0.5),
        spec(3.0, 1.4, 0.0, 2.8, 0.0),
    ]
}

/// Uniform draw from the open interval (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// FGM pair by conditional inversion: `u` uniform, then `v` solves
/// `v (1 + a (1 - v)) = w` with `a = rho (1 - 2u)` and `w` uniform.
pub fn sample_fgm_pair(rho: f64, rng: &mut impl Rng) -> (f64, f64) {
    let u = open_unit(rng);
    let w = open_unit(rng);
    if rho == 0.0 {
        return (u, w);
    }
    let a = rho * (1.0 - 2.0 * u);
    let b = 1.0 + a;
    // smaller root of a v^2 - (1 + a) v + w = 0, written without dividing by a
    let v = 2.0 * w / (b + (b * b - 4.0 * a * w).max(0.0).sqrt());
    (u, v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Gaussian-copula pair.
pub fn sample_gaussian_pair(rho: f64, rng: &mut impl Rng) -> (f64, f64) {
    let z1 = normal_quantile(open_unit(rng));
    let e = normal_quantile(open_unit(rng));
    let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * e;
    let clamp = |p: f64| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    (clamp(normal_cdf(z1)), clamp(normal_cdf(z2)))
}

/// `n` draws from the mixture, with their component labels. Deterministic
/// given `seed`.
pub fn sample_mixture(specs: &[ComponentSpec], n: usize, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
    if specs.is_empty() {
        return Err(Error::input("no mixture components"));
    }
    for s in specs {
        s.validate()?;
    }
    let total: f64 = specs.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::input(format!("component weights sum to {total}, expected 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let pick = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let j = specs
            .iter()
            .position(|s| {
                acc += s.weight;
                pick < acc
            })
            .unwrap_or(specs.len() - 1);
        let s = &specs[j];
        let (u, v) = match s.copula {
            CopulaFamily::Fgm => sample_fgm_pair(s.rho, &mut rng),
            CopulaFamily::Gaussian => sample_gaussian_pair(s.rho, &mut rng),
        };
        data[[i, 0]] = s.marginals[0].quantile(u);
        data[[i, 1]] = s.marginals[1].quantile(v);
        labels.push(j);
    }
    Ok((data, labels))
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub specs: Vec<ComponentSpec>,
    pub n_values: Vec<usize>,
    pub replications: usize,
    /// Replication `r` uses seed `base_seed + r` for its data.
    pub base_seed: u64,
    pub fit: FitConfig,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIter,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIter => "max_iter",
            RunStatus::Failed => "failed",
        })
    }
}

/// One replication. Estimates are reordered to the true component order
/// through the best label permutation; they are empty for failed runs.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub n: usize,
    pub replication: usize,
    pub status: RunStatus,
    pub rho_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub misclassified: Option<usize>,
    pub objective_final: Option<f64>,
    pub iterations: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct StudyAggregate {
    pub n: usize,
    /// Converged replications entering the aggregate.
    pub used: usize,
    pub rho_mean: Vec<f64>,
    pub lambda_mean: Vec<f64>,
    pub misclassified_mean: f64,
    pub squared_bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub components: usize,
    pub rows: Vec<StudyRow>,
    pub aggregates: Vec<StudyAggregate>,
}

impl StudyReport {
    pub fn aggregate(&self, n: usize) -> Option<&StudyAggregate> {
        self.aggregates.iter().find(|a| a.n == n)
    }

    /// Columns `n, replication, rho_hat_1..m, lambda_hat_1..m, misclassified,
    /// objective_final, status, iterations, squared_bias, variance`; one
    /// `aggregate` row follows the replications of each `n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.components;
        let mut header = vec!["n".to_string(), "replication".to_string()];
        header.extend((1..=m).map(|j| format!("rho_hat_{j}")));
        header.extend((1..=m).map(|j| format!("lambda_hat_{j}")));
        for c in ["misclassified", "objective_final", "status", "iterations", "squared_bias", "variance"] {
            header.push(c.into());
        }
        writeln!(out, "{}", header.join(","))?;
        let num = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.10e}"));
        let vec_or_blank = |v: &[f64]| -> Vec<String> {
            if v.len() == m {
                v.iter().map(|x| format!("{x:.10e}")).collect()
            } else {
                vec![String::new(); m]
            }
        };
        for agg in &self.aggregates {
            for r in self.rows.iter().filter(|r| r.n == agg.n) {
                let mut row = vec![r.n.to_string(), r.replication.to_string()];
                row.extend(vec_or_blank(&r.rho_hat));
                row.extend(vec_or_blank(&r.lambda_hat));
                row.push(r.misclassified.map_or(String::new(), |c| c.to_string()));
                row.push(num(r.objective_final));
                row.push(r.status.to_string());
                row.push(r.iterations.to_string());
                row.push(String::new());
                row.push(String::new());
                writeln!(out, "{}", row.join(","))?;
            }
            let finite = |v: f64| v.is_finite().then_some(v);
            let mut row = vec![agg.n.to_string(), "aggregate".to_string()];
            row.extend(vec_or_blank(&agg.rho_mean));
            row.extend(vec_or_blank(&agg.lambda_mean));
            row.push(num(finite(agg.misclassified_mean)));
            row.push(String::new());
            row.push(format!("used={}", agg.used));
            row.push(String::new());
            row.push(num(finite(agg.squared_bias)));
            row.push(num(finite(agg.variance)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Fits one simulated dataset with the configured initializer.
pub fn run_replication(config: &StudyConfig, n: usize, replication: usize) -> StudyRow {
    let m = config.specs.len();
    let mut row = StudyRow {
        n,
        replication,
        status: RunStatus::Failed,
        rho_hat: Vec::new(),
        lambda_hat: Vec::new(),
        misclassified: None,
        objective_final: None,
        iterations: 0,
        message: String::new(),
    };
    let seed = config.base_seed.wrapping_add(replication as u64);
    let result = (|| -> Result<()> {
        let (data, truth) = sample_mixture(&config.specs, n, seed)?;
        let fit_cfg = FitConfig {
            components: m,
            seed,
            ..config.fit.clone()
        };
        let est = MmEstimator::from_config(data.view(), &fit_cfg)?;
        let init = est.initial_state(m, fit_cfg.init, seed)?;
        let out = est.fit(init, &fit_cfg)?;
        let labels = est.classify(&out.state)?;
        let (count, perm) = misclassification(&labels, &truth, m)?;
        let mut rho = vec![0.0; m];
        let mut lambda = vec![0.0; m];
        for (j, &t) in perm.iter().enumerate() {
            rho[t] = out.state.rho[j];
            lambda[t] = out.state.lambda[j];
        }
        row.rho_hat = rho;
        row.lambda_hat = lambda;
        row.misclassified = Some(count);
        row.objective_final = out.trace.records.last().map(|r| r.objective);
        row.iterations = out.trace.records.len();
        row.status = if out.converged { RunStatus::Converged } else { RunStatus::MaxIter };
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("replication {replication} at n = {n} failed: {e}");
        row.status = RunStatus::Failed;
        row.message = e.to_string();
    }
    row
}

/// Replicated fits for every sample size, aggregated over converged runs.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    if config.replications < 2 {
        return Err(Error::input("a study needs at least 2 replications"));
    }
    if config.n_values.is_empty() {
        return Err(Error::input("no sample sizes given"));
    }
    if config.specs.iter().any(|s| s.copula != config.specs[0].copula) {
        log::warn!("components use different copula families; fitting with {:?}", config.fit.copula);
    }
    let m = config.specs.len();
    let jobs: Vec<(usize, usize)> = config
        .n_values
        .iter()
        .flat_map(|&n| (0..config.replications).map(move |r| (n, r)))
        .collect();
    let run = || -> Vec<StudyRow> {
        jobs.par_iter()
            .map(|&(n, r)| run_replication(config, n, r))
            .collect()
    };
    let rows = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::input(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let truth: Vec<f64> = config.specs.iter().map(|s| s.rho).collect();
    let aggregates = config
        .n_values
        .iter()
        .map(|&n| {
            let ok: Vec<&StudyRow> = rows.iter().filter(|r| r.n == n && r.status == RunStatus::Converged).collect();
            let mean_of = |f: &dyn Fn(&StudyRow) -> &Vec<f64>| -> Vec<f64> {
                if ok.is_empty() {
                    return Vec::new();
                }
                (0..m).map(|j| ok.iter().map(|r| f(r)[j]).sum::<f64>() / ok.len() as f64).collect()
            };
            let rhos: Vec<Vec<f64>> = ok.iter().map(|r| r.rho_hat.clone()).collect();
            let (squared_bias, variance) = bias_variance(&rhos, &truth).unwrap_or((f64::NAN, f64::NAN));
            StudyAggregate {
                n,
                used: ok.len(),
                rho_mean: mean_of(&|r| &r.rho_hat),
                lambda_mean: mean_of(&|r| &r.lambda_hat),
                misclassified_mean: ok.iter().filter_map(|r| r.misclassified).sum::<usize>() as f64 / ok.len() as f64,
                squared_bias,
                variance,
            }
        })
        .collect();
    Ok(StudyReport {
        components: m,
        rows,
        aggregates,
    })
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            specs: table1(),
            n_values: vec![300, 500, 700, 900],
            replications: 100,
            base_seed: 0,
            fit: FitConfig {
                init: InitMode::KMeans,
                ..FitConfig::default()
            },
            threads: None,
        }
    }
}
