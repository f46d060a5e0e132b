//! The MM iteration: posterior weights, mixing-proportion and density
//! updates, the smoothed objective, and the fit loop.
//!
//! Integrals against the unknown data density are replaced by averages over
//! the sample. `N f_j` at a data point is the quadrature
//! `exp(sum_h K_H(x_i - x_h) w_h log f_j(x_h))` over the grid nodes, using the
//! same kernel rows as the density update, so the minorization argument
//! holds exactly for the discretized problem.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::copula::{empirical_copula_density, fit_rho, CopulaFamily, CopulaObservation, MarginalTransform};
use crate::error::{Error, Result};
use crate::grid::{DensityField, TensorGrid, DENSITY_FLOOR};
use crate::init::{fit_diagonal_gmm, kmeans, state_from_labels, state_from_responsibilities, InitMode};
use crate::kernel::BandwidthMatrix;
use crate::smoothing::{check_simplex, log_values, KernelRows, Smoother};

/// Current estimate `(lambda, f, rho)`.
#[derive(Debug, Clone)]
pub struct MixtureState {
    pub lambda: Vec<f64>,
    pub densities: Vec<DensityField>,
    pub rho: Vec<f64>,
    pub iteration: usize,
}

impl MixtureState {
    pub fn new(lambda: Vec<f64>, densities: Vec<DensityField>, rho: Vec<f64>) -> Result<Self> {
        let state = Self {
            lambda,
            densities,
            rho,
            iteration: 0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn components(&self) -> usize {
        self.lambda.len()
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        self.densities[0].grid()
    }

    /// Checks the simplex, normalization and floor invariants.
    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.lambda)?;
        let m = self.lambda.len();
        if self.densities.len() != m || self.rho.len() != m {
            return Err(Error::contract(format!(
                "{m} weights, {} densities, {} copula parameters",
                self.densities.len(),
                self.rho.len()
            )));
        }
        let grid = self.densities[0].grid();
        for (j, f) in self.densities.iter().enumerate() {
            if !Arc::ptr_eq(f.grid(), grid) && f.grid().spec() != grid.spec() {
                return Err(Error::contract(format!("density {j} lives on a different grid")));
            }
            f.check_normalized()?;
            if let Some(v) = f.values().iter().find(|v| !(**v >= DENSITY_FLOOR)) {
                return Err(Error::contract(format!("density {j} has value {v} below the floor")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthMode {
    NormalReference,
    /// Row-major `d*d` entries.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub points_per_dim: usize,
    pub margin: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points_per_dim: 60,
            margin: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub components: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grid: GridConfig,
    pub bandwidth: BandwidthMode,
    /// `None` skips copula estimation.
    pub copula: Option<CopulaFamily>,
    /// Weight the copula least squares by posterior weights.
    pub copula_weighted: bool,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            components: 3,
            max_iter: 200,
            rel_tol: 1e-6,
            grid: GridConfig::default(),
            bandwidth: BandwidthMode::NormalReference,
            copula: Some(CopulaFamily::Fgm),
            copula_weighted: false,
            init: InitMode::KMeans,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::input("components must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::input("max_iter must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::input(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.grid.points_per_dim < 2 {
            return Err(Error::input("grid needs at least 2 points per dimension"));
        }
        if !(self.grid.margin >= 0.0) || !self.grid.margin.is_finite() {
            return Err(Error::input(format!("grid margin must be nonnegative, got {}", self.grid.margin)));
        }
        Ok(())
    }
}

/// Objective `-(1/n) sum_i log(M_lambda N f)(x_i)` and the penalty
/// diagnostic `1 - sum_j lambda_j int N f_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub iteration: usize,
    pub objective: f64,
    pub penalty: f64,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Largest absolute change of any density value at this iteration.
    pub max_density_delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    /// Record for the starting state; absent when no iteration ran.
    pub initial: Option<FitRecord>,
    pub records: Vec<FitRecord>,
}

impl FitTrace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.initial.iter().chain(&self.records).map(|r| r.objective).collect()
    }

    /// First step where the objective rises by more than
    /// `tol * (1 + |previous|)`, as `(iteration, increase)`.
    pub fn first_ascent(&self, tol: f64) -> Option<(usize, f64)> {
        let all: Vec<&FitRecord> = self.initial.iter().chain(&self.records).collect();
        all.windows(2).find_map(|w| {
            let rise = w[1].objective - w[0].objective;
            (rise > tol * (1.0 + w[0].objective.abs())).then_some((w[1].iteration, rise))
        })
    }

    pub fn min_penalty(&self) -> Option<f64> {
        self.initial.iter().chain(&self.records).map(|r| r.penalty).reduce(f64::min)
    }

    /// CSV with columns `iter, objective, lambda_1..m, rho_1..m,
    /// max_density_delta, penalty`; the starting state is row 0.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self
            .initial
            .as_ref()
            .or(self.records.first())
            .map_or(0, |r| r.lambda.len());
        let mut header = vec!["iter".to_string(), "objective".to_string()];
        header.extend((1..=m).map(|j| format!("lambda_{j}")));
        header.extend((1..=m).map(|j| format!("rho_{j}")));
        header.push("max_density_delta".into());
        header.push("penalty".into());
        writeln!(out, "{}", header.join(","))?;
        for r in self.initial.iter().chain(&self.records) {
            let mut row = vec![r.iteration.to_string(), format!("{:.17e}", r.objective)];
            row.extend(r.lambda.iter().map(|v| format!("{v:.17e}")));
            row.extend(r.rho.iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", r.max_density_delta));
            row.push(format!("{:.17e}", r.penalty));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: MixtureState,
    pub trace: FitTrace,
    /// The relative-change stopping rule fired before `max_iter`.
    pub converged: bool,
}

/// `lambda_j = (1/n) sum_i w_ij`.
pub fn update_lambda(weights: ArrayView2<f64>) -> Vec<f64> {
    let n = weights.nrows() as f64;
    let mut lambda: Vec<f64> = weights.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
    let total: f64 = lambda.iter().sum();
    for l in &mut lambda {
        *l /= total;
    }
    lambda
}

/// Posterior weights `w_ij = lambda_j N_ij / sum_k lambda_k N_ik` from a
/// matrix of smoothed values at the data points.
pub fn weights_from_smoothed(lambda: &[f64], smoothed: ArrayView2<f64>) -> Result<Array2<f64>> {
    if smoothed.ncols() != lambda.len() {
        return Err(Error::contract("one column of smoothed values per component required"));
    }
    let mut w = smoothed.to_owned();
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        let mut total = 0.0;
        for (v, l) in row.iter_mut().zip(lambda) {
            *v *= l;
            total += *v;
        }
        if !(total >= 1e-300) {
            return Err(Error::contract(format!("mixture value {total} at observation {i} is not positive")));
        }
        row /= total;
    }
    Ok(w)
}

/// Data, grid, bandwidth and precomputed kernel tables for one fit. The
/// bandwidth is fixed for the lifetime of the estimator.
#[derive(Debug, Clone)]
pub struct MmEstimator {
    data: Array2<f64>,
    smoother: Smoother,
    rows: KernelRows,
}

impl MmEstimator {
    pub fn new(data: ArrayView2<f64>, grid: Arc<TensorGrid>, bandwidth: BandwidthMatrix) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::input("no observations"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("data contain non-finite values"));
        }
        let rows = KernelRows::new(grid.clone(), &bandwidth, data)?;
        let smoother = Smoother::new(grid, bandwidth)?;
        Ok(Self {
            data: data.to_owned(),
            smoother,
            rows,
        })
    }

    /// Grid from the margined bounding box, bandwidth from the configured rule.
    pub fn from_config(data: ArrayView2<f64>, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let d = data.ncols();
        if config.copula.is_some() && d != 2 {
            return Err(Error::input(format!("copula estimation needs bivariate data, got d = {d}")));
        }
        let grid = TensorGrid::from_data(data, config.grid.margin, &vec![config.grid.points_per_dim; d])?;
        let bandwidth = match &config.bandwidth {
            BandwidthMode::NormalReference => BandwidthMatrix::normal_reference(data)?,
            BandwidthMode::Fixed(entries) => BandwidthMatrix::from_row_major(d, entries)?,
        };
        Self::new(data, Arc::new(grid), bandwidth)
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        self.smoother.grid()
    }

    pub fn bandwidth(&self) -> &BandwidthMatrix {
        self.smoother.bandwidth()
    }

    pub fn smoother(&self) -> &Smoother {
        &self.smoother
    }

    /// Starting state from the configured initializer.
    pub fn initial_state(&self, m: usize, mode: InitMode, seed: u64) -> Result<MixtureState> {
        match mode {
            InitMode::KMeans => {
                let labels = kmeans(self.data.view(), m, seed)?;
                state_from_labels(&self.rows, &labels, m)
            }
            InitMode::Gmm => {
                let gmm = fit_diagonal_gmm(self.data.view(), m, seed)?;
                state_from_responsibilities(&self.rows, gmm.responsibilities.view())
            }
        }
    }

    /// Starting state from given hard labels.
    pub fn state_from_labels(&self, labels: &[usize], m: usize) -> Result<MixtureState> {
        state_from_labels(&self.rows, labels, m)
    }

    fn check_state(&self, state: &MixtureState) -> Result<()> {
        if state.densities.iter().any(|f| f.grid().spec() != self.grid().spec()) {
            return Err(Error::contract("state densities are not on the estimator grid"));
        }
        Ok(())
    }

    /// `N f_j(x_i)` as an `n x m` matrix.
    pub fn point_smooth(&self, state: &MixtureState) -> Result<Array2<f64>> {
        self.check_state(state)?;
        let cols: Vec<Vec<f64>> = state
            .densities
            .par_iter()
            .map(|f| {
                let logs = log_values(f.values())?;
                Ok(self.rows.smooth_at_points(&logs).into_iter().map(f64::exp).collect())
            })
            .collect::<Result<_>>()?;
        let n = self.rows.len();
        Ok(Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j][i]))
    }

    pub fn posterior_weights(&self, state: &MixtureState) -> Result<Array2<f64>> {
        let smoothed = self.point_smooth(state)?;
        weights_from_smoothed(&state.lambda, smoothed.view())
    }

    pub fn objective(&self, state: &MixtureState) -> Result<ObjectiveValue> {
        let smoothed = self.point_smooth(state)?;
        let value = objective_from_smoothed(&state.lambda, smoothed.view());
        let masses: Vec<f64> = state
            .densities
            .par_iter()
            .map(|f| Ok(self.grid().integrate(&self.smoother.nonlinear_smooth(f)?)?))
            .collect::<Result<_>>()?;
        let penalty = 1.0 - state.lambda.iter().zip(&masses).map(|(l, m)| l * m).sum::<f64>();
        Ok(ObjectiveValue { value, penalty })
    }

    /// New density for component `j`: the kernel estimate with point weights
    /// `N f_j(x_i) / (M_lambda N f)(x_i)`, normalized over the grid and
    /// floored. `smoothed` holds `N f(x_i)` of the current state and
    /// `lambda` the mixing weights entering the denominator.
    pub fn update_density(&self, j: usize, lambda: &[f64], smoothed: ArrayView2<f64>) -> Result<DensityField> {
        if j >= smoothed.ncols() || lambda.len() != smoothed.ncols() {
            return Err(Error::contract(format!("component {j} out of range")));
        }
        let n = smoothed.nrows() as f64;
        let ratio: Vec<f64> = smoothed
            .rows()
            .into_iter()
            .map(|row| {
                let mix: f64 = row.iter().zip(lambda).map(|(v, l)| v * l).sum();
                row[j] / mix / n
            })
            .collect();
        let values = self.rows.scatter(&ratio);
        if !values.iter().any(|v| *v > 0.0) {
            return Err(Error::contract(format!("density update for component {j} is identically zero")));
        }
        DensityField::normalized(self.grid().clone(), values)
    }

    /// Density update for every component with `lambda` held fixed.
    pub fn density_step(&self, state: &MixtureState, lambda: &[f64]) -> Result<MixtureState> {
        let smoothed = self.point_smooth(state)?;
        self.densities_from(state, lambda.to_vec(), smoothed.view())
    }

    fn densities_from(&self, state: &MixtureState, lambda: Vec<f64>, smoothed: ArrayView2<f64>) -> Result<MixtureState> {
        let densities = (0..lambda.len())
            .into_par_iter()
            .map(|j| self.update_density(j, &lambda, smoothed))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureState {
            lambda,
            densities,
            rho: state.rho.clone(),
            iteration: state.iteration + 1,
        })
    }

    /// One MM iteration: weights, `lambda` update, density update against
    /// the new `lambda`. Copula parameters are carried over unchanged.
    pub fn step(&self, state: &MixtureState) -> Result<MixtureState> {
        let smoothed = self.point_smooth(state)?;
        let weights = weights_from_smoothed(&state.lambda, smoothed.view())?;
        let lambda = update_lambda(weights.view());
        check_simplex(&lambda).map_err(|e| Error::Numeric {
            iteration: state.iteration + 1,
            message: e.to_string(),
        })?;
        self.densities_from(state, lambda, smoothed.view())
    }

    /// Least-squares copula parameter for each component. Components whose
    /// fit fails keep their previous value.
    pub fn estimate_rho(&self, state: &MixtureState, family: CopulaFamily, weighted: bool) -> Result<Vec<f64>> {
        if self.data.ncols() != 2 {
            return Err(Error::contract("copula estimation is bivariate"));
        }
        let weights = if weighted { Some(self.posterior_weights(state)?) } else { None };
        (0..state.components())
            .into_par_iter()
            .map(|j| {
                let points = self.copula_observations(state, j)?;
                let w = weights.as_ref().map(|w| w.column(j).to_vec());
                match fit_rho(family, &points, w.as_deref()) {
                    Ok(est) => Ok(est.rho),
                    Err(Error::Estimation(msg)) => {
                        log::warn!("copula fit for component {} skipped: {msg}", j + 1);
                        Ok(state.rho[j])
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    /// Copula coordinates and empirical copula densities of component `j`
    /// at every observation.
    pub fn copula_observations(&self, state: &MixtureState, j: usize) -> Result<Vec<CopulaObservation>> {
        let field = &state.densities[j];
        let transform = MarginalTransform::from_field(field)?;
        self.data
            .rows()
            .into_iter()
            .map(|x| empirical_copula_density(field, &transform, &x.to_vec()))
            .collect()
    }

    /// Runs the MM iteration from `init` until the relative objective change
    /// drops below `rel_tol` or `max_iter` iterations have run.
    pub fn fit(&self, init: MixtureState, config: &FitConfig) -> Result<FitOutcome> {
        init.validate()?;
        self.check_state(&init)?;
        if !(config.rel_tol > 0.0) {
            return Err(Error::input("rel_tol must be positive"));
        }
        if config.max_iter == 0 {
            return Ok(FitOutcome {
                state: init,
                trace: FitTrace::default(),
                converged: false,
            });
        }
        let start = self.objective(&init)?;
        check_finite(start.value, init.iteration)?;
        let mut trace = FitTrace {
            initial: Some(record(&init, start, 0.0)),
            records: Vec::with_capacity(config.max_iter),
        };
        let mut state = init;
        let mut prev = start.value;
        let mut converged = false;
        for _ in 0..config.max_iter {
            let mut next = self.step(&state)?;
            if let Some(family) = config.copula {
                next.rho = self.estimate_rho(&next, family, config.copula_weighted)?;
            }
            let obj = self.objective(&next)?;
            check_finite(obj.value, next.iteration)?;
            let delta = state
                .densities
                .iter()
                .zip(&next.densities)
                .flat_map(|(a, b)| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            trace.records.push(record(&next, obj, delta));
            log::debug!("iteration {}: objective {:.12}", next.iteration, obj.value);
            let change = (prev - obj.value).abs() / prev.abs().max(f64::MIN_POSITIVE);
            state = next;
            prev = obj.value;
            if change < config.rel_tol {
                converged = true;
                break;
            }
        }
        Ok(FitOutcome {
            state,
            trace,
            converged,
        })
    }

    /// Hard labels `argmax_j w_ij`, lowest index on ties.
    pub fn classify(&self, state: &MixtureState) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.posterior_weights(state)?.view()))
    }

    /// Surrogate `b = -(1/n) sum_i sum_j w_ij log(lambda_j N f_j(x_i))` of
    /// `state` under fixed weights.
    pub fn surrogate(&self, state: &MixtureState, weights: ArrayView2<f64>) -> Result<f64> {
        let smoothed = self.point_smooth(state)?;
        let n = smoothed.nrows() as f64;
        let mut b = 0.0;
        for (srow, wrow) in smoothed.rows().into_iter().zip(weights.rows()) {
            for ((s, w), l) in srow.iter().zip(wrow).zip(&state.lambda) {
                if *w > 0.0 {
                    b -= w * (l * s).ln();
                }
            }
        }
        Ok(b / n)
    }
}

/// `-(1/n) sum_i sum_j w_ij log w_ij`.
pub fn weight_entropy(weights: ArrayView2<f64>) -> f64 {
    let n = weights.nrows() as f64;
    -weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>() / n
}

pub fn argmax_rows(weights: ArrayView2<f64>) -> Vec<usize> {
    weights
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}

fn objective_from_smoothed(lambda: &[f64], smoothed: ArrayView2<f64>) -> f64 {
    let n = smoothed.nrows() as f64;
    -smoothed
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(lambda).map(|(v, l)| v * l).sum::<f64>().ln())
        .sum::<f64>()
        / n
}

fn check_finite(value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            iteration,
            message: format!("objective is {value}"),
        })
    }
}

fn record(state: &MixtureState, obj: ObjectiveValue, delta: f64) -> FitRecord {
    FitRecord {
        iteration: state.iteration,
        objective: obj.value,
        penalty: obj.penalty,
        lambda: state.lambda.clone(),
        rho: state.rho.clone(),
        max_density_delta: delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::simulate::{sample_mixture, table1};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table1_estimator(n: usize, seed: u64, points: usize) -> MmEstimator {
        let (data, _) = sample_mixture(&table1(), n, seed).unwrap();
        let config = FitConfig {
            grid: GridConfig {
                points_per_dim: points,
                margin: 0.15,
            },
            ..FitConfig::default()
        };
        MmEstimator::from_config(data.view(), &config).unwrap()
    }

    fn random_state(est: &MmEstimator, m: usize, rng: &mut ChaCha8Rng) -> MixtureState {
        let mut lambda: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = lambda.iter().sum();
        lambda.iter_mut().for_each(|l| *l /= s);
        let grid = est.grid().clone();
        let densities = (0..m)
            .map(|_| {
                let c = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let sd = rng.random_range(1.0..3.0);
                let values = grid.tabulate(|x| (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * sd * sd)).exp());
                DensityField::normalized(grid.clone(), values).unwrap()
            })
            .collect();
        MixtureState::new(lambda, densities, vec![0.0; m]).unwrap()
    }

    #[test]
    fn update_lambda_cases() {
        let w = Array2::from_elem((5, 4), 0.25);
        for l in update_lambda(w.view()) {
            assert!((l - 0.25).abs() < 1e-15);
        }
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(update_lambda(w.view()), vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Array2::from_shape_fn((30, 3), |_| rng.random_range(0.0..1.0));
        for mut r in w.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        assert!((update_lambda(w.view()).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_invariants() {
        let grid = Arc::new(TensorGrid::new(GridSpec::new(vec![0.0], vec![1.0], vec![11]).unwrap()));
        let f = DensityField::uniform(grid.clone());
        assert!(MixtureState::new(vec![1.0], vec![f.clone()], vec![0.0]).is_ok());
        assert!(MixtureState::new(vec![0.6, 0.6], vec![f.clone(), f.clone()], vec![0.0; 2]).is_err());
        let doubled = DensityField::from_values(grid.clone(), f.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!(matches!(MixtureState::new(vec![1.0], vec![doubled], vec![0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn posterior_weight_cases() {
        let est = table1_estimator(200, 3, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_state(&est, 1, &mut rng);
        assert!(est.posterior_weights(&s).unwrap().iter().all(|&w| w == 1.0));

        let s = random_state(&est, 3, &mut rng);
        let w = est.posterior_weights(&s).unwrap();
        for r in w.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-10);
            assert!(r.iter().all(|&v| v > 0.0));
        }

        let f = s.densities[0].clone();
        let twins = MixtureState::new(vec![0.5, 0.5], vec![f.clone(), f], vec![0.0; 2]).unwrap();
        assert!(est.posterior_weights(&twins).unwrap().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn separated_components_get_confident_weights() {
        let grid = Arc::new(TensorGrid::new(GridSpec::new(vec![-12.0, -6.0], vec![12.0, 6.0], vec![121, 61]).unwrap()));
        let h = BandwidthMatrix::from_row_major(2, &[0.25, 0.0, 0.0, 0.25]).unwrap();
        let data = array![[-5.0, 0.0], [5.0, 0.0], [-2.5, 0.0], [2.5, 0.0]];
        let est = MmEstimator::new(data.view(), grid.clone(), h).unwrap();
        let bump = |c: f64| {
            DensityField::normalized(grid.clone(), grid.tabulate(|x| (-((x[0] - c).powi(2) + x[1].powi(2)) / 2.0).exp()))
                .unwrap()
        };
        let state = MixtureState::new(vec![0.5, 0.5], vec![bump(-5.0), bump(5.0)], vec![0.0; 2]).unwrap();
        let w = est.posterior_weights(&state).unwrap();
        assert!(w[[0, 0]] > 0.99 && w[[1, 1]] > 0.99);
        assert_eq!(est.classify(&state).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn classify_ties_go_to_lower_index() {
        let w = array![[0.5, 0.5], [0.2, 0.8], [0.01, 0.99], [1.0 / 3.0, 1.0 / 3.0]];
        assert_eq!(argmax_rows(w.view()), vec![0, 1, 1, 0]);
    }

    #[test]
    fn uniform_component_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let grid = Arc::new(TensorGrid::new(GridSpec::new(vec![-10.0, -10.0], vec![10.0, 10.0], vec![81, 81]).unwrap()));
        let h = BandwidthMatrix::from_row_major(2, &[0.2, 0.0, 0.0, 0.2]).unwrap();
        let est = MmEstimator::new(data.view(), grid.clone(), h).unwrap();
        let state = MixtureState::new(vec![1.0], vec![DensityField::uniform(grid)], vec![0.0]).unwrap();
        let obj = est.objective(&state).unwrap();
        assert!((obj.value - 400f64.ln()).abs() < 1e-9, "{}", obj.value);
    }

    #[test]
    fn single_step_descends_and_preserves_invariants() {
        let est = table1_estimator(300, 5, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let s = random_state(&est, 3, &mut rng);
            let before = est.objective(&s).unwrap().value;
            let next = est.step(&s).unwrap();
            next.validate().unwrap();
            let after = est.objective(&next).unwrap().value;
            assert!(after <= before + 1e-8 * (1.0 + before.abs()), "{before} -> {after}");
        }
    }

    #[test]
    fn fixed_lambda_density_step_descends() {
        let est = table1_estimator(300, 7, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = random_state(&est, 3, &mut rng);
        let lambda = s.lambda.clone();
        let mut prev = est.objective(&s).unwrap().value;
        for _ in 0..5 {
            s = est.density_step(&s, &lambda).unwrap();
            assert_eq!(s.lambda, lambda);
            let v = est.objective(&s).unwrap().value;
            assert!(v <= prev + 1e-8 * (1.0 + prev.abs()));
            prev = v;
        }
    }

    #[test]
    fn minorization_identity() {
        let est = table1_estimator(250, 9, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let s = random_state(&est, 3, &mut rng);
            let w = est.posterior_weights(&s).unwrap();
            let b = est.surrogate(&s, w.view()).unwrap();
            let h = weight_entropy(w.view());
            let l = est.objective(&s).unwrap().value;
            assert!((b - h - l).abs() < 1e-8 * (1.0 + l.abs()));
            // at any other state the surrogate majorizes
            let other = random_state(&est, 3, &mut rng);
            let b2 = est.surrogate(&other, w.view()).unwrap();
            let l2 = est.objective(&other).unwrap().value;
            assert!(l2 <= b2 - h + 1e-10);
        }
    }

    #[test]
    fn mirror_symmetry_of_density_update() {
        let grid = Arc::new(TensorGrid::new(GridSpec::new(vec![-6.0, -6.0], vec![6.0, 6.0], vec![49, 49]).unwrap()));
        let h = BandwidthMatrix::from_row_major(2, &[0.3, 0.1, 0.1, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let half: Vec<[f64; 2]> = (0..25).map(|_| [rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)]).collect();
        let mut data = Array2::zeros((50, 2));
        for (i, p) in half.iter().enumerate() {
            data[[i, 0]] = p[0];
            data[[i, 1]] = p[1];
            data[[25 + i, 0]] = -p[0];
            data[[25 + i, 1]] = -p[1];
        }
        let est = MmEstimator::new(data.view(), grid.clone(), h).unwrap();
        let bump = |c: f64| {
            DensityField::normalized(grid.clone(), grid.tabulate(|x| (-((x[0] - c).powi(2) + (x[1] - c).powi(2)) / 4.0).exp()))
                .unwrap()
        };
        let state = MixtureState::new(vec![0.5, 0.5], vec![bump(2.0), bump(-2.0)], vec![0.0; 2]).unwrap();
        let next = est.step(&state).unwrap();
        let g = grid.len();
        let (f1, f2) = (next.densities[0].values(), next.densities[1].values());
        for i in 0..g {
            assert!((f1[i] - f2[g - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_component_reaches_fixed_point() {
        let est = table1_estimator(200, 12, 30);
        let config = FitConfig {
            components: 1,
            copula: None,
            ..FitConfig::default()
        };
        let init = est.initial_state(1, InitMode::KMeans, 0).unwrap();
        let out = est.fit(init, &config).unwrap();
        assert!(out.converged);
        assert!(out.trace.records.len() <= 2, "{} iterations", out.trace.records.len());
        assert_eq!(out.state.lambda, vec![1.0]);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let est = table1_estimator(100, 13, 20);
        let init = est.initial_state(3, InitMode::KMeans, 1).unwrap();
        let config = FitConfig {
            max_iter: 0,
            ..FitConfig::default()
        };
        let out = est.fit(init.clone(), &config).unwrap();
        assert!(out.trace.is_empty() && out.trace.initial.is_none());
        assert_eq!(out.state.lambda, init.lambda);
        assert_eq!(out.state.densities[0].values(), init.densities[0].values());
        assert!(config.validate().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let est = table1_estimator(100, 14, 20);
        let init = est.initial_state(2, InitMode::KMeans, 1).unwrap();
        let config = FitConfig {
            components: 2,
            max_iter: 3,
            ..FitConfig::default()
        };
        let out = est.fit(init, &config).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,objective,lambda_1,lambda_2,rho_1,rho_2,max_density_delta,penalty"
        );
        assert_eq!(lines.count(), out.trace.records.len() + 1);
    }

    #[test]
    fn rejects_data_outside_grid() {
        let grid = Arc::new(TensorGrid::new(GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5]).unwrap()));
        let h = BandwidthMatrix::from_row_major(2, &[0.1, 0.0, 0.0, 0.1]).unwrap();
        let data = array![[0.5, 0.5], [2.0, 0.5]];
        assert!(matches!(MmEstimator::new(data.view(), grid, h), Err(Error::Domain(_))));
    }
}
