//! Tensor-product grids over a compact box, trapezoid quadrature, and grid
//! densities.
//!
//! Every density in the crate is a vector of node values laid out row-major
//! over a [`TensorGrid`] (the last dimension varies fastest).

use std::io::Write;
use std::sync::Arc;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Lower bound applied to every normalized density value so that `log f`
/// stays finite.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Slack allowed when a query point sits marginally outside the box.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Fallback half-width used for a coordinate with zero range.
const DEGENERATE_HALF_WIDTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points_per_dim: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points_per_dim: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || points_per_dim.len() != d {
            return Err(Error::input(format!(
                "grid bounds and point counts must share a positive dimension (got {}, {}, {})",
                lower.len(),
                upper.len(),
                points_per_dim.len()
            )));
        }
        for k in 0..d {
            if !(lower[k].is_finite() && upper[k].is_finite() && lower[k] < upper[k]) {
                return Err(Error::input(format!(
                    "dimension {k}: need finite lower < upper, got [{}, {}]",
                    lower[k], upper[k]
                )));
            }
            if points_per_dim[k] < 2 {
                return Err(Error::input(format!(
                    "dimension {k}: need at least 2 points, got {}",
                    points_per_dim[k]
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            points_per_dim,
        })
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn points_per_dim(&self) -> &[usize] {
        &self.points_per_dim
    }
}

/// A uniform tensor-product grid with trapezoid weights.
#[derive(Debug, Clone)]
pub struct TensorGrid {
    spec: GridSpec,
    axes: Vec<Vec<f64>>,
    axis_weights: Vec<Vec<f64>>,
    strides: Vec<usize>,
    node_weights: Vec<f64>,
}

impl TensorGrid {
    pub fn new(spec: GridSpec) -> Self {
        let d = spec.dims();
        let mut axes = Vec::with_capacity(d);
        let mut axis_weights = Vec::with_capacity(d);
        for k in 0..d {
            let n = spec.points_per_dim[k];
            let (lo, hi) = (spec.lower[k], spec.upper[k]);
            let h = (hi - lo) / (n - 1) as f64;
            let mut axis: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
            axis[n - 1] = hi;
            let mut w = vec![h; n];
            w[0] = 0.5 * h;
            w[n - 1] = 0.5 * h;
            axes.push(axis);
            axis_weights.push(w);
        }
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * spec.points_per_dim[k + 1];
        }
        let len: usize = spec.points_per_dim.iter().product();
        let mut node_weights = vec![0.0; len];
        let mut idx = vec![0usize; d];
        for (flat, w) in node_weights.iter_mut().enumerate() {
            unravel(flat, &spec.points_per_dim, &mut idx);
            *w = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| axis_weights[k][i])
                .product();
        }
        Self {
            spec,
            axes,
            axis_weights,
            strides,
            node_weights,
        }
    }

    /// Builds the margined bounding box of `data` (rows are observations).
    ///
    /// Each dimension spans `[min - margin*range, max + margin*range]`; a
    /// constant coordinate gets `[c - 1, c + 1]` instead.
    pub fn from_data(data: ArrayView2<f64>, margin: f64, points_per_dim: &[usize]) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 {
            return Err(Error::input(format!("need at least 2 observations, got {n}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::input(format!("margin must be a finite nonnegative number, got {margin}")));
        }
        if points_per_dim.len() != d {
            return Err(Error::input(format!(
                "points_per_dim has {} entries for {d}-dimensional data",
                points_per_dim.len()
            )));
        }
        if let Some(((i, k), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::input(format!("non-finite value {v} at row {i}, column {k}")));
        }
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        for col in data.columns() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                lower.push(lo - margin * range);
                upper.push(hi + margin * range);
            } else {
                log::warn!("coordinate {} has zero range; using width {}", lower.len(), 2.0 * DEGENERATE_HALF_WIDTH);
                lower.push(lo - DEGENERATE_HALF_WIDTH);
                upper.push(hi + DEGENERATE_HALF_WIDTH);
            }
        }
        Ok(Self::new(GridSpec::new(lower, upper, points_per_dim.to_vec())?))
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> usize {
        self.spec.dims()
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.node_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_weights.is_empty()
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn axis_weights(&self, k: usize) -> &[f64] {
        &self.axis_weights[k]
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.spec.upper[k] - self.spec.lower[k]) / (self.spec.points_per_dim[k] - 1) as f64
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Product trapezoid weight of every node.
    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    pub fn volume(&self) -> f64 {
        (0..self.dims())
            .map(|k| self.spec.upper[k] - self.spec.lower[k])
            .product()
    }

    pub fn multi_index(&self, flat: usize, out: &mut [usize]) {
        unravel(flat, &self.spec.points_per_dim, out);
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dims()];
        self.multi_index(flat, &mut idx);
        idx.iter().enumerate().map(|(k, &i)| self.axes[k][i]).collect()
    }

    /// Nodes as an iterator of coordinate vectors, in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |g| self.node(g))
    }

    /// Evaluates `f` at every node.
    pub fn tabulate(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        self.nodes().map(|x| f(&x)).collect()
    }

    /// Tensor-product trapezoid integral of node values.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        self.check_len(values)?;
        Ok(values
            .iter()
            .zip(&self.node_weights)
            .map(|(v, w)| v * w)
            .sum())
    }

    /// Integrates out every dimension except `keep`, returning values on
    /// `axis(keep)`.
    pub fn marginalize(&self, values: &[f64], keep: usize) -> Result<Vec<f64>> {
        self.check_len(values)?;
        if keep >= self.dims() {
            return Err(Error::contract(format!(
                "marginal dimension {keep} out of range for a {}-dimensional grid",
                self.dims()
            )));
        }
        let mut out = vec![0.0; self.spec.points_per_dim[keep]];
        let mut idx = vec![0; self.dims()];
        for (flat, v) in values.iter().enumerate() {
            self.multi_index(flat, &mut idx);
            let w: f64 = idx
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != keep)
                .map(|(k, &i)| self.axis_weights[k][i])
                .product();
            out[idx[keep]] += v * w;
        }
        Ok(out)
    }

    /// Whether `x` lies in the box (with the boundary slack).
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x.iter().enumerate().all(|(k, &v)| {
                let slack = BOUNDARY_SLACK * (1.0 + self.spec.upper[k] - self.spec.lower[k]);
                v >= self.spec.lower[k] - slack && v <= self.spec.upper[k] + slack
            })
    }

    /// Locates the cell containing `x`: per dimension, the lower node index
    /// and the fractional position inside the cell.
    pub(crate) fn locate(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        if x.len() != self.dims() {
            return Err(Error::contract(format!(
                "point has {} coordinates, grid has {}",
                x.len(),
                self.dims()
            )));
        }
        if !self.contains(x) {
            return Err(Error::domain(format!("point {x:?} lies outside the grid box")));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(k, &v)| {
                let n = self.spec.points_per_dim[k];
                let h = self.spacing(k);
                let v = v.clamp(self.spec.lower[k], self.spec.upper[k]);
                let pos = (v - self.spec.lower[k]) / h;
                let i = (pos.floor() as usize).min(n - 2);
                let t = (pos - i as f64).clamp(0.0, 1.0);
                (i, t)
            })
            .collect())
    }

    /// Multilinear interpolation of node values at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        self.check_len(values)?;
        let cell = self.locate(x)?;
        let d = self.dims();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for (k, &(i, t)) in cell.iter().enumerate() {
                let up = (corner >> k) & 1 == 1;
                w *= if up { t } else { 1.0 - t };
                flat += (i + usize::from(up)) * self.strides[k];
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        Ok(acc)
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::contract(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn unravel(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for k in (0..dims.len()).rev() {
        out[k] = flat % dims[k];
        flat /= dims[k];
    }
}

/// Nonnegative node values on a shared grid.
///
/// Fields built through [`DensityField::normalized`] integrate to one and are
/// bounded below by [`DENSITY_FLOOR`].
#[derive(Debug, Clone)]
pub struct DensityField {
    grid: Arc<TensorGrid>,
    values: Vec<f64>,
}

impl DensityField {
    /// Wraps raw nonnegative node values without normalizing.
    pub fn from_values(grid: Arc<TensorGrid>, values: Vec<f64>) -> Result<Self> {
        grid.check_len(&values)?;
        if let Some((g, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!("field value {v} at node {g} is negative or non-finite")));
        }
        Ok(Self { grid, values })
    }

    /// Rescales `values` to unit integral, then applies the density floor.
    pub fn normalized(grid: Arc<TensorGrid>, mut values: Vec<f64>) -> Result<Self> {
        grid.check_len(&values)?;
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract("cannot normalize a field with negative or non-finite values"));
        }
        let total = grid.integrate(&values)?;
        if !(total > 0.0) {
            return Err(Error::contract("cannot normalize a field with zero mass"));
        }
        for v in &mut values {
            *v = (*v / total).max(DENSITY_FLOOR);
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: Arc<TensorGrid>) -> Self {
        let c = 1.0 / grid.volume();
        let values = vec![c; grid.len()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .zip(self.grid.node_weights())
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn marginal(&self, keep: usize) -> Result<Vec<f64>> {
        self.grid.marginalize(&self.values, keep)
    }

    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        self.grid.interpolate(&self.values, x)
    }

    /// Checks unit mass and the floor, within the crate tolerances.
    pub fn check_normalized(&self) -> Result<()> {
        let mass = self.integral();
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::contract(format!("density integrates to {mass}, expected 1")));
        }
        if let Some(v) = self.values.iter().find(|v| **v < DENSITY_FLOOR * (1.0 - 1e-9)) {
            return Err(Error::contract(format!("density value {v} is below the floor")));
        }
        Ok(())
    }

    /// Dumps the field as CSV: `x1..xd,value`, one row per node.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.grid.dims();
        let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).chain(["value".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (g, v) in self.values.iter().enumerate() {
            let node = self.grid.node(g);
            let coords: Vec<String> = node.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{},{}", coords.join(","), v)?;
        }
        Ok(())
    }
}
