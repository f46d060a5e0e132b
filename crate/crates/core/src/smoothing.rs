//! Linear smoother `S`, nonlinear smoother `N = exp(S log .)` and the
//! mixture operator `M_lambda`.
//!
//! Both smoothers integrate over the grid box only, with no boundary
//! renormalization: `S1 < 1` near the edges.
//!
//! On a uniform grid `K_H(x_g - x_h)` depends only on the index offset
//! between nodes, so the node-to-node operator is stored as a stencil of
//! offsets. The stencil is truncated where the Gaussian kernel falls below
//! `exp(-KERNEL_CUTOFF^2 / 2)` of its peak, which is far below double
//! precision relative to the retained mass.

use std::sync::Arc;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DensityField, TensorGrid};
use crate::kernel::BandwidthMatrix;

/// Mahalanobis radius beyond which kernel values are treated as zero.
pub const KERNEL_CUTOFF: f64 = 8.0;

/// Grid nodes per parallel work item.
const CHUNK: usize = 256;

/// Stencil entries sharing all offsets but the last, which form a
/// contiguous run along the last axis.
#[derive(Debug, Clone)]
struct StencilRow {
    prefix: Vec<isize>,
    start: isize,
    values: Vec<f64>,
}

/// Node-to-node smoothing on a fixed grid with a fixed bandwidth.
#[derive(Debug, Clone)]
pub struct Smoother {
    grid: Arc<TensorGrid>,
    bandwidth: BandwidthMatrix,
    rows: Vec<StencilRow>,
}

impl Smoother {
    pub fn new(grid: Arc<TensorGrid>, bandwidth: BandwidthMatrix) -> Result<Self> {
        let d = grid.dims();
        if bandwidth.dims() != d {
            return Err(Error::contract(format!(
                "bandwidth is {}-dimensional, grid is {d}-dimensional",
                bandwidth.dims()
            )));
        }
        let radius: Vec<isize> = (0..d)
            .map(|k| {
                let r = (KERNEL_CUTOFF * bandwidth.axis_sd(k) / grid.spacing(k)).ceil() as isize;
                r.min(grid.spec().points_per_dim()[k] as isize - 1)
            })
            .collect();
        let cutoff_sq = KERNEL_CUTOFF * KERNEL_CUTOFF;
        let last = d - 1;
        let mut rows = Vec::new();
        let mut prefix: Vec<isize> = radius[..last].iter().map(|r| -r).collect();
        let mut u = vec![0.0; d];
        'outer: loop {
            for k in 0..last {
                u[k] = prefix[k] as f64 * grid.spacing(k);
            }
            let mut row: Option<StencilRow> = None;
            for j in -radius[last]..=radius[last] {
                u[last] = j as f64 * grid.spacing(last);
                if bandwidth.mahalanobis_sq(&u) <= cutoff_sq {
                    let value = bandwidth.kernel_at(&u);
                    match row.as_mut() {
                        Some(r) => r.values.push(value),
                        None => {
                            row = Some(StencilRow {
                                prefix: prefix.clone(),
                                start: j,
                                values: vec![value],
                            })
                        }
                    }
                } else if row.is_some() {
                    // the cutoff ellipsoid is convex, so each run is contiguous
                    break;
                }
            }
            rows.extend(row);
            for k in (0..last).rev() {
                if prefix[k] < radius[k] {
                    prefix[k] += 1;
                    continue 'outer;
                }
                prefix[k] = -radius[k];
            }
            break;
        }
        Ok(Self {
            grid,
            bandwidth,
            rows,
        })
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        &self.grid
    }

    pub fn bandwidth(&self) -> &BandwidthMatrix {
        &self.bandwidth
    }

    /// Number of retained node offsets.
    pub fn stencil_len(&self) -> usize {
        self.rows.iter().map(|r| r.values.len()).sum()
    }

    /// `out_g = sum_h K_H(x_g - x_h) w_h src_h` over all grid nodes.
    pub fn convolve(&self, src: &[f64]) -> Result<Vec<f64>> {
        let grid = &self.grid;
        if src.len() != grid.len() {
            return Err(Error::contract(format!(
                "field has {} values, grid has {} nodes",
                src.len(),
                grid.len()
            )));
        }
        let d = grid.dims();
        let last = d - 1;
        let dims = grid.spec().points_per_dim();
        let n_last = dims[last] as isize;
        let strides = grid.strides();
        let weighted: Vec<f64> = src.iter().zip(grid.node_weights()).map(|(v, w)| v * w).collect();
        let mut out = vec![0.0; grid.len()];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let mut idx = vec![0usize; d];
            for (i, slot) in chunk.iter_mut().enumerate() {
                let g = c * CHUNK + i;
                grid.multi_index(g, &mut idx);
                let mut acc = 0.0;
                'rows: for row in &self.rows {
                    let mut base = 0usize;
                    for k in 0..last {
                        let j = idx[k] as isize + row.prefix[k];
                        if j < 0 || j >= dims[k] as isize {
                            continue 'rows;
                        }
                        base += j as usize * strides[k];
                    }
                    let first = idx[last] as isize + row.start;
                    let t_lo = (-first).max(0);
                    let t_hi = (n_last - first).min(row.values.len() as isize);
                    if t_lo >= t_hi {
                        continue;
                    }
                    let src_lo = base + (first + t_lo) as usize;
                    let len = (t_hi - t_lo) as usize;
                    let kv = &row.values[t_lo as usize..t_hi as usize];
                    let sv = &weighted[src_lo..src_lo + len];
                    acc += kv.iter().zip(sv).map(|(a, b)| a * b).sum::<f64>();
                }
                *slot = acc;
            }
        });
        Ok(out)
    }

    /// Kernel mass inside the box seen from every node, `S1`.
    pub fn mass(&self) -> Vec<f64> {
        self.convolve(&vec![1.0; self.grid.len()]).expect("length matches grid")
    }

    /// `Sf(x_g) = int_Omega K_H(x_g - u) f(u) du` at every node.
    pub fn linear_smooth(&self, f: &DensityField) -> Result<Vec<f64>> {
        self.check_grid(f)?;
        self.convolve(f.values())
    }

    /// `Nf(x_g) = exp( int_Omega K_H(x_g - u) log f(u) du )` at every node.
    pub fn nonlinear_smooth(&self, f: &DensityField) -> Result<Vec<f64>> {
        self.check_grid(f)?;
        let logs = log_values(f.values())?;
        let mut out = self.convolve(&logs)?;
        for v in &mut out {
            *v = v.exp();
        }
        Ok(out)
    }

    fn check_grid(&self, f: &DensityField) -> Result<()> {
        if !Arc::ptr_eq(f.grid(), &self.grid) && f.grid().spec() != self.grid.spec() {
            return Err(Error::contract("field lives on a different grid than the smoother"));
        }
        Ok(())
    }
}

pub(crate) fn log_values(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(g, &v)| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::contract(format!("density value {v} at node {g} is not positive")))
            }
        })
        .collect()
}

/// Kernel values `K_H(x_i - x_h)` between data points and grid nodes,
/// stored sparsely per data point (entries beyond the cutoff are dropped).
#[derive(Debug, Clone)]
pub struct KernelRows {
    grid: Arc<TensorGrid>,
    starts: Vec<usize>,
    nodes: Vec<u32>,
    values: Vec<f64>,
}

impl KernelRows {
    pub fn new(grid: Arc<TensorGrid>, bandwidth: &BandwidthMatrix, data: ArrayView2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if d != grid.dims() || bandwidth.dims() != d {
            return Err(Error::contract(format!(
                "data is {d}-dimensional, grid {} and bandwidth {}",
                grid.dims(),
                bandwidth.dims()
            )));
        }
        if grid.len() > u32::MAX as usize {
            return Err(Error::input("grid too large"));
        }
        let cutoff_sq = KERNEL_CUTOFF * KERNEL_CUTOFF;
        let dims = grid.spec().points_per_dim().to_vec();
        let rows: Vec<Result<Vec<(u32, f64)>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = data.row(i).to_vec();
                if !grid.contains(&x) {
                    return Err(Error::domain(format!("observation {i} at {x:?} lies outside the grid box")));
                }
                let mut lo = vec![0usize; d];
                let mut hi = vec![0usize; d];
                for k in 0..d {
                    let reach = KERNEL_CUTOFF * bandwidth.axis_sd(k);
                    let a = grid.axis(k);
                    lo[k] = a.partition_point(|&v| v < x[k] - reach);
                    hi[k] = a.partition_point(|&v| v <= x[k] + reach).max(lo[k] + 1).min(dims[k]);
                    lo[k] = lo[k].min(hi[k] - 1);
                }
                let mut row = Vec::new();
                let mut idx = lo.clone();
                let mut u = vec![0.0; d];
                'outer: loop {
                    let mut flat = 0;
                    for k in 0..d {
                        u[k] = x[k] - grid.axis(k)[idx[k]];
                        flat += idx[k] * grid.strides()[k];
                    }
                    if bandwidth.mahalanobis_sq(&u) <= cutoff_sq {
                        row.push((flat as u32, bandwidth.kernel_at(&u)));
                    }
                    for k in (0..d).rev() {
                        if idx[k] + 1 < hi[k] {
                            idx[k] += 1;
                            continue 'outer;
                        }
                        idx[k] = lo[k];
                    }
                    break;
                }
                Ok(row)
            })
            .collect();
        let mut starts = Vec::with_capacity(n + 1);
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        starts.push(0);
        for row in rows {
            for (g, v) in row? {
                nodes.push(g);
                values.push(v);
            }
            starts.push(nodes.len());
        }
        Ok(Self {
            grid,
            starts,
            nodes,
            values,
        })
    }

    pub fn grid(&self) -> &Arc<TensorGrid> {
        &self.grid
    }

    /// Number of data points.
    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.starts[i]..self.starts[i + 1];
        self.nodes[r.clone()].iter().map(|&g| g as usize).zip(self.values[r].iter().copied())
    }

    /// `sum_h K_H(x_i - x_h) w_h v_h` for every data point `x_i`.
    pub fn smooth_at_points(&self, grid_values: &[f64]) -> Vec<f64> {
        let w = self.grid.node_weights();
        (0..self.len())
            .map(|i| self.row(i).map(|(g, k)| k * w[g] * grid_values[g]).sum())
            .collect()
    }

    /// `out_h = sum_i K_H(x_h - x_i) a_i` on every grid node.
    pub fn scatter(&self, point_weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (i, &a) in point_weights.iter().enumerate() {
            for (g, k) in self.row(i) {
                out[g] += k * a;
            }
        }
        out
    }

    /// Kernel mass inside the box seen from every data point.
    pub fn point_mass(&self) -> Vec<f64> {
        self.smooth_at_points(&vec![1.0; self.grid.len()])
    }
}

/// Pointwise convex combination `sum_j lambda_j f_j`.
pub fn mixture_combine(lambda: &[f64], fields: &[&[f64]]) -> Result<Vec<f64>> {
    check_simplex(lambda)?;
    if fields.len() != lambda.len() {
        return Err(Error::contract(format!(
            "{} weights for {} fields",
            lambda.len(),
            fields.len()
        )));
    }
    let len = fields[0].len();
    if fields.iter().any(|f| f.len() != len) {
        return Err(Error::contract("fields differ in length"));
    }
    let mut out = vec![0.0; len];
    for (l, f) in lambda.iter().zip(fields) {
        for (o, v) in out.iter_mut().zip(f.iter()) {
            *o += l * v;
        }
    }
    Ok(out)
}

pub(crate) fn check_simplex(lambda: &[f64]) -> Result<()> {
    if lambda.is_empty() {
        return Err(Error::contract("mixing weights are empty"));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::contract(format!("mixing weight {l} is not positive")));
    }
    let s: f64 = lambda.iter().sum();
    if (s - 1.0).abs() > 1e-10 {
        return Err(Error::contract(format!("mixing weights sum to {s}, expected 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(lo: f64, hi: f64, n: usize) -> Arc<TensorGrid> {
        Arc::new(TensorGrid::new(GridSpec::new(vec![lo, lo], vec![hi, hi], vec![n, n]).unwrap()))
    }

    fn bw(entries: [f64; 4]) -> BandwidthMatrix {
        BandwidthMatrix::from_row_major(2, &entries).unwrap()
    }

    /// Dense all-pairs quadrature, the reference the stencil must match.
    fn dense_smooth(grid: &TensorGrid, h: &BandwidthMatrix, src: &[f64]) -> Vec<f64> {
        let nodes: Vec<Vec<f64>> = grid.nodes().collect();
        nodes
            .iter()
            .map(|x| {
                nodes
                    .iter()
                    .zip(src)
                    .zip(grid.node_weights())
                    .map(|((u, v), w)| h.kernel_at(&[x[0] - u[0], x[1] - u[1]]) * w * v)
                    .sum()
            })
            .collect()
    }

    fn random_field(grid: &Arc<TensorGrid>, rng: &mut ChaCha8Rng) -> DensityField {
        let vals: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(0.01..1.0)).collect();
        DensityField::normalized(grid.clone(), vals).unwrap()
    }

    #[test]
    fn stencil_matches_dense_quadrature() {
        let g = grid(-3.0, 3.0, 31);
        let h = bw([0.4, 0.15, 0.15, 0.25]);
        let s = Smoother::new(g.clone(), h.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_field(&g, &mut rng);
        let fast = s.linear_smooth(&f).unwrap();
        let slow = dense_smooth(&g, &h, f.values());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_rows_match_stencil_at_nodes() {
        let g = grid(-2.0, 2.0, 21);
        let h = bw([0.3, -0.1, -0.1, 0.2]);
        let s = Smoother::new(g.clone(), h.clone()).unwrap();
        let nodes: Vec<f64> = [5usize, 100, 220, 440].iter().flat_map(|&i| g.node(i)).collect();
        let data = Array2::from_shape_vec((4, 2), nodes).unwrap();
        let rows = KernelRows::new(g.clone(), &h, data.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&g, &mut rng);
        let at_nodes = s.linear_smooth(&f).unwrap();
        let at_points = rows.smooth_at_points(f.values());
        for (p, &i) in [5usize, 100, 220, 440].iter().enumerate() {
            assert!((at_points[p] - at_nodes[i]).abs() <= 1e-12 * at_nodes[i]);
        }
    }

    #[test]
    fn spike_reproduces_kernel() {
        let g = grid(-2.0, 2.0, 41);
        let h = bw([0.1, 0.02, 0.02, 0.08]);
        let s = Smoother::new(g.clone(), h.clone()).unwrap();
        let center = g.len() / 2;
        let mut vals = vec![0.0; g.len()];
        vals[center] = 1.0 / g.node_weights()[center];
        let f = DensityField::from_values(g.clone(), vals).unwrap();
        let sf = s.linear_smooth(&f).unwrap();
        let c = g.node(center);
        let peak = h.kernel_at(&[0.0, 0.0]);
        for (gi, v) in sf.iter().enumerate() {
            let x = g.node(gi);
            let expected = h.kernel_at(&[x[0] - c[0], x[1] - c[1]]);
            // beyond the cutoff the stencil is zero
            assert!((v - expected).abs() <= 1e-12 * expected + 2e-14 * peak);
        }
    }

    #[test]
    fn small_bandwidth_nearly_identity() {
        // Kernel sd 1e-3 resolved by 5e-4 spacing; smooth bump with sd 0.01.
        let g = grid(-0.05, 0.05, 201);
        let h = bw([1e-6, 0.0, 0.0, 1e-6]);
        let s = Smoother::new(g.clone(), h).unwrap();
        let vals = g.tabulate(|x| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * 1e-4)).exp());
        let f = DensityField::normalized(g.clone(), vals).unwrap();
        let sf = s.linear_smooth(&f).unwrap();
        let peak = f.values().iter().copied().fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for (gi, v) in sf.iter().enumerate() {
            let x = g.node(gi);
            // interior: at least 6 kernel sds from the edge
            if x.iter().all(|c| c.abs() <= 0.05 - 6e-3) {
                worst = worst.max((v - f.values()[gi]).abs() / peak);
            }
        }
        assert!(worst <= 5e-2, "relative sup error {worst}");
    }

    #[test]
    fn constant_field_interior() {
        let g = grid(-5.0, 5.0, 51);
        let h = bw([0.09, 0.0, 0.0, 0.09]);
        let s = Smoother::new(g.clone(), h).unwrap();
        let f = DensityField::uniform(g.clone());
        let c = f.values()[0];
        let sf = s.linear_smooth(&f).unwrap();
        let nf = s.nonlinear_smooth(&f).unwrap();
        for (gi, (a, b)) in sf.iter().zip(&nf).enumerate() {
            let x = g.node(gi);
            if x.iter().all(|v| v.abs() <= 2.0) {
                assert!((a - c).abs() <= 1e-6 * c, "S at {x:?}");
                assert!((b - c).abs() <= 1e-4 * c, "N at {x:?}");
            }
        }
        assert!(g.integrate(&sf).unwrap() <= 1.0 + 1e-6);
    }

    #[test]
    fn nonlinear_smooth_of_gaussian_is_closed_form() {
        // log f quadratic => S log f is the same quadratic shifted by the
        // kernel variance: for f ∝ exp(-|x|^2 / (2 s^2)) and H = h^2 I,
        // (S log f)(x) = log c - (|x|^2 + 2 h^2) / (2 s^2) in the interior.
        let g = grid(-4.0, 4.0, 161);
        let hsq = 0.04;
        let s2 = 0.5;
        let smoother = Smoother::new(g.clone(), bw([hsq, 0.0, 0.0, hsq])).unwrap();
        let vals = g.tabulate(|x| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp());
        let f = DensityField::from_values(g.clone(), vals).unwrap();
        let nf = smoother.nonlinear_smooth(&f).unwrap();
        for (gi, v) in nf.iter().enumerate() {
            let x = g.node(gi);
            if x.iter().all(|c| c.abs() <= 1.5) {
                let expected = (-(x[0] * x[0] + x[1] * x[1] + 2.0 * hsq) / (2.0 * s2)).exp();
                assert!((v - expected).abs() <= 1e-6 * expected, "{v} vs {expected} at {x:?}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_field() {
        let g = grid(0.0, 1.0, 5);
        let s = Smoother::new(g.clone(), bw([0.01, 0.0, 0.0, 0.01])).unwrap();
        let mut vals = vec![1.0; g.len()];
        vals[3] = 0.0;
        let f = DensityField::from_values(g, vals).unwrap();
        assert!(matches!(s.nonlinear_smooth(&f), Err(Error::Contract(_))));
    }

    #[test]
    fn interior_scaling_of_nonlinear_smooth() {
        let g = grid(-4.0, 4.0, 41);
        let s = Smoother::new(g.clone(), bw([0.1, 0.03, 0.03, 0.1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(&g, &mut rng);
        let c = 3.5;
        let scaled = DensityField::from_values(g.clone(), f.values().iter().map(|v| c * v).collect()).unwrap();
        let nf = s.nonlinear_smooth(&f).unwrap();
        let ncf = s.nonlinear_smooth(&scaled).unwrap();
        let mass = s.mass();
        for gi in 0..g.len() {
            // exact identity N(cf) = c^{s(x)} N(f)
            let expect = c.powf(mass[gi]) * nf[gi];
            assert!((ncf[gi] - expect).abs() <= 1e-10 * expect);
            if mass[gi] > 1.0 - 1e-6 {
                assert!((ncf[gi] - c * nf[gi]).abs() <= 1e-3 * c * nf[gi]);
            }
        }
    }

    #[test]
    fn mixture_combine_cases() {
        let a = [1.0, 2.0, 3.0];
        let b = [3.0, 0.0, 1.0];
        assert_eq!(mixture_combine(&[1.0], &[&a]).unwrap(), a.to_vec());
        assert_eq!(mixture_combine(&[0.5, 0.5], &[&a, &a]).unwrap(), a.to_vec());
        let mix = mixture_combine(&[0.3, 0.7], &[&a, &b]).unwrap();
        for i in 0..3 {
            assert!(mix[i] >= a[i].min(b[i]) - 1e-15 && mix[i] <= a[i].max(b[i]) + 1e-15);
        }
        assert!(mixture_combine(&[0.3, 0.6], &[&a, &b]).is_err());
        assert!(mixture_combine(&[1.2, -0.2], &[&a, &b]).is_err());
    }
}
