//! Bivariate copula families, marginal distribution tables extracted from
//! grid densities, and least-squares estimation of the copula parameter.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{DensityField, DENSITY_FLOOR};
use crate::special::{bivariate_normal_pdf, normal_pdf, normal_quantile};

/// Gaussian copula parameters stay this far from +-1.
pub const GAUSSIAN_RHO_MARGIN: f64 = 1e-3;

/// Points with a copula coordinate closer than this to 0 or 1 are excluded
/// from the parameter fit.
pub const EDGE_EXCLUSION: f64 = 1e-3;

/// Minimum number of usable points for a parameter fit.
pub const MIN_FIT_POINTS: usize = 5;

const TIE_SLOPE: f64 = 1e-12;
const COARSE_POINTS: usize = 101;
const GOLDEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CopulaFamily {
    /// Farlie–Gumbel–Morgenstern, `c(u, v) = 1 + rho (1 - 2u)(1 - 2v)`.
    Fgm,
    /// Bivariate Gaussian copula.
    Gaussian,
}

impl CopulaFamily {
    /// Closed parameter interval searched by [`fit_rho`].
    pub fn range(self) -> (f64, f64) {
        match self {
            CopulaFamily::Fgm => (-1.0, 1.0),
            CopulaFamily::Gaussian => (-1.0 + GAUSSIAN_RHO_MARGIN, 1.0 - GAUSSIAN_RHO_MARGIN),
        }
    }

    pub fn contains(self, rho: f64) -> bool {
        let (lo, hi) = self.range();
        rho >= lo && rho <= hi
    }

    pub fn density(self, u: f64, v: f64, rho: f64) -> Result<f64> {
        match self {
            CopulaFamily::Fgm => fgm_density(u, v, rho),
            CopulaFamily::Gaussian => gaussian_copula_density(u, v, rho),
        }
    }
}

impl fmt::Display for CopulaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CopulaFamily::Fgm => "fgm",
            CopulaFamily::Gaussian => "gaussian",
        })
    }
}

impl FromStr for CopulaFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgm" => Ok(CopulaFamily::Fgm),
            "gaussian" | "normal" => Ok(CopulaFamily::Gaussian),
            other => Err(Error::input(format!("unknown copula family '{other}' (expected fgm or gaussian)"))),
        }
    }
}

pub fn fgm_density(u: f64, v: f64, rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!("FGM parameter {rho} outside [-1, 1]")));
    }
    if !((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)) {
        return Err(Error::domain(format!("copula coordinates ({u}, {v}) outside the unit square")));
    }
    Ok(1.0 + rho * (1.0 - 2.0 * u) * (1.0 - 2.0 * v))
}

/// `phi_2(a, b; rho) / (phi(a) phi(b))` with `a = Phi^{-1}(u)`, `b = Phi^{-1}(v)`.
pub fn gaussian_copula_density(u: f64, v: f64, rho: f64) -> Result<f64> {
    if !CopulaFamily::Gaussian.contains(rho) {
        return Err(Error::domain(format!("Gaussian copula parameter {rho} outside (-1, 1) margin")));
    }
    if !(u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0) {
        return Err(Error::domain(format!("copula coordinates ({u}, {v}) outside the open unit square")));
    }
    let a = normal_quantile(u);
    let b = normal_quantile(v);
    Ok(bivariate_normal_pdf(a, b, rho) / (normal_pdf(a) * normal_pdf(b)))
}

/// Marginal density, distribution function and quantile of one coordinate
/// of a grid density, tabulated on that coordinate's axis.
#[derive(Debug, Clone)]
pub struct MarginalCdf {
    axis: Vec<f64>,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl MarginalCdf {
    /// Builds the table from marginal density values on `axis`: cumulative
    /// trapezoid plus a `1e-12` tie-breaking slope, rescaled to end at 1.
    pub fn from_density(axis: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if axis.len() < 2 || axis.len() != density.len() {
            return Err(Error::contract("marginal table needs at least two matching nodes"));
        }
        let (lo, hi) = (axis[0], axis[axis.len() - 1]);
        let mut cdf = Vec::with_capacity(axis.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 1..axis.len() {
            acc += 0.5 * (density[i] + density[i - 1]) * (axis[i] - axis[i - 1]);
            cdf.push(acc + TIE_SLOPE * (axis[i] - lo) / (hi - lo));
        }
        let total = *cdf.last().unwrap();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::contract("marginal density has no mass"));
        }
        for c in &mut cdf {
            *c /= total;
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { axis, density, cdf })
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn table(&self) -> &[f64] {
        &self.cdf
    }

    fn bracket(&self, x: f64) -> (usize, f64) {
        let n = self.axis.len();
        let x = x.clamp(self.axis[0], self.axis[n - 1]);
        let i = self.axis.partition_point(|&a| a <= x).clamp(1, n - 1) - 1;
        let t = (x - self.axis[i]) / (self.axis[i + 1] - self.axis[i]);
        (i, t.clamp(0.0, 1.0))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (i, t) = self.bracket(x);
        self.cdf[i] + t * (self.cdf[i + 1] - self.cdf[i])
    }

    pub fn density(&self, x: f64) -> f64 {
        let (i, t) = self.bracket(x);
        self.density[i] + t * (self.density[i + 1] - self.density[i])
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.cdf.len();
        let p = p.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c <= p).clamp(1, n - 1) - 1;
        let span = self.cdf[i + 1] - self.cdf[i];
        let t = if span > 0.0 { ((p - self.cdf[i]) / span).clamp(0.0, 1.0) } else { 0.0 };
        self.axis[i] + t * (self.axis[i + 1] - self.axis[i])
    }
}

/// Distribution table of coordinate `k` of `field`.
pub fn marginal_cdf(field: &DensityField, k: usize) -> Result<MarginalCdf> {
    let density = field.marginal(k)?;
    MarginalCdf::from_density(field.grid().axis(k).to_vec(), density)
}

/// Per-coordinate marginal tables of one component density.
#[derive(Debug, Clone)]
pub struct MarginalTransform {
    marginals: Vec<MarginalCdf>,
}

impl MarginalTransform {
    pub fn from_field(field: &DensityField) -> Result<Self> {
        let marginals = (0..field.grid().dims())
            .map(|k| marginal_cdf(field, k))
            .collect::<Result<_>>()?;
        Ok(Self { marginals })
    }

    pub fn marginal(&self, k: usize) -> &MarginalCdf {
        &self.marginals[k]
    }

    pub fn dims(&self) -> usize {
        self.marginals.len()
    }

    /// Probability-integral transform of a point.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.marginals).map(|(&v, m)| m.cdf(v)).collect()
    }
}

/// Copula coordinates and empirical copula density at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaObservation {
    pub u: [f64; 2],
    pub density: f64,
    /// Set when a marginal density is below `10 * DENSITY_FLOOR` or a copula
    /// coordinate is within `EDGE_EXCLUSION` of the unit-square boundary.
    pub flagged: bool,
}

/// Ratio `f_j(x) / prod_k f_jk(x_k)` at an observation, together with its
/// copula coordinates `u_k = F_jk(x_k)`. Bivariate only.
pub fn empirical_copula_density(
    field: &DensityField,
    transform: &MarginalTransform,
    x: &[f64],
) -> Result<CopulaObservation> {
    if x.len() != 2 || transform.dims() != 2 {
        return Err(Error::contract("empirical copula density is bivariate"));
    }
    let joint = field.interpolate(x)?.max(0.0);
    let mut flagged = false;
    let mut product = 1.0;
    let mut u = [0.0; 2];
    for k in 0..2 {
        let m = transform.marginal(k);
        let mut fk = m.density(x[k]);
        if fk < 10.0 * DENSITY_FLOOR {
            flagged = true;
            fk = fk.max(DENSITY_FLOOR);
        }
        product *= fk;
        u[k] = m.cdf(x[k]);
        if u[k] < EDGE_EXCLUSION || u[k] > 1.0 - EDGE_EXCLUSION {
            flagged = true;
        }
    }
    Ok(CopulaObservation {
        u,
        density: joint / product,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    /// No usable dependence signal; `rho` was set to 0.
    pub degenerate: bool,
    pub points_used: usize,
}

/// Least-squares fit of the copula parameter,
/// `argmin_rho sum_i w_i (c(u_i; rho) - c_hat_i)^2`, over unflagged points.
///
/// The search is a 101-point coarse scan of the parameter range followed by
/// golden-section refinement around the best scan point.
pub fn fit_rho(family: CopulaFamily, points: &[CopulaObservation], weights: Option<&[f64]>) -> Result<RhoEstimate> {
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::contract("one weight per copula observation required"));
        }
    }
    let used: Vec<(CopulaObservation, f64)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.flagged && p.density.is_finite())
        .map(|(i, p)| (*p, weights.map_or(1.0, |w| w[i])))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if used.len() < MIN_FIT_POINTS {
        return Err(Error::Estimation(format!(
            "only {} usable copula observations, need {MIN_FIT_POINTS}",
            used.len()
        )));
    }
    let total_w: f64 = used.iter().map(|(_, w)| w).sum();
    let info: f64 = used
        .iter()
        .map(|(p, w)| w * ((1.0 - 2.0 * p.u[0]) * (1.0 - 2.0 * p.u[1])).powi(2))
        .sum::<f64>()
        / total_w;
    if info < 1e-12 {
        return Ok(RhoEstimate {
            rho: 0.0,
            degenerate: true,
            points_used: used.len(),
        });
    }

    let loss = |rho: f64| -> f64 {
        used.iter()
            .map(|(p, w)| {
                let c = family.density(p.u[0], p.u[1], rho).unwrap_or(f64::INFINITY);
                w * (c - p.density).powi(2)
            })
            .sum::<f64>()
            / total_w
    };

    let (lo, hi) = family.range();
    let step = (hi - lo) / (COARSE_POINTS - 1) as f64;
    let grid_rho = |i: usize| if i == COARSE_POINTS - 1 { hi } else { lo + step * i as f64 };
    let (best, _) = (0..COARSE_POINTS)
        .map(|i| (i, loss(grid_rho(i))))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let a = grid_rho(best.saturating_sub(1));
    let b = grid_rho((best + 1).min(COARSE_POINTS - 1));
    let rho = golden_section(loss, a, b, GOLDEN_TOL);
    Ok(RhoEstimate {
        rho: rho.clamp(lo, hi),
        degenerate: false,
        points_used: used.len(),
    })
}

/// Closed-form FGM least squares: with `z_i = (1-2u_i)(1-2v_i)`, the loss is
/// quadratic in rho and minimized at `sum w z (c_hat - 1) / sum w z^2`,
/// clipped to `[-1, 1]`.
pub fn fgm_least_squares(points: &[CopulaObservation], weights: Option<&[f64]>) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, p) in points.iter().enumerate() {
        if p.flagged {
            continue;
        }
        let w = weights.map_or(1.0, |w| w[i]);
        let z = (1.0 - 2.0 * p.u[0]) * (1.0 - 2.0 * p.u[1]);
        num += w * z * (p.density - 1.0);
        den += w * z * z;
    }
    (den > 0.0).then(|| (num / den).clamp(-1.0, 1.0))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
