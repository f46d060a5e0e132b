//! TOML configuration shared by all commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use npmix::{
    copula::CopulaFamily, BandwidthMode, ComponentSpec, FitConfig, GridConfig, InitMode, Marginal, StudyConfig,
};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub bandwidth: BandwidthSection,
    #[serde(default)]
    pub copula: CopulaSection,
    #[serde(default)]
    pub init: InitSection,
    pub simulate: Option<SimulateSection>,
    pub study: Option<StudySection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            components: default_components(),
            max_iter: default_max_iter(),
            rel_tol: default_rel_tol(),
        }
    }
}

fn default_components() -> usize {
    3
}
fn default_max_iter() -> usize {
    200
}
fn default_rel_tol() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_points")]
    pub points_per_dim: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            points_per_dim: default_points(),
            margin: default_margin(),
        }
    }
}

fn default_points() -> usize {
    60
}
fn default_margin() -> f64 {
    0.15
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthKind {
    #[default]
    NormalReference,
    Fixed,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthSection {
    #[serde(default)]
    pub mode: BandwidthKind,
    /// Row-major entries when `mode = "fixed"`.
    pub matrix: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopulaSection {
    /// `fgm`, `gaussian` or `none`.
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default)]
    pub weighted: bool,
    pub initial_rho: Option<Vec<f64>>,
}

impl Default for CopulaSection {
    fn default() -> Self {
        Self {
            family: default_family(),
            weighted: false,
            initial_rho: None,
        }
    }
}

fn default_family() -> String {
    "fgm".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// `table1` selects the built-in three-cluster benchmark.
    pub preset: Option<String>,
    #[serde(default, rename = "component")]
    pub components: Vec<ComponentSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSection {
    /// `normal` or `laplace`.
    pub family: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub weight: f64,
    #[serde(default = "default_family")]
    pub copula: String,
    #[serde(default)]
    pub rho: f64,
    pub marginals: Vec<MarginalSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub n_values: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub threads: Option<usize>,
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn parse_family(name: &str) -> Result<Option<CopulaFamily>> {
    if name.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    Ok(Some(name.parse().with_context(|| format!("copula.family = {name:?}"))?))
}

impl Config {
    pub fn fit_config(&self) -> Result<FitConfig> {
        let bandwidth = match self.bandwidth.mode {
            BandwidthKind::NormalReference => BandwidthMode::NormalReference,
            BandwidthKind::Fixed => match &self.bandwidth.matrix {
                Some(m) => BandwidthMode::Fixed(m.clone()),
                None => bail!("bandwidth.matrix is required when bandwidth.mode = \"fixed\""),
            },
        };
        let init = match &self.init.mode {
            Some(m) => m.parse().with_context(|| format!("init.mode = {m:?}"))?,
            None => InitMode::KMeans,
        };
        let config = FitConfig {
            components: self.fit.components,
            max_iter: self.fit.max_iter,
            rel_tol: self.fit.rel_tol,
            grid: GridConfig {
                points_per_dim: self.grid.points_per_dim,
                margin: self.grid.margin,
            },
            bandwidth,
            copula: parse_family(&self.copula.family)?,
            copula_weighted: self.copula.weighted,
            init,
            seed: self.init.seed,
        };
        config.validate()?;
        if let Some(rho) = &self.copula.initial_rho {
            if rho.len() != config.components {
                bail!("copula.initial_rho has {} entries for {} components", rho.len(), config.components);
            }
        }
        Ok(config)
    }

    pub fn specs(&self) -> Result<Vec<ComponentSpec>> {
        let Some(sim) = &self.simulate else {
            bail!("missing [simulate] section");
        };
        match (&sim.preset, sim.components.is_empty()) {
            (Some(p), true) if p.eq_ignore_ascii_case("table1") => Ok(npmix::table1()),
            (Some(p), true) => bail!("simulate.preset = {p:?} is unknown (expected \"table1\")"),
            (Some(_), false) => bail!("give either simulate.preset or [[simulate.component]] entries, not both"),
            (None, true) => bail!("[simulate] needs a preset or at least one [[simulate.component]]"),
            (None, false) => sim
                .components
                .iter()
                .enumerate()
                .map(|(j, c)| component_spec(c).with_context(|| format!("simulate.component[{j}]")))
                .collect(),
        }
    }

    pub fn study_config(&self) -> Result<StudyConfig> {
        let Some(study) = &self.study else {
            bail!("missing [study] section");
        };
        let specs = self.specs()?;
        let mut fit = self.fit_config()?;
        fit.components = specs.len();
        Ok(StudyConfig {
            specs,
            n_values: study.n_values.clone(),
            replications: study.replications,
            base_seed: study.base_seed,
            fit,
            threads: study.threads,
        })
    }
}

fn component_spec(c: &ComponentSection) -> Result<ComponentSpec> {
    if c.marginals.len() != 2 {
        bail!("exactly two marginals required, got {}", c.marginals.len());
    }
    let marginal = |m: &MarginalSection| -> Result<Marginal> {
        match m.family.to_ascii_lowercase().as_str() {
            "normal" => Ok(Marginal::Normal { mean: m.mean, sd: m.sd }),
            "laplace" => Ok(Marginal::Laplace { mean: m.mean, sd: m.sd }),
            other => bail!("marginal family {other:?} is unknown (expected normal or laplace)"),
        }
    };
    let Some(copula) = parse_family(&c.copula)? else {
        bail!("a simulated component needs a copula family");
    };
    let spec = ComponentSpec {
        marginals: [marginal(&c.marginals[0])?, marginal(&c.marginals[1])?],
        copula,
        rho: c.rho,
        weight: c.weight,
    };
    spec.validate()?;
    Ok(spec)
}
