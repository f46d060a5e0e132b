//! `npmix` command-line tool: simulate data, fit mixtures, cluster, and run
//! replication studies.

mod config;
mod io;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use npmix::metrics::misclassification;
use npmix::{sample_mixture, MmEstimator};

/// Exit codes.
const EXIT_INPUT: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "npmix", version, about = "Nonparametric copula mixtures fitted by a monotone MM algorithm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the [simulate] section.
    Simulate { config: PathBuf, out: PathBuf },
    /// Fit a mixture to a CSV dataset.
    Fit {
        data: PathBuf,
        config: PathBuf,
        out_dir: PathBuf,
    },
    /// Same as `fit`, and reports cluster sizes (and errors when the data
    /// carry a label column).
    Cluster {
        data: PathBuf,
        config: PathBuf,
        out_dir: PathBuf,
    },
    /// Replicated simulate-and-fit runs from the [simulate] and [study]
    /// sections.
    Study { config: PathBuf, out_dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_INPUT);
    }
    let result = match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Fit { data, config, out_dir } => fit(&data, &config, &out_dir, false),
        Command::Cluster { data, config, out_dir } => fit(&data, &config, &out_dir, true),
        Command::Study { config, out_dir } => study(&config, &out_dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let core = e.chain().find_map(|c| c.downcast_ref::<npmix::Error>());
    match core {
        Some(npmix::Error::Input(_) | npmix::Error::Io(_)) | None => EXIT_INPUT,
        Some(_) => EXIT_NUMERIC,
    }
}

/// Caps the global worker pool at `NPMIX_THREADS`.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("NPMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("NPMIX_THREADS = {value:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn simulate(config_path: &Path, out: &Path) -> Result<u8> {
    let config = config::load(config_path)?;
    let specs = config.specs()?;
    let sim = config.simulate.as_ref().expect("checked by specs()");
    if sim.n == 0 {
        bail!(npmix::Error::Input("simulate.n must be positive: empty dataset requested".into()));
    }
    let (data, labels) = sample_mixture(&specs, sim.n, sim.seed)?;
    io::write_dataset(out, data.view(), &labels)?;
    println!("seed {}; {} observations written to {}", sim.seed, sim.n, out.display());
    for (j, s) in specs.iter().enumerate() {
        println!(
            "component {}: weight {}, {} x {}, {} copula rho {}",
            j + 1,
            s.weight,
            s.marginals[0],
            s.marginals[1],
            s.copula,
            s.rho
        );
    }
    Ok(0)
}

fn fit(data_path: &Path, config_path: &Path, out_dir: &Path, report_clusters: bool) -> Result<u8> {
    let config = config::load(config_path)?;
    let fit_config = config.fit_config()?;
    let dataset = io::read_dataset(data_path)?;
    let m = fit_config.components;
    let est = MmEstimator::from_config(dataset.data.view(), &fit_config)?;
    let mut init = est.initial_state(m, fit_config.init, fit_config.seed)?;
    if let Some(rho) = &config.copula.initial_rho {
        if let Some(family) = fit_config.copula {
            if let Some(r) = rho.iter().find(|r| !family.contains(**r)) {
                bail!(npmix::Error::Input(format!("copula.initial_rho value {r} outside the {family} range")));
            }
        }
        init.rho = rho.clone();
    }
    let outcome = est.fit(init, &fit_config)?;
    let labels = est.classify(&outcome.state)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut trace = io::create(&out_dir.join("fit_trace.csv"))?;
    outcome.trace.write_csv(&mut trace)?;
    trace.flush()?;
    for (j, f) in outcome.state.densities.iter().enumerate() {
        let mut w = io::create(&out_dir.join(format!("density_{}.csv", j + 1)))?;
        f.write_csv(&mut w)?;
        w.flush()?;
    }
    let mut summary = io::create(&out_dir.join("summary.csv"))?;
    writeln!(summary, "component,lambda,rho")?;
    for j in 0..m {
        writeln!(summary, "{},{},{}", j + 1, outcome.state.lambda[j], outcome.state.rho[j])?;
    }
    summary.flush()?;
    let mut lw = io::create(&out_dir.join("labels.csv"))?;
    writeln!(lw, "row,label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(lw, "{i},{l}")?;
    }
    lw.flush()?;

    let last = outcome.trace.records.last();
    println!(
        "{} iterations, objective {:.10}, {}",
        outcome.trace.records.len(),
        last.map_or(f64::NAN, |r| r.objective),
        if outcome.converged { "converged" } else { "stopped at max_iter" }
    );
    println!("H = {:?}", est.bandwidth().to_row_major());
    for j in 0..m {
        println!("component {}: lambda {:.6}, rho {:.6}", j + 1, outcome.state.lambda[j], outcome.state.rho[j]);
    }
    if report_clusters {
        let sizes: Vec<usize> = (0..m).map(|j| labels.iter().filter(|&&l| l == j).count()).collect();
        println!("cluster sizes {sizes:?}");
        if let Some(truth) = &dataset.labels {
            let classes = truth.iter().max().map_or(0, |l| l + 1).max(m);
            let (count, _) = misclassification(&labels, truth, classes)?;
            println!("misclassified {count} of {} (best label matching)", labels.len());
        }
    }
    Ok(if outcome.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn study(config_path: &Path, out_dir: &Path) -> Result<u8> {
    let config = config::load(config_path)?;
    let mut study = config.study_config()?;
    if let Ok(v) = std::env::var("NPMIX_THREADS") {
        let cap: usize = v.trim().parse().unwrap_or(usize::MAX);
        study.threads = Some(study.threads.map_or(cap, |t| t.min(cap)));
    }
    let report = npmix::simulate::run_study(&study)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let path = out_dir.join("study_report.csv");
    let mut out = io::create(&path)?;
    report.write_csv(&mut out)?;
    out.flush()?;
    for agg in &report.aggregates {
        let failed = report.rows.iter().filter(|r| r.n == agg.n && r.status != npmix::simulate::RunStatus::Converged).count();
        println!(
            "n = {}: {} converged, {failed} failed, squared bias {:.4e}, variance {:.4e}",
            agg.n, agg.used, agg.squared_bias, agg.variance
        );
    }
    println!("report written to {}", path.display());
    Ok(0)
}
