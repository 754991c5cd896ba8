//! Command-line runner for the vanishing-viscosity cost laboratory.
//!
//! Every command reads one configuration file (see [`config`]), runs a single
//! experiment and writes its artifacts, the echoed configuration and a
//! manifest into the output directory.

// `!(x > 0.0)` rejects NaN along with non-positive values on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod certificates;
pub mod config;
pub mod error;
pub mod experiments;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vanishcost_core::Execution;

use crate::artifacts::{manifest_text, ManifestInfo, OutDir};
use crate::config::{parse_config, ExperimentKind};
use crate::error::{CliError, CliResult};
use crate::experiments::{AgmonStage, RunContext};

#[derive(Debug, Parser)]
#[command(name = "vanishcost", version, about = "Controllability cost experiments for transport-diffusion equations")]
pub struct Cli {
    #[command(subcommand)]
    pub group: Group,
}

#[derive(Debug, Subcommand)]
pub enum Group {
    /// Characteristic flow checks.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Finite-volume solves.
    #[command(subcommand)]
    Pde(PdeCmd),
    /// Observability constants and controls.
    #[command(subcommand)]
    Cost(CostCmd),
    /// Weighted estimates evaluated on solutions.
    #[command(subcommand)]
    Analysis(AnalysisCmd),
    /// Small-viscosity trends of the cost.
    #[command(subcommand)]
    Trend(TrendCmd),
}

#[derive(Debug, Subcommand)]
pub enum FlowCmd {
    /// Lattice check of the flushing condition; writes flushing_report.txt.
    CheckFlushing(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum PdeCmd {
    /// Forward or adjoint solve of one datum.
    Solve(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum CostCmd {
    /// Observability constant K at one epsilon.
    Estimate(RunArgs),
    /// K over a list of epsilons with the ln K against 1/epsilon fit.
    Sweep(RunArgs),
    /// Minimal-norm control steering a datum to zero.
    Hum(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum AnalysisCmd {
    /// Weight construction and Hamilton-Jacobi residual only.
    Theta(RunArgs),
    /// Weighted energy inequality along a tube.
    Agmon(RunArgs),
    /// Norm decay outside the observation set.
    Dissipation(RunArgs),
    /// Carleman functional for one solution.
    Carleman(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrendCmd {
    /// Boundedness of K under the flushing condition.
    Theorem1(RunArgs),
    /// Exponential growth of K when a trajectory avoids the control region.
    Theorem2(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for the parallel loops.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed for the randomized estimators (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A resolved command: its display name, the kinds it accepts and its args.
pub struct Resolved<'a> {
    pub name: &'static str,
    pub kinds: &'static [ExperimentKind],
    pub stage: AgmonStage,
    pub args: &'a RunArgs,
}

impl Group {
    pub fn resolve(&self) -> Resolved<'_> {
        use ExperimentKind as K;
        let (name, kinds, stage, args): (&'static str, &'static [ExperimentKind], AgmonStage, &RunArgs) = match self {
            Group::Flow(FlowCmd::CheckFlushing(a)) => ("flow check-flushing", &[K::Flushing], AgmonStage::Full, a),
            Group::Pde(PdeCmd::Solve(a)) => ("pde solve", &[K::Solve], AgmonStage::Full, a),
            Group::Cost(CostCmd::Estimate(a)) => ("cost estimate", &[K::Cost], AgmonStage::Full, a),
            Group::Cost(CostCmd::Sweep(a)) => ("cost sweep", &[K::Sweep, K::BlowupFit], AgmonStage::Full, a),
            Group::Cost(CostCmd::Hum(a)) => ("cost hum", &[K::Hum], AgmonStage::Full, a),
            Group::Analysis(AnalysisCmd::Theta(a)) => ("analysis theta", &[K::Agmon], AgmonStage::Weight, a),
            Group::Analysis(AnalysisCmd::Agmon(a)) => ("analysis agmon", &[K::Agmon], AgmonStage::Full, a),
            Group::Analysis(AnalysisCmd::Dissipation(a)) => ("analysis dissipation", &[K::Dissipation], AgmonStage::Full, a),
            Group::Analysis(AnalysisCmd::Carleman(a)) => ("analysis carleman", &[K::Carleman], AgmonStage::Full, a),
            Group::Trend(TrendCmd::Theorem1(a)) => ("trend theorem1", &[K::Theorem1Trend], AgmonStage::Full, a),
            Group::Trend(TrendCmd::Theorem2(a)) => ("trend theorem2", &[K::Theorem2Trend], AgmonStage::Full, a),
        };
        Resolved { name, kinds, stage, args }
    }
}

/// What a successful run reports back.
#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub summary: Vec<String>,
}

fn read_config(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))
}

/// Runs one command end to end.
pub fn execute(group: &Group) -> CliResult<RunReport> {
    let started = Instant::now();
    let r = group.resolve();
    let text = read_config(&r.args.config)?;
    let mut cfg = parse_config(&text).map_err(CliError::Config)?;
    if !r.kinds.contains(&cfg.experiment) {
        let want: Vec<&str> = r.kinds.iter().map(|k| k.as_str()).collect();
        return Err(CliError::Invalid(format!(
            "`{}` runs experiment = {}, but the configuration has experiment = {}",
            r.name,
            want.join(" or "),
            cfg.experiment
        )));
    }
    if let Some(seed) = r.args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = r.args.workers {
        if n == 0 {
            return Err(CliError::Invalid("--workers must be at least 1".into()));
        }
        vanishcost_core::exec::configure_workers(n);
    }
    let out_path = r.args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("vanishcost-out"));
    let mut out = OutDir::create(&out_path)?;
    out.write_text("config_echo.txt", &cfg.echo())?;
    let ctx = RunContext { exec: Execution::default(), seed: cfg.seed, agmon_stage: r.stage };
    let outcome = experiments::run(&cfg, &mut out, &ctx)?;
    let manifest = manifest_text(
        &out,
        &ManifestInfo {
            command: r.name,
            config_text: &text,
            seed: cfg.seed,
            workers: r.args.workers,
            wall_seconds: started.elapsed().as_secs_f64(),
            row_flags: &outcome.row_flags,
        },
    );
    out.write_text("manifest.txt", &manifest)?;
    Ok(RunReport { out_dir: out.root().to_path_buf(), summary: outcome.summary })
}
