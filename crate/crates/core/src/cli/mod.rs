//! Command-line orchestration: configuration, seeding, subcommands and
//! machine-readable outputs.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::forecast::ForecastError;
use crate::grid::GridError;
use crate::hc::HcError;
use crate::pipeline::PipelineError;
use crate::ppf::PpfError;
use crate::prob::ProbError;

pub use commands::execute;
pub use config::{sub_seed, AssessKnobs, DemandSource, GridKnobs, HcKnobs, Paths, PipelineKnobs, PpfKnobs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Infeasible(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProbError> for CliError {
    fn from(e: ProbError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(_) | GridError::Parse(_) => CliError::Data(e.to_string()),
            GridError::Invalid(_)
            | GridError::NonRadial { .. }
            | GridError::Disconnected(_)
            | GridError::DuplicateBus(_)
            | GridError::Dimension(_) => CliError::Data(e.to_string()),
            GridError::Divergence { .. } | GridError::SingularJacobian { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Config(_) => CliError::Config(e.to_string()),
            ForecastError::Shape(_) | ForecastError::EmptySplit(_) | ForecastError::Checkpoint(_) => {
                CliError::Data(e.to_string())
            }
            ForecastError::Diverged { .. } | ForecastError::NonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            PipelineError::Forecast(f) => f.into(),
            PipelineError::Prob(p) => p.into(),
            PipelineError::UndefinedWape => CliError::Numerical(e.to_string()),
            PipelineError::Data(_) | PipelineError::Io(_) | PipelineError::Csv(_) | PipelineError::Json(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<PpfError> for CliError {
    fn from(e: PpfError) -> Self {
        match e {
            PpfError::Grid(g) => g.into(),
            PpfError::Prob(p) => p.into(),
            PpfError::Invalid(_) => CliError::Config(e.to_string()),
            PpfError::Divergence { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<HcError> for CliError {
    fn from(e: HcError) -> Self {
        match e {
            HcError::Grid(g) => g.into(),
            HcError::Prob(p) => p.into(),
            HcError::Invalid(_) => CliError::Config(e.to_string()),
            HcError::Infeasible(m) => CliError::Infeasible(m),
            HcError::Model(_) | HcError::Solver(_) | HcError::Numerical(_) => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "evhc", version, about = "EV charging hosting-capacity assessment")]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; component seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DemandArgs {
    /// Where station demand mixtures come from.
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    /// Test-split sample used by the forecast source.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Chance level for the voltage boundary.
    #[arg(long)]
    pub varsigma: Option<f64>,
    /// Monte Carlo reference samples for the PPF (0 skips it).
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Allowed probability of unmet demand at every station.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// PWL segments per station.
    #[arg(long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SourceArg {
    Scenario,
    Forecast,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, clean, aggregate, normalize and split the synthetic dataset.
    GenData {
        #[arg(long)]
        days: Option<usize>,
    },
    /// Train the forecaster and the historical-average baseline.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated variants to train as well (noWA, noTA, fc).
        #[arg(long, value_delimiter = ',')]
        ablation: Option<Vec<String>>,
    },
    /// Recompute test metrics from a checkpoint.
    Eval,
    /// Fit the interval-conditioned forecast error mixtures.
    FitErrors,
    /// Probabilistic forecast for one test sample.
    Forecast {
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Probabilistic power flow.
    Ppf(DemandArgs),
    /// Probabilistic power flow and low-voltage boundary.
    Risk(DemandArgs),
    /// PPF, risk boundary and real-time hosting capacity.
    Assess {
        #[command(flatten)]
        demand: DemandArgs,
        /// Also solve the long-term baseline and report the comparison.
        #[arg(long)]
        compare: bool,
    },
    /// Real-time versus long-term hosting capacity.
    Compare(DemandArgs),
}

impl DemandArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.source {
            cfg.assess.source = match s {
                SourceArg::Scenario => DemandSource::Scenario,
                SourceArg::Forecast => DemandSource::Forecast,
            };
        }
        if let Some(v) = self.sample {
            cfg.assess.sample = v;
        }
        if let Some(v) = self.varsigma {
            cfg.ppf.varsigma = v;
        }
        if let Some(v) = self.mc_samples {
            cfg.ppf.mc_samples = v;
        }
        if let Some(v) = self.epsilon {
            cfg.hc.epsilon = v;
        }
        if let Some(v) = self.segments {
            cfg.hc.segments = v;
        }
    }
}

/// Loads the config file, applies flag overrides and derives component seeds.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    match &cli.command {
        Command::GenData { days } => {
            if let Some(d) = days {
                cfg.synth.days = *d;
            }
        }
        Command::Train { epochs, ablation } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(a) = ablation {
                cfg.ablation = a.clone();
            }
        }
        Command::Forecast { sample } => {
            if let Some(s) = sample {
                cfg.assess.sample = *s;
            }
        }
        Command::Ppf(d) | Command::Risk(d) | Command::Compare(d) => d.apply(&mut cfg),
        Command::Assess { demand, compare } => {
            demand.apply(&mut cfg);
            cfg.assess.compare |= *compare;
        }
        Command::Eval | Command::FitErrors => {}
    }
    cfg.synth.seed = sub_seed(cfg.seed, "data");
    cfg.train.seed = sub_seed(cfg.seed, "train");
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
