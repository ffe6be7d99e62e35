//! Scenario runner behind the `wavelab` binary.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

use clap::{Parser, Subcommand};
use config::{BroadwellParams, RunConfig, Scenario};
use error::CliError;
use std::ffi::OsString;
use std::path::PathBuf;

pub use run::{emit_plotdata, run, RunReport};

#[derive(Debug, Parser)]
#[command(name = "wavelab", about = "Peakon, transport-metric and Broadwell experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; scenario defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, or a .csv/.json file naming the main result.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Peakon {
        #[command(subcommand)]
        action: PeakonAction,
    },
    Metric {
        #[command(subcommand)]
        action: MetricAction,
    },
    Broadwell {
        #[command(subcommand)]
        action: BroadwellAction,
    },
    /// Multipeakon approximation of a profile.
    Approx,
}

#[derive(Debug, Subcommand)]
pub enum PeakonAction {
    Run,
    Collide,
}

#[derive(Debug, Subcommand)]
pub enum MetricAction {
    Distance {
        /// State JSON for u.
        #[arg(long)]
        u: Option<PathBuf>,
        /// State JSON for v.
        #[arg(long)]
        v: Option<PathBuf>,
        #[arg(long)]
        knots: Option<usize>,
    },
    Stability,
}

#[derive(Debug, Subcommand)]
pub enum BroadwellAction {
    Run,
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::Peakon { action: PeakonAction::Run } => "peakon run",
            Command::Peakon { action: PeakonAction::Collide } => "peakon collide",
            Command::Metric { action: MetricAction::Distance { .. } } => "metric distance",
            Command::Metric { action: MetricAction::Stability } => "metric stability",
            Command::Broadwell { .. } => "broadwell run",
            Command::Approx => "approx",
        }
    }

    fn default_scenario(&self) -> Scenario {
        match self {
            Command::Peakon { action: PeakonAction::Run } => Scenario::PeakonSimulate(Default::default()),
            Command::Peakon { action: PeakonAction::Collide } => Scenario::PeakonCollide(Default::default()),
            Command::Metric { action: MetricAction::Distance { .. } } => Scenario::MetricDistance(Default::default()),
            Command::Metric { action: MetricAction::Stability } => Scenario::MetricStability(Default::default()),
            Command::Broadwell { .. } => Scenario::BroadwellRun(BroadwellParams::default()),
            Command::Approx => Scenario::ApproximateData(Default::default()),
        }
    }

    fn accepts(&self, s: &Scenario) -> bool {
        matches!(
            (self, s),
            (Command::Peakon { action: PeakonAction::Run }, Scenario::PeakonSimulate(_))
                | (Command::Peakon { action: PeakonAction::Collide }, Scenario::PeakonCollide(_))
                | (Command::Metric { action: MetricAction::Distance { .. } }, Scenario::MetricDistance(_))
                | (Command::Metric { action: MetricAction::Stability }, Scenario::MetricStability(_))
                | (Command::Broadwell { .. }, Scenario::BroadwellRun(_) | Scenario::BroadwellRescaled(_))
                | (Command::Approx, Scenario::ApproximateData(_))
        )
    }
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Builds the run configuration from the parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&read(p)?)?,
        None => RunConfig::new(cli.command.default_scenario()),
    };
    if !cli.command.accepts(&cfg.scenario) {
        return Err(CliError::ScenarioMismatch {
            command: cli.command.label().into(),
            scenario: cfg.scenario.name().into(),
        });
    }
    if let (Command::Metric { action: MetricAction::Distance { u, v, knots } }, Scenario::MetricDistance(d)) =
        (&cli.command, &mut cfg.scenario)
    {
        if let Some(p) = u {
            d.u = wavelab::MultipeakonState::from_json(&read(p)?)?;
        }
        if let Some(p) = v {
            d.v = wavelab::MultipeakonState::from_json(&read(p)?)?;
        }
        if knots.is_some() {
            d.options.knots = *knots;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        let is_file = matches!(out.extension().and_then(|e| e.to_str()), Some("csv" | "json"));
        if is_file {
            cfg.output.dir = out.parent().map(PathBuf::from).unwrap_or_default();
            if cfg.output.dir.as_os_str().is_empty() {
                cfg.output.dir = PathBuf::from(".");
            }
            cfg.output.stem = out.file_stem().map(|s| s.to_string_lossy().into_owned());
        } else {
            cfg.output.dir = out.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the command line and returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = resolve(&cli).and_then(|cfg| run(&cfg));
    match outcome {
        Ok(rep) => {
            if !cli.quiet {
                println!("{}: {}", rep.scenario, rep.summary);
                for v in &rep.violations {
                    println!("violation: {v}");
                }
            }
            rep.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
