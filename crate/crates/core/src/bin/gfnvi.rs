use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfnvi::dag::{DagSpec, PointedDag};
use gfnvi::export::{DistributionExport, GridInfo};
use gfnvi::trainer::{evaluate_checkpoint, train_run, write_run, Checkpoint, TrainConfig};
use gfnvi::verify::{run_suite, summarize, OracleModel, Suite};
use gfnvi::{Env, EnvSpec, Error, HypergridSpec};

#[derive(Parser)]
#[command(
    name = "gfnvi",
    version,
    about = "GFlowNet and hierarchical VI objectives on DAGs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes metrics.csv, summary.json, checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print exact metrics of a checkpoint as one JSON metrics row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        /// Skip the Jensen-Shannon divergence.
        #[arg(long)]
        no_jsd: bool,
    },
    /// Check the gradient identities on random enumerable instances.
    Verify {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Policy parametrization: tabular or mlp.
        #[arg(long, default_value = "tabular", value_parser = parse_model)]
        model: OracleModel,
    },
    /// Print a hypergrid summary as JSON.
    GridInfo {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Rewrite a DAG document in canonical graded form.
    ConvertDag {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the learned terminal distribution and the target as JSON.
    ExportDist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GridArgs {
    /// Grid side length.
    #[arg(long = "H")]
    h: usize,
    /// Grid dimension.
    #[arg(long = "D", default_value_t = 2)]
    d: usize,
    /// Background reward.
    #[arg(long = "R0", default_value_t = 0.1)]
    r0: f64,
}

/// The environment: a training config, a DAG document, or hypergrid flags.
#[derive(Args)]
struct EnvArgs {
    /// Take the environment from this training config.
    #[arg(long, conflicts_with_all = ["dag", "h"])]
    config: Option<PathBuf>,
    /// DAG document with rewards.
    #[arg(long, conflicts_with = "h")]
    dag: Option<PathBuf>,
    /// Hypergrid side length.
    #[arg(long = "H")]
    h: Option<usize>,
    /// Hypergrid dimension.
    #[arg(long = "D", default_value_t = 2)]
    d: usize,
    /// Hypergrid background reward.
    #[arg(long = "R0", default_value_t = 0.1)]
    r0: f64,
}

impl EnvArgs {
    fn build(&self) -> Result<Env, Error> {
        let spec = if let Some(path) = &self.config {
            TrainConfig::from_json(&read(path)?)?.env
        } else if let Some(path) = &self.dag {
            EnvSpec::DagFile(path.clone())
        } else if let Some(h) = self.h {
            EnvSpec::Hypergrid(HypergridSpec::new(h, self.d, self.r0)?)
        } else {
            return Err(Error::InvalidSpec("give --config, --dag, or --H".into()));
        };
        Env::from_spec(&spec)
    }
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> Result<OracleModel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read(path: &Path) -> Result<String, Error> {
    Ok(std::fs::read_to_string(path)?)
}

enum Failure {
    Invalid(String),
    Breach,
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(_) => Failure::Io(e.to_string()),
            Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => {
                Failure::Io(e.to_string())
            }
            Error::Json(j) if j.is_io() => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = TrainConfig::from_json(&read(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let output = train_run(cfg)?;
            write_run(&output, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&output.summary).map_err(Error::from)?
            );
        }
        Command::Eval {
            checkpoint,
            env,
            no_jsd,
        } => {
            let env = env.build()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let row = evaluate_checkpoint(&ckpt, &env, !no_jsd)?;
            println!("{}", serde_json::to_string(&row).map_err(Error::from)?);
        }
        Command::Verify {
            suite,
            seed,
            instances,
            model,
        } => {
            let checks = run_suite(suite, seed, instances, model)?;
            for c in &checks {
                println!(
                    "{} instance {:>3}  {:<60} {:.3e}  {}",
                    c.suite,
                    c.instance,
                    c.identity,
                    c.discrepancy,
                    if c.passed() { "ok" } else { "BREACH" }
                );
            }
            println!();
            let mut breach = false;
            for (name, worst, tol, ok) in summarize(&checks) {
                println!(
                    "max {name:<60} {worst:.3e}  (tol {tol:.0e})  {}",
                    if ok { "ok" } else { "BREACH" }
                );
                breach |= !ok;
            }
            if breach {
                return Err(Failure::Breach);
            }
        }
        Command::GridInfo { grid } => {
            let info = GridInfo::new(&HypergridSpec::new(grid.h, grid.d, grid.r0)?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&info).map_err(Error::from)?
            );
        }
        Command::ConvertDag { input, out } => {
            let spec: DagSpec = serde_json::from_str(&read(&input)?).map_err(Error::from)?;
            let dag = PointedDag::from_spec(&spec).map_err(Error::from)?;
            let mut graded = dag.to_graded().to_spec();
            graded.rewards = spec.rewards;
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&graded).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
        }
        Command::ExportDist {
            checkpoint,
            env,
            out,
        } => {
            let env = env.build()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let export = DistributionExport::from_policy(&ckpt.policy, &env)?;
            std::fs::write(&out, serde_json::to_string(&export).map_err(Error::from)?)
                .map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Breach) => {
            eprintln!("error: verification tolerance breached");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
