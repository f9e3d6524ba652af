use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use stagealloc::experiment::MethodTag;
use stagealloc_cli::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use stagealloc_cli::error::{CliError, CliResult};
use stagealloc_cli::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "stagealloc", version, about = "Multi-stage computation allocation pipeline")]
struct Cli {
    /// Experiment config (TOML). Defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing artifacts instead of refusing or resuming.
    #[arg(long, global = true)]
    force: bool,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the logged request dataset.
    GenData,
    /// Run load tests, fit the cost model and the action-result predictor.
    BenchCost,
    /// Train the configured methods, resuming from checkpoints.
    Train {
        #[arg(long)]
        method: Vec<String>,
        #[arg(long)]
        seed: Vec<u64>,
        /// Include the discount and head-count sensitivity runs.
        #[arg(long)]
        sensitivity: bool,
        /// Stop each run after this many further iterations.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Evaluate trained checkpoints on the test split.
    Evaluate {
        #[arg(long)]
        sensitivity: bool,
    },
    /// Produce a budgeted allocation plan from one trained run.
    Allocate {
        #[arg(long, default_value = "awrq_mixer")]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed-loop controllers and the hyperparameter sweep.
    Control,
    /// Render tables from recorded results.
    Report,
}

fn parse_method(s: &str) -> CliResult<MethodTag> {
    s.parse().map_err(|_| {
        let known: Vec<&str> = MethodTag::all().into_iter().map(|m| m.tag()).collect();
        CliError::Usage(format!("unknown method {s:?}; expected one of {}", known.join(", ")))
    })
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::desk();
            if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
                cfg.output_dir = dir.into();
            }
            cfg
        }
    };
    cfg.validate()?;
    let p = Pipeline::new(cfg, cli.force, cli.verbose);
    let out = p.out.display().to_string();
    Ok(match cli.command {
        Command::GenData => {
            let hash = p.gen_data()?;
            json!({ "dataset": p.dataset_path(), "sha256": hash })
        }
        Command::BenchCost => {
            p.bench_cost()?;
            json!({ "cost_model": p.cost_model_path(), "predictor": p.predictor_path() })
        }
        Command::Train { method, seed, sensitivity, stop_after } => {
            let methods = method.iter().map(|m| parse_method(m)).collect::<CliResult<Vec<_>>>()?;
            p.train(&methods, &seed, sensitivity, stop_after)?;
            json!({ "train": p.out.join("train") })
        }
        Command::Evaluate { sensitivity } => {
            let report = p.evaluate(sensitivity)?;
            json!({ "results": p.evaluation_path(), "runs": report.runs.len() })
        }
        Command::Allocate { method, seed } => {
            let method = parse_method(&method)?;
            let seed = seed.unwrap_or(p.cfg.seeds[0]);
            serde_json::to_value(p.allocate(method, seed)?).expect("summary serializes")
        }
        Command::Control => {
            let report = p.control()?;
            json!({ "summary": p.control_path(), "runs": report.runs.len() })
        }
        Command::Report => json!({ "report": p.report()?, "output_dir": out }),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
