use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use flowrl_lab::commands::{
    checkpoint_dir, evaluate_checkpoint, parse_op, run_gradcheck, run_oracle, suite_from_config,
    OracleOptions,
};
use flowrl_lab::config::load_config;
use flowrl_lab::error::{LabResult, EXIT_FAILURE, EXIT_OK};
use flowrl_lab::run::{resolve_output_dir, run_experiment, RunOptions, OUTPUT_ROOT_ENV};
use flowrl_lab::sweep::{parse_axis, run_sweep, SweepOptions};
use flowrl_lab::LabError;

#[derive(Parser)]
#[command(name = "flowrl", version = env!("FLOWRL_BUILD_ID"), about = "Desk-scale RL fine-tuning of flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        config: PathBuf,
        /// Run directory; defaults to the config's `output_dir` under $FLOWRL_OUTPUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-epoch wall time in metrics.csv (breaks byte-identical reruns).
        #[arg(long)]
        wall_clock: bool,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Write the last epoch's rollouts and estimator workspaces.
        #[arg(long)]
        dump_workspace: bool,
        #[arg(long)]
        log_every: Option<usize>,
    },
    /// Train every cell of a Cartesian product of design-space axes.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2`; keys: objective, weighting, mc-scheme, ratio-mode, sampler-mode, formula.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare every gradient against central finite differences.
    Gradcheck {
        /// Model sizes, seed and objective strengths; built-in defaults otherwise.
        config: Option<PathBuf>,
        /// Scale this op's backward rule to prove the check catches it.
        #[arg(long)]
        corrupt_op: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the tilted optimum and the proximal iterates.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Proximal step size; defaults to `objective.eta`.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
    },
    /// Metrics of a saved checkpoint.
    Evaluate {
        config: PathBuf,
        /// Checkpoint directory or a run directory.
        checkpoint: PathBuf,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn print_json<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    // A closed stdout (e.g. piped into `head`) is not a failure of the command.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    flowrl_lab::artifacts::write_json(path, value)
}

fn execute(cli: Cli) -> LabResult<i32> {
    match cli.command {
        Command::Run {
            config,
            out,
            wall_clock,
            checkpoint_every,
            dump_workspace,
            log_every,
        } => {
            let cfg = load_config(&config)?;
            let dir = resolve_output_dir(&cfg, out.as_deref());
            let opts = RunOptions {
                wall_clock,
                checkpoint_every,
                dump_workspace,
                log_every,
            };
            let summary = run_experiment(&cfg, &dir, &opts)?;
            print_json(&serde_json::json!({
                "status": summary.status,
                "dir": dir,
                "final": summary.final_metrics,
            }));
            Ok(EXIT_OK)
        }
        Command::Sweep {
            config,
            axes,
            out,
            jobs,
        } => {
            let cfg = load_config(&config)?;
            let axes = axes
                .iter()
                .map(|a| parse_axis(a))
                .collect::<LabResult<Vec<_>>>()?;
            let root =
                out.unwrap_or_else(|| output_root().join(format!("sweep-seed-{}", cfg.seed)));
            let summary = run_sweep(&cfg, &axes, &root, &SweepOptions { jobs, log: true })?;
            print_json(&summary);
            Ok(if summary.failed == 0 {
                EXIT_OK
            } else {
                EXIT_FAILURE
            })
        }
        Command::Gradcheck {
            config,
            corrupt_op,
            out,
        } => {
            let spec = match config {
                Some(p) => suite_from_config(&load_config(&p)?),
                None => Default::default(),
            };
            let corrupt = corrupt_op.as_deref().map(parse_op).transpose()?;
            let report = run_gradcheck(&spec, corrupt)?;
            if let Some(p) = out {
                write_report(&p, &report)?;
            }
            print_json(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Oracle {
            config,
            out,
            eta,
            iterations,
        } => {
            let cfg = load_config(&config)?;
            let dir =
                out.unwrap_or_else(|| output_root().join(format!("oracle-seed-{}", cfg.seed)));
            let opts = OracleOptions {
                eta,
                iterations,
                ..OracleOptions::default()
            };
            print_json(&run_oracle(&cfg, &dir, &opts)?);
            Ok(EXIT_OK)
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = load_config(&config)?;
            print_json(&evaluate_checkpoint(&cfg, &checkpoint_dir(&checkpoint))?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            let e: LabError = e;
            print_json(&e.report());
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
