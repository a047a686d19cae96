use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use certigrad_cli::experiment::{self, ExperimentName, RunOptions, CSV_HELP};
use certigrad_cli::output::write_json;
use certigrad_cli::solve::{self, GradMode, SolveConfig, EXIT_FAILURE, EXIT_PARSE};
use clap::{Parser, Subcommand};

const SOLVE_HELP: &str = "\
Exit status:
  0  every instance is TightCertified
  1  a problem file or flag could not be parsed
  2  some instance is NotTight or TightUncertified
  3  the SDP solver or the gradient computation failed

Set CERTIGRAD_LOG=error|warn|info|debug for diagnostics on stderr.";

#[derive(Parser)]
#[command(name = "certigrad", version, about = "Certified solutions and gradients for parameterized QCQPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Shor relaxation of each problem file, certify the result and
    /// optionally backpropagate a loss gradient.
    #[command(after_help = SOLVE_HELP)]
    Solve {
        /// Problem files (JSON).
        #[arg(required = true)]
        problems: Vec<String>,
        /// Interior-point stopping tolerance.
        #[arg(long, default_value_t = SolveConfig::default().tol)]
        tol: f64,
        /// Interior-point iteration limit.
        #[arg(long, default_value_t = SolveConfig::default().max_iter)]
        max_iter: usize,
        /// Smallest eigenvalue ratio λ₁/λ₂ accepted as rank one.
        #[arg(long, default_value_t = SolveConfig::default().ratio_threshold)]
        ratio_threshold: f64,
        /// Backpropagation method.
        #[arg(long, value_enum, default_value_t = GradMode::None)]
        grad: GradMode,
        /// Loss gradient dℓ/dx: comma-separated values, or @file holding a
        /// list or a JSON array. Required with --grad is|cift.
        #[arg(long)]
        loss_grad: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment and write CSV tables plus report.json.
    #[command(after_help = CSV_HELP)]
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        /// JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Worker threads for trial-level parallelism (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CERTIGRAD_LOG", "warn"))
        .format_timestamp(None)
        .init();
}

fn cmd_solve(
    problems: Vec<String>,
    mut cfg: SolveConfig,
    loss_grad: Option<String>,
    out: Option<PathBuf>,
) -> Result<i32, String> {
    if let Some(spec) = loss_grad {
        cfg.loss_grad = Some(solve::parse_loss_grad(&spec)?);
    }
    if cfg.grad != GradMode::None && cfg.loss_grad.is_none() {
        return Err("--grad requires --loss-grad".into());
    }
    let report = solve::run(&problems, &cfg)?;
    for inst in &report.instances {
        log::info!("{}: {} ratio={:?}", inst.path, inst.verdict, inst.tightness_ratio);
    }
    match out {
        Some(path) => write_json(&path, &report).map_err(|e| format!("{}: {e}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &report).map_err(|e| e.to_string())?;
            writeln!(stdout).map_err(|e| e.to_string())?;
        }
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve { problems, tol, max_iter, ratio_threshold, grad, loss_grad, out } => {
            let cfg = SolveConfig { tol, max_iter, ratio_threshold, grad, loss_grad: None };
            cmd_solve(problems, cfg, loss_grad, out).unwrap_or_else(|e| {
                eprintln!("error: {e}");
                EXIT_PARSE
            })
        }
        Command::Experiment { name, config, seed, out_dir, jobs } => {
            match experiment::run(name, &RunOptions { config, seed, out_dir, jobs }) {
                Ok(outcome) => {
                    println!("{}: {}", name.as_str(), outcome.headline);
                    for f in &outcome.files {
                        println!("  wrote {}", f.display());
                    }
                    if outcome.all_failed() {
                        eprintln!("error: all {} trials failed", outcome.trials);
                        EXIT_FAILURE
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_PARSE
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
