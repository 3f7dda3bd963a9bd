use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hgdas::harness::{
    export_heatmap, heatmap_csv, load_config, load_traces, run_experiment, sample_config, write_outputs,
    ExperimentConfig,
};
use hgdas::hypergrad::{run_gradcheck, GradcheckConfig};
use hgdas::Error;

/// Overrides `output_dir` from the config file; `--output-dir` wins over both.
const OUTPUT_DIR_ENV: &str = "HGDAS_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "hgdas", version, about = "Online hypergradient-tuned ISTA/FISTA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report, traces, heatmaps and audit data
    Run {
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compare closed-form hypergradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Render a heatmap CSV from a stored traces_*.json file
    Heatmap {
        traces: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Print a sample config with every key
    Gen {
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Invalid(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, workers, output_dir } => {
            if !config.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", config.display())));
            }
            let mut cfg: ExperimentConfig = load_config(&config)?;
            if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
                cfg.output_dir = PathBuf::from(dir);
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let workers = workers.unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
            let output = run_experiment(&cfg, workers)?;
            write_outputs(&output, &cfg.output_dir)?;
            println!("config {}", output.report.payload.config_hash);
            for (s, t) in output.report.payload.solvers.iter().zip(&output.report.timing) {
                let mse = s.final_mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<14} final mse {mse:>12}  {:>9.3} ms/signal  failed {}",
                    s.solver.name(),
                    t.mean_ms_per_signal,
                    s.failed
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Gradcheck { seed, cases } => {
            if cases == 0 {
                return Err(Failure::Usage("--cases must be >= 1".into()));
            }
            let cfg = GradcheckConfig { seed, cases, ..GradcheckConfig::default() };
            let report = run_gradcheck(&cfg)?;
            for c in &report.checks {
                println!(
                    "{:<6} {:<8} max rel err {:.3e}  max abs err (small) {:.3e}  {}",
                    c.variant,
                    c.param,
                    c.max_rel_err,
                    c.max_abs_err_small,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("negation exact: {}", report.negation_exact);
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Invalid("hypergradient check failed".into()))
            }
        }
        Command::Heatmap { traces, output } => {
            if !traces.is_file() {
                return Err(Failure::Usage(format!("traces file {} not found", traces.display())));
            }
            let traces = load_traces(&traces)?;
            match output {
                Some(path) => export_heatmap(&traces, &path)?,
                None => {
                    // a closed pipe (e.g. `| head`) is not an error
                    let _ = std::io::stdout().write_all(heatmap_csv(&traces)?.as_bytes());
                }
            }
            Ok(())
        }
        Command::Gen { json } => {
            if json {
                let text = serde_json::to_string_pretty(&ExperimentConfig::default())
                    .map_err(|e| Failure::Invalid(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", sample_config());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
