use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nrml::harness::{self, Assignments, EvalRequest, RunConfig};
use nrml::tensor::gradcheck::CheckConfig;
use nrml::Error;

/// Meta-learning with per-task filter routing.
#[derive(Parser)]
#[command(name = "nrml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Meta-test a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        /// Evaluate the 8 (N, K_tr, K_val) configurations.
        #[arg(long)]
        sweep: bool,
        /// Configuration to use instead of the run's `config.resolved`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Directory for `eval.csv`; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and meta-gradient mode.
    Gradcheck,
    /// Filter reuse report of a routing run.
    Stats {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { config, seed, out, set } => {
            let mut a = Assignments::read(&config)?;
            for s in &set {
                a.set_pair(s)?;
            }
            if let Some(seed) = seed {
                a.set("seed", &seed.to_string())?;
            }
            if let Some(out) = out {
                a.set("out", &out.display().to_string())?;
            }
            let cfg = RunConfig::from_assignments(&a)?;
            let summary = harness::cmd_train(&cfg)?;
            println!(
                "wrote {} episode records to {}; final checkpoint {}",
                summary.records,
                summary.out.display(),
                summary.final_checkpoint.display()
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            episodes,
            sweep,
            config,
            set,
            out,
        } => {
            let req = EvalRequest {
                checkpoint,
                episodes,
                sweep,
                config,
                overrides: set,
                out,
            };
            let rows = harness::cmd_eval(&req)?;
            print!("{}", harness::eval_table(&rows));
            Ok(true)
        }
        Command::Gradcheck => {
            let report = harness::cmd_gradcheck(&CheckConfig::default())?;
            for line in report.lines() {
                println!("{line}");
            }
            Ok(report.passed())
        }
        Command::Stats { run } => {
            let stats = harness::cmd_stats(&run)?;
            println!("layer channels selection_fraction mean_jaccard ever_selected");
            for s in &stats {
                println!(
                    "{:>5} {:>8} {:>18.4} {:>12.4} {:>13.4}",
                    s.layer + 1,
                    s.channels,
                    s.selection_fraction,
                    s.mean_jaccard,
                    s.final_ever_selected()
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
