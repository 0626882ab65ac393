use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lorac::autodiff::Fault;
use lorac::eval::{ProbeConfig, DEFAULT_V};
use lorac_cli::commands::{self, PretrainArgs, ProbeArgs, StatsArgs};
use lorac_cli::gradcheck::{format_table, run_suite, SuiteConfig};
use lorac_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "lorac", version, about = "Low-rank contrastive pre-training on synthetic multi-view data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a query/key encoder pair and write metrics and checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set prior.kind=none`. Repeatable.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (must be empty or absent). Default: next free
        /// `run-NNN` under $LORAC_OUT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of a run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen query-encoder features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 2.0)]
        lr: f64,
        /// Also write the JSON record to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nuclear norms of V fresh augmentations per instance.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_V)]
        views: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Nuclear-norm shapes, e.g. `4x8,8x32`.
        #[arg(long, value_delimiter = ',', default_value = "4x8,8x32", value_parser = parse_size)]
        sizes: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    NuclearSign,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s.split_once('x').ok_or_else(|| format!("expected MxN, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    let (m, n) = (parse(m)?, parse(n)?);
    if m == 0 || n == 0 {
        return Err(format!("`{s}`: dimensions must be positive"));
    }
    Ok((m, n))
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Pretrain { config, set, out, resume } => {
            let o = commands::pretrain(&PretrainArgs {
                config,
                overrides: set,
                out,
                resume,
            })?;
            match &o.last {
                Some(s) => println!(
                    "pretrain: {} steps, final epoch {} mean loss {:.6} mean nuclear norm {:.6}; outputs in {}",
                    o.steps,
                    s.epoch,
                    s.mean_loss,
                    s.mean_nuc_norm,
                    o.dir.display()
                ),
                None => println!("pretrain: nothing to run; outputs in {}", o.dir.display()),
            }
        }
        Command::Probe {
            checkpoint,
            dataset,
            train_fraction,
            iterations,
            lr,
            out,
        } => {
            let record = commands::probe(&ProbeArgs {
                checkpoint,
                dataset,
                probe: ProbeConfig {
                    iterations,
                    lr,
                    train_fraction,
                },
                out,
            })?;
            println!("{}", commands::probe_json(&record));
        }
        Command::Stats {
            checkpoint,
            dataset,
            views,
            seed,
            out,
        } => {
            let (dir, s) = commands::stats(&StatsArgs {
                checkpoint,
                dataset,
                views,
                seed,
                out,
            })?;
            println!(
                "stats: V = {}, n = {}, mean {:.6}, std {:.6}; outputs in {}",
                s.v,
                s.per_instance_norms.len(),
                s.mean,
                s.std,
                dir.display()
            );
        }
        Command::Gradcheck {
            seed,
            sizes,
            trials,
            inject_fault,
        } => {
            let checks = run_suite(&SuiteConfig {
                seed,
                sizes,
                trials,
                fault: inject_fault.map(|FaultArg::NuclearSign| Fault::NegateNuclearNormBackward),
            })?;
            print!("{}", format_table(&checks));
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { lorac_cli::EXIT_USAGE } else { lorac_cli::EXIT_OK });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
