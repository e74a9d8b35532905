use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hic_harness::{events, runs, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "hic", version, about = "Hybrid in-memory computing PCM training simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network; writes metrics, summary, checkpoint and event log.
    Train,
    /// Accuracy per non-ideality combination.
    Ablation,
    /// Accuracy per width multiplier.
    SizeSweep,
    /// Accuracy versus time after training, with and without recalibration.
    DriftSweep {
        /// Evaluate this checkpoint instead of training new networks.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write-erase cycle report of a finished `train` run.
    Endurance {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Converts a binary event log to tab-separated text.
    ExportEvents {
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Write the configured train/test splits as CSV.
    Gen,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::ExportEvents { input, output } => {
            let log = events::read_file(&input)?;
            match output {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|e| HarnessError::io(&p, e))?;
                    let mut w = std::io::BufWriter::new(f);
                    events::export_text(&log, &mut w)
                        .and_then(|_| w.flush())
                        .map_err(|e| HarnessError::io(&p, e))?;
                }
                None => {
                    let mut w = std::io::stdout().lock();
                    events::export_text(&log, &mut w).map_err(|e| HarnessError::io("<stdout>", e))?;
                }
            }
            return Ok(());
        }
        Command::Endurance { run_dir } => {
            let out = cli.common.out.clone().unwrap_or_else(|| run_dir.clone());
            let r = runs::run_endurance(&run_dir, &out)?;
            log::info!(
                "max cycles: MSB {} LSB {}; {:.3e} of the endurance limit",
                r.msb.max_cycles,
                r.lsb.max_cycles,
                r.limit_fraction
            );
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(&cli.common)?;
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Train => {
            let s = runs::run_training(&cfg, &out)?;
            log::info!("final test accuracy {:.4}", s.final_test_accuracy);
        }
        Command::Ablation => {
            for row in runs::run_ablation(&cfg, &out)? {
                log::info!("{:<28} {:.4} ± {:.4}", row.label, row.mean_test_accuracy, row.std_test_accuracy);
            }
        }
        Command::SizeSweep => {
            for row in runs::run_size_sweep(&cfg, &out)? {
                log::info!("{:<20} {:.4} ± {:.4}", row.label, row.mean_test_accuracy, row.std_test_accuracy);
            }
        }
        Command::DriftSweep { checkpoint } => {
            for p in runs::run_drift_sweep(&cfg, checkpoint.as_deref(), &out)? {
                log::info!("t = {:>8.1e} s: {:.4} / {:.4} with recalibration", p.time_s, p.uncompensated, p.compensated);
            }
        }
        Command::Dataset { action: DatasetAction::Gen } => {
            let (train, test) = runs::generate_dataset(&cfg, &out)?;
            log::info!("wrote {} and {}", train.display(), test.display());
        }
        Command::Endurance { .. } | Command::ExportEvents { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.common.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
