use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ldpi::app::{self, AppError, RunConfig, SinkKind};
use ldpi::detect::{OpPoint, ThresholdSet};
use ldpi::eval::{self, ProcfsProvider, ReplayProvider, ResourceProvider};
use ldpi::flow::Direction;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const LOG_ENV: &str = "LDPI_LOG_LEVEL";

/// Flow-level deep packet inspection: synthesize traffic, train the
/// anomaly model, replay captures through the detector, and report metrics.
///
/// Diagnostics go to stderr at the level named by LDPI_LOG_LEVEL
/// (error, warn, info or debug; default info).
#[derive(Debug, Parser)]
#[command(name = "ldpi", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the profile and the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; keys not present keep the profile defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for training and traffic generation.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Built-in defaults: desk (tiny model, short runs) or paper.
    #[arg(long, global = true, value_name = "NAME")]
    profile: Option<String>,
    /// Packets per flow sample.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Bytes kept per packet.
    #[arg(long, global = true)]
    l: Option<usize>,
    /// Detection threshold: ninety_nine, near_max, max or hundred_one.
    #[arg(long = "op-point", global = true, value_name = "NAME")]
    op_point: Option<OpPoint>,
    /// Block sink: dryrun records decisions, template renders a command.
    #[arg(long, global = true, value_name = "KIND")]
    sink: Option<SinkKind>,
    /// Block command with an {ip} placeholder (template sink).
    #[arg(long, global = true, value_name = "STR")]
    template: Option<String>,
    /// Sampled traffic direction relative to the local networks: in, out or both.
    #[arg(long, global = true, value_name = "DIR")]
    direction: Option<Direction>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write benign and flood captures with label sidecars.
    Synth,
    /// Pretrain, fine-tune and calibrate a model; optionally run k-fold.
    Train {
        /// Benign captures.
        #[arg(long, required = true, num_args = 1.., value_name = "PCAP")]
        benign: Vec<PathBuf>,
        /// Labeled anomalous captures for fine-tuning and validation.
        #[arg(long, num_args = 1.., value_name = "PCAP")]
        anomalies: Vec<PathBuf>,
        /// Also run the k-fold experiment (needs --anomalies).
        #[arg(long)]
        kfold: bool,
    },
    /// Replay a capture through the detector and write the decision log.
    Detect {
        /// Run directory or checkpoint file (thresholds.json alongside).
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Capture file, or - for a pcap stream on stdin.
        #[arg(long, value_name = "PATH")]
        pcap: PathBuf,
    },
    /// AUC and F1 tables from a k-fold run directory or score files.
    Eval {
        /// A run directory, or files of score,label lines.
        #[arg(required = true, value_name = "INPUT")]
        inputs: Vec<PathBuf>,
        /// Threshold set for F1 rows (thresholds.json from a run).
        #[arg(long, value_name = "PATH")]
        thresholds: Option<PathBuf>,
    },
    /// Sample CPU and memory of a process, or summarize a recorded trace.
    Resources {
        /// Process to sample (Linux).
        #[arg(long, conflicts_with = "replay")]
        pid: Option<u32>,
        /// Recorded samples, one "ts cpu mem" line each.
        #[arg(long, value_name = "PATH")]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0, value_name = "SECS")]
        interval: f64,
        #[arg(long, default_value_t = 1800.0, value_name = "SECS")]
        duration: f64,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

fn resolve(common: &Common) -> Result<RunConfig, AppError> {
    let profile = common.profile.as_deref();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p, profile)?,
        None => RunConfig::profile(profile.unwrap_or("desk"))?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(n) = common.n {
        cfg.sample.n = n;
    }
    if let Some(l) = common.l {
        cfg.sample.l = l;
    }
    if let Some(op) = common.op_point {
        cfg.thresholds.op_point = op;
    }
    if let Some(s) = common.sink {
        cfg.engine.sink = s;
    }
    if let Some(t) = &common.template {
        cfg.engine.template = t.clone();
    }
    if let Some(d) = common.direction {
        cfg.engine.direction = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn read_thresholds(path: &Path) -> Result<ThresholdSet, AppError> {
    if !path.is_file() {
        return Err(AppError::Missing {
            what: "thresholds file",
            path: path.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let out = app::cmd_synth(&cfg, &out_dir(&cli.common, "synth"))?;
            println!("{}", out.benign_pcap.display());
            for (_, pcap, _) in &out.floods {
                println!("{}", pcap.display());
            }
        }
        Command::Train {
            benign,
            anomalies,
            kfold,
        } => {
            cfg.kfold.enabled |= kfold;
            let out = app::cmd_train(&cfg, &benign, &anomalies, &out_dir(&cli.common, "run"))?;
            if !out.folds.is_empty() {
                print!("{}", ldpi::train::fold_summary(&out.folds).render_text());
            }
            println!(
                "checkpoint {} sha256 {}",
                out.checkpoint.display(),
                out.digest
            );
        }
        Command::Detect { model, pcap } => {
            let out = app::cmd_detect(&cfg, &model, &pcap, &out_dir(&cli.common, "detect"))?;
            for b in &out.blocks {
                println!(
                    "block {} score {:.6} at {}",
                    b.ip, b.score, b.first_trigger_ts
                );
            }
            println!(
                "{} samples scored, {} anomalous, {} blocks; log {}",
                out.stats.samples_scored,
                out.stats.anomalous,
                out.stats.blocks,
                out.decision_log.display()
            );
        }
        Command::Eval { inputs, thresholds } => {
            let th = thresholds.as_deref().map(read_thresholds).transpose()?;
            let report = app::cmd_eval(&inputs, th.as_ref(), cli.common.out.as_deref())?;
            print!("{}", report.render_text());
        }
        Command::Resources {
            pid,
            replay,
            interval,
            duration,
        } => {
            let secs = |v: f64, name: &str| {
                Duration::try_from_secs_f64(v).map_err(|_| {
                    AppError::Config(format!("--{name} must be a non-negative number of seconds"))
                })
            };
            let (interval, duration) = (secs(interval, "interval")?, secs(duration, "duration")?);
            let (pid, mut provider): (u32, Box<dyn ResourceProvider>) = match (pid, replay) {
                (_, Some(path)) => (0, Box::new(ReplayProvider::from_file(&path)?)),
                (Some(pid), None) => (pid, Box::new(ProcfsProvider::new()?)),
                (None, None) => {
                    return Err(AppError::Config("give --pid or --replay".into()));
                }
            };
            let stats = eval::sample_resources(pid, interval, duration, provider.as_mut())?;
            println!("samples {}", stats.samples.len());
            println!(
                "cpu % avg {:.6} max {:.6} std {:.6}",
                stats.cpu.avg, stats.cpu.max, stats.cpu.std
            );
            println!(
                "mem MB avg {:.6} max {:.6} std {:.6}",
                stats.mem.avg, stats.mem.max, stats.mem.std
            );
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var(LOG_ENV) {
        Ok(v) => match v.to_ascii_lowercase().as_str() {
            "error" => log::LevelFilter::Error,
            "warn" => log::LevelFilter::Warn,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            _ => {
                return Err(format!(
                    "{LOG_ENV}={v:?} (expected error, warn, info or debug)"
                ))
            }
        },
        Err(_) => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp_millis()
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
