//! The `qgs` command line: dataset generation, training, evaluation,
//! ablation, scaling sweeps and latency benchmarks driven by one TOML
//! config.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use qgs_core::checkpoint::{load_params, save_params};
use qgs_core::datagen::{generate_dataset, oracle_entropies, read_dataset, write_dataset, Session};
use qgs_core::trainer::{
    build_model, evaluate, run_scaling, split_dataset, EvalMetrics, Trainer, ABLATION_HEADER, METRICS_HEADER,
    SCALE_HEADER,
};
use qgs_core::{Error, RunConfig};

pub const DATASET_FILE: &str = "sessions.qgsd";
pub const CHECKPOINT_FILE: &str = "checkpoint.qgsc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_METRICS_FILE: &str = "ablation_metrics.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const STREAM_FILE: &str = "stream.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal or I/O error
  2  invalid command line
  3  invalid config (unknown key, bad value)
  4  missing input file
  5  malformed dataset
  6  malformed checkpoint
  7  training diverged (last good checkpoint is saved)

Errors are printed to stderr as one line:
  error kind=<kind> code=<n> msg=\"<message>\"

Log verbosity: QGS_LOG (error, warn, info, debug, trace); default info.";

fn long_help() -> String {
    format!(
        "{EXIT_CODES}\n\nConfig keys and defaults (every key optional; unknown keys are rejected):\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Debug, Parser)]
#[command(name = "qgs", version, about = "Query-conditioned generative search ranking", after_long_help = long_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads (overrides `train.threads`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic session dataset.
    Generate,
    /// Train `train.variant` on a generated dataset.
    Train {
        /// Dataset file; defaults to `<out>/sessions.qgsd`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.qgsc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every `ablate.variants` entry on the same data and seed.
    Ablate,
    /// Depth, width and history-length sweep.
    Scale,
    /// Encoder latency scaling and streaming step latency.
    Bench,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        write!(f, "error kind={} code={} msg=\"{msg}\"", self.kind, self.code)
    }
}

impl CliError {
    fn new(kind: &'static str, code: i32, msg: impl Into<String>) -> Self {
        CliError {
            kind,
            code,
            msg: msg.into(),
        }
    }

    fn missing(path: &Path) -> Self {
        Self::new("missing_file", 4, format!("{} not found", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Self::new("config", 3, msg),
            Error::Parse { .. } => Self::new("dataset", 5, msg),
            Error::Checkpoint(_) => Self::new("checkpoint", 6, msg),
            Error::Diverged { .. } => Self::new("diverged", 7, msg),
            Error::Io(ref io) if io.kind() == io::ErrorKind::NotFound => Self::new("missing_file", 4, msg),
            _ => Self::new("internal", 1, msg),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => CliError::missing(path),
                _ => e.into(),
            })?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.train.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_sessions(path: &Path) -> CliResult<Vec<Session>> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    Ok(read_dataset(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    variant: &'a str,
    checkpoint: String,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

/// Runs one subcommand. The resolved config is written to
/// `<out>/resolved_config` before any other work.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let out = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out)?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
    let data_path = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| out.join(DATASET_FILE));

    match &cli.command {
        Command::Generate => {
            let sessions = generate_dataset(&cfg.data)?;
            let path = out.join(DATASET_FILE);
            write_dataset(&path, &sessions)?;
            let o = oracle_entropies(&cfg.data);
            info!(
                "{} sessions -> {}; oracle H(item|query) {:.4}, H(item) {:.4}, MI {:.4}",
                sessions.len(),
                path.display(),
                o.h_item_given_query,
                o.h_item_marginal,
                o.mutual_info
            );
        }
        Command::Train { data } => {
            let sessions = read_sessions(&data_path(data))?;
            let (train, eval) = split_dataset(&sessions, cfg.train.eval_fraction);
            let mut trainer = Trainer::new(&cfg, cfg.train.variant, cfg.train.seed)?;
            let mut csv = format!("{METRICS_HEADER}\n");
            let result = trainer.fit(train, eval, |m| {
                csv.push_str(&m.csv_row(cfg.output.timing));
                csv.push('\n');
            });
            write_text(&out.join(METRICS_FILE), &csv)?;
            save_params(out.join(CHECKPOINT_FILE), &trainer.store)?;
            result?;
        }
        Command::Eval { data, checkpoint } => {
            let sessions = read_sessions(&data_path(data))?;
            let (_, eval) = split_dataset(&sessions, cfg.train.eval_fraction);
            let ck = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            if !ck.exists() {
                return Err(CliError::missing(&ck));
            }
            let (model, mut store) = build_model(&cfg, cfg.train.variant, cfg.train.seed)?;
            load_params(&ck, &mut store)?;
            let metrics = evaluate(&model, &store, &cfg.data, &cfg.train, eval)?;
            let report = EvalReport {
                variant: cfg.train.variant.name(),
                checkpoint: ck.display().to_string(),
                metrics,
            };
            let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::new("internal", 1, e.to_string()))?;
            println!("{json}");
            write_text(&out.join(EVAL_FILE), &(json + "\n"))?;
        }
        Command::Ablate => {
            let sessions = generate_dataset(&cfg.data)?;
            let mut epochs = format!("{METRICS_HEADER}\n");
            let rows = qgs_core::trainer::run_ablation(&cfg, &sessions, &cfg.ablate.variants, |m| {
                epochs.push_str(&m.csv_row(cfg.output.timing));
                epochs.push('\n');
            });
            write_text(&out.join(ABLATION_METRICS_FILE), &epochs)?;
            let mut csv = format!("{ABLATION_HEADER}\n");
            for r in rows? {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            write_text(&out.join(ABLATION_FILE), &csv)?;
        }
        Command::Scale => {
            let mut csv = format!("{SCALE_HEADER}\n");
            let rows = run_scaling(&cfg, |r| info!("{}", r.csv_row()))?;
            for r in rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            write_text(&out.join(SCALING_FILE), &csv)?;
        }
        Command::Bench => {
            let enc = qgs_bench::bench_encoder(&cfg.bench)?;
            for (k, s) in &enc.slopes {
                info!("{k:?}: log-log slope {s:.3}");
            }
            write_text(&out.join(BENCH_FILE), &qgs_bench::bench_csv(&enc, &cfg.bench))?;
            let stream = qgs_bench::bench_stream(&cfg.bench)?;
            info!(
                "stream: slope {:.3e} ms/step over positions, mean step {:.4} ms",
                stream.slope_ms, stream.mean_step_ms
            );
            write_text(&out.join(STREAM_FILE), &qgs_bench::stream_csv(&stream, &cfg.bench))?;
        }
    }
    Ok(())
}
