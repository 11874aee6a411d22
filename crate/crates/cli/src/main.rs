use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use fpi_core::checkpoint::{Checkpoint, CheckpointError};
use fpi_core::config::RunConfig;
use fpi_core::eval::{evaluate, heatmap_image, EvalError, Predictor};
use fpi_core::geodata::{generate, DataError, Dataset, RgbImage, SynthParams};
use fpi_core::metrics::{write_report, ReportConfig};
use fpi_core::retrieval::{compare, summarize, write_compare_csv, RetrievalError};
use fpi_core::train::{train, TrainError};

#[derive(Parser)]
#[command(name = "fpi", version, about = "Locate a drone image inside a satellite map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset split.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train", value_parser = ["train", "test"])]
        split: String,
        /// Stored side of test search maps.
        #[arg(long, default_value_t = 400)]
        test_side: usize,
    },
    /// Train from scratch and write a checkpoint after every epoch.
    Train {
        /// JSON run config (`{"preset": "desk"}` if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (its `train/` split is used if present) or split dir.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to the checkpoint path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score every pair of a dataset; writes records.csv and summary.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root (its `test/` split is used if present) or split dir.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Must describe the same model as the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Locate one query in one search image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        search: PathBuf,
        /// Write the heatmap, at the search image's size, to this PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time and score the model against 5x5 tile retrieval.
    CompareRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Error with the process exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = self;
        write!(f, "{e:#}")
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => Failure::Numeric(e.into()),
            TrainError::Config(_) => Failure::Usage(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Numeric(_) => Failure::Numeric(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Conflict(_) => Failure::Usage(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

trait DataContext<T> {
    fn data(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> DataContext<T> for Result<T, E> {
    fn data(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into().context(what())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return RunConfig::from_json("{}").map_err(|e| Failure::Usage(e.into()));
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Usage)?;
    RunConfig::from_json(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(Failure::Usage)
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn open_dataset(root: &Path, split: &str) -> Result<Dataset, Failure> {
    let dir = split_dir(root, split);
    Dataset::open(&dir).map_err(|e: DataError| Failure::Data(e.into()))
}

fn predictor(ckpt: &Path, config: Option<&Path>) -> Result<Predictor, Failure> {
    let ck = Checkpoint::load(ckpt)?;
    if config.is_some() {
        ck.check_compatible(&load_config(config)?)?;
    }
    Ok(Predictor::from_checkpoint(&ck)?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenSynth { out, pairs, seed, split, test_side } => {
            if pairs == 0 {
                return Err(Failure::Usage(anyhow!("--pairs must be at least 1")));
            }
            let params = SynthParams { test_stored_side: test_side, ..Default::default() };
            let n = generate(&out, &split, pairs, seed, &params).data(|| format!("writing {}", out.display()))?;
            log::info!("wrote {n} pair directories under {}", out.join(&split).display());
        }
        Command::Train { config, data, out, log, seed, steps } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.schedule.max_steps = Some(n);
            }
            cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
            let ds = open_dataset(&data, "train")?;
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            let outcome = train(&cfg, &ds, &out, Some(&log))?;
            if let Some(last) = outcome.log.last() {
                log::info!("done: {} steps, loss {:.5}, train-RDS {:.4}", last.step, last.loss, last.train_rds);
            }
        }
        Command::Eval { ckpt, data, report, config } => {
            let pred = predictor(&ckpt, config.as_deref())?;
            let ds = open_dataset(&data, "test")?;
            let cfg = ReportConfig::default();
            let records = evaluate(&pred, &ds, cfg.k)?;
            let rep = write_report(&report, &records, &cfg).data(|| format!("writing report {}", report.display()))?;
            println!("pairs {} rds_mean {:.4}", rep.overall.count, rep.overall.rds_mean);
            for (k, v) in &rep.overall.ma {
                println!("MA<{k}m {v:.4}");
            }
        }
        Command::Infer { ckpt, query, search, heatmap, config } => {
            let pred = predictor(&ckpt, config.as_deref())?;
            let q = RgbImage::load_png(&query).data(|| format!("reading {}", query.display()))?;
            let s = RgbImage::load_png(&search).data(|| format!("reading {}", search.display()))?;
            if pred.needs_resize(&q, &s) {
                let m = &pred.config.model;
                log::warn!(
                    "resizing inputs ({}x{}, {}x{}) to model sides ({}, {})",
                    q.width,
                    q.height,
                    s.width,
                    s.height,
                    m.query_side,
                    m.search_side
                );
            }
            let (heat, p) = pred.predict(&q, &s).map_err(|e| Failure::Data(e.into()))?;
            if !heat.grid.all_finite() {
                return Err(Failure::Numeric(anyhow!("non-finite heatmap")));
            }
            println!("{:.3} {:.3} {:.6}", p.pixel_xy.0, p.pixel_xy.1, p.score);
            if let Some(path) = heatmap {
                let img = heatmap_image(&heat, s.width, s.height).map_err(|e| Failure::Data(e.into()))?;
                img.save(&path).data(|| format!("writing {}", path.display()))?;
            }
        }
        Command::CompareRetrieval { ckpt, data, out, config } => {
            let pred = predictor(&ckpt, config.as_deref())?;
            let ds = open_dataset(&data, "test")?;
            let rows = compare(&pred, &ds, ReportConfig::default().k).map_err(|e: RetrievalError| Failure::Data(e.into()))?;
            write_compare_csv(&rows, &out).data(|| format!("writing {}", out.display()))?;
            let s = summarize(&rows);
            let summary_path = out.with_extension("summary.json");
            let text = serde_json::to_string_pretty(&s).expect("summary serializes");
            std::fs::write(&summary_path, text + "\n").data(|| format!("writing {}", summary_path.display()))?;
            println!(
                "pairs {} rds_fpi {:.4} rds_retrieval {:.4} time_fpi_ms {:.2} time_retrieval_ms {:.2} ratio {:.2}",
                s.pairs, s.rds_fpi_mean, s.rds_retrieval_mean, s.time_fpi_ms_mean, s.time_retrieval_ms_mean, s.time_ratio
            );
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("FPI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(anyhow!("FPI_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
