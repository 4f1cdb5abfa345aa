//! `graphreport` command-line driver.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphreport::checkpoint::load_checkpoint;
use graphreport::corpus::{generate_synthetic, load_dataset, normalize_text, DataFormat, Dataset, Split, SyntheticConfig};
use graphreport::decoder::Strategy;
use graphreport::metrics::evaluate_all;
use graphreport::tracking::{track_dataset_jsonl, TrackerConfig};
use graphreport::trainkit::{ablate, candidates_jsonl, evaluate_with, to_json_bytes, train, write_run, Grid, TrainConfig};
use graphreport::Error;

#[derive(Parser)]
#[command(name = "graphreport", version, about = "Scene-graph report generation for surgical video frames")]
struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenData(GenData),
    /// Complete every frame's node set with class-level tracking.
    Track(Track),
    /// Train a model and write the checkpoint, run record and held-out candidates.
    Train(TrainArgs),
    /// Decode a split with a checkpoint and score it.
    Evaluate(Evaluate),
    /// Score candidate reports against references.
    Score(Score),
    /// Run an ablation grid over several seeds.
    Ablate(Ablate),
}

#[derive(Args)]
struct DataArgs {
    /// Input dataset.
    #[arg(long)]
    data: PathBuf,
    /// Dataset format: jsonl or miccai-annotations.
    #[arg(long, default_value = "jsonl")]
    format: String,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, Failure> {
        let format: DataFormat = flag(&self.format)?;
        Ok(load_dataset(&self.data, format)?)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 44)]
    videos: u32,
    #[arg(long, default_value_t = 50)]
    frames: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-frame probability that the kidney detection is dropped.
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Track {
    #[command(flatten)]
    data: DataArgs,
    /// Tracking length in frames, counting the current one.
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; defaults for every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Checkpoint directory or file.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// train, val or all.
    #[arg(long, default_value = "val")]
    split: String,
    /// Beam width; 1 means greedy decoding.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Evaluation report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Generated reports per frame (JSONL).
    #[arg(long)]
    candidates: Option<PathBuf>,
}

#[derive(Args)]
struct Score {
    /// Candidate JSONL with `video`, `frame` and `report` per line.
    #[arg(long)]
    cand: PathBuf,
    /// Reference JSONL with `video`, `frame` and `report` per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// table2 or table3.
    #[arg(long, default_value = "table2")]
    grid: String,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First seed; overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Process exit codes.
#[derive(Clone, Copy)]
enum Code {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

struct Failure {
    code: Code,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => Code::Usage,
            e if e.is_data_error() => Code::Data,
            _ => Code::Runtime,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses a flag value; an unrecognized value is a usage error.
fn flag<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T, Failure> {
    value.parse().map_err(|e: Error| usage(e.to_string()))
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: Code::Usage,
        message: message.into(),
    }
}

fn data_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: Code::Data,
        message: message.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::from(Error::Io {
            path: parent.to_path_buf(),
            source: e,
        }))?;
    }
    fs::write(path, bytes).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn echo_config(cfg: &TrainConfig) {
    log::info!("seed {}", cfg.seed);
    log::info!("config {}", serde_json::to_string(cfg).unwrap_or_default());
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = SyntheticConfig {
                num_videos: a.videos,
                frames_per_video: a.frames,
                seed: a.seed,
                node_dropout_rate: a.dropout,
            };
            log::info!("seed {}", a.seed);
            log::info!(
                "gen-data videos {} frames {} dropout {}",
                a.videos,
                a.frames,
                a.dropout
            );
            let ds = generate_synthetic(&cfg)?;
            write_file(&a.out, ds.to_jsonl().as_bytes())?;
            log::info!("wrote {} frames to {}", ds.num_frames(), a.out.display());
        }
        Command::Track(a) => {
            let ds = a.data.load()?;
            let cfg = TrackerConfig {
                window: a.window,
                ..TrackerConfig::default()
            };
            log::info!("track window {}", a.window);
            let text = track_dataset_jsonl(&ds, &cfg)?;
            write_file(&a.out, text.as_bytes())?;
        }
        Command::Train(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            echo_config(&cfg);
            let ds = a.data.load()?;
            let trained = train(&cfg, &ds, |_| {})?;
            let ev = if trained.record.val_frames > 0 {
                let ev = evaluate_with(&trained.checkpoint, &ds, Split::Val, Strategy::Greedy)?;
                log::info!("held-out bleu4 {:.4} exact {:.4}", ev.report.bleu4, ev.report.exact_match);
                Some(ev)
            } else {
                None
            };
            write_run(&a.out, &trained, ev.as_ref())?;
            log::info!("wrote run to {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let split: Split = flag(&a.split)?;
            if a.beam == 0 {
                return Err(usage("--beam must be at least 1"));
            }
            let ck = load_checkpoint(&a.ckpt)?;
            log::info!("seed {}", ck.seed);
            let ds = a.data.load()?;
            let strategy = if a.beam == 1 { Strategy::Greedy } else { Strategy::Beam(a.beam) };
            let ev = evaluate_with(&ck, &ds, split, strategy)?;
            write_file(&a.out, &to_json_bytes(&ev.report)?)?;
            if let Some(p) = &a.candidates {
                write_file(p, &candidates_jsonl(&ev.candidates)?)?;
            }
            log::info!("bleu4 {:.4} cider {:.4} exact {:.4}", ev.report.bleu4, ev.report.cider, ev.report.exact_match);
        }
        Command::Score(a) => {
            let cand = read_reports(&a.cand)?;
            let refs = read_reports(&a.reference)?;
            if refs.is_empty() {
                return Err(data_failure(format!("{}: no references", a.reference.display())));
            }
            let lookup: HashMap<(u32, u32), &str> = cand.iter().map(|(k, r)| (*k, r.as_str())).collect();
            let mut c_tokens = Vec::with_capacity(refs.len());
            let mut r_tokens = Vec::with_capacity(refs.len());
            for (key, r) in &refs {
                let c = lookup.get(key).ok_or_else(|| {
                    data_failure(format!(
                        "{}: no candidate for video {} frame {}",
                        a.cand.display(),
                        key.0,
                        key.1
                    ))
                })?;
                c_tokens.push(normalize_text(c));
                r_tokens.push(normalize_text(r));
            }
            let report = evaluate_all(&c_tokens, &r_tokens)?;
            write_file(&a.out, &to_json_bytes(&report)?)?;
            log::info!("scored {} samples, bleu1 {:.4}", report.samples, report.bleu1);
        }
        Command::Ablate(a) => {
            let grid: Grid = flag(&a.grid)?;
            if a.seeds == 0 {
                return Err(usage("--seeds must be at least 1"));
            }
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            echo_config(&cfg);
            let ds = a.data.load()?;
            let table = ablate(&cfg, &ds, grid, a.seeds, |row, seed, report| {
                log::info!("{} seed {seed}: bleu4 {:.4} cider {:.4}", row.name, report.bleu4, report.cider);
            })?;
            write_file(&a.out.join("ablation.json"), &to_json_bytes(&table)?)?;
            let text = table.to_text();
            write_file(&a.out.join("ablation.txt"), text.as_bytes())?;
            eprint!("{text}");
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ReportLine {
    video: u32,
    frame: u32,
    report: String,
}

/// `(video, frame) -> report` pairs in file order; other fields are ignored.
fn read_reports(path: &Path) -> Result<Vec<((u32, u32), String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportLine = serde_json::from_str(line)
            .map_err(|e| data_failure(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if seen.insert((rec.video, rec.frame), ()).is_some() {
            return Err(data_failure(format!(
                "{}:{}: duplicate video {} frame {}",
                path.display(),
                i + 1,
                rec.video,
                rec.frame
            )));
        }
        out.push(((rec.video, rec.frame), rec.report));
    }
    Ok(out)
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
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR {}: {first}", Code::Usage as u8);
            eprint!("{msg}");
            return ExitCode::from(Code::Usage as u8);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code as u8;
            eprintln!("ERROR {code}: {}", f.message.lines().next().unwrap_or(""));
            ExitCode::from(code)
        }
    }
}
