//! The `melseg` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 verification failure (`gradcheck`, `crf-oracle`), 4 training aborted on
//! a non-finite value.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::augment::{augment, AugmentPlan};
use crate::checkpoint;
use crate::crf::run_oracle;
use crate::datasynth::{generate, stats, stats_csv, SynthConfig};
use crate::evaluator::{evaluate, predict_boundaries, report_csv, ReportRow};
use crate::gradcheck::run_suite;
use crate::labeling::LabelScheme;
use crate::losses::{LossConfig, LossKind};
use crate::models::{DecodeParams, ModelKind};
use crate::score::{parse_corpus, song_record, PhraseSpan, Song, MIN_PHRASE_LEN};
use crate::trainer::{train, EpochLog, RunConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_NAN: i32 = 4;

/// Tolerances `crf-oracle` and `gradcheck` are judged against.
pub const ORACLE_LOG_Z_TOL: f64 = 1e-8;
pub const ORACLE_VITERBI_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verify(String),
    #[error("{0}")]
    NonFinite(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::NonFinite(_) => EXIT_NAN,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "melseg", version, about = "Melodic phrase boundary detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// Number of songs.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that a phrase end is followed by a rest.
        #[arg(long)]
        rest_cue: Option<f64>,
        /// JSON file with generator settings (partial objects allowed).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Song/phrase length histograms and label statistics as CSV.
    Stats {
        /// Input corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Output CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-note training targets.
    Labels {
        /// Input corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// binary, expdecay or ascend.
        #[arg(long)]
        scheme: LabelScheme,
        /// Largest position label for the ascend scheme.
        #[arg(long)]
        max: Option<usize>,
        /// Output file, one JSON object per song.
        #[arg(long)]
        out: PathBuf,
    },
    /// Transpose songs in pitch, duration and rest.
    Augment {
        /// Input corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated semitone shifts in 0..=12.
        #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9,10,11,12")]
        pitch: String,
        /// Comma-separated duration shifts in beats.
        #[arg(long, default_value = "0,0.5")]
        duration: String,
        /// Comma-separated rest shifts in beats.
        #[arg(long, default_value = "0,0.5")]
        rest: String,
        /// Output corpus.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training.
    Train {
        /// Named preset used as the base configuration.
        #[arg(long)]
        preset: Option<String>,
        /// Model kind: cnn, unet, bilstm-cnn, cnn-crf or bilstm-crf.
        #[arg(long)]
        model: Option<ModelKind>,
        /// Label scheme: binary, expdecay or ascend.
        #[arg(long)]
        label: Option<LabelScheme>,
        /// Loss: weighted-bce, penalized-mse, plain-mse or crf-nll.
        #[arg(long)]
        loss: Option<LossKind>,
        /// JSON config layered over the base (partial objects allowed).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field by dotted path, e.g. `sgd.lr=0.05`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Training corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for checkpoints, logs and the report.
        #[arg(long)]
        out_dir: PathBuf,
        /// Run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of folds.
        #[arg(long)]
        folds: Option<usize>,
        /// Number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Augment the training songs of each fold.
        #[arg(long)]
        augment: Option<Switch>,
        /// Worker threads; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score checkpoints against an annotated corpus.
    Eval {
        /// Checkpoint file; repeat to aggregate several (one per fold).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Annotated corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Matching tolerance in notes.
        #[arg(long, default_value_t = 0)]
        tolerance: usize,
        /// Write the mean/std report here (needs two or more checkpoints).
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Predict boundaries and write them in corpus format.
    Segment {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to segment (its annotation is ignored).
        #[arg(long)]
        corpus: PathBuf,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every gradient.
    Gradcheck {
        /// Only run cases whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Compare the CRF against brute-force enumeration.
    CrfOracle {
        /// Number of random instances.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Longest sequence.
        #[arg(long, default_value_t = 8)]
        max_t: usize,
        /// Largest label count.
        #[arg(long, default_value_t = 6)]
        max_k: usize,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code()
        }
    }
}

fn print_config(err: &mut dyn Write, v: &Value) {
    let _ = writeln!(err, "config: {v}");
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(path, text).map_err(io_at(path))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Vec<Song>, CliError> {
    parse_corpus(path).map_err(data)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Synth {
            n,
            seed,
            rest_cue,
            config,
            out: path,
        } => {
            let mut c = SynthConfig::default();
            if let Some(file) = config {
                let mut base = serde_json::to_value(&c).expect("serializes");
                let patch = read_json(&file)?;
                let (Value::Object(b), Value::Object(p)) = (&mut base, patch) else {
                    return Err(CliError::Data("synth config must be a JSON object".into()));
                };
                for (k, v) in p {
                    if !b.contains_key(&k) {
                        return Err(CliError::Data(format!("unknown synth config key `{k}`")));
                    }
                    b.insert(k, v);
                }
                c = serde_json::from_value(base).map_err(data)?;
            }
            c.songs = n;
            c.seed = seed;
            if let Some(r) = rest_cue {
                c.rest_cue = r;
            }
            print_config(err, &serde_json::to_value(&c).expect("serializes"));
            let songs = generate(&c).map_err(|e| CliError::Usage(e.to_string()))?;
            crate::score::write_corpus(&songs, &path).map_err(data)?;
            let _ = writeln!(out, "wrote {} songs to {}", songs.len(), path.display());
            Ok(())
        }
        Command::Stats { corpus, out: path } => {
            print_config(err, &json!({ "corpus": corpus }));
            let songs = load_corpus(&corpus)?;
            if songs.is_empty() {
                return Err(CliError::Data("corpus is empty".into()));
            }
            let csv = stats_csv(&stats(&songs));
            match path {
                Some(p) => write_file(&p, &csv),
                None => out.write_all(csv.as_bytes()).map_err(data),
            }
        }
        Command::Labels {
            corpus,
            scheme,
            max,
            out: path,
        } => {
            let scheme = match (scheme, max) {
                (LabelScheme::Ascend { .. }, Some(m)) => LabelScheme::Ascend { max: m },
                (s, None) => s,
                (_, Some(_)) => return Err(CliError::Usage("--max only applies to the ascend scheme".into())),
            };
            print_config(err, &json!({ "corpus": corpus, "scheme": scheme }));
            let songs = load_corpus(&corpus)?;
            let mut text = String::new();
            for s in &songs {
                let labels = scheme.encode(s).map_err(data)?;
                let values: Value = match scheme {
                    LabelScheme::ExpDecay => json!(labels.values),
                    _ => json!(labels.classes()),
                };
                let line = json!({ "id": s.id, "scheme": scheme.name(), "labels": values });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            write_file(&path, &text)
        }
        Command::Augment {
            corpus,
            pitch,
            duration,
            rest,
            out: path,
        } => {
            let plan = AugmentPlan::parse(&pitch, &duration, &rest).map_err(|e| CliError::Usage(e.to_string()))?;
            print_config(err, &json!({ "corpus": corpus, "plan": plan }));
            let songs = load_corpus(&corpus)?;
            let aug = augment(&songs, &plan);
            crate::score::write_corpus(&aug.songs, &path).map_err(data)?;
            let _ = writeln!(
                out,
                "wrote {} songs ({} x {}, {} pitch variants skipped)",
                aug.songs.len(),
                songs.len(),
                plan.factor(),
                aug.skipped
            );
            Ok(())
        }
        Command::Train {
            preset,
            model,
            label,
            loss,
            config,
            sets,
            corpus,
            out_dir,
            seed,
            folds,
            epochs,
            augment,
            workers,
        } => {
            let mut c = match (&preset, model) {
                (Some(p), _) => RunConfig::preset(p).map_err(|e| CliError::Usage(e.to_string()))?,
                (None, Some(kind)) => {
                    let scheme = label.unwrap_or(match kind {
                        k if k.is_crf() => LabelScheme::ascend(),
                        _ => LabelScheme::Binary,
                    });
                    RunConfig::standard(kind, scheme).map_err(|e| CliError::Usage(e.to_string()))?
                }
                (None, None) => return Err(CliError::Usage("train needs --preset or --model".into())),
            };
            let usage = |e: crate::trainer::ConfigError| CliError::Usage(e.to_string());
            if preset.is_some() {
                if let Some(kind) = model {
                    c = c.with_overrides(&[format!("model.kind=\"{}\"", kind.name())]).map_err(usage)?;
                }
                if let Some(s) = label {
                    let patch = json!({ "model": { "scheme": serde_json::to_value(s).expect("serializes") } });
                    c = c.merged(&patch).map_err(usage)?;
                }
            }
            if let Some(file) = config {
                c = c.merged(&read_json(&file)?).map_err(usage)?;
            }
            c = c.with_overrides(&sets).map_err(usage)?;
            if let Some(k) = loss {
                c.loss = LossConfig::new(k);
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(f) = folds {
                c.folds = f;
            }
            if let Some(e) = epochs {
                c.epochs = e;
            }
            if let Some(a) = augment {
                c.augment = a == Switch::On;
            }
            c.validate().map_err(usage)?;
            let resolved = serde_json::to_value(&c).expect("serializes");
            print_config(err, &json!({ "run": resolved, "corpus": corpus, "out_dir": out_dir, "workers": workers }));
            let songs = load_corpus(&corpus)?;
            fs::create_dir_all(&out_dir).map_err(io_at(&out_dir))?;
            write_file(&out_dir.join("config.json"), &c.to_json_pretty())?;
            let log_path = out_dir.join("train_log.csv");
            let mut log = format!("{}\n", EpochLog::HEADER);
            let _ = writeln!(out, "{}", EpochLog::HEADER);
            let result = train(&c, &songs, workers, |row| {
                let line = row.csv_row();
                let _ = writeln!(out, "{line}");
                log.push_str(&line);
                log.push('\n');
            });
            write_file(&log_path, &log)?;
            let results = match result {
                Ok(r) => r,
                Err(e @ TrainError::NonFinite { .. }) => return Err(CliError::NonFinite(e.to_string())),
                Err(e @ (TrainError::Config(_) | TrainError::TooFewSongs { .. })) => {
                    return Err(CliError::Usage(e.to_string()))
                }
                Err(e) => return Err(data(e)),
            };
            let mut split = Vec::new();
            for r in &results {
                checkpoint::save(&r.model, &out_dir.join(format!("fold{}.pseg", r.fold))).map_err(data)?;
                split.push(json!({
                    "fold": r.fold,
                    "best_epoch": r.best_epoch,
                    "validation": r.val_ids,
                    "precision": r.best.precision,
                    "recall": r.best.recall,
                    "f1": r.best.f1,
                }));
            }
            write_file(
                &out_dir.join("folds.json"),
                &serde_json::to_string_pretty(&split).expect("serializes"),
            )?;
            let row = ReportRow {
                model: c.model.kind.name().to_string(),
                label: c.model.scheme.name().to_string(),
                augment: c.augment,
                folds: results.iter().map(|r| r.best).collect(),
            };
            let report = report_csv(&[row]).map_err(data)?;
            write_file(&out_dir.join("report.csv"), &report)?;
            let _ = write!(out, "{report}");
            Ok(())
        }
        Command::Eval {
            checkpoint: paths,
            corpus,
            tolerance,
            report_out,
            workers,
        } => {
            if report_out.is_some() && paths.len() < 2 {
                return Err(CliError::Usage("--report-out needs at least two checkpoints".into()));
            }
            print_config(
                err,
                &json!({ "checkpoints": paths, "corpus": corpus, "tolerance": tolerance, "workers": workers }),
            );
            let songs = load_corpus(&corpus)?;
            let decode = DecodeParams::default();
            let pool = pool(workers)?;
            let _ = writeln!(out, "checkpoint,precision,recall,f1,tp,fp,fn");
            let mut folds = Vec::new();
            let mut kind = None;
            for p in &paths {
                let model = checkpoint::load(p).map_err(data)?;
                let m = pool.install(|| evaluate(&model, &songs, &decode, tolerance)).map_err(data)?;
                let c = m.counts;
                let _ = writeln!(
                    out,
                    "{},{:.4},{:.4},{:.4},{},{},{}",
                    p.display(),
                    m.precision,
                    m.recall,
                    m.f1,
                    c.tp,
                    c.fp,
                    c.fn_
                );
                kind = Some((model.spec.kind, model.spec.scheme));
                folds.push(m);
            }
            if let (Some(path), Some((k, s))) = (report_out, kind) {
                let row = ReportRow {
                    model: k.name().to_string(),
                    label: s.name().to_string(),
                    augment: false,
                    folds,
                };
                write_file(&path, &report_csv(&[row]).map_err(data)?)?;
            }
            Ok(())
        }
        Command::Segment {
            checkpoint: ckpt,
            corpus,
            out: path,
        } => {
            print_config(err, &json!({ "checkpoint": ckpt, "corpus": corpus }));
            let model = checkpoint::load(&ckpt).map_err(data)?;
            let songs = load_corpus(&corpus)?;
            let decode = DecodeParams::default();
            let mut text = String::new();
            for s in &songs {
                let bounds = predict_boundaries(&model, s, &decode).map_err(data)?;
                let mut rec = song_record(&Song {
                    phrases: spans_from_boundaries(&bounds),
                    ..s.clone()
                });
                rec["boundaries"] = json!(bounds);
                text.push_str(&rec.to_string());
                text.push('\n');
            }
            write_file(&path, &text)
        }
        Command::Gradcheck { filter } => {
            print_config(err, &json!({ "filter": filter }));
            let mut failed = Vec::new();
            for (name, r) in run_suite(filter.as_deref()) {
                match r {
                    Ok(r) => {
                        let status = if r.passed() { "ok" } else { "FAIL" };
                        let _ = writeln!(out, "{name:<20} {status:<4} max_rel_error={:.3e} entries={}", r.max_rel_error, r.entries);
                        if !r.passed() {
                            failed.push(name);
                        }
                    }
                    Err(e) => {
                        let _ = writeln!(out, "{name:<20} ERROR {e}");
                        failed.push(name);
                    }
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Verify(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
        Command::CrfOracle {
            trials,
            seed,
            max_t,
            max_k,
        } => {
            print_config(err, &json!({ "trials": trials, "seed": seed, "max_t": max_t, "max_k": max_k }));
            if max_t == 0 || max_k < 2 {
                return Err(CliError::Usage("need --max-t >= 1 and --max-k >= 2".into()));
            }
            let r = run_oracle(trials, seed, max_t, max_k).map_err(data)?;
            let _ = writeln!(
                out,
                "trials={} max_log_z_error={:.3e} max_viterbi_error={:.3e} illegal_paths={}",
                r.trials, r.max_log_z_error, r.max_viterbi_error, r.illegal_paths
            );
            if r.passed(ORACLE_LOG_Z_TOL, ORACLE_VITERBI_TOL) {
                Ok(())
            } else {
                Err(CliError::Verify("CRF disagrees with brute force".into()))
            }
        }
    }
}

/// Phrase spans implied by predicted end boundaries: each span runs from
/// the note after the previous boundary to the boundary. Spans shorter than
/// a phrase are left out; their notes become gap notes.
pub fn spans_from_boundaries(bounds: &std::collections::BTreeSet<usize>) -> Vec<PhraseSpan> {
    let mut start = 0;
    let mut out = Vec::new();
    for &b in bounds {
        if b + 1 - start >= MIN_PHRASE_LEN {
            out.push(PhraseSpan::new(start, b + 1));
        }
        start = b + 1;
    }
    out
}
