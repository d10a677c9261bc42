//! Boundary matching, precision/recall/F1 and cross-fold reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::Serialize;

use crate::labeling::LabelError;
use crate::models::{DecodeParams, Model, ModelError};
use crate::score::{boundary_set, Song};
use crate::trainer::data::normalize_features;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("song `{id}`: {source}")]
    Model {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error("song `{id}`: decoded path is not a valid label sequence: {source}")]
    Decode {
        id: String,
        #[source]
        source: LabelError,
    },
    #[error("a report needs at least 2 folds per row, got {0}")]
    TooFewFolds(usize),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Matched and unmatched boundary counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

/// Greedy one-to-one matching: predictions in ascending order each take the
/// first unmatched gold boundary within `tolerance` notes.
pub fn match_boundaries(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>, tolerance: usize) -> Counts {
    let mut free: BTreeSet<usize> = gold.clone();
    let mut tp = 0;
    for &p in pred {
        let lo = p.saturating_sub(tolerance);
        if let Some(&g) = free.range(lo..=p + tolerance).next() {
            free.remove(&g);
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for Metrics {
    /// Precision is 0 when nothing was predicted; F1 is 0 when `P + R == 0`.
    fn from(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

/// Predicted boundaries of one song, decoded from the whole song at once.
pub fn predict_boundaries(model: &Model<f32>, song: &Song, decode: &DecodeParams) -> Result<BTreeSet<usize>, EvalError> {
    let id = || song.id.clone();
    let pred = model
        .predict(&normalize_features(&song.notes))
        .map_err(|source| EvalError::Model { id: id(), source })?;
    pred.boundaries(decode, model.spec.scheme)
        .map_err(|source| EvalError::Decode { id: id(), source })
}

/// Micro-averaged metrics of `model` over `songs`. Songs are processed in
/// parallel on the current rayon pool; the result does not depend on the
/// pool size.
pub fn evaluate(model: &Model<f32>, songs: &[Song], decode: &DecodeParams, tolerance: usize) -> Result<Metrics, EvalError> {
    let per_song = songs
        .par_iter()
        .map(|s| Ok(match_boundaries(&predict_boundaries(model, s, decode)?, &boundary_set(s), tolerance)))
        .collect::<Result<Vec<Counts>, EvalError>>()?;
    Ok(per_song.into_iter().fold(Counts::default(), Add::add).into())
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One report row: a configuration and its per-fold metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub label: String,
    pub augment: bool,
    pub folds: Vec<Metrics>,
}

/// A parsed report row, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub model: String,
    pub label: String,
    pub augment: bool,
    /// `(mean, std)` for precision, recall and F1.
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub f1: (f64, f64),
}

pub const REPORT_HEADER: &str = "model,label,augment,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std";

/// CSV with one line per row; rates in percent with two decimals.
pub fn report_csv(rows: &[ReportRow]) -> Result<String, EvalError> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for row in rows {
        if row.folds.len() < 2 {
            return Err(EvalError::TooFewFolds(row.folds.len()));
        }
        write!(out, "{},{},{}", row.model, row.label, if row.augment { "on" } else { "off" }).unwrap();
        for get in [|m: &Metrics| m.precision, |m: &Metrics| m.recall, |m: &Metrics| m.f1] {
            let xs: Vec<f64> = row.folds.iter().map(|m| 100.0 * get(m)).collect();
            let (mean, std) = mean_std(&xs);
            write!(out, ",{mean:.2},{std:.2}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_report(text: &str) -> Result<Vec<ReportLine>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        _ => {
            return Err(EvalError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(err(format!("expected 9 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
            let augment = match f[2] {
                "on" => true,
                "off" => false,
                other => return Err(err(format!("bad augment flag `{other}`"))),
            };
            Ok(ReportLine {
                model: f[0].to_string(),
                label: f[1].to_string(),
                augment,
                precision: (num(f[3])?, num(f[4])?),
                recall: (num(f[5])?, num(f[6])?),
                f1: (num(f[7])?, num(f[8])?),
            })
        })
        .collect()
}
