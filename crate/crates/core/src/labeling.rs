//! Per-note training targets and the decoders that turn model output back
//! into end-of-phrase boundary sets.
//!
//! Three schemes are supported:
//!
//! * **binary**: 1 on the last note of each phrase, 0 elsewhere;
//! * **exponential decay**: 1 on each phrase start, halving towards the
//!   middle of the phrase and doubling again towards the next start;
//! * **linear ascend**: the 1-based position of a note inside its phrase.
//!
//! Gap notes (outside every phrase) are labelled 0 under every scheme.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::score::{PhraseSpan, Song};

/// Default largest position label for the ascend scheme: the longest phrase
/// length expected in pop melodies.
pub const DEFAULT_MAX_POSITION: usize = 49;
/// Default peak-picking threshold for exponential-decay outputs.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.7;
/// Default decision threshold for binary outputs.
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("song `{id}`: phrase [{start},{end}) is longer than the largest position label {max}")]
    PhraseTooLong {
        id: String,
        start: usize,
        end: usize,
        max: usize,
    },
    #[error("ascend scheme needs a maximum position of at least 2, got {0}")]
    MaxTooSmall(usize),
    #[error("illegal ascend path at index {index}: {prev} -> {next}")]
    IllegalPath {
        index: usize,
        prev: usize,
        next: usize,
    },
    #[error("unknown label scheme `{0}` (expected binary, expdecay or ascend)")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scheme")]
pub enum LabelScheme {
    Binary,
    ExpDecay,
    Ascend { max: usize },
}

impl LabelScheme {
    pub fn ascend() -> Self {
        LabelScheme::Ascend {
            max: DEFAULT_MAX_POSITION,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LabelScheme::Binary => "binary",
            LabelScheme::ExpDecay => "expdecay",
            LabelScheme::Ascend { .. } => "ascend",
        }
    }

    /// Labels `song` under this scheme.
    pub fn encode(&self, song: &Song) -> Result<LabelSequence, LabelError> {
        match *self {
            LabelScheme::Binary => Ok(make_binary(song)),
            LabelScheme::ExpDecay => Ok(make_expdecay(song)),
            LabelScheme::Ascend { max } => make_ascend(song, max),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelScheme {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(LabelScheme::Binary),
            "expdecay" | "smooth" => Ok(LabelScheme::ExpDecay),
            "ascend" | "ascending" => Ok(LabelScheme::ascend()),
            other => Err(LabelError::UnknownScheme(other.to_string())),
        }
    }
}

/// Per-note targets for one song.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub scheme: LabelScheme,
    pub values: Vec<f64>,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Integer view, meaningful for binary and ascend sequences.
    pub fn classes(&self) -> Vec<usize> {
        self.values.iter().map(|&v| v.round() as usize).collect()
    }
}

pub fn make_binary(song: &Song) -> LabelSequence {
    let mut values = vec![0.0; song.len()];
    for span in &song.phrases {
        values[span.last()] = 1.0;
    }
    LabelSequence {
        scheme: LabelScheme::Binary,
        values,
    }
}

/// Exponential-decay value at offset `p` of a phrase of length `len`:
/// `2^-min(p, len - p)`.
pub fn expdecay_value(p: usize, len: usize) -> f64 {
    let steps = p.min(len - p);
    0.5f64.powi(steps as i32)
}

pub fn make_expdecay(song: &Song) -> LabelSequence {
    let mut values = vec![0.0; song.len()];
    for span in &song.phrases {
        let len = span.len();
        for p in 0..len {
            values[span.start + p] = expdecay_value(p, len);
        }
    }
    LabelSequence {
        scheme: LabelScheme::ExpDecay,
        values,
    }
}

pub fn make_ascend(song: &Song, max: usize) -> Result<LabelSequence, LabelError> {
    if max < 2 {
        return Err(LabelError::MaxTooSmall(max));
    }
    let mut values = vec![0.0; song.len()];
    for &PhraseSpan { start, end } in &song.phrases {
        if end - start > max {
            return Err(LabelError::PhraseTooLong {
                id: song.id.clone(),
                start,
                end,
                max,
            });
        }
        for (p, v) in values[start..end].iter_mut().enumerate() {
            *v = (p + 1) as f64;
        }
    }
    Ok(LabelSequence {
        scheme: LabelScheme::Ascend { max },
        values,
    })
}

/// Indices whose score exceeds `threshold`.
pub fn boundaries_from_binary(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Strict local maxima at or above `threshold`. The first and last indices
/// only compare against their single neighbour.
pub fn pick_peaks(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    let n = scores.len();
    (0..n)
        .filter(|&i| {
            let s = scores[i];
            s >= threshold
                && (i == 0 || s > scores[i - 1])
                && (i + 1 == n || s > scores[i + 1])
        })
        .collect()
}

/// Peak-picks phrase starts from an exponential-decay curve and converts
/// them to end-of-phrase boundaries: each start after the first closes the
/// preceding phrase, and the final note always closes the last one.
pub fn boundaries_from_expdecay(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    let starts = pick_peaks(scores, threshold);
    if starts.is_empty() {
        return BTreeSet::new();
    }
    let mut ends: BTreeSet<usize> = starts.iter().filter(|&&s| s > 0).map(|&s| s - 1).collect();
    ends.insert(scores.len() - 1);
    ends
}

/// Boundaries of a linear-ascend label path: a positive label closes its
/// phrase when it is the last note or the next label restarts (0 or 1).
pub fn boundaries_from_ascend(labels: &[usize]) -> Result<BTreeSet<usize>, LabelError> {
    for (i, w) in labels.windows(2).enumerate() {
        let (prev, next) = (w[0], w[1]);
        let legal = match prev {
            0 => next <= 1,
            1 => next == 2,
            k => next == k + 1 || next <= 1,
        };
        if !legal {
            return Err(LabelError::IllegalPath {
                index: i + 1,
                prev,
                next,
            });
        }
    }
    if let Some(&first) = labels.first() {
        if first > 1 {
            return Err(LabelError::IllegalPath {
                index: 0,
                prev: 0,
                next: first,
            });
        }
    }
    // a phrase cannot close after a single note
    if labels.len() > 1 && labels.last() == Some(&1) {
        return Err(LabelError::IllegalPath {
            index: labels.len(),
            prev: 1,
            next: 0,
        });
    }
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l >= 1 && labels.get(i + 1).is_none_or(|&n| n <= 1))
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{boundary_set, Note};

    fn song(n: usize, spans: &[(usize, usize)]) -> Song {
        let notes = (0..n).map(|i| Note::new(60 + (i % 12) as u8, 1.0, 0.0)).collect();
        let phrases = spans.iter().map(|&(s, e)| PhraseSpan::new(s, e)).collect();
        Song::new("t", notes, phrases).unwrap()
    }

    #[test]
    fn binary_labels() {
        let s = song(9, &[(0, 4), (4, 9)]);
        assert_eq!(
            make_binary(&s).values,
            vec![0., 0., 0., 1., 0., 0., 0., 0., 1.]
        );
        assert!(make_binary(&song(4, &[])).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expdecay_shapes() {
        let s = song(7, &[(0, 5), (5, 7)]);
        assert_eq!(
            make_expdecay(&s).values,
            vec![1.0, 0.5, 0.25, 0.25, 0.5, 1.0, 0.5]
        );
        let four = song(4, &[(0, 4)]);
        assert_eq!(make_expdecay(&four).values, vec![1.0, 0.5, 0.25, 0.5]);
    }

    #[test]
    fn ascend_labels() {
        let s = song(4, &[(1, 4)]);
        assert_eq!(make_ascend(&s, 49).unwrap().values, vec![0., 1., 2., 3.]);
        let two = song(4, &[(0, 2), (2, 4)]);
        assert_eq!(make_ascend(&two, 49).unwrap().values, vec![1., 2., 1., 2.]);
        let err = make_ascend(&song(6, &[(0, 6)]), 5).unwrap_err();
        assert!(matches!(err, LabelError::PhraseTooLong { start: 0, end: 6, .. }));
        // 49 covers the longest phrases of the target regime
        assert!(make_ascend(&song(49, &[(0, 49)]), DEFAULT_MAX_POSITION).is_ok());
    }

    #[test]
    fn binary_decoder() {
        assert_eq!(boundaries_from_binary(&[0.1, 0.9, 0.2], 0.5), BTreeSet::from([1]));
        assert!(boundaries_from_binary(&[0.1, 0.2], 0.5).is_empty());
        let s = song(9, &[(0, 4), (4, 9)]);
        assert_eq!(
            boundaries_from_binary(&make_binary(&s).values, 0.5),
            boundary_set(&s)
        );
    }

    #[test]
    fn expdecay_decoder() {
        let s = song(9, &[(0, 4), (4, 9)]);
        assert_eq!(
            boundaries_from_expdecay(&make_expdecay(&s).values, 0.7),
            boundary_set(&s)
        );
        assert!(boundaries_from_expdecay(&[0.8; 5], 0.7).is_empty());
        assert_eq!(
            pick_peaks(&[1.0, 0.5, 1.0, 0.5], 0.7),
            BTreeSet::from([0, 2])
        );
        assert_eq!(
            boundaries_from_expdecay(&[1.0, 0.5, 1.0, 0.5], 0.7),
            BTreeSet::from([1, 3])
        );
    }

    #[test]
    fn ascend_decoder() {
        assert_eq!(
            boundaries_from_ascend(&[1, 2, 3, 1, 2]).unwrap(),
            BTreeSet::from([2, 4])
        );
        assert!(boundaries_from_ascend(&[0, 0, 0]).unwrap().is_empty());
        assert!(boundaries_from_ascend(&[1, 1]).is_err());
        assert!(boundaries_from_ascend(&[1, 0]).is_err());
        assert!(boundaries_from_ascend(&[2, 3]).is_err());
    }

    #[test]
    fn scheme_names_parse() {
        for s in ["binary", "expdecay", "ascend"] {
            assert_eq!(s.parse::<LabelScheme>().unwrap().name(), s);
        }
        assert!("soft".parse::<LabelScheme>().is_err());
    }
}
