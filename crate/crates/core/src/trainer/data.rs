//! Feature extraction and cutting songs into training sequences.
//!
//! Every sequence holds whole phrases only. Gap notes travel with the phrase
//! that follows them (trailing gap notes with the last phrase).

use serde::{Deserialize, Serialize};

use crate::labeling::{LabelError, LabelScheme, LabelSequence};
use crate::models::{ModelKind, NUM_FEATURES};
use crate::score::{Note, PhraseSpan, Song};
use crate::tensor::{Scalar, Tensor};

pub const REPEAT_LEN: usize = 880;
pub const LSTM_PHRASES: usize = 5;
pub const LSTM_PAD: usize = 100;
pub const CRF_MIN_NOTES: usize = 80;
pub const CRF_MIN_PHRASES: usize = 2;
pub const CRF_PAD: usize = 120;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChopError {
    #[error("song `{id}` has {len} notes, more than the padded length {max}")]
    SongTooLong { id: String, len: usize, max: usize },
    #[error("song `{id}`: phrase of {len} notes (with leading gap) does not fit a sequence of {max}")]
    PhraseTooLong { id: String, len: usize, max: usize },
    #[error("song `{0}` has no notes")]
    Empty(String),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// `[T x 3]` features: centred pitch, log-compressed duration and rest.
pub fn normalize_features<F: Scalar>(notes: &[Note]) -> Tensor<F> {
    let data = notes
        .iter()
        .flat_map(|n| {
            [
                (n.pitch as f64 - 60.0) / 24.0,
                (n.duration + 1.0).log2(),
                (n.rest + 1.0).log2(),
            ]
        })
        .map(F::of)
        .collect();
    Tensor::new(vec![notes.len(), NUM_FEATURES], data).expect("three features per note")
}

/// One training sequence, zero-padded to `t_pad` notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub source_id: String,
    /// Index of the first note in the source song.
    pub offset: usize,
    /// `[t_pad x 3]`.
    pub features: Tensor<f32>,
    /// `t_pad` targets; padded entries are 0.
    pub labels: LabelSequence,
    pub valid_len: usize,
    /// Phrase spans relative to the chunk.
    pub phrases: Vec<PhraseSpan>,
}

impl Chunk {
    /// Builds a chunk from an excerpt whose phrases are already re-based.
    pub fn from_song(
        excerpt: &Song,
        source_id: &str,
        offset: usize,
        t_pad: usize,
        scheme: LabelScheme,
    ) -> Result<Self, ChopError> {
        let valid_len = excerpt.len();
        debug_assert!(valid_len <= t_pad);
        let mut features = normalize_features::<f32>(&excerpt.notes).data().to_vec();
        features.resize(t_pad * NUM_FEATURES, 0.0);
        let mut labels = scheme.encode(excerpt)?;
        labels.values.resize(t_pad, 0.0);
        Ok(Chunk {
            source_id: source_id.to_string(),
            offset,
            features: Tensor::new(vec![t_pad, NUM_FEATURES], features).expect("padded size"),
            labels,
            valid_len,
            phrases: excerpt.phrases.clone(),
        })
    }

    pub fn t_pad(&self) -> usize {
        self.labels.len()
    }

    /// Features of the unpadded prefix, `[valid_len x 3]`.
    pub fn valid_features(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.valid_len, NUM_FEATURES],
            self.features.data()[..self.valid_len * NUM_FEATURES].to_vec(),
        )
        .expect("prefix of the padded features")
    }

    pub fn valid_labels(&self) -> LabelSequence {
        LabelSequence {
            scheme: self.labels.scheme,
            values: self.labels.values[..self.valid_len].to_vec(),
        }
    }
}

/// Tiles `song` from its beginning up to `target` notes. Phrase replicas cut
/// by the end are dropped, leaving their notes as gap notes.
pub fn pad_song_repeat(song: &Song, target: usize, scheme: LabelScheme) -> Result<Chunk, ChopError> {
    let n = song.len();
    if n == 0 {
        return Err(ChopError::Empty(song.id.clone()));
    }
    if n > target {
        return Err(ChopError::SongTooLong {
            id: song.id.clone(),
            len: n,
            max: target,
        });
    }
    let notes: Vec<Note> = song.notes.iter().cycle().take(target).copied().collect();
    let phrases = (0..target.div_ceil(n))
        .flat_map(|c| song.phrases.iter().map(move |s| PhraseSpan::new(s.start + c * n, s.end + c * n)))
        .filter(|s| s.end <= target)
        .collect();
    let tiled = Song {
        id: song.id.clone(),
        notes,
        phrases,
    };
    Chunk::from_song(&tiled, &song.id, 0, target, scheme)
}

/// Half-open note ranges, one per phrase, with gap notes attached.
fn units(song: &Song) -> Vec<std::ops::Range<usize>> {
    if song.phrases.is_empty() {
        return std::iter::once(0..song.len()).collect();
    }
    let mut out = Vec::with_capacity(song.phrases.len());
    let mut from = 0;
    for s in &song.phrases {
        out.push(from..s.end);
        from = s.end;
    }
    out.last_mut().unwrap().end = song.len();
    out
}

fn span(group: &[std::ops::Range<usize>]) -> usize {
    group.last().map_or(0, |u| u.end) - group.first().map_or(0, |u| u.start)
}

fn emit(song: &Song, groups: Vec<Vec<std::ops::Range<usize>>>, t_pad: usize, scheme: LabelScheme) -> Result<Vec<Chunk>, ChopError> {
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let range = g[0].start..g.last().unwrap().end;
            let excerpt = song.excerpt(format!("{}#{i}", song.id), range.clone());
            Chunk::from_song(&excerpt, &song.id, range.start, t_pad, scheme)
        })
        .collect()
}

fn check_units(song: &Song, units: &[std::ops::Range<usize>], limit: usize, max: usize) -> Result<(), ChopError> {
    if song.is_empty() {
        return Err(ChopError::Empty(song.id.clone()));
    }
    match units.iter().find(|u| u.len() > limit) {
        Some(u) => Err(ChopError::PhraseTooLong {
            id: song.id.clone(),
            len: u.len(),
            max,
        }),
        None => Ok(()),
    }
}

/// Consecutive windows of `phrases` whole phrases, padded to `t_pad`. A
/// window longer than `t_pad` notes is split at the largest phrase count
/// that fits.
pub fn chop_lstm(song: &Song, phrases: usize, t_pad: usize, scheme: LabelScheme) -> Result<Vec<Chunk>, ChopError> {
    let units = units(song);
    check_units(song, &units, t_pad, t_pad)?;
    let mut groups = Vec::new();
    for window in units.chunks(phrases.max(1)) {
        let mut rest = window;
        while !rest.is_empty() {
            let take = (1..=rest.len()).rev().find(|&k| span(&rest[..k]) <= t_pad).unwrap();
            groups.push(rest[..take].to_vec());
            rest = &rest[take..];
        }
    }
    emit(song, groups, t_pad, scheme)
}

/// Greedy sequences of whole phrases with at least `min_notes` notes and
/// `min_phrases` phrases, always shorter than `t_pad`. A short remainder is
/// merged into the previous sequence when that stays below `t_pad`;
/// otherwise, if it has too few phrases, it borrows the last phrase of the
/// previous sequence when that one can spare it.
pub fn chop_crf(
    song: &Song,
    min_notes: usize,
    min_phrases: usize,
    t_pad: usize,
    scheme: LabelScheme,
) -> Result<Vec<Chunk>, ChopError> {
    let units = units(song);
    check_units(song, &units, t_pad - 1, t_pad)?;
    let mut groups: Vec<Vec<std::ops::Range<usize>>> = Vec::new();
    let mut cur: Vec<std::ops::Range<usize>> = Vec::new();
    for u in units {
        if !cur.is_empty() && span(&cur) + u.len() >= t_pad {
            groups.push(std::mem::take(&mut cur));
        }
        cur.push(u);
        if span(&cur) >= min_notes && cur.len() >= min_phrases {
            groups.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        match groups.last_mut() {
            Some(last) if span(last) + span(&cur) < t_pad => last.append(&mut cur),
            Some(last)
                if cur.len() < min_phrases
                    && last.len() > min_phrases
                    && span(&last[last.len() - 1..]) + span(&cur) < t_pad =>
            {
                cur.insert(0, last.pop().unwrap());
                groups.push(cur);
            }
            _ => groups.push(cur),
        }
    }
    emit(song, groups, t_pad, scheme)
}

/// How songs are turned into training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChopProfile {
    /// Whole song tiled to `len` notes.
    Repeat { len: usize },
    /// Windows of `phrases` phrases padded to `t_pad`.
    Phrases { phrases: usize, t_pad: usize },
    /// Note-count windows, see [`chop_crf`].
    Notes {
        min_notes: usize,
        min_phrases: usize,
        t_pad: usize,
    },
}

impl ChopProfile {
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Cnn | ModelKind::UNet => ChopProfile::Repeat { len: REPEAT_LEN },
            ModelKind::BiLstmCnn => ChopProfile::Phrases {
                phrases: LSTM_PHRASES,
                t_pad: LSTM_PAD,
            },
            ModelKind::CnnCrf | ModelKind::BiLstmCrf => ChopProfile::Notes {
                min_notes: CRF_MIN_NOTES,
                min_phrases: CRF_MIN_PHRASES,
                t_pad: CRF_PAD,
            },
        }
    }

    pub fn apply(&self, song: &Song, scheme: LabelScheme) -> Result<Vec<Chunk>, ChopError> {
        match *self {
            ChopProfile::Repeat { len } => Ok(vec![pad_song_repeat(song, len, scheme)?]),
            ChopProfile::Phrases { phrases, t_pad } => chop_lstm(song, phrases, t_pad, scheme),
            ChopProfile::Notes {
                min_notes,
                min_phrases,
                t_pad,
            } => chop_crf(song, min_notes, min_phrases, t_pad, scheme),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            ChopProfile::Repeat { len } => len >= 2,
            ChopProfile::Phrases { phrases, t_pad } => phrases >= 1 && t_pad >= 2,
            ChopProfile::Notes {
                min_notes,
                min_phrases,
                t_pad,
            } => min_phrases >= 1 && min_notes < t_pad && t_pad >= 3,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid chopping profile {self:?}"))
        }
    }
}
