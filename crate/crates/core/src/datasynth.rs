//! Seeded synthetic melodies with exact phrase annotation.
//!
//! Each song is built phrase by phrase. Pitches follow a bounded random walk
//! over a diatonic scale, phrase-final notes lean towards the tonic and
//! longer values, and most phrase ends are followed by a rest. Rests never
//! occur inside a phrase.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::score::{Note, PhraseSpan, Song, MIN_PHRASE_LEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub songs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Median of the log-normal song-length draw.
    pub median_len: f64,
    /// Shape of the log-normal song-length draw.
    pub len_sigma: f64,
    pub phrase_mean: f64,
    pub phrase_sd: f64,
    pub phrase_min: usize,
    pub phrase_max: usize,
    /// Probability that a phrase end is followed by a rest.
    pub rest_cue: f64,
    /// Probability that a phrase opens with a leap of 4 to 6 scale steps,
    /// wider than any step inside a phrase.
    pub leap_prob: f64,
    /// Pitch classes of the scale, relative to the tonic.
    pub scale: Vec<u8>,
    pub durations: Vec<f64>,
    pub rests: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            songs: 1000,
            min_len: 70,
            max_len: 865,
            median_len: 260.0,
            len_sigma: 0.5,
            phrase_mean: 9.0,
            phrase_sd: 4.0,
            phrase_min: 2,
            phrase_max: 49,
            rest_cue: 0.905,
            leap_prob: 0.7,
            scale: vec![0, 2, 4, 5, 7, 9, 11],
            durations: vec![0.25, 0.5, 1.0, 2.0],
            rests: vec![0.5, 1.0, 2.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.min_len < 2 * self.phrase_min.max(MIN_PHRASE_LEN) || self.min_len > self.max_len {
            return bad("need max_len >= min_len >= twice the shortest phrase");
        }
        if self.phrase_min < MIN_PHRASE_LEN || 2 * self.phrase_min > self.phrase_max || self.phrase_max > self.min_len {
            return bad("phrase lengths need 2 <= 2 * phrase_min <= phrase_max <= min_len");
        }
        if !(0.0..=1.0).contains(&self.rest_cue) || !(0.0..=1.0).contains(&self.leap_prob) {
            return bad("rest_cue and leap_prob must lie in [0, 1]");
        }
        if !(self.phrase_sd > 0.0 && self.len_sigma > 0.0 && self.median_len > 0.0) {
            return bad("spreads and median length must be positive");
        }
        if self.scale.is_empty() || self.scale.iter().any(|&p| p > 11) {
            return bad("scale must be a non-empty set of pitch classes 0..=11");
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.durations) || !positive(&self.rests) {
            return bad("duration and rest value sets must be non-empty and positive");
        }
        Ok(())
    }
}

/// Generates `config.songs` songs. Song `i` depends only on the seed and
/// `i`, so the corpus is the same for any thread count.
pub fn generate(config: &SynthConfig) -> Result<Vec<Song>, SynthError> {
    config.validate()?;
    Ok((0..config.songs).into_par_iter().map(|i| song(config, i)).collect())
}

fn song(c: &SynthConfig, index: usize) -> Song {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    rng.set_stream(index as u64);
    let len_dist = LogNormal::new(c.median_len.ln(), c.len_sigma).expect("validated");
    let target = (len_dist.sample(&mut rng).round() as usize).clamp(c.min_len, c.max_len);
    let phrase_dist = Normal::new(c.phrase_mean, c.phrase_sd).expect("validated");
    let phrase_len = |rng: &mut ChaCha8Rng| loop {
        let l = phrase_dist.sample(rng).round();
        if l >= c.phrase_min as f64 && l <= c.phrase_max as f64 {
            return l as usize;
        }
    };

    // phrase lengths summing to exactly `target`; a draw that would leave a
    // remainder shorter than a phrase is adjusted
    let mut lens = Vec::new();
    let mut remaining = target;
    while remaining > 0 {
        let mut l = phrase_len(&mut rng).min(remaining);
        if remaining - l > 0 && remaining - l < c.phrase_min {
            l = if remaining <= c.phrase_max { remaining } else { remaining - c.phrase_min };
        }
        lens.push(l);
        remaining -= l;
    }

    let tonic = 55 + rng.random_range(0..12u8);
    let steps = [-3i32, -2, -1, 0, 1, 2, 3];
    let step_w = WeightedIndex::new([1, 4, 8, 3, 8, 4, 1]).unwrap();
    let inner_w = WeightedIndex::new(c.durations.iter().map(|&d| if d <= 1.0 { 4.0 } else { 1.0 })).unwrap();
    let final_w = WeightedIndex::new(c.durations.iter().map(|&d| if d >= 1.0 { 4.0 } else { 0.5 })).unwrap();
    let n = c.scale.len() as i32;
    let (lo, hi) = (-n, 2 * n);
    let mut degree: i32 = 0;
    let pitch = |d: i32| {
        let octave = d.div_euclid(n);
        let pc = c.scale[d.rem_euclid(n) as usize] as i32;
        (tonic as i32 + 12 * octave + pc) as u8
    };

    let mut notes = Vec::with_capacity(target);
    let mut phrases = Vec::with_capacity(lens.len());
    for l in lens {
        let start = notes.len();
        for k in 0..l {
            let last = k + 1 == l;
            if k == 0 && start > 0 && rng.random_bool(c.leap_prob) {
                // new phrases often open with a leap, away from the range edge
                let size = rng.random_range(4..=6);
                let up = if degree - size < lo {
                    true
                } else if degree + size > hi {
                    false
                } else {
                    rng.random_bool(0.5)
                };
                degree += if up { size } else { -size };
            } else {
                degree = (degree + steps[step_w.sample(&mut rng)]).clamp(lo, hi);
            }
            if last && rng.random_bool(0.6) {
                // resolve to the nearest tonic
                degree = n * (degree as f64 / n as f64).round() as i32;
            }
            let duration = if last {
                c.durations[final_w.sample(&mut rng)]
            } else {
                c.durations[inner_w.sample(&mut rng)]
            };
            let rest = if last && rng.random_bool(c.rest_cue) {
                c.rests[rng.random_range(0..c.rests.len())]
            } else {
                0.0
            };
            notes.push(Note::new(pitch(degree), duration, rest));
        }
        phrases.push(PhraseSpan::new(start, notes.len()));
    }
    Song::new(format!("syn{index:05}"), notes, phrases).expect("generator keeps every invariant")
}

/// 50-bin histogram over `[min, max]` of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

pub const HIST_BINS: usize = 50;

impl Histogram {
    pub fn new(values: &[usize]) -> Self {
        let lo = values.iter().copied().min().unwrap_or(0) as f64;
        let hi = values.iter().copied().max().unwrap_or(0) as f64;
        let width = if hi > lo { (hi - lo) / HIST_BINS as f64 } else { 1.0 };
        let mut counts = vec![0; HIST_BINS];
        for &v in values {
            let b = (((v as f64 - lo) / width) as usize).min(HIST_BINS - 1);
            counts[b] += 1;
        }
        Histogram { lo, width, counts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub songs: usize,
    pub notes: usize,
    pub phrases: usize,
    pub song_lengths: Histogram,
    pub phrase_lengths: Histogram,
    /// Most frequent phrase length (smallest on ties).
    pub phrase_mode: usize,
    /// Fraction of notes that end a phrase.
    pub positive_rate: f64,
    /// Fraction of phrase ends followed by no rest.
    pub no_rest_fraction: f64,
}

pub fn stats(corpus: &[Song]) -> CorpusStats {
    let song_lens: Vec<usize> = corpus.iter().map(Song::len).collect();
    let phrase_lens: Vec<usize> = corpus.iter().flat_map(|s| s.phrases.iter().map(PhraseSpan::len)).collect();
    let notes: usize = song_lens.iter().sum();
    let no_rest = corpus
        .iter()
        .flat_map(|s| s.phrases.iter().map(move |p| s.notes[p.last()].rest))
        .filter(|&r| r == 0.0)
        .count();
    let max_len = phrase_lens.iter().copied().max().unwrap_or(0);
    let mut freq = vec![0usize; max_len + 1];
    for &l in &phrase_lens {
        freq[l] += 1;
    }
    let phrase_mode = (0..freq.len()).max_by_key(|&l| (freq[l], std::cmp::Reverse(l))).unwrap_or(0);
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CorpusStats {
        songs: corpus.len(),
        notes,
        phrases: phrase_lens.len(),
        song_lengths: Histogram::new(&song_lens),
        phrase_lengths: Histogram::new(&phrase_lens),
        phrase_mode,
        positive_rate: ratio(phrase_lens.len(), notes),
        no_rest_fraction: ratio(no_rest, phrase_lens.len()),
    }
}

/// Histogram rows (`kind,lo,hi,value`) followed by summary rows with empty
/// bounds.
pub fn stats_csv(s: &CorpusStats) -> String {
    let mut out = String::from("kind,lo,hi,value\n");
    for (kind, h) in [("song_length", &s.song_lengths), ("phrase_length", &s.phrase_lengths)] {
        for (i, c) in h.counts.iter().enumerate() {
            let lo = h.lo + i as f64 * h.width;
            writeln!(out, "{kind},{lo:.3},{:.3},{c}", lo + h.width).unwrap();
        }
    }
    for (k, v) in [
        ("songs", s.songs as f64),
        ("notes", s.notes as f64),
        ("phrases", s.phrases as f64),
        ("phrase_mode", s.phrase_mode as f64),
    ] {
        writeln!(out, "{k},,,{v}").unwrap();
    }
    writeln!(out, "positive_rate,,,{:.6}", s.positive_rate).unwrap();
    writeln!(out, "no_rest_fraction,,,{:.6}", s.no_rest_fraction).unwrap();
    out
}
