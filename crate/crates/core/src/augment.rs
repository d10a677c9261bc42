//! Additive transposition of pitch, duration and rest.

use serde::{Deserialize, Serialize};

use crate::score::{Note, Song};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("{0} shift set is empty")]
    EmptySet(&'static str),
    #[error("{0} shift set must contain 0")]
    MissingIdentity(&'static str),
    #[error("pitch shift {0} outside 0..=12")]
    PitchShift(i64),
    #[error("{0} shift {1} must be a non-negative finite number")]
    NegativeShift(&'static str, f64),
    #[error("cannot parse shift list `{0}`")]
    Parse(String),
}

/// The Cartesian product of shifts applied to every song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub pitch_shifts: Vec<u8>,
    pub duration_shifts: Vec<f64>,
    pub rest_shifts: Vec<f64>,
}

impl Default for AugmentPlan {
    /// 13 pitch shifts x 2 duration shifts x 2 rest shifts = 52 variants.
    fn default() -> Self {
        AugmentPlan {
            pitch_shifts: (0..=12).collect(),
            duration_shifts: vec![0.0, 0.5],
            rest_shifts: vec![0.0, 0.5],
        }
    }
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            pitch_shifts: vec![0],
            duration_shifts: vec![0.0],
            rest_shifts: vec![0.0],
        }
    }

    pub fn new(
        mut pitch_shifts: Vec<u8>,
        mut duration_shifts: Vec<f64>,
        mut rest_shifts: Vec<f64>,
    ) -> Result<Self, AugmentError> {
        pitch_shifts.sort_unstable();
        pitch_shifts.dedup();
        for set in [&mut duration_shifts, &mut rest_shifts] {
            set.sort_by(f64::total_cmp);
            set.dedup();
        }
        let plan = AugmentPlan {
            pitch_shifts,
            duration_shifts,
            rest_shifts,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Parses three comma-separated lists, e.g. `"0,2,4"`, `"0,0.5"`, `"0"`.
    pub fn parse(pitch: &str, duration: &str, rest: &str) -> Result<Self, AugmentError> {
        fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, AugmentError> {
            s.split(',')
                .map(|t| t.trim().parse().map_err(|_| AugmentError::Parse(s.to_string())))
                .collect()
        }
        let pitch: Vec<i64> = list(pitch)?;
        let pitch = pitch
            .into_iter()
            .map(|p| {
                if (0..=12).contains(&p) {
                    Ok(p as u8)
                } else {
                    Err(AugmentError::PitchShift(p))
                }
            })
            .collect::<Result<_, _>>()?;
        AugmentPlan::new(pitch, list(duration)?, list(rest)?)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.pitch_shifts.is_empty() {
            return Err(AugmentError::EmptySet("pitch"));
        }
        if let Some(&p) = self.pitch_shifts.iter().find(|&&p| p > 12) {
            return Err(AugmentError::PitchShift(p as i64));
        }
        if !self.pitch_shifts.contains(&0) {
            return Err(AugmentError::MissingIdentity("pitch"));
        }
        for (name, set) in [("duration", &self.duration_shifts), ("rest", &self.rest_shifts)] {
            if set.is_empty() {
                return Err(AugmentError::EmptySet(name));
            }
            if let Some(&bad) = set.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(AugmentError::NegativeShift(name, bad));
            }
            if !set.contains(&0.0) {
                return Err(AugmentError::MissingIdentity(name));
            }
        }
        Ok(())
    }

    /// Number of variants produced per song.
    pub fn factor(&self) -> usize {
        self.pitch_shifts.len() * self.duration_shifts.len() * self.rest_shifts.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub songs: Vec<Song>,
    /// `(song, pitch shift)` combinations dropped because a pitch would
    /// exceed 127, each counting for all its duration/rest variants.
    pub skipped: usize,
}

/// Applies every shift triple to every song, in input order then
/// lexicographic shift order. Phrase spans are copied unchanged. The
/// identity triple keeps the original id; other variants get a
/// `+p{dp}d{dd}r{dr}` suffix.
pub fn augment(songs: &[Song], plan: &AugmentPlan) -> Augmented {
    let mut out = Vec::with_capacity(songs.len() * plan.factor());
    let mut skipped = 0;
    for song in songs {
        let top = song.max_pitch();
        for &dp in &plan.pitch_shifts {
            if top as u16 + dp as u16 > 127 {
                skipped += 1;
                continue;
            }
            for &dd in &plan.duration_shifts {
                for &dr in &plan.rest_shifts {
                    out.push(shift_song(song, dp, dd, dr));
                }
            }
        }
    }
    Augmented {
        songs: out,
        skipped,
    }
}

fn shift_song(song: &Song, dp: u8, dd: f64, dr: f64) -> Song {
    let id = if dp == 0 && dd == 0.0 && dr == 0.0 {
        song.id.clone()
    } else {
        format!("{}+p{dp}d{dd}r{dr}", song.id)
    };
    Song {
        id,
        notes: song
            .notes
            .iter()
            .map(|n| Note::new(n.pitch + dp, n.duration + dd, n.rest + dr))
            .collect(),
        phrases: song.phrases.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{make_ascend, make_binary, make_expdecay};
    use crate::score::PhraseSpan;

    fn song(top: u8) -> Song {
        let notes = vec![
            Note::new(60, 1.0, 0.0),
            Note::new(top, 0.5, 0.0),
            Note::new(62, 1.0, 1.0),
            Note::new(64, 0.5, 0.0),
            Note::new(65, 2.0, 0.5),
        ];
        Song::new("s", notes, vec![PhraseSpan::new(0, 3), PhraseSpan::new(3, 5)]).unwrap()
    }

    #[test]
    fn default_plan_yields_52() {
        let out = augment(&[song(70)], &AugmentPlan::default());
        assert_eq!(out.songs.len(), 52);
        assert_eq!(out.skipped, 0);
        let ids: std::collections::HashSet<_> = out.songs.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 52);
        for s in &out.songs {
            s.validate().unwrap();
        }
    }

    #[test]
    fn identity_plan_is_noop() {
        let s = song(70);
        let out = augment(std::slice::from_ref(&s), &AugmentPlan::identity());
        assert_eq!(out.songs, vec![s]);
    }

    #[test]
    fn pitch_overflow_skips_variant() {
        let plan = AugmentPlan::new((0..=12).collect(), vec![0.0], vec![0.0]).unwrap();
        let out = augment(&[song(116)], &plan);
        assert_eq!(out.songs.len(), 12);
        assert_eq!(out.skipped, 1);
        let out = augment(&[song(116)], &AugmentPlan::default());
        // the Δp=12 pitch variant disappears together with its 4 duration/rest combinations
        assert_eq!(out.songs.len(), 48);
    }

    #[test]
    fn labels_and_intervals_preserved() {
        let s = song(70);
        for v in augment(std::slice::from_ref(&s), &AugmentPlan::default()).songs {
            assert_eq!(make_binary(&v), make_binary(&s));
            assert_eq!(make_expdecay(&v), make_expdecay(&s));
            assert_eq!(make_ascend(&v, 49), make_ascend(&s, 49));
            let d = v.notes[0].pitch as i32 - s.notes[0].pitch as i32;
            for (a, b) in v.notes.iter().zip(&s.notes) {
                assert_eq!(a.pitch as i32 - b.pitch as i32, d);
            }
        }
    }

    #[test]
    fn plan_validation() {
        assert!(AugmentPlan::parse("0,3,13", "0", "0").is_err());
        assert!(AugmentPlan::parse("1,2", "0", "0").is_err());
        assert!(AugmentPlan::parse("0", "0,-0.5", "0").is_err());
        assert!(AugmentPlan::parse("0", "0.5", "0").is_err());
        let p = AugmentPlan::parse("0,2", "0,0.25", "0").unwrap();
        assert_eq!(p.factor(), 4);
    }
}
