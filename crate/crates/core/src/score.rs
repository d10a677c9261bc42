//! Symbolic score model: notes, phrase annotations and the line-delimited
//! corpus format.
//!
//! A corpus file holds one song per line as a JSON object:
//!
//! ```text
//! {"id":"song-1","notes":[[60,1.0,0.0],[62,0.5,0.5]],"phrases":[[0,2]]}
//! ```
//!
//! Each note is a `[pitch, duration, rest]` triple (MIDI pitch, beats, beats)
//! and each phrase a half-open `[start, end)` note-index span.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Smallest number of notes a phrase may contain.
pub const MIN_PHRASE_LEN: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("line {line}: {field}: {message}")]
    Malformed {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("song `{id}`: {violation}")]
    Invalid { id: String, violation: Violation },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A broken [`Song`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    PitchOutOfRange { note: usize, pitch: i64 },
    NonPositiveDuration { note: usize },
    NegativeRest { note: usize },
    TooFewNotes(usize),
    PhraseTooShort { start: usize, end: usize },
    PhraseOutOfBounds { start: usize, end: usize, len: usize },
    PhrasesOverlap { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PitchOutOfRange { note, pitch } => {
                write!(f, "pitch out of range (note {note}: {pitch})")
            }
            Violation::NonPositiveDuration { note } => {
                write!(f, "duration must be positive (note {note})")
            }
            Violation::NegativeRest { note } => write!(f, "rest must be non-negative (note {note})"),
            Violation::TooFewNotes(n) => write!(f, "song has {n} notes, need at least 2"),
            Violation::PhraseTooShort { start, end } => {
                write!(f, "phrase shorter than {MIN_PHRASE_LEN}: [{start},{end})")
            }
            Violation::PhraseOutOfBounds { start, end, len } => {
                write!(f, "phrase [{start},{end}) outside song of {len} notes")
            }
            Violation::PhrasesOverlap { index } => {
                write!(f, "phrase {index} overlaps or precedes its predecessor")
            }
        }
    }
}

/// One monophonic note event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    /// MIDI semitone, 0..=127.
    pub pitch: u8,
    /// Length in beats, strictly positive.
    pub duration: f64,
    /// Gap in beats between this note's offset and the next onset.
    pub rest: f64,
}

impl Note {
    pub fn new(pitch: u8, duration: f64, rest: f64) -> Self {
        Note {
            pitch,
            duration,
            rest,
        }
    }
}

/// Half-open span `[start, end)` of note indices forming one phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
}

impl PhraseSpan {
    pub fn new(start: usize, end: usize) -> Self {
        PhraseSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Index of the phrase's last note.
    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

/// A melody with its phrase annotation. Notes not covered by any span are
/// gap notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Song {
    pub id: String,
    pub notes: Vec<Note>,
    pub phrases: Vec<PhraseSpan>,
}

impl Song {
    /// Builds a song and checks every invariant.
    pub fn new(
        id: impl Into<String>,
        notes: Vec<Note>,
        phrases: Vec<PhraseSpan>,
    ) -> Result<Self, ScoreError> {
        let song = Song {
            id: id.into(),
            notes,
            phrases,
        };
        song.validate().map_err(|violation| ScoreError::Invalid {
            id: song.id.clone(),
            violation,
        })?;
        Ok(song)
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn validate(&self) -> Result<(), Violation> {
        if self.notes.len() < 2 {
            return Err(Violation::TooFewNotes(self.notes.len()));
        }
        for (i, note) in self.notes.iter().enumerate() {
            if note.pitch > 127 {
                return Err(Violation::PitchOutOfRange {
                    note: i,
                    pitch: note.pitch as i64,
                });
            }
            // NaN fails both comparisons and is rejected here too.
            if !(note.duration > 0.0 && note.duration.is_finite()) {
                return Err(Violation::NonPositiveDuration { note: i });
            }
            if !(note.rest >= 0.0 && note.rest.is_finite()) {
                return Err(Violation::NegativeRest { note: i });
            }
        }
        let mut prev_end = 0;
        for (i, span) in self.phrases.iter().enumerate() {
            if span.end < span.start + MIN_PHRASE_LEN {
                return Err(Violation::PhraseTooShort {
                    start: span.start,
                    end: span.end,
                });
            }
            if span.end > self.notes.len() {
                return Err(Violation::PhraseOutOfBounds {
                    start: span.start,
                    end: span.end,
                    len: self.notes.len(),
                });
            }
            if i > 0 && span.start < prev_end {
                return Err(Violation::PhrasesOverlap { index: i });
            }
            prev_end = span.end;
        }
        Ok(())
    }

    /// Index of the phrase containing `note`, if any.
    pub fn phrase_of(&self, note: usize) -> Option<usize> {
        let idx = self.phrases.partition_point(|s| s.end <= note);
        self.phrases
            .get(idx)
            .filter(|s| s.contains(note))
            .map(|_| idx)
    }

    pub fn max_pitch(&self) -> u8 {
        self.notes.iter().map(|n| n.pitch).max().unwrap_or(0)
    }

    /// Copy of the notes in `range` with the phrases lying fully inside it,
    /// re-based to the start of the range.
    pub fn excerpt(&self, id: impl Into<String>, range: std::ops::Range<usize>) -> Song {
        let phrases = self
            .phrases
            .iter()
            .filter(|s| s.start >= range.start && s.end <= range.end)
            .map(|s| PhraseSpan::new(s.start - range.start, s.end - range.start))
            .collect();
        Song {
            id: id.into(),
            notes: self.notes[range].to_vec(),
            phrases,
        }
    }
}

/// End-of-phrase boundaries: the index of each phrase's last note.
pub fn boundary_set(song: &Song) -> BTreeSet<usize> {
    song.phrases.iter().map(PhraseSpan::last).collect()
}

/// Phrase starts, the complementary view of [`boundary_set`].
pub fn phrase_starts(song: &Song) -> BTreeSet<usize> {
    song.phrases.iter().map(|s| s.start).collect()
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    notes: Vec<(u8, f64, f64)>,
    phrases: Vec<(usize, usize)>,
}

/// Serializes a song as one corpus line (no trailing newline).
pub fn song_to_line(song: &Song) -> String {
    serde_json::to_string(&song_record(song)).expect("corpus record is always serializable")
}

/// The song as a JSON object, for formats that extend the corpus record
/// with extra fields.
pub fn song_record(song: &Song) -> Value {
    let record = RecordOut {
        id: &song.id,
        notes: song
            .notes
            .iter()
            .map(|n| (n.pitch, n.duration, n.rest))
            .collect(),
        phrases: song.phrases.iter().map(|s| (s.start, s.end)).collect(),
    };
    serde_json::to_value(record).expect("corpus record is always serializable")
}

/// Parses one corpus line. `line_no` is 1-based and only used in errors.
pub fn parse_line(line: &str, line_no: usize) -> Result<Song, ScoreError> {
    let malformed = |field: &'static str, message: String| ScoreError::Malformed {
        line: line_no,
        field,
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed("record", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record", "expected an object".into()))?;

    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("id", "missing or not a string".into()))?
        .to_string();

    let raw_notes = obj
        .get("notes")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("notes", "missing or not an array".into()))?;
    let mut notes = Vec::with_capacity(raw_notes.len());
    let mut bad_pitch = None;
    for (i, raw) in raw_notes.iter().enumerate() {
        let triple = raw
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| malformed("notes", format!("note {i} is not a 3-element array")))?;
        let pitch = triple[0]
            .as_i64()
            .ok_or_else(|| malformed("notes", format!("note {i}: pitch is not an integer")))?;
        let duration = triple[1]
            .as_f64()
            .ok_or_else(|| malformed("notes", format!("note {i}: duration is not a number")))?;
        let rest = triple[2]
            .as_f64()
            .ok_or_else(|| malformed("notes", format!("note {i}: rest is not a number")))?;
        if !(0..=127).contains(&pitch) {
            bad_pitch.get_or_insert((i, pitch));
        }
        notes.push(Note::new(pitch.clamp(0, 127) as u8, duration, rest));
    }

    let raw_phrases = obj
        .get("phrases")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("phrases", "missing or not an array".into()))?;
    let mut phrases = Vec::with_capacity(raw_phrases.len());
    for (i, raw) in raw_phrases.iter().enumerate() {
        let pair = raw
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| malformed("phrases", format!("phrase {i} is not a 2-element array")))?;
        let bound = |v: &Value| v.as_u64().map(|x| x as usize);
        match (bound(&pair[0]), bound(&pair[1])) {
            (Some(start), Some(end)) => phrases.push(PhraseSpan::new(start, end)),
            _ => {
                return Err(malformed(
                    "phrases",
                    format!("phrase {i}: bounds must be non-negative integers"),
                ))
            }
        }
    }

    if let Some((note, pitch)) = bad_pitch {
        return Err(ScoreError::Invalid {
            id,
            violation: Violation::PitchOutOfRange { note, pitch },
        });
    }
    Song::new(id, notes, phrases)
}

pub fn parse_corpus_str(text: &str) -> Result<Vec<Song>, ScoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

/// Reads a corpus file; every returned song satisfies all invariants.
pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Vec<Song>, ScoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus_str(&text)
}

pub fn write_corpus(songs: &[Song], path: impl AsRef<Path>) -> Result<(), ScoreError> {
    let lines = songs.iter().map(song_to_line);
    write_lines(lines, path)
}

/// Writes newline-terminated lines, creating parent directories.
pub(crate) fn write_lines(
    lines: impl Iterator<Item = String>,
    path: impl AsRef<Path>,
) -> Result<(), ScoreError> {
    let path = path.as_ref();
    let io_err = |source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for line in lines {
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notes(n: usize) -> Vec<Note> {
        (0..n).map(|i| Note::new(60 + i as u8, 1.0, 0.0)).collect()
    }

    #[test]
    fn parses_minimal_record() {
        let line = r#"{"id":"a","notes":[[60,1,0],[62,0.5,0],[64,0.5,0],[65,2,1]],"phrases":[[0,4]]}"#;
        let songs = parse_corpus_str(line).unwrap();
        assert_eq!(songs.len(), 1);
        assert_eq!(songs[0].notes.len(), 4);
        assert_eq!(songs[0].phrases, vec![PhraseSpan::new(0, 4)]);
    }

    #[test]
    fn rejects_pitch_out_of_range() {
        let line = r#"{"id":"hi","notes":[[130,1,0],[62,1,0]],"phrases":[]}"#;
        let err = parse_corpus_str(line).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pitch out of range"), "{msg}");
        assert!(msg.contains("hi"), "{msg}");
    }

    #[test]
    fn rejects_short_phrase() {
        let line = r#"{"id":"s","notes":[[60,1,0],[62,1,0],[64,1,0],[65,1,0]],"phrases":[[3,4]]}"#;
        let msg = parse_corpus_str(line).unwrap_err().to_string();
        assert!(msg.contains("phrase shorter than 2"), "{msg}");
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let text = "{\"id\":\"ok\",\"notes\":[[60,1,0],[61,1,0]],\"phrases\":[]}\n{\"id\":\"x\",\"notes\":[[60,\"a\",0]],\"phrases\":[]}";
        match parse_corpus_str(text).unwrap_err() {
            ScoreError::Malformed { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "notes");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_overlap_and_negative_rest() {
        let overlap = Song::new(
            "o",
            notes(6),
            vec![PhraseSpan::new(0, 3), PhraseSpan::new(2, 5)],
        );
        assert!(matches!(
            overlap,
            Err(ScoreError::Invalid {
                violation: Violation::PhrasesOverlap { index: 1 },
                ..
            })
        ));
        let mut ns = notes(3);
        ns[1].rest = -0.5;
        assert!(Song::new("r", ns, vec![]).is_err());
    }

    #[test]
    fn boundary_sets() {
        let s = Song::new(
            "b",
            notes(9),
            vec![PhraseSpan::new(0, 4), PhraseSpan::new(4, 9)],
        )
        .unwrap();
        assert_eq!(boundary_set(&s), BTreeSet::from([3, 8]));
        assert_eq!(phrase_starts(&s), BTreeSet::from([0, 4]));

        let none = Song::new("n", notes(3), vec![]).unwrap();
        assert!(boundary_set(&none).is_empty());

        let gaps = Song::new(
            "g",
            notes(7),
            vec![PhraseSpan::new(0, 2), PhraseSpan::new(5, 7)],
        )
        .unwrap();
        assert_eq!(boundary_set(&gaps), BTreeSet::from([1, 6]));
        assert_eq!(gaps.phrase_of(3), None);
        assert_eq!(gaps.phrase_of(6), Some(1));
    }

    #[test]
    fn empty_corpus_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_corpus(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(parse_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn single_song_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let mut ns = notes(5);
        ns[2].duration = 0.1 + 0.2;
        ns[4].rest = 1.0 / 3.0;
        let s = Song::new("one", ns, vec![PhraseSpan::new(0, 5)]).unwrap();
        write_corpus(std::slice::from_ref(&s), &path).unwrap();
        assert_eq!(parse_corpus(&path).unwrap(), vec![s]);
    }
}
