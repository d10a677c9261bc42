//! Encodes one song with every label scheme and decodes the boundaries back.
//!
//! `cargo run --example label_schemes`

use melseg::labeling::{
    boundaries_from_ascend, boundaries_from_binary, boundaries_from_expdecay, LabelScheme, DEFAULT_BINARY_THRESHOLD,
    DEFAULT_PEAK_THRESHOLD,
};
use melseg::score::{boundary_set, Note, PhraseSpan, Song};

fn main() -> anyhow::Result<()> {
    // three phrases of 4, 3 and 5 notes, each ending on a rest
    let lens = [4usize, 3, 5];
    let mut notes = Vec::new();
    let mut phrases = Vec::new();
    for (p, &len) in lens.iter().enumerate() {
        let start = notes.len();
        for i in 0..len {
            let rest = if i + 1 == len { 1.0 } else { 0.0 };
            notes.push(Note::new(60 + (2 * i + p) as u8, 0.5, rest));
        }
        phrases.push(PhraseSpan::new(start, notes.len()));
    }
    let song = Song::new("demo", notes, phrases)?;
    let gold = boundary_set(&song);
    println!("gold boundaries {gold:?}");

    for scheme in [LabelScheme::Binary, LabelScheme::ExpDecay, LabelScheme::ascend()] {
        let labels = scheme.encode(&song)?;
        let decoded = match scheme {
            LabelScheme::Binary => boundaries_from_binary(&labels.values, DEFAULT_BINARY_THRESHOLD),
            LabelScheme::ExpDecay => boundaries_from_expdecay(&labels.values, DEFAULT_PEAK_THRESHOLD),
            LabelScheme::Ascend { .. } => boundaries_from_ascend(&labels.classes())?,
        };
        let shown: Vec<String> = labels.values.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<8} [{}]", scheme.name(), shown.join(" "));
        println!("{:<8} decoded {decoded:?} {}", "", if decoded == gold { "ok" } else { "MISMATCH" });
    }
    Ok(())
}
