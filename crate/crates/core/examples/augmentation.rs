//! Expands a small corpus with the default transposition plan.
//!
//! `cargo run --example augmentation`

use melseg::augment::{augment, AugmentPlan};
use melseg::datasynth::{generate, SynthConfig};
use melseg::labeling::LabelScheme;

fn main() -> anyhow::Result<()> {
    let songs = generate(&SynthConfig {
        songs: 3,
        seed: 5,
        ..SynthConfig::default()
    })?;
    let plan = AugmentPlan::default();
    let out = augment(&songs, &plan);
    println!(
        "{} songs x factor {} = {} variants ({} pitch shifts skipped)",
        songs.len(),
        plan.factor(),
        out.songs.len(),
        out.skipped
    );
    for v in out.songs.iter().take(4) {
        println!("  {} first note {:?}", v.id, v.notes[0]);
    }

    // shifts never move phrase boundaries, so labels are unchanged
    let scheme = LabelScheme::ascend();
    let per_song = out.songs.len() / songs.len();
    for (i, v) in out.songs.iter().enumerate() {
        anyhow::ensure!(scheme.encode(v)? == scheme.encode(&songs[i / per_song])?, "label drift in {}", v.id);
    }
    println!("labels identical across all variants");

    let small = AugmentPlan::parse("0,5", "0", "0,1")?;
    println!("custom plan {small:?} has factor {}", small.factor());
    Ok(())
}
