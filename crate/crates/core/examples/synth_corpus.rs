//! Generates a synthetic corpus, writes it as JSONL and prints its statistics.
//!
//! `cargo run --release --example synth_corpus -- [songs] [seed] [out.jsonl]`

use melseg::datasynth::{generate, stats, SynthConfig};
use melseg::score::write_corpus;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let songs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args.next().unwrap_or_else(|| "synth.jsonl".into());

    let config = SynthConfig {
        songs,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate(&config)?;
    write_corpus(&corpus, &out)?;

    let s = stats(&corpus);
    println!("wrote {} songs ({} notes, {} phrases) to {out}", s.songs, s.notes, s.phrases);
    println!("positive label rate   {:.4}", s.positive_rate);
    println!("boundaries w/o rest   {:.4}", s.no_rest_fraction);
    println!("phrase length mode    {}", s.phrase_mode);
    let h = &s.song_lengths;
    let peak = h.counts.iter().enumerate().max_by_key(|&(_, c)| *c).map(|(i, _)| i).unwrap_or(0);
    println!(
        "busiest song-length bin [{:.0}, {:.0}) holds {} songs",
        h.lo + peak as f64 * h.width,
        h.lo + (peak + 1) as f64 * h.width,
        h.counts[peak]
    );
    Ok(())
}
