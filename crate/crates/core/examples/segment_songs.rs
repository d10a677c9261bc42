//! Trains a small model, saves it as a checkpoint, reloads it and segments
//! unseen songs.
//!
//! `cargo run --release --example segment_songs`

use melseg::checkpoint;
use melseg::datasynth::{generate, SynthConfig};
use melseg::evaluator::{evaluate, match_boundaries, predict_boundaries};
use melseg::score::boundary_set;
use melseg::trainer::{train, RunConfig};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig {
        songs: 30,
        seed: 8,
        ..SynthConfig::default()
    })?;
    let unseen = generate(&SynthConfig {
        songs: 5,
        seed: 9,
        ..SynthConfig::default()
    })?;
    let mut config = RunConfig::preset("smoke-cnn-crf")?;
    config.folds = 2;
    let folds = train(&config, &corpus, 1, |_| {})?;

    let dir = std::env::temp_dir().join("melseg-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.pseg");
    checkpoint::save(&folds[0].model, &path)?;
    let model = checkpoint::load(&path)?;
    println!("saved and reloaded {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    for song in &unseen {
        let pred = predict_boundaries(&model, song, &config.decode)?;
        let c = match_boundaries(&pred, &boundary_set(song), 0);
        println!("{}: {} notes, predicted {} boundaries, {} correct, {} missed", song.id, song.len(), pred.len(), c.tp, c.fn_);
    }
    let m = evaluate(&model, &unseen, &config.decode, 0)?;
    println!("precision {:.3} recall {:.3} F1 {:.3}", m.precision, m.recall, m.f1);
    Ok(())
}
