//! Five-fold cross-validation of a preset on a synthetic corpus.
//!
//! `cargo run --release --example cross_validate -- [preset] [songs]`

use melseg::datasynth::{generate, SynthConfig};
use melseg::evaluator::{report_csv, ReportRow};
use melseg::trainer::{train, EpochLog, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "smoke-cnn-crf".into());
    let songs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(50);

    let corpus = generate(&SynthConfig {
        songs,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let config = RunConfig::preset(&preset)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());

    println!("{}", EpochLog::HEADER);
    let folds = train(&config, &corpus, workers, |row| println!("{}", row.csv_row()))?;
    for f in &folds {
        println!(
            "fold {}: best epoch {} F1 {:.4} ({} training sequences)",
            f.fold, f.best_epoch, f.best.f1, f.train_sequences
        );
    }
    let row = ReportRow {
        model: config.model.kind.name().into(),
        label: config.model.scheme.name().into(),
        augment: config.augment,
        folds: folds.iter().map(|f| f.best).collect(),
    };
    print!("{}", report_csv(&[row])?);
    Ok(())
}
