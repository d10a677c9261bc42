//! Melodic phrase boundary detection on symbolic music.
//!
//! Songs are note sequences (pitch, duration, rest) with annotated phrase
//! spans. A model reads the per-note features and predicts which notes end
//! a phrase. Five model families are available:
//!
//! - a causal CNN with a softmax head, trained on binary labels,
//! - a U-net with a softmax head,
//! - a Bi-LSTM (optionally behind a small CNN) with a sigmoid head,
//!   trained on binary or exponential-decay targets,
//! - a residual CNN feeding a linear-chain CRF,
//! - a Bi-LSTM feeding a linear-chain CRF.
//!
//! The CRF variants use "ascend" labels (position inside the phrase) and
//! hard transition constraints, so every decoded path is a valid phrase
//! segmentation.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) with
//! `f32` for training and `f64` for gradient checks.
//!
//! ```no_run
//! use melseg::datasynth::{generate, SynthConfig};
//! use melseg::trainer::{train, RunConfig};
//!
//! let songs = generate(&SynthConfig { songs: 50, ..SynthConfig::default() })?;
//! let config = RunConfig::preset("smoke-cnn-crf")?;
//! let folds = train(&config, &songs, 1, |row| println!("{}", row.csv_row()))?;
//! println!("fold 0 best F1 {:.3}", folds[0].best.f1);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod crf;
pub mod datasynth;
pub mod evaluator;
pub mod gradcheck;
pub mod labeling;
pub mod losses;
pub mod models;
pub mod nn;
pub mod score;
pub mod tensor;
pub mod trainer;

pub use labeling::{LabelScheme, LabelSequence};
pub use models::{Model, ModelKind, ModelSpec};
pub use score::{Note, PhraseSpan, Song};
