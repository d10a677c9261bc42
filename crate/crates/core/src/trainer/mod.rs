//! Cross-validated training.
//!
//! Songs are split into folds by a seeded shuffle, so a song and all its
//! chunks and augmented variants land on one side only. Each batch is cut
//! into fixed micro-batches that run in parallel; their gradients are summed
//! in micro-batch order, which keeps results identical for any worker count.

pub mod config;
pub mod data;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::augment;
use crate::evaluator::{evaluate, EvalError, Metrics};
use crate::labeling::LabelSequence;
use crate::models::{Model, ModelError};
use crate::score::Song;
use crate::tensor::{Graph, Tensor};

pub use config::{ConfigError, RunConfig, PRESETS};
pub use data::{chop_crf, chop_lstm, normalize_features, pad_song_repeat, ChopError, ChopProfile, Chunk};
pub use optim::{sgd_step, Schedule, SgdConfig, SgdState, StepInfo};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{songs} songs cannot fill {folds} folds")]
    TooFewSongs { songs: usize, folds: usize },
    #[error(transparent)]
    Chop(#[from] ChopError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("fold {fold}, epoch {epoch}, batch {batch}: {what} is not finite")]
    NonFinite {
        fold: usize,
        epoch: usize,
        batch: usize,
        what: String,
    },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    /// Median batch loss over the epoch.
    pub train_loss: f64,
    pub val: Metrics,
    pub lr: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "fold,epoch,train_loss,val_precision,val_recall,val_f1,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.4},{:.4},{:.6e}",
            self.fold, self.epoch, self.train_loss, self.val.precision, self.val.recall, self.val.f1, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    /// Epoch whose parameters were kept (best validation F1, earliest on ties).
    pub best_epoch: usize,
    pub best: Metrics,
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    /// Ids of every training song after augmentation.
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub train_sequences: usize,
}

/// Song indices of each validation fold: a seeded shuffle dealt round-robin.
pub fn fold_split(songs: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..songs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (p, i) in order.into_iter().enumerate() {
        out[p % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

/// Mixes run coordinates into a sub-seed.
fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |h, &p| {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Runs every fold on a pool of `workers` threads.
pub fn train<L>(config: &RunConfig, corpus: &[Song], workers: usize, mut on_epoch: L) -> Result<Vec<FoldResult>, TrainError>
where
    L: FnMut(&EpochLog),
{
    config.validate()?;
    if corpus.len() < config.folds {
        return Err(TrainError::TooFewSongs {
            songs: corpus.len(),
            folds: config.folds,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    let splits = fold_split(corpus.len(), config.folds, config.seed);
    splits
        .iter()
        .enumerate()
        .map(|(fold, val_idx)| {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (i, s) in corpus.iter().enumerate() {
                let side = if val_idx.binary_search(&i).is_ok() { &mut val } else { &mut train };
                side.push(s.clone());
            }
            train_fold(config, &train, &val, fold, &pool, &mut on_epoch)
        })
        .collect()
}

/// Trains one fold, running batches and validation on `pool`.
pub fn train_fold<L>(
    config: &RunConfig,
    train: &[Song],
    val: &[Song],
    fold: usize,
    pool: &rayon::ThreadPool,
    on_epoch: &mut L,
) -> Result<FoldResult, TrainError>
where
    L: FnMut(&EpochLog) + ?Sized,
{
    let songs = if config.augment {
        augment(train, &config.augment_plan).songs
    } else {
        train.to_vec()
    };
    let scheme = config.model.scheme;
    let mut examples = Vec::new();
    for s in &songs {
        for c in config.chop.apply(s, scheme)? {
            examples.push((c.valid_features(), c.valid_labels()));
        }
    }
    let mut model = Model::<f32>::new(config.model.clone(), derive_seed(&[config.seed, fold as u64]))?;
    let mut state = SgdState::default();
    let mut best: Option<(usize, Metrics, Model<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.sgd.schedule.lr(config.sgd.lr, epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, fold as u64, epoch as u64])));
        let mut losses = Vec::with_capacity(order.len().div_ceil(config.batch_size));
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let non_finite = |what: String| TrainError::NonFinite {
                fold,
                epoch,
                batch,
                what,
            };
            let seed = derive_seed(&[config.seed, fold as u64, epoch as u64, batch as u64, 1]);
            let (loss, grads) = pool.install(|| batch_gradients(&model, config, &examples, idx, seed))?;
            if !loss.is_finite() {
                return Err(non_finite(format!("loss ({loss})")));
            }
            let sgd = &config.sgd;
            sgd_step(&mut model.store, &grads, &mut state, lr, sgd.momentum, sgd.weight_decay, sgd.clip).map_err(|e| {
                let name = &model.store.params()[e.param].name;
                non_finite(format!("gradient of `{name}`"))
            })?;
            losses.push(loss);
        }
        let val_metrics = pool.install(|| evaluate(&model, val, &config.decode, config.tolerance))?;
        let row = EpochLog {
            fold,
            epoch,
            train_loss: median(&mut losses),
            val: val_metrics,
            lr,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().is_none_or(|b| val_metrics.f1 > b.1.f1) {
            best = Some((epoch, val_metrics, model.clone()));
        }
    }
    let (best_epoch, best, model) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        best_epoch,
        best,
        model,
        log,
        train_ids: songs.into_iter().map(|s| s.id).collect(),
        val_ids: val.iter().map(|s| s.id.clone()).collect(),
        train_sequences: examples.len(),
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Mean loss and mean gradient over the sequences `idx`.
fn batch_gradients(
    model: &Model<f32>,
    config: &RunConfig,
    examples: &[(Tensor<f32>, LabelSequence)],
    idx: &[usize],
    seed: u64,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let parts = idx
        .par_chunks(config.micro_batch)
        .enumerate()
        .map(|(m, micro)| {
            let mut loss = 0.0;
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            for (k, &i) in micro.iter().enumerate() {
                let (x, y) = &examples[i];
                let g = Graph::new();
                let ctx = model.bind(&g, true, derive_seed(&[seed, m as u64, k as u64]));
                let out = model.forward(&ctx, g.constant(x.clone()))?;
                let l = model.loss(&ctx, out, y, config.loss)?;
                loss += g.value(l).item() as f64;
                let grads = g.backward(l).map_err(ModelError::from)?;
                let grads = model.store.gradients(&ctx, &grads);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => add_into(acc, &grads),
                }
            }
            Ok((loss, sum.expect("micro-batch is not empty")))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("batch is not empty");
    for (l, g) in parts {
        loss += l;
        add_into(&mut grads, &g);
    }
    let inv = 1.0 / idx.len() as f32;
    for t in &mut grads {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss / idx.len() as f64, grads))
}

fn add_into(acc: &mut [Tensor<f32>], other: &[Tensor<f32>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{Note, PhraseSpan};

    #[test]
    fn folds_partition_songs() {
        let f = fold_split(23, 5, 3);
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(f.iter().all(|v| v.len() == 4 || v.len() == 5));
        assert_eq!(f, fold_split(23, 5, 3));
        assert_ne!(f, fold_split(23, 5, 4));
    }

    fn toy_corpus(n: usize) -> Vec<Song> {
        (0..n)
            .map(|s| {
                let mut notes = Vec::new();
                let mut phrases = Vec::new();
                for p in 0..4 {
                    let len = 4 + (s + p) % 3;
                    let start = notes.len();
                    for i in 0..len {
                        let rest = if i + 1 == len { 1.0 } else { 0.0 };
                        notes.push(Note::new(60 + ((i * 5 + s) % 12) as u8, 0.5, rest));
                    }
                    phrases.push(PhraseSpan::new(start, notes.len()));
                }
                Song::new(format!("t{s}"), notes, phrases).unwrap()
            })
            .collect()
    }

    #[test]
    fn same_result_for_any_worker_count() {
        let mut c = RunConfig::preset("smoke-cnn-crf").unwrap();
        c.epochs = 2;
        c.micro_batch = 2;
        let corpus = toy_corpus(10);
        let a = train(&c, &corpus, 1, |_| {}).unwrap();
        let b = train(&c, &corpus, 3, |_| {}).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.log, y.log);
            for (p, q) in x.model.store.params().iter().zip(y.model.store.params()) {
                assert_eq!(p.value, q.value);
            }
        }
    }

    #[test]
    fn no_leakage_and_augmentation_size() {
        let mut c = RunConfig::preset("smoke-cnn").unwrap();
        c.epochs = 1;
        c.augment = true;
        c.augment_plan = crate::augment::AugmentPlan::parse("0,1", "0", "0,0.5").unwrap();
        let corpus = toy_corpus(10);
        let folds = train(&c, &corpus, 2, |_| {}).unwrap();
        for f in &folds {
            assert_eq!(f.train_ids.len(), 4 * (10 - f.val_ids.len()));
            for id in &f.train_ids {
                let base = id.split('+').next().unwrap();
                assert!(!f.val_ids.iter().any(|v| v == base));
            }
        }
    }

    #[test]
    fn nan_aborts() {
        let mut c = RunConfig::preset("smoke-cnn").unwrap();
        c.sgd.lr = 1e30;
        c.sgd.clip = 1e30;
        c.epochs = 3;
        let err = train(&c, &toy_corpus(10), 1, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }
}
