//! Property tests over randomly generated songs, label paths and tensors.

use std::collections::BTreeSet;

use melseg::augment::{augment, AugmentPlan};
use melseg::checkpoint;
use melseg::crf::{CrfScores, Legality};
use melseg::evaluator::match_boundaries;
use melseg::labeling::{boundaries_from_ascend, boundaries_from_binary, boundaries_from_expdecay, LabelScheme};
use melseg::models::{Model, ModelKind, ModelSpec};
use melseg::nn::ParamStore;
use melseg::score::{boundary_set, parse_line, song_to_line, Note, PhraseSpan, Song};
use melseg::tensor::{Graph, Tensor};
use melseg::trainer::{chop_crf, chop_lstm, pad_song_repeat, sgd_step, SgdState};
use proptest::prelude::*;

/// Songs of whole phrases (2..=49 notes), each optionally preceded by up to
/// two unannotated gap notes.
fn song(max_phrases: usize, gaps: bool) -> impl Strategy<Value = Song> {
    let gap = if gaps { 0..3usize } else { 0..1usize };
    prop::collection::vec((gap, 2..50usize), 1..max_phrases).prop_flat_map(|parts| {
        let n: usize = parts.iter().map(|(g, l)| g + l).sum();
        let notes = prop::collection::vec((30u8..100, 0usize..4, 0usize..4), n.max(2));
        (Just(parts), notes).prop_map(|(parts, raw)| {
            let notes: Vec<Note> = raw
                .into_iter()
                .map(|(p, d, r)| Note::new(p, [0.25, 0.5, 1.0, 2.0][d], [0.0, 0.0, 0.5, 1.0][r]))
                .collect();
            let mut phrases = Vec::new();
            let mut at = 0;
            for (g, l) in parts {
                at += g;
                phrases.push(PhraseSpan::new(at, at + l));
                at += l;
            }
            Song::new("p", notes, phrases).unwrap()
        })
    })
}

fn covers(chunks: &[(usize, usize)], n: usize) -> bool {
    let mut at = 0;
    for &(offset, len) in chunks {
        if offset != at {
            return false;
        }
        at += len;
    }
    at == n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_line_roundtrip(s in song(12, true)) {
        prop_assert_eq!(parse_line(&song_to_line(&s), 1).unwrap(), s);
    }

    #[test]
    fn binary_and_ascend_roundtrip(s in song(12, true)) {
        let gold = boundary_set(&s);
        let b = LabelScheme::Binary.encode(&s).unwrap();
        prop_assert_eq!(boundaries_from_binary(&b.values, 0.5), gold.clone());
        let a = LabelScheme::ascend().encode(&s).unwrap();
        prop_assert_eq!(boundaries_from_ascend(&a.classes()).unwrap(), gold);
    }

    #[test]
    fn expdecay_roundtrip_without_gaps(s in song(12, false)) {
        let e = LabelScheme::ExpDecay.encode(&s).unwrap();
        prop_assert_eq!(boundaries_from_expdecay(&e.values, 0.7), boundary_set(&s));
    }

    #[test]
    fn ascend_labels_are_legal_paths(s in song(12, true)) {
        let a = LabelScheme::ascend().encode(&s).unwrap();
        let legality = Legality::ascend(49, 2).unwrap();
        prop_assert!(legality.is_legal(&a.classes()));
    }

    #[test]
    fn viterbi_paths_are_legal(
        m in 2usize..7,
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 7), 1..30),
    ) {
        let legality = Legality::ascend(m, 2).unwrap();
        let k = m + 1;
        let data: Vec<f64> = rows.iter().flat_map(|r| r[..k].to_vec()).collect();
        let emissions = Tensor::new(vec![rows.len(), k], data).unwrap();
        let best = CrfScores::from_legality(&legality).viterbi(&emissions).unwrap();
        prop_assert_eq!(best.labels.len(), rows.len());
        prop_assert!(legality.is_legal(&best.labels));
    }

    #[test]
    fn crf_chunks_tile_the_song(s in song(16, true)) {
        let chunks = chop_crf(&s, 80, 2, 120, LabelScheme::ascend()).unwrap();
        let spans: Vec<(usize, usize)> = chunks.iter().map(|c| (c.offset, c.valid_len)).collect();
        prop_assert!(covers(&spans, s.len()));
        for c in &chunks {
            prop_assert!(c.valid_len < 120);
            prop_assert_eq!(c.t_pad(), 120);
            prop_assert!(c.labels.values[c.valid_len..].iter().all(|&v| v == 0.0));
            // phrases inside a chunk are the song's phrases, shifted
            for p in &c.phrases {
                let orig = PhraseSpan::new(p.start + c.offset, p.end + c.offset);
                prop_assert!(s.phrases.contains(&orig));
            }
        }
        let total: usize = chunks.iter().map(|c| c.phrases.len()).sum();
        prop_assert_eq!(total, s.phrases.len());
    }

    #[test]
    fn lstm_chunks_tile_the_song(s in song(16, true)) {
        let chunks = chop_lstm(&s, 5, 100, LabelScheme::ExpDecay).unwrap();
        let spans: Vec<(usize, usize)> = chunks.iter().map(|c| (c.offset, c.valid_len)).collect();
        prop_assert!(covers(&spans, s.len()));
        for c in &chunks {
            prop_assert!(c.valid_len <= 100 && c.phrases.len() <= 5);
        }
    }

    #[test]
    fn repeat_padding_keeps_the_original_prefix(s in song(10, true)) {
        prop_assume!(s.len() <= 880);
        let c = pad_song_repeat(&s, 880, LabelScheme::Binary).unwrap();
        prop_assert_eq!(c.valid_len, 880);
        let labels = LabelScheme::Binary.encode(&s).unwrap();
        prop_assert_eq!(&c.labels.values[..s.len()], &labels.values[..]);
    }

    #[test]
    fn matching_counts(
        pred in prop::collection::btree_set(0usize..60, 0..20),
        gold in prop::collection::btree_set(0usize..60, 0..20),
    ) {
        let mut last = 0;
        for tol in 0..4 {
            let c = match_boundaries(&pred, &gold, tol);
            prop_assert_eq!(c.tp + c.fp, pred.len());
            prop_assert_eq!(c.tp + c.fn_, gold.len());
            prop_assert!(c.tp >= last);
            last = c.tp;
        }
        let exact: BTreeSet<_> = pred.intersection(&gold).collect();
        prop_assert_eq!(match_boundaries(&pred, &gold, 0).tp, exact.len());
    }

    #[test]
    fn clipping_ignores_gradient_scale(
        g in prop::collection::vec(-3.0f64..3.0, 1..8),
        scale in 1.0f64..50.0,
    ) {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 0.5);
        let clip = norm / 2.0;
        let run = |factor: f64| {
            let mut store = ParamStore::new();
            store.register_fixed("w", Tensor::from_vec(vec![0.0; g.len()]), None).unwrap();
            let grad = Tensor::from_vec(g.iter().map(|v| v * factor).collect());
            let info = sgd_step(&mut store, &[grad], &mut SgdState::default(), 0.1, 0.9, 0.0, clip).unwrap();
            assert!(info.clipped);
            store.params()[0].value.data().to_vec()
        };
        for (a, b) in run(1.0).iter().zip(run(scale)) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn graph_gradients_of_simple_forms(
        a in prop::collection::vec(-2.0f64..2.0, 1..10),
        c in -3.0f64..3.0,
    ) {
        let n = a.len();
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(a.clone()));
        let cx = g.scale(x, c);
        let loss = g.sum(g.add(g.mul(x, x).unwrap(), cx).unwrap());
        let grads = g.backward(loss).unwrap();
        let dx = grads.get(x).unwrap();
        for (d, v) in dx.data().iter().zip(&a) {
            prop_assert!((d - (2.0 * v + c)).abs() < 1e-12);
        }
        // softmax rows are distributions and logsumexp bounds the maximum
        let g = Graph::<f64>::new();
        let row = g.constant(Tensor::new(vec![1, n], a.clone()).unwrap());
        let sm = g.value(g.softmax(row, 1).unwrap());
        prop_assert!((sm.sum() - 1.0).abs() < 1e-12);
        let lse = g.value(g.logsumexp(row, 1).unwrap()).data()[0];
        let max = a.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(lse >= max && lse <= max + (n as f64).ln() + 1e-12);
    }

    #[test]
    fn augmentation_preserves_labels(s in song(6, true), pitch in 0u8..=12, extra in 0.0f64..2.0) {
        let plan = AugmentPlan::new(vec![0, pitch], vec![0.0, extra], vec![0.0, extra]).unwrap();
        let out = augment(std::slice::from_ref(&s), &plan);
        prop_assert_eq!(out.songs.len() + out.skipped * plan.duration_shifts.len() * plan.rest_shifts.len(), plan.factor());
        let want = LabelScheme::ascend().encode(&s).unwrap();
        for v in &out.songs {
            prop_assert_eq!(&LabelScheme::ascend().encode(v).unwrap(), &want);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_roundtrip(kind_ix in 0usize..5, seed in any::<u64>()) {
        let kind = [ModelKind::Cnn, ModelKind::UNet, ModelKind::BiLstmCnn, ModelKind::CnnCrf, ModelKind::BiLstmCrf][kind_ix];
        let scheme = if kind.is_crf() { LabelScheme::ascend() } else { LabelScheme::Binary };
        let mut spec = ModelSpec::new(kind, scheme).unwrap();
        spec.hidden = spec.hidden.min(4);
        spec.depth = spec.depth.min(1);
        spec.channels = spec.channels.iter().map(|c| (*c).min(4)).collect();
        let model = Model::<f32>::new(spec, seed).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&model)).unwrap();
        prop_assert_eq!(&back.spec, &model.spec);
        for (p, q) in back.store.params().iter().zip(model.store.params()) {
            prop_assert_eq!(&p.value, &q.value);
        }
    }
}
