//! Linear-chain CRF over per-note emission scores.
//!
//! Labels are `0..k`. Transition scores are stored as `trans[prev * k + next]`.
//! Illegal transitions, starts and ends hold [`NEG_LARGE`] and are frozen, so
//! no legal path ever competes with an illegal one.
//!
//! The log-partition and NLL are built from graph primitives and are
//! therefore differentiable; Viterbi and the brute-force oracle work on plain
//! `f64` tables.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Ctx, NnError, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Score of every illegal transition, start or end.
pub const NEG_LARGE: f64 = -1e9;
/// Largest instance [`CrfScores::brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CrfError {
    #[error("minimum phrase length {min_len} must lie in 1..={max}")]
    MinLen { min_len: usize, max: usize },
    #[error("label {label} outside 0..{k}")]
    LabelRange { label: usize, k: usize },
    #[error("illegal transition {prev} -> {next} at position {index}")]
    Illegal { index: usize, prev: usize, next: usize },
    #[error("path has {got} labels, emissions have {expected} rows")]
    Length { expected: usize, got: usize },
    #[error("emissions must be [T x {k}] with T >= 1, got {shape:?}")]
    Emissions { k: usize, shape: Vec<usize> },
    #[error("{paths} paths exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")]
    TooLarge { paths: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which transitions, first labels and last labels a path may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legality {
    k: usize,
    trans: Vec<bool>,
    start: Vec<bool>,
    end: Vec<bool>,
}

impl Legality {
    /// Position labels `0..=m`: 0 marks notes outside phrases, `p` the
    /// `p`-th note of a phrase. Inside a phrase labels count up by one; a
    /// phrase may end only after `min_len` notes.
    pub fn ascend(m: usize, min_len: usize) -> Result<Self, CrfError> {
        if min_len == 0 || min_len > m {
            return Err(CrfError::MinLen { min_len, max: m });
        }
        let k = m + 1;
        let mut trans = vec![false; k * k];
        trans[0] = true;
        trans[1] = true;
        for p in 1..=m {
            if p < m {
                trans[p * k + p + 1] = true;
            }
            if p >= min_len {
                trans[p * k] = true;
                trans[p * k + 1] = true;
            }
        }
        let start = (0..k).map(|y| y <= 1).collect();
        let end = (0..k).map(|y| y == 0 || y >= min_len).collect();
        Ok(Legality { k, trans, start, end })
    }

    /// Two labels, 1 marking a boundary: everything is allowed except two
    /// boundaries in a row.
    pub fn binary() -> Self {
        Legality {
            k: 2,
            trans: vec![true, true, true, false],
            start: vec![true; 2],
            end: vec![true; 2],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn allowed(&self, prev: usize, next: usize) -> bool {
        self.trans[prev * self.k + next]
    }

    pub fn can_start(&self, y: usize) -> bool {
        self.start[y]
    }

    pub fn can_end(&self, y: usize) -> bool {
        self.end[y]
    }

    /// First rule a path breaks, if any. Bad first labels are reported with
    /// `index == 0`, bad last labels with `index == len`.
    pub fn check(&self, labels: &[usize]) -> Result<(), CrfError> {
        if let Some(&label) = labels.iter().find(|&&y| y >= self.k) {
            return Err(CrfError::LabelRange { label, k: self.k });
        }
        let (Some(&first), Some(&last)) = (labels.first(), labels.last()) else {
            return Ok(());
        };
        if !self.can_start(first) {
            return Err(CrfError::Illegal {
                index: 0,
                prev: first,
                next: first,
            });
        }
        for (i, w) in labels.windows(2).enumerate() {
            if !self.allowed(w[0], w[1]) {
                return Err(CrfError::Illegal {
                    index: i + 1,
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        if !self.can_end(last) {
            return Err(CrfError::Illegal {
                index: labels.len(),
                prev: last,
                next: last,
            });
        }
        Ok(())
    }

    pub fn is_legal(&self, labels: &[usize]) -> bool {
        self.check(labels).is_ok()
    }

    /// Frozen-entry masks (true = frozen) for transitions, starts and ends.
    pub fn frozen_masks(&self) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
        let inv = |v: &[bool]| v.iter().map(|&b| !b).collect();
        (inv(&self.trans), inv(&self.start), inv(&self.end))
    }
}

/// A decoded label path with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct PathScore {
    pub labels: Vec<usize>,
    pub score: f64,
}

/// Plain CRF parameter tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfScores {
    pub k: usize,
    pub trans: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfScores {
    /// Zero on legal entries, [`NEG_LARGE`] elsewhere.
    pub fn from_legality(legality: &Legality) -> Self {
        let fill = |ok: &[bool]| ok.iter().map(|&b| if b { 0.0 } else { NEG_LARGE }).collect();
        CrfScores {
            k: legality.k,
            trans: fill(&legality.trans),
            start: fill(&legality.start),
            end: fill(&legality.end),
        }
    }

    fn rows(&self, emissions: &Tensor<f64>) -> Result<usize, CrfError> {
        let s = emissions.shape();
        if s.len() != 2 || s[1] != self.k || s[0] == 0 {
            return Err(CrfError::Emissions {
                k: self.k,
                shape: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    pub fn path_score(&self, emissions: &Tensor<f64>, labels: &[usize]) -> Result<f64, CrfError> {
        let t = self.rows(emissions)?;
        if labels.len() != t {
            return Err(CrfError::Length {
                expected: t,
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.k) {
            return Err(CrfError::LabelRange { label, k: self.k });
        }
        let mut s = self.start[labels[0]] + self.end[labels[t - 1]];
        for (i, &y) in labels.iter().enumerate() {
            s += emissions.at(i, y);
        }
        for w in labels.windows(2) {
            s += self.trans[w[0] * self.k + w[1]];
        }
        Ok(s)
    }

    /// Best path by max-product recursion; ties go to the smaller label.
    pub fn viterbi(&self, emissions: &Tensor<f64>) -> Result<PathScore, CrfError> {
        let t_len = self.rows(emissions)?;
        let k = self.k;
        let mut delta: Vec<f64> = (0..k).map(|y| self.start[y] + emissions.at(0, y)).collect();
        let mut back = vec![0usize; t_len * k];
        let mut next = vec![0.0; k];
        for t in 1..t_len {
            for y in 0..k {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (p, &d) in delta.iter().enumerate() {
                    let s = d + self.trans[p * k + y];
                    if s > best {
                        best = s;
                        arg = p;
                    }
                }
                next[y] = best + emissions.at(t, y);
                back[t * k + y] = arg;
            }
            std::mem::swap(&mut delta, &mut next);
        }
        let (mut best, mut y) = (f64::NEG_INFINITY, 0);
        for (label, &d) in delta.iter().enumerate() {
            let s = d + self.end[label];
            if s > best {
                best = s;
                y = label;
            }
        }
        let mut labels = vec![0; t_len];
        labels[t_len - 1] = y;
        for t in (1..t_len).rev() {
            y = back[t * k + y];
            labels[t - 1] = y;
        }
        Ok(PathScore { labels, score: best })
    }

    /// Forward recursion in plain `f64`.
    pub fn log_partition(&self, emissions: &Tensor<f64>) -> Result<f64, CrfError> {
        let t_len = self.rows(emissions)?;
        let k = self.k;
        let mut alpha: Vec<f64> = (0..k).map(|y| self.start[y] + emissions.at(0, y)).collect();
        for t in 1..t_len {
            alpha = (0..k)
                .map(|y| lse((0..k).map(|p| alpha[p] + self.trans[p * k + y])) + emissions.at(t, y))
                .collect();
        }
        Ok(lse(alpha.iter().zip(&self.end).map(|(a, e)| a + e)))
    }

    /// Enumerates every label path. Returns `(logZ, best path)`; the best
    /// path is the lexicographically first among ties.
    pub fn brute_force(&self, emissions: &Tensor<f64>) -> Result<(f64, PathScore), CrfError> {
        let t_len = self.rows(emissions)?;
        let paths = (self.k as f64).powi(t_len as i32);
        if paths > BRUTE_FORCE_LIMIT as f64 {
            return Err(CrfError::TooLarge { paths });
        }
        let mut labels = vec![0usize; t_len];
        let mut scores = Vec::with_capacity(paths as usize);
        let mut best = PathScore {
            labels: labels.clone(),
            score: f64::NEG_INFINITY,
        };
        loop {
            let s = self.path_score(emissions, &labels)?;
            if s > best.score {
                best = PathScore {
                    labels: labels.clone(),
                    score: s,
                };
            }
            scores.push(s);
            // odometer, last position fastest
            let mut pos = t_len;
            loop {
                if pos == 0 {
                    return Ok((lse(scores.into_iter()), best));
                }
                pos -= 1;
                labels[pos] += 1;
                if labels[pos] < self.k {
                    break;
                }
                labels[pos] = 0;
            }
        }
    }
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_emissions<F: Scalar>(g: &Graph<F>, emissions: Var, k: usize) -> Result<usize, CrfError> {
    let s = g.shape(emissions);
    if s.len() != 2 || s[1] != k || s[0] == 0 {
        return Err(CrfError::Emissions { k, shape: s });
    }
    Ok(s[0])
}

/// `logZ` via the forward recursion
/// `alpha_t[y] = e_t[y] + logsumexp_p(alpha_{t-1}[p] + trans[p][y])`,
/// recorded on the graph. `trans: [k x k]`, `start, end: [k]`,
/// `emissions: [T x k]`.
pub fn log_partition<F: Scalar>(
    g: &Graph<F>,
    trans: Var,
    start: Var,
    end: Var,
    emissions: Var,
) -> Result<Var, CrfError> {
    let k = g.shape(start)[0];
    let t_len = check_emissions(g, emissions, k)?;
    let row = |t: usize| -> Result<Var, TensorError> { g.reshape(g.slice(emissions, 0, t..t + 1)?, &[k]) };
    // transT[y][p] = trans[p][y], so adding alpha along the last axis lines
    // up the previous label with alpha
    let trans_t = g.transpose(trans)?;
    let mut alpha = g.add(start, row(0)?)?;
    for t in 1..t_len {
        let scores = g.add(trans_t, alpha)?;
        alpha = g.add(g.logsumexp(scores, 1)?, row(t)?)?;
    }
    Ok(g.logsumexp(g.add(alpha, end)?, 0)?)
}

/// Score of a fixed path, recorded on the graph through count masks.
pub fn gold_score<F: Scalar>(
    g: &Graph<F>,
    trans: Var,
    start: Var,
    end: Var,
    emissions: Var,
    labels: &[usize],
) -> Result<Var, CrfError> {
    let k = g.shape(start)[0];
    let t_len = check_emissions(g, emissions, k)?;
    if labels.len() != t_len {
        return Err(CrfError::Length {
            expected: t_len,
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(CrfError::LabelRange { label, k });
    }
    let mut emit = Tensor::<F>::zeros(&[t_len, k]);
    for (t, &y) in labels.iter().enumerate() {
        emit.data_mut()[t * k + y] = F::one();
    }
    let mut counts = Tensor::<F>::zeros(&[k, k]);
    for w in labels.windows(2) {
        counts.data_mut()[w[0] * k + w[1]] += F::one();
    }
    let one_hot = |y: usize| {
        let mut v = Tensor::<F>::zeros(&[k]);
        v.data_mut()[y] = F::one();
        g.constant(v)
    };
    let weighted = |x: Var, mask: Var| -> Result<Var, TensorError> { Ok(g.sum(g.mul(x, mask)?)) };
    let e = weighted(emissions, g.constant(emit))?;
    let tr = weighted(trans, g.constant(counts))?;
    let s = weighted(start, one_hot(labels[0]))?;
    let en = weighted(end, one_hot(labels[t_len - 1]))?;
    Ok(g.add(g.add(e, tr)?, g.add(s, en)?)?)
}

/// CRF parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CrfLayer {
    pub legality: Legality,
    pub trans: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfLayer {
    /// Registers the tables: zero on legal entries, [`NEG_LARGE`] and frozen
    /// elsewhere.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, legality: Legality) -> Result<Self, NnError> {
        let k = legality.k;
        let init = CrfScores::from_legality(&legality);
        let (ft, fs, fe) = legality.frozen_masks();
        let t = |shape: &[usize], v: &[f64]| Tensor::<F>::from_f64(shape, v).expect("table shape");
        let trans = store.register_fixed(format!("{name}.trans"), t(&[k, k], &init.trans), Some(ft))?;
        let start = store.register_fixed(format!("{name}.start"), t(&[k], &init.start), Some(fs))?;
        let end = store.register_fixed(format!("{name}.end"), t(&[k], &init.end), Some(fe))?;
        Ok(CrfLayer {
            legality,
            trans,
            start,
            end,
        })
    }

    pub fn k(&self) -> usize {
        self.legality.k
    }

    /// Current tables as `f64`, for decoding.
    pub fn scores<F: Scalar>(&self, store: &ParamStore<F>) -> CrfScores {
        let v = |id: ParamId| store.get(id).value.to_f64_vec();
        CrfScores {
            k: self.k(),
            trans: v(self.trans),
            start: v(self.start),
            end: v(self.end),
        }
    }

    pub fn log_partition<F: Scalar>(&self, ctx: &Ctx<'_, F>, emissions: Var) -> Result<Var, CrfError> {
        log_partition(ctx.graph, ctx.p(self.trans), ctx.p(self.start), ctx.p(self.end), emissions)
    }

    /// `logZ - score(gold)`. The gold path must be legal.
    pub fn nll<F: Scalar>(&self, ctx: &Ctx<'_, F>, emissions: Var, gold: &[usize]) -> Result<Var, CrfError> {
        self.legality.check(gold)?;
        let g = ctx.graph;
        let log_z = self.log_partition(ctx, emissions)?;
        let gold = gold_score(g, ctx.p(self.trans), ctx.p(self.start), ctx.p(self.end), emissions, gold)?;
        Ok(g.sub(log_z, gold)?)
    }
}

/// Largest deviations seen by [`run_oracle`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub max_log_z_error: f64,
    pub max_viterbi_error: f64,
    pub illegal_paths: usize,
}

impl OracleReport {
    pub fn passed(&self, log_z_tol: f64, viterbi_tol: f64) -> bool {
        self.max_log_z_error <= log_z_tol && self.max_viterbi_error <= viterbi_tol && self.illegal_paths == 0
    }
}

/// A random instance with up to `max_t` steps and up to `max_k` labels
/// (at least 2). Two labels use [`Legality::binary`], more use
/// [`Legality::ascend`] with minimum length 2 (or 1 for three labels).
pub fn random_instance<R: Rng>(rng: &mut R, max_t: usize, max_k: usize) -> (Legality, CrfScores, Tensor<f64>) {
    let t = rng.random_range(1..=max_t);
    let k = rng.random_range(2..=max_k.max(2));
    let legality = match k {
        2 => Legality::binary(),
        3 => Legality::ascend(2, 2).expect("valid"),
        _ => Legality::ascend(k - 1, 2).expect("valid"),
    };
    let mut scores = CrfScores::from_legality(&legality);
    for table in [&mut scores.trans, &mut scores.start, &mut scores.end] {
        for v in table.iter_mut().filter(|v| **v == 0.0) {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    let emissions = (0..t * k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let emissions = Tensor::new(vec![t, k], emissions).expect("shape");
    (legality, scores, emissions)
}

/// Compares the graph log-partition and Viterbi against exhaustive
/// enumeration on `trials` seeded instances.
pub fn run_oracle(trials: usize, seed: u64, max_t: usize, max_k: usize) -> Result<OracleReport, CrfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        trials,
        ..OracleReport::default()
    };
    for _ in 0..trials {
        let (legality, scores, emissions) = random_instance(&mut rng, max_t, max_k);
        let g = Graph::<f64>::new();
        let k = scores.k;
        let trans = g.constant(Tensor::new(vec![k, k], scores.trans.clone())?);
        let start = g.constant(Tensor::from_vec(scores.start.clone()));
        let end = g.constant(Tensor::from_vec(scores.end.clone()));
        let e = g.constant(emissions.clone());
        let log_z = g.value(log_partition(&g, trans, start, end, e)?).item();
        let (brute_z, brute_best) = scores.brute_force(&emissions)?;
        let best = scores.viterbi(&emissions)?;
        report.max_log_z_error = report.max_log_z_error.max((log_z - brute_z).abs());
        report.max_viterbi_error = report.max_viterbi_error.max((best.score - brute_best.score).abs());
        if !legality.is_legal(&best.labels) {
            report.illegal_paths += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascend_legality_m3() {
        let l = Legality::ascend(3, 2).unwrap();
        let mut legal = vec![];
        for p in 0..4 {
            for n in 0..4 {
                if l.allowed(p, n) {
                    legal.push((p, n));
                }
            }
        }
        let mut expect = vec![(0, 0), (0, 1), (1, 2), (2, 3), (2, 1), (2, 0), (3, 1), (3, 0)];
        expect.sort();
        assert_eq!(legal, expect);
        assert!(l.is_legal(&[1, 2, 1, 2]));
        assert!(!l.is_legal(&[1, 1]));
        assert!(!l.is_legal(&[1, 0]));
        assert!(Legality::ascend(1, 2).is_err());
    }

    #[test]
    fn binary_legality_forbids_adjacent_boundaries() {
        let l = Legality::binary();
        assert!(l.is_legal(&[1, 0, 1]));
        assert!(!l.is_legal(&[0, 1, 1]));
    }

    #[test]
    fn zero_instance_log_z() {
        let s = CrfScores {
            k: 2,
            trans: vec![0.0; 4],
            start: vec![0.0; 2],
            end: vec![0.0; 2],
        };
        let e = Tensor::zeros(&[2, 2]);
        assert!((s.log_partition(&e).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(s.path_score(&e, &[1, 0]).unwrap(), 0.0);
        assert_eq!(s.viterbi(&e).unwrap().labels, vec![0, 0]);
        let one = Tensor::zeros(&[1, 2]);
        let (z, best) = s.brute_force(&one).unwrap();
        assert!((z - 2f64.ln()).abs() < 1e-12);
        assert_eq!(best.labels, vec![0]);
    }

    #[test]
    fn single_step_score() {
        let s = CrfScores {
            k: 2,
            trans: vec![0.0; 4],
            start: vec![0.5, 1.0],
            end: vec![0.25, -1.0],
        };
        let e = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(s.path_score(&e, &[1]).unwrap(), 1.0 + 3.0 - 1.0);
    }

    #[test]
    fn viterbi_follows_strong_emissions() {
        let l = Legality::ascend(4, 2).unwrap();
        let s = CrfScores::from_legality(&l);
        let path = [1, 2, 3, 1, 2, 0, 0];
        let mut e = Tensor::zeros(&[path.len(), 5]);
        for (t, &y) in path.iter().enumerate() {
            e.data_mut()[t * 5 + y] = 10.0;
        }
        assert_eq!(s.viterbi(&e).unwrap().labels, path);
        assert_eq!(s.viterbi(&Tensor::zeros(&[4, 5])).unwrap().labels, vec![0; 4]);
    }

    #[test]
    fn oracle_small_batch() {
        let r = run_oracle(30, 7, 6, 5).unwrap();
        assert!(r.passed(1e-8, 1e-9), "{r:?}");
    }

    #[test]
    fn too_large_rejected() {
        let s = CrfScores::from_legality(&Legality::ascend(5, 2).unwrap());
        assert!(matches!(s.brute_force(&Tensor::zeros(&[9, 6])), Err(CrfError::TooLarge { .. })));
    }

    #[test]
    fn nll_basics() {
        let mut store = ParamStore::<f64>::new();
        let crf = CrfLayer::new(&mut store, "crf", Legality::binary()).unwrap();
        let g = Graph::new();
        let ctx = store.bind(&g, false, 0);
        let e = g.constant(Tensor::zeros(&[1, 2]));
        let loss = g.value(crf.nll(&ctx, e, &[0]).unwrap()).item();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        let mut store = ParamStore::<f64>::new();
        let crf = CrfLayer::new(&mut store, "crf", Legality::ascend(4, 2).unwrap()).unwrap();
        let gold = [1, 2, 3, 0, 1, 2];
        let mut em = Tensor::zeros(&[6, 5]);
        for (t, &y) in gold.iter().enumerate() {
            em.data_mut()[t * 5 + y] = 50.0;
        }
        let g = Graph::new();
        let ctx = store.bind(&g, false, 0);
        let e = g.constant(em);
        let loss = g.value(crf.nll(&ctx, e, &gold).unwrap()).item();
        assert!((0.0..=1e-3).contains(&loss), "{loss}");
        assert!(crf.nll(&ctx, e, &[1, 1, 2, 3, 0, 0]).is_err());
    }
}
