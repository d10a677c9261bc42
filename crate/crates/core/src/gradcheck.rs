//! Central finite-difference checks of the analytic gradients, in `f64`.
//!
//! [`check`] differentiates a scalar function of some input tensors both
//! ways and reports the worst relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
//! [`cases`] lists the built-in suite: every graph primitive, the layers,
//! the models and the losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{self, CrfError, Legality};
use crate::labeling::{LabelScheme, LabelSequence};
use crate::losses::{self, LossConfig, LossKind};
use crate::models::{Model, ModelError, ModelKind, ModelSpec};
use crate::nn::{BiLstmLayer, Conv1dLayer, Init, Linear, LstmCell, ParamStore};
use crate::tensor::{Graph, PadMode, Tensor, TensorError, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor: gradients much smaller than this are compared
/// absolutely, since the central difference cannot resolve them relatively.
pub const REL_FLOOR: f64 = 1e-3;
/// Entries checked per input tensor (evenly spaced when larger).
pub const MAX_ENTRIES: usize = 48;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn picks(n: usize) -> Vec<usize> {
    if n <= MAX_ENTRIES {
        (0..n).collect()
    } else {
        (0..MAX_ENTRIES).map(|i| i * (n - 1) / (MAX_ENTRIES - 1)).collect()
    }
}

/// Checks `f` with respect to every input. `f` must be deterministic: it is
/// re-run on a fresh graph for every perturbation.
pub fn check<E: From<TensorError>>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var, E>,
) -> Result<CheckResult, E> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone(), false)).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let mut result = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut values = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in picks(inputs[i].len()) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - STEP;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            result.entries += 1;
            if rel > result.max_rel_error || result.entries == 1 {
                result.max_rel_error = rel;
                result.worst = (i, j);
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    Ok(result)
}

/// Random tensor with entries in `[-1, 1)`.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_in(shape, seed, -1.0, 1.0)
}

fn random_in(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Entries bounded away from zero, for checks through kinks at 0.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `sum(x * r)` for a fixed random `r`: a scalar that depends on every
/// entry of `x` with a different weight.
pub fn project(g: &Graph<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let r = g.constant(random(&g.shape(x), seed ^ 0x9e37_79b9));
    Ok(g.sum(g.mul(x, r)?))
}

type Case = (&'static str, fn() -> Result<CheckResult, GradError>);

macro_rules! unary_case {
    ($name:literal, $shape:expr, |$g:ident, $x:ident| $body:expr) => {
        ($name, || {
            check($name, &[random(&$shape, 1)], |$g: &Graph<f64>, v: &[Var]| -> Result<Var, GradError> {
                let $x = v[0];
                let y = $body;
                Ok(project($g, y, 2)?)
            })
        })
    };
}

fn model_case(name: &str, spec: ModelSpec, t_len: usize, loss: LossConfig) -> Result<CheckResult, GradError> {
    let model = Model::<f64>::new(spec, 5)?;
    let x = random(&[t_len, 3], 6);
    let labels = synthetic_labels(model.spec.scheme, t_len);
    // random biases too: zero biases behind dead ReLUs put pre-activations
    // exactly on the kink
    let inputs: Vec<Tensor<f64>> = model
        .store
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| match p.init {
            Init::Fixed => p.value.as_ref().clone(),
            _ => random(p.value.shape(), 100 + i as u64),
        })
        .collect();
    check(name, &inputs, |g, vars| -> Result<Var, GradError> {
        let ctx = model.store.bind_leaves(g, vars, false, 0);
        let xv = g.constant(x.clone());
        let out = model.forward(&ctx, xv)?;
        Ok(model.loss(&ctx, out, &labels, loss)?)
    })
}

/// Labels of a song cut into phrases of 3 notes.
fn synthetic_labels(scheme: LabelScheme, t_len: usize) -> LabelSequence {
    let mut values = (0..t_len)
        .map(|t| {
            let p = t % 3;
            let last = p == 2 || t + 1 == t_len;
            match scheme {
                LabelScheme::Binary => f64::from(u8::from(last && p >= 1)),
                LabelScheme::ExpDecay => crate::labeling::expdecay_value(p, 3),
                LabelScheme::Ascend { .. } => (p + 1) as f64,
            }
        })
        .collect::<Vec<_>>();
    // make sure the final phrase is at least two notes long
    if let (LabelScheme::Ascend { .. }, Some(&1.0)) = (scheme, values.last()) {
        let n = values.len();
        values[n - 1] = 0.0;
    }
    LabelSequence { scheme, values }
}

fn tiny(kind: ModelKind, scheme: LabelScheme) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, scheme).expect("valid pair");
    match kind {
        ModelKind::Cnn => spec.channels = vec![2, 3, 2, 2, 2],
        ModelKind::UNet => spec.channels = vec![2; 5],
        ModelKind::CnnCrf => spec.channels = vec![3],
        ModelKind::BiLstmCnn | ModelKind::BiLstmCrf => {
            spec.channels = vec![3, 3, 3];
            spec.hidden = 4;
            spec.depth = 1;
        }
    }
    spec
}

/// The full suite, cheapest first.
pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", || {
            check("matmul", &[random(&[3, 4], 1), random(&[4, 2], 2)], |g, v| -> Result<Var, GradError> {
                Ok(project(g, g.matmul(v[0], v[1])?, 3)?)
            })
        }),
        ("add-broadcast", || {
            check("add-broadcast", &[random(&[3, 4], 1), random(&[4], 2)], |g, v| -> Result<Var, GradError> {
                let a = g.add(v[0], v[1])?;
                let b = g.add(v[1], v[0])?;
                Ok(project(g, g.mul(a, b)?, 3)?)
            })
        }),
        ("sub", || {
            check("sub", &[random(&[2, 3], 1), random(&[3], 2)], |g, v| -> Result<Var, GradError> {
                let a = g.sub(v[0], v[1])?;
                let b = g.sub(v[1], v[0])?;
                Ok(project(g, g.mul(a, g.tanh(b))?, 3)?)
            })
        }),
        ("mul-broadcast", || {
            check("mul-broadcast", &[random(&[2, 3, 2], 1), random(&[3, 2], 2)], |g, v| -> Result<Var, GradError> {
                let a = g.mul(v[0], v[1])?;
                let b = g.mul(v[1], a)?;
                Ok(project(g, b, 3)?)
            })
        }),
        unary_case!("scale", [5], |g, x| g.scale(x, -2.5)),
        unary_case!("sigmoid", [6], |g, x| g.sigmoid(g.scale(x, 4.0))),
        unary_case!("tanh", [6], |g, x| g.tanh(g.scale(x, 2.0))),
        ("relu", || {
            check("relu", &[away_from_zero(&[8], 1)], |g, v| -> Result<Var, GradError> {
                Ok(project(g, g.relu(v[0]), 2)?)
            })
        }),
        unary_case!("softmax-rows", [3, 4], |g, x| g.softmax(x, 1)?),
        unary_case!("softmax-cols", [3, 4], |g, x| g.softmax(x, 0)?),
        unary_case!("log-softmax", [3, 4], |g, x| g.log_softmax(x, 1)?),
        unary_case!("logsumexp", [2, 3, 4], |g, x| g.logsumexp(x, 1)?),
        unary_case!("transpose", [3, 5], |g, x| g.transpose(x)?),
        unary_case!("reshape", [3, 4], |g, x| g.reshape(x, &[2, 6])?),
        unary_case!("slice", [4, 5], |g, x| g.slice(x, 1, 1..4)?),
        ("concat", || {
            check("concat", &[random(&[2, 3], 1), random(&[2, 2], 2)], |g, v| -> Result<Var, GradError> {
                let c = g.concat(&[v[0], v[1], v[0]], 1)?;
                Ok(project(g, c, 3)?)
            })
        }),
        ("conv1d-causal", || {
            let inputs = [random(&[2, 7], 1), random(&[3, 2, 4], 2), random(&[3], 3)];
            check("conv1d-causal", &inputs, |g, v| -> Result<Var, GradError> {
                Ok(project(g, g.conv1d(v[0], v[1], v[2], PadMode::Causal)?, 4)?)
            })
        }),
        ("conv1d-same", || {
            let inputs = [random(&[2, 7], 1), random(&[3, 2, 5], 2), random(&[3], 3)];
            check("conv1d-same", &inputs, |g, v| -> Result<Var, GradError> {
                Ok(project(g, g.conv1d(v[0], v[1], v[2], PadMode::Same)?, 4)?)
            })
        }),
        unary_case!("maxpool1d", [2, 8], |g, x| g.maxpool1d(x, 2)?),
        unary_case!("upsample1d", [2, 3], |g, x| g.upsample1d(x, 2)?),
        unary_case!("sum", [4], |g, x| g.sum(g.mul(x, x)?)),
        unary_case!("mean", [4], |g, x| g.mean(g.mul(x, x)?)),
        ("dropout", || {
            check("dropout", &[random(&[3, 4], 1)], |g, v| -> Result<Var, GradError> {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                Ok(project(g, g.dropout(v[0], 0.5, true, &mut rng)?, 2)?)
            })
        }),
        ("conv-layer", || {
            let mut store = ParamStore::<f64>::new();
            let causal = Conv1dLayer::new(&mut store, "a", 2, 3, 3, PadMode::Causal).expect("fresh store");
            let same = Conv1dLayer::new(&mut store, "b", 3, 2, 3, PadMode::Same).expect("fresh store");
            store.init(4);
            let mut inputs: Vec<_> = store.params().iter().map(|p| p.value.as_ref().clone()).collect();
            inputs.push(random(&[2, 6], 5));
            check("conv-layer", &inputs, |g, v| -> Result<Var, GradError> {
                let ctx = store.bind_leaves(g, &v[..4], false, 0);
                let h = g.tanh(causal.forward(&ctx, v[4])?);
                Ok(project(g, same.forward(&ctx, h)?, 6)?)
            })
        }),
        ("linear", || {
            let mut store = ParamStore::<f64>::new();
            let lin = Linear::new(&mut store, "l", 3, 2).expect("fresh store");
            store.init(4);
            let mut inputs: Vec<_> = store.params().iter().map(|p| random(p.value.shape(), 7)).collect();
            inputs.push(random(&[4, 3], 5));
            check("linear", &inputs, |g, v| -> Result<Var, GradError> {
                let ctx = store.bind_leaves(g, &v[..2], false, 0);
                Ok(project(g, lin.forward(&ctx, v[2])?, 6)?)
            })
        }),
        ("lstm-3-steps", || {
            let mut store = ParamStore::<f64>::new();
            let cell = LstmCell::new(&mut store, "l", 2, 3).expect("fresh store");
            let n = store.len();
            // biases random too, so every parameter is exercised
            let mut inputs: Vec<_> = (0..n).map(|i| random(store.params()[i].value.shape(), 20 + i as u64)).collect();
            inputs.push(random(&[3, 2], 5));
            check("lstm-3-steps", &inputs, |g, v| -> Result<Var, GradError> {
                let ctx = store.bind_leaves(g, &v[..n], false, 0);
                let zero = g.constant(Tensor::zeros(&[1, 3]));
                let (mut h, mut c) = (zero, zero);
                for t in 0..3 {
                    let x_t = g.slice(v[n], 0, t..t + 1)?;
                    (h, c) = cell.step(&ctx, x_t, h, c)?;
                }
                let hc = g.concat(&[h, c], 1)?;
                Ok(project(g, hc, 6)?)
            })
        }),
        ("bilstm", || {
            let mut store = ParamStore::<f64>::new();
            let layer = BiLstmLayer::new(&mut store, "bi", 2, 3).expect("fresh store");
            let n = store.len();
            let mut inputs: Vec<_> = (0..n).map(|i| random(store.params()[i].value.shape(), 40 + i as u64)).collect();
            inputs.push(random(&[4, 2], 5));
            check("bilstm", &inputs, |g, v| -> Result<Var, GradError> {
                let ctx = store.bind_leaves(g, &v[..n], false, 0);
                Ok(project(g, layer.forward(&ctx, v[n])?, 6)?)
            })
        }),
        ("weighted-bce", || {
            let targets = [1.0, 0.0, 0.0, 1.0, 0.0];
            check("weighted-bce", &[random(&[5, 2], 1)], |g, v| -> Result<Var, GradError> {
                let p = g.softmax(g.scale(v[0], 2.0), 1)?;
                Ok(losses::weighted_bce(g, p, &targets, 2.0)?)
            })
        }),
        ("penalized-mse", || {
            // residuals kept clear of the |d| = 1 kink
            let targets = [1.0, 0.5, 0.25, 0.125, 1.0, 0.0];
            let pred = Tensor::from_vec(vec![0.7, 0.9, 1.6, -0.5, 2.4, 0.3]);
            check("penalized-mse", &[pred], |g, v| -> Result<Var, GradError> {
                Ok(losses::penalized_mse(g, v[0], &targets, 4.0)?)
            })
        }),
        ("plain-mse", || {
            let targets = [1.0, 0.5, 0.25, 0.0];
            check("plain-mse", &[random(&[4], 1)], |g, v| -> Result<Var, GradError> {
                Ok(losses::plain_mse(g, v[0], &targets)?)
            })
        }),
        ("crf-nll", || {
            let legality = Legality::ascend(4, 2).expect("valid");
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut scores = crf::CrfScores::from_legality(&legality);
            for table in [&mut scores.trans, &mut scores.start, &mut scores.end] {
                for v in table.iter_mut().filter(|v| **v == 0.0) {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            let emissions = random(&[6, 5], 4);
            let gold = [1, 2, 0, 1, 2, 3];
            let inputs = [
                Tensor::new(vec![5, 5], scores.trans.clone())?,
                Tensor::from_vec(scores.start.clone()),
                Tensor::from_vec(scores.end.clone()),
                emissions,
            ];
            check("crf-nll", &inputs, |g, v| -> Result<Var, GradError> {
                let z = crf::log_partition(g, v[0], v[1], v[2], v[3])?;
                let s = crf::gold_score(g, v[0], v[1], v[2], v[3], &gold)?;
                Ok(g.sub(z, s)?)
            })
        }),
        ("model-cnn", || model_case("model-cnn", tiny(ModelKind::Cnn, LabelScheme::Binary), 9, LossConfig::new(LossKind::WeightedBce))),
        ("model-unet", || model_case("model-unet", tiny(ModelKind::UNet, LabelScheme::Binary), 16, LossConfig::new(LossKind::WeightedBce))),
        ("model-bilstm-cnn", || {
            model_case("model-bilstm-cnn", tiny(ModelKind::BiLstmCnn, LabelScheme::ExpDecay), 6, LossConfig::new(LossKind::PlainMse))
        }),
        ("model-cnn-crf", || {
            let mut spec = tiny(ModelKind::CnnCrf, LabelScheme::Ascend { max: 4 });
            spec.depth = 1;
            model_case("model-cnn-crf", spec, 7, LossConfig::new(LossKind::CrfNll))
        }),
        ("model-bilstm-crf", || {
            model_case("model-bilstm-crf", tiny(ModelKind::BiLstmCrf, LabelScheme::Ascend { max: 4 }), 6, LossConfig::new(LossKind::CrfNll))
        }),
    ]
}

/// Runs every case whose name contains `filter`.
pub fn run_suite(filter: Option<&str>) -> Vec<(&'static str, Result<CheckResult, GradError>)> {
    cases()
        .into_iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, run)| (name, run()))
        .collect()
}
