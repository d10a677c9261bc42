//! The five architectures and their output heads.
//!
//! Every model maps normalized note features `[T x 3]` to one of three
//! outputs, fixed by the label scheme:
//!
//! | scheme   | non-CRF models            | CRF models              |
//! |----------|---------------------------|-------------------------|
//! | binary   | softmax `[T x 2]`         | emissions `[T x 2]`     |
//! | expdecay | sigmoid `[T]`             | not supported           |
//! | ascend   | not supported             | emissions `[T x (M+1)]` |

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crf::{CrfError, CrfLayer, Legality};
use crate::labeling::{
    boundaries_from_ascend, boundaries_from_binary, boundaries_from_expdecay, LabelError, LabelScheme, LabelSequence,
    DEFAULT_BINARY_THRESHOLD, DEFAULT_PEAK_THRESHOLD,
};
use crate::losses::{penalized_mse, plain_mse, weighted_bce, LossConfig, LossKind};
use crate::nn::{skip_add, BiLstmLayer, Conv1dLayer, Ctx, Linear, NnError, ParamStore};
use crate::score::MIN_PHRASE_LEN;
use crate::tensor::{Graph, PadMode, Scalar, Tensor, TensorError, Var};

/// Note features per time step.
pub const NUM_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{kind} does not support the {scheme} scheme (supported: {supported})")]
    InvalidPair {
        kind: ModelKind,
        scheme: LabelScheme,
        supported: String,
    },
    #[error("{kind} cannot be trained with {loss}")]
    InvalidLoss { kind: ModelKind, loss: &'static str },
    #[error("invalid {kind} configuration: {message}")]
    Config { kind: ModelKind, message: String },
    #[error("unknown model `{0}` (expected cnn, unet, bilstm-cnn, cnn-crf or bilstm-crf)")]
    UnknownKind(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn,
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "bilstm-cnn")]
    BiLstmCnn,
    CnnCrf,
    #[serde(rename = "bilstm-crf")]
    BiLstmCrf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Cnn,
        ModelKind::UNet,
        ModelKind::BiLstmCnn,
        ModelKind::CnnCrf,
        ModelKind::BiLstmCrf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::UNet => "unet",
            ModelKind::BiLstmCnn => "bilstm-cnn",
            ModelKind::CnnCrf => "cnn-crf",
            ModelKind::BiLstmCrf => "bilstm-crf",
        }
    }

    /// Tag byte used in checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Cnn => 1,
            ModelKind::UNet => 2,
            ModelKind::BiLstmCnn => 3,
            ModelKind::CnnCrf => 4,
            ModelKind::BiLstmCrf => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn is_crf(self) -> bool {
        matches!(self, ModelKind::CnnCrf | ModelKind::BiLstmCrf)
    }

    pub fn supports(self, scheme: LabelScheme) -> bool {
        match scheme {
            LabelScheme::Binary => true,
            LabelScheme::ExpDecay => !self.is_crf(),
            LabelScheme::Ascend { .. } => self.is_crf(),
        }
    }

    fn supported_names(self) -> String {
        if self.is_crf() { "binary, ascend" } else { "binary, expdecay" }.to_string()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

/// Architecture hyperparameters. Fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub scheme: LabelScheme,
    /// CNN: output channels per layer. U-net: encoder widths per level.
    /// Bi-LSTM models: channels of the causal feature extractor.
    /// CNN-CRF: a single entry, the channel width of every layer.
    pub channels: Vec<usize>,
    /// CNN kernel sizes, one per layer.
    pub kernels: Vec<usize>,
    /// Hidden size of each LSTM direction.
    pub hidden: usize,
    /// Bi-LSTM layers, or residual conv pairs for CNN-CRF.
    pub depth: usize,
    pub dropout: f64,
    /// Whether Bi-LSTM models run the conv feature extractor first.
    pub use_cnn: bool,
}

impl ModelSpec {
    /// Full-size defaults for `kind`.
    pub fn new(kind: ModelKind, scheme: LabelScheme) -> Result<Self, ModelError> {
        let spec = match kind {
            ModelKind::Cnn => ModelSpec {
                kind,
                scheme,
                channels: vec![16, 32, 32, 32, 32],
                kernels: vec![3, 3, 3, 3, 5],
                hidden: 0,
                depth: 0,
                dropout: 0.0,
                use_cnn: true,
            },
            ModelKind::UNet => ModelSpec {
                kind,
                scheme,
                channels: vec![16, 32, 64, 128, 256],
                kernels: vec![3],
                hidden: 0,
                depth: 0,
                dropout: 0.0,
                use_cnn: true,
            },
            ModelKind::BiLstmCnn | ModelKind::BiLstmCrf => ModelSpec {
                kind,
                scheme,
                channels: vec![32, 32, 32],
                kernels: vec![3],
                hidden: 256,
                depth: 3,
                dropout: 0.5,
                use_cnn: kind == ModelKind::BiLstmCnn,
            },
            ModelKind::CnnCrf => ModelSpec {
                kind,
                scheme,
                channels: vec![32],
                kernels: vec![3],
                hidden: 0,
                depth: 3,
                dropout: 0.0,
                use_cnn: true,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let kind = self.kind;
        if !kind.supports(self.scheme) {
            return Err(ModelError::InvalidPair {
                kind,
                scheme: self.scheme,
                supported: kind.supported_names(),
            });
        }
        let bad = |message: &str| {
            Err(ModelError::Config {
                kind,
                message: message.to_string(),
            })
        };
        if self.channels.contains(&0) || self.kernels.contains(&0) {
            return bad("channel and kernel sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match kind {
            ModelKind::Cnn if self.channels.is_empty() || self.channels.len() != self.kernels.len() => {
                bad("needs one kernel size per conv layer")
            }
            ModelKind::UNet if self.channels.is_empty() => bad("needs at least one level"),
            ModelKind::CnnCrf if self.channels.len() != 1 => bad("needs exactly one channel width"),
            ModelKind::BiLstmCnn | ModelKind::BiLstmCrf if self.hidden == 0 || !(1..=7).contains(&self.depth) => {
                bad("needs hidden > 0 and depth in 1..=7")
            }
            ModelKind::BiLstmCnn | ModelKind::BiLstmCrf if self.use_cnn && self.channels.is_empty() => {
                bad("the feature extractor needs at least one layer")
            }
            _ => Ok(()),
        }
    }

    /// The loss a model/scheme pair trains with by default.
    pub fn default_loss(&self) -> LossConfig {
        LossConfig::new(match (self.kind.is_crf(), self.scheme) {
            (true, _) => LossKind::CrfNll,
            (false, LabelScheme::ExpDecay) => LossKind::PenalizedMse,
            (false, _) => LossKind::WeightedBce,
        })
    }

    pub fn check_loss(&self, loss: LossKind) -> Result<(), ModelError> {
        let ok = match self.head() {
            HeadKind::Softmax => loss == LossKind::WeightedBce,
            HeadKind::Sigmoid => matches!(loss, LossKind::PenalizedMse | LossKind::PlainMse),
            HeadKind::Emissions(_) => loss == LossKind::CrfNll,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidLoss {
                kind: self.kind,
                loss: loss.name(),
            })
        }
    }

    pub fn head(&self) -> HeadKind {
        match (self.kind.is_crf(), self.scheme) {
            (true, LabelScheme::Ascend { max }) => HeadKind::Emissions(max + 1),
            (true, _) => HeadKind::Emissions(2),
            (false, LabelScheme::ExpDecay) => HeadKind::Sigmoid,
            (false, _) => HeadKind::Softmax,
        }
    }

    /// Left context, in notes, seen by the last causal conv layer of the
    /// baseline CNN, or the centred window of CNN-CRF.
    pub fn receptive_field(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Cnn => Some(1 + self.kernels.iter().map(|k| k - 1).sum::<usize>()),
            ModelKind::CnnCrf => Some(1 + (2 * self.depth + 1) * (self.kernels[0] - 1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Two-way softmax per note.
    Softmax,
    /// One value in (0, 1) per note.
    Sigmoid,
    /// CRF emission scores with this many labels.
    Emissions(usize),
}

#[derive(Debug, Clone)]
enum Body {
    Cnn(Vec<Conv1dLayer>),
    UNet {
        down: Vec<Conv1dLayer>,
        up: Vec<Conv1dLayer>,
    },
    BiLstm {
        front: Vec<Conv1dLayer>,
        layers: Vec<BiLstmLayer>,
    },
    ResCnn {
        first: Conv1dLayer,
        pairs: Vec<(Conv1dLayer, Conv1dLayer)>,
    },
}

/// A built model: spec, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<F>,
    body: Body,
    head: Linear,
    crf: Option<CrfLayer>,
}

/// Output of a forward pass, tagged by head.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub var: Var,
    pub head: HeadKind,
}

/// Decoded model output for one song.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Boundary probability per note.
    Probs(Vec<f64>),
    /// Exponential-decay curve per note.
    Curve(Vec<f64>),
    /// Viterbi label path.
    Path(Vec<usize>),
}

/// Decision thresholds for the non-CRF heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub binary_threshold: f64,
    pub peak_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            binary_threshold: DEFAULT_BINARY_THRESHOLD,
            peak_threshold: DEFAULT_PEAK_THRESHOLD,
        }
    }
}

impl Prediction {
    pub fn boundaries(&self, params: &DecodeParams, scheme: LabelScheme) -> Result<BTreeSet<usize>, LabelError> {
        match self {
            Prediction::Probs(p) => Ok(boundaries_from_binary(p, params.binary_threshold)),
            Prediction::Curve(c) => Ok(boundaries_from_expdecay(c, params.peak_threshold)),
            Prediction::Path(path) => match scheme {
                LabelScheme::Ascend { .. } => boundaries_from_ascend(path),
                _ => Ok(path.iter().enumerate().filter(|&(_, &y)| y == 1).map(|(i, _)| i).collect()),
            },
        }
    }
}

fn conv_stack<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    c_in: usize,
    channels: &[usize],
    kernels: impl Fn(usize) -> usize,
    mode: PadMode,
) -> Result<Vec<Conv1dLayer>, NnError> {
    let mut prev = c_in;
    let mut out = Vec::with_capacity(channels.len());
    for (l, &c) in channels.iter().enumerate() {
        out.push(Conv1dLayer::new(store, &format!("{name}{l}"), prev, c, kernels(l), mode)?);
        prev = c;
    }
    Ok(out)
}

impl<F: Scalar> Model<F> {
    /// Builds the layers of `spec` and initializes them from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (body, width) = match spec.kind {
            ModelKind::Cnn => {
                let convs = conv_stack(s, "conv", NUM_FEATURES, &spec.channels, |l| spec.kernels[l], PadMode::Causal)?;
                (Body::Cnn(convs), *spec.channels.last().unwrap())
            }
            ModelKind::UNet => {
                let w = &spec.channels;
                let down = conv_stack(s, "down", NUM_FEATURES, w, |_| 3, PadMode::Same)?;
                let mut up = Vec::with_capacity(w.len() - 1);
                for l in 0..w.len() - 1 {
                    up.push(Conv1dLayer::new(s, &format!("up{l}"), w[l + 1] + w[l], w[l], 3, PadMode::Same)?);
                }
                (Body::UNet { down, up }, w[0])
            }
            ModelKind::BiLstmCnn | ModelKind::BiLstmCrf => {
                let front = if spec.use_cnn {
                    conv_stack(s, "front", NUM_FEATURES, &spec.channels, |_| 3, PadMode::Causal)?
                } else {
                    Vec::new()
                };
                let mut input = front.last().map_or(NUM_FEATURES, |c| c.c_out);
                let mut layers = Vec::with_capacity(spec.depth);
                for l in 0..spec.depth {
                    let layer = BiLstmLayer::new(s, &format!("bilstm{l}"), input, spec.hidden)?;
                    input = layer.output_width();
                    layers.push(layer);
                }
                (Body::BiLstm { front, layers }, input)
            }
            ModelKind::CnnCrf => {
                let c = spec.channels[0];
                let k = spec.kernels[0];
                let first = Conv1dLayer::new(s, "conv0", NUM_FEATURES, c, k, PadMode::Same)?;
                let mut pairs = Vec::with_capacity(spec.depth);
                for p in 0..spec.depth {
                    let a = Conv1dLayer::new(s, &format!("conv{}", 2 * p + 1), c, c, k, PadMode::Same)?;
                    let b = Conv1dLayer::new(s, &format!("conv{}", 2 * p + 2), c, c, k, PadMode::Same)?;
                    pairs.push((a, b));
                }
                (Body::ResCnn { first, pairs }, c)
            }
        };
        let (outputs, crf) = match spec.head() {
            HeadKind::Softmax => (2, None),
            HeadKind::Sigmoid => (1, None),
            HeadKind::Emissions(k) => {
                let legality = match spec.scheme {
                    LabelScheme::Ascend { max } => Legality::ascend(max, MIN_PHRASE_LEN)?,
                    _ => Legality::binary(),
                };
                (k, Some(CrfLayer::new(s, "crf", legality)?))
            }
        };
        let head = Linear::new(s, "head", width, outputs)?;
        store.init(seed);
        Ok(Model {
            spec,
            store,
            body,
            head,
            crf,
        })
    }

    pub fn crf(&self) -> Option<&CrfLayer> {
        self.crf.as_ref()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            body: self.body.clone(),
            head: self.head.clone(),
            crf: self.crf.clone(),
        }
    }

    pub fn bind<'g>(&self, graph: &'g Graph<F>, training: bool, seed: u64) -> Ctx<'g, F> {
        self.store.bind(graph, training, seed)
    }

    /// Runs the network on `x: [T x 3]`.
    pub fn forward(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Output, ModelError> {
        let g = ctx.graph;
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != NUM_FEATURES || shape[0] == 0 {
            return Err(TensorError::invalid("model input", format!("expected [T x 3], got {shape:?}")).into());
        }
        let t_len = shape[0];
        // body output is [T x width]
        let h = match &self.body {
            Body::Cnn(convs) => {
                let mut h = g.transpose(x)?;
                for c in convs {
                    h = g.relu(c.forward(ctx, h)?);
                }
                g.transpose(h)?
            }
            Body::UNet { down, up } => {
                let levels = down.len();
                let unit = 1usize << (levels - 1);
                let padded = t_len.div_ceil(unit) * unit;
                let mut h = g.transpose(x)?;
                if padded > t_len {
                    let zeros = g.constant(Tensor::zeros(&[NUM_FEATURES, padded - t_len]));
                    h = g.concat(&[h, zeros], 1)?;
                }
                let mut skips = Vec::with_capacity(levels);
                for (l, c) in down.iter().enumerate() {
                    h = g.relu(c.forward(ctx, h)?);
                    if l + 1 < levels {
                        skips.push(h);
                        h = g.maxpool1d(h, 2)?;
                    }
                }
                for (c, skip) in up.iter().zip(skips).rev() {
                    h = g.upsample1d(h, 2)?;
                    h = g.concat(&[h, skip], 0)?;
                    h = g.relu(c.forward(ctx, h)?);
                }
                if padded > t_len {
                    h = g.slice(h, 1, 0..t_len)?;
                }
                g.transpose(h)?
            }
            Body::BiLstm { front, layers } => {
                let mut h = x;
                if !front.is_empty() {
                    h = g.transpose(h)?;
                    for c in front {
                        h = g.relu(c.forward(ctx, h)?);
                    }
                    h = g.transpose(h)?;
                }
                for layer in layers {
                    let y = ctx.dropout(layer.forward(ctx, h)?, self.spec.dropout)?;
                    h = if g.shape(y) == g.shape(h) { skip_add(g, y, h)? } else { y };
                }
                h
            }
            Body::ResCnn { first, pairs } => {
                let mut h = g.relu(first.forward(ctx, g.transpose(x)?)?);
                for (a, b) in pairs {
                    let y = b.forward(ctx, g.relu(a.forward(ctx, h)?))?;
                    h = g.relu(skip_add(g, y, h)?);
                }
                g.transpose(h)?
            }
        };
        let z = self.head.forward(ctx, h)?;
        let head = self.spec.head();
        let var = match head {
            HeadKind::Softmax => g.softmax(z, 1)?,
            HeadKind::Sigmoid => g.sigmoid(g.reshape(z, &[t_len])?),
            HeadKind::Emissions(_) => z,
        };
        Ok(Output { var, head })
    }

    /// Per-sequence training loss of `out` against `labels`.
    pub fn loss(&self, ctx: &Ctx<'_, F>, out: Output, labels: &LabelSequence, loss: LossConfig) -> Result<Var, ModelError> {
        self.spec.check_loss(loss.kind)?;
        let g = ctx.graph;
        let v = match loss.kind {
            LossKind::WeightedBce => weighted_bce(g, out.var, &labels.values, loss.alpha)?,
            LossKind::PenalizedMse => penalized_mse(g, out.var, &labels.values, loss.alpha)?,
            LossKind::PlainMse => plain_mse(g, out.var, &labels.values)?,
            LossKind::CrfNll => {
                let crf = self.crf.as_ref().expect("CRF head has a CRF layer");
                crf.nll(ctx, out.var, &labels.classes())?
            }
        };
        Ok(v)
    }

    /// Inference on one song's features, dropout off.
    pub fn predict(&self, features: &Tensor<F>) -> Result<Prediction, ModelError> {
        let g = Graph::new();
        let ctx = self.bind(&g, false, 0);
        let x = g.constant(features.clone());
        let out = self.forward(&ctx, x)?;
        let v = g.value(out.var);
        Ok(match out.head {
            HeadKind::Softmax => Prediction::Probs(v.to_f64_vec().chunks(2).map(|r| r[1]).collect()),
            HeadKind::Sigmoid => Prediction::Curve(v.to_f64_vec()),
            HeadKind::Emissions(_) => {
                let crf = self.crf.as_ref().expect("CRF head has a CRF layer");
                let path = crf.scores(&self.store).viterbi(&v.cast())?;
                Prediction::Path(path.labels)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(t: usize) -> Tensor<f64> {
        Tensor::new(vec![t, 3], (0..3 * t).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap()
    }

    fn run(model: &Model<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let ctx = model.bind(&g, false, 0);
        let xv = g.constant(x.clone());
        let out = model.forward(&ctx, xv).unwrap();
        g.value(out.var).as_ref().clone()
    }

    #[test]
    fn pairs_validated() {
        assert!(ModelSpec::new(ModelKind::Cnn, LabelScheme::ascend()).is_err());
        assert!(ModelSpec::new(ModelKind::CnnCrf, LabelScheme::ExpDecay).is_err());
        for k in ModelKind::ALL {
            assert!(ModelSpec::new(k, LabelScheme::Binary).is_ok());
            assert_eq!(ModelKind::from_tag(k.tag()), Some(k));
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
    }

    #[test]
    fn receptive_fields() {
        let cnn = ModelSpec::new(ModelKind::Cnn, LabelScheme::Binary).unwrap();
        assert_eq!(cnn.receptive_field(), Some(13));
        let crf = ModelSpec::new(ModelKind::CnnCrf, LabelScheme::ascend()).unwrap();
        assert_eq!(crf.receptive_field(), Some(15));
    }

    #[test]
    fn cnn_softmax_rows_and_causality() {
        let spec = ModelSpec::new(ModelKind::Cnn, LabelScheme::Binary).unwrap();
        let m = Model::<f64>::new(spec, 1).unwrap();
        let x = input(20);
        let y = run(&m, &x);
        assert_eq!(y.shape(), &[20, 2]);
        for t in 0..20 {
            assert!((y.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut x2 = x.clone();
        x2.data_mut()[15 * 3] += 3.0;
        let y2 = run(&m, &x2);
        assert_eq!(&y.data()[..30], &y2.data()[..30]);
    }

    #[test]
    fn unet_keeps_length() {
        let mut spec = ModelSpec::new(ModelKind::UNet, LabelScheme::Binary).unwrap();
        spec.channels = vec![4, 4, 4, 4, 4];
        let m = Model::<f64>::new(spec.clone(), 2).unwrap();
        for t in [80, 100, 37] {
            assert_eq!(run(&m, &input(t)).shape(), &[t, 2]);
        }
        let mut zero = Model::<f64>::new(spec, 2).unwrap();
        for i in 0..zero.store.len() {
            zero.store.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(run(&zero, &input(16)).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bilstm_regression_head() {
        let mut spec = ModelSpec::new(ModelKind::BiLstmCnn, LabelScheme::ExpDecay).unwrap();
        spec.hidden = 4;
        spec.depth = 2;
        spec.channels = vec![8, 8, 8];
        let m = Model::<f64>::new(spec, 3).unwrap();
        let y = run(&m, &input(7));
        assert_eq!(y.shape(), &[7]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn crf_emission_shapes() {
        let spec = ModelSpec::new(ModelKind::CnnCrf, LabelScheme::ascend()).unwrap();
        let m = Model::<f64>::new(spec, 4).unwrap();
        assert_eq!(run(&m, &input(9)).shape(), &[9, 50]);
        let mut spec = ModelSpec::new(ModelKind::BiLstmCrf, LabelScheme::Binary).unwrap();
        spec.hidden = 3;
        spec.depth = 1;
        let m = Model::<f64>::new(spec, 4).unwrap();
        assert_eq!(run(&m, &input(9)).shape(), &[9, 2]);
        match m.predict(&input(9)).unwrap() {
            Prediction::Path(p) => assert!(m.crf().unwrap().legality.is_legal(&p)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_head_compatibility() {
        let spec = ModelSpec::new(ModelKind::Cnn, LabelScheme::Binary).unwrap();
        assert!(spec.check_loss(LossKind::WeightedBce).is_ok());
        assert!(spec.check_loss(LossKind::PenalizedMse).is_err());
        let spec = ModelSpec::new(ModelKind::CnnCrf, LabelScheme::ascend()).unwrap();
        assert!(spec.check_loss(LossKind::CrfNll).is_ok());
    }
}
