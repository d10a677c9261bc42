//! Layers with named, owned parameters.
//!
//! Parameters live in a [`ParamStore`]. A forward pass binds the store to a
//! fresh [`Graph`] through a [`Ctx`], which turns every parameter into a leaf
//! without copying its data. After `backward`, [`ParamStore::gradients`]
//! lines the leaf gradients up with the registry again.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Graph, PadMode, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{name}`: mask has {got} entries, tensor has {expected}")]
    MaskLength {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// How [`ParamStore::init`] fills a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-s, s)` with `s = sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    /// Keep the registered value.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
    pub init: Init,
    /// Entries marked `true` never change and get no optimizer state.
    pub frozen: Option<Vec<bool>>,
}

impl<F: Scalar> Param<F> {
    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.as_ref().is_some_and(|m| m[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registry of every trainable tensor of a model, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, param: Param<F>) -> Result<ParamId, NnError> {
        if self.by_name.contains_key(&param.name) {
            return Err(NnError::DuplicateName(param.name));
        }
        self.by_name.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a zero tensor to be filled by [`ParamStore::init`].
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId, NnError> {
        self.insert(Param {
            name: name.into(),
            value: Arc::new(Tensor::zeros(shape)),
            init,
            frozen: None,
        })
    }

    /// Registers a tensor whose value is kept by `init` and whose `frozen`
    /// entries are excluded from training.
    pub fn register_fixed(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        frozen: Option<Vec<bool>>,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if let Some(mask) = &frozen {
            if mask.len() != value.len() {
                return Err(NnError::MaskLength {
                    name,
                    expected: value.len(),
                    got: mask.len(),
                });
            }
        }
        self.insert(Param {
            name,
            value: Arc::new(value),
            init: Init::Fixed,
            frozen,
        })
    }

    /// Fills every parameter from one seeded stream, in registration order.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            match p.init {
                Init::Uniform { fan_in } => {
                    let s = (1.0 / fan_in.max(1) as f64).sqrt();
                    let t = Arc::make_mut(&mut p.value);
                    for v in t.data_mut() {
                        *v = F::of(rng.random_range(-s..s));
                    }
                }
                Init::Zeros => {
                    let t = Arc::make_mut(&mut p.value);
                    t.data_mut().iter_mut().for_each(|v| *v = F::zero());
                }
                Init::Fixed => {}
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    /// Mutable access to a parameter value, for optimizers and loaders.
    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    init: p.init,
                    frozen: p.frozen.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Creates a leaf for every parameter on `graph`. `seed` drives dropout.
    pub fn bind<'g>(&self, graph: &'g Graph<F>, training: bool, seed: u64) -> Ctx<'g, F> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf_shared(Arc::clone(&p.value), true))
            .collect();
        Ctx {
            graph,
            vars,
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Like [`ParamStore::bind`], but with caller-made leaves standing in for
    /// the parameters (one per parameter, same order). Used to differentiate
    /// with respect to substituted values.
    pub fn bind_leaves<'g>(&self, graph: &'g Graph<F>, leaves: &[Var], training: bool, seed: u64) -> Ctx<'g, F> {
        assert_eq!(leaves.len(), self.params.len(), "one leaf per parameter");
        Ctx {
            graph,
            vars: leaves.to_vec(),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Gradient of every parameter, zero where the loss does not reach it.
    pub fn gradients(&self, ctx: &Ctx<'_, F>, grads: &Gradients<F>) -> Vec<Tensor<F>> {
        self.params
            .iter()
            .zip(&ctx.vars)
            .map(|(p, &v)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

/// A [`ParamStore`] bound to one graph, plus the forward-pass mode.
pub struct Ctx<'g, F: Scalar> {
    pub graph: &'g Graph<F>,
    vars: Vec<Var>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, F: Scalar> Ctx<'g, F> {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var, TensorError> {
        self.graph
            .dropout(x, rate, self.training, &mut *self.rng.borrow_mut())
    }
}

/// `f(x) + x`; unlike plain `add`, refuses any broadcasting.
pub fn skip_add<F: Scalar>(g: &Graph<F>, fx: Var, x: Var) -> Result<Var, TensorError> {
    let (a, b) = (g.shape(fx), g.shape(x));
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op: "skip",
            left: a,
            right: b,
        });
    }
    g.add(fx, x)
}

/// 1-D convolution over `[channels x time]` inputs.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub mode: PadMode,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv1dLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        mode: PadMode,
    ) -> Result<Self, NnError> {
        let w = store.register(format!("{name}.w"), &[c_out, c_in, k], Init::Uniform { fan_in: c_in * k })?;
        let b = store.register(format!("{name}.b"), &[c_out], Init::Zeros)?;
        Ok(Conv1dLayer {
            w,
            b,
            mode,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var, TensorError> {
        ctx.graph.conv1d(x, ctx.p(self.w), ctx.p(self.b), self.mode)
    }
}

/// Affine map of the rows of a `[time x in]` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize) -> Result<Self, NnError> {
        let w = store.register(format!("{name}.w"), &[input, output], Init::Uniform { fan_in: input })?;
        let b = store.register(format!("{name}.b"), &[output], Init::Zeros)?;
        Ok(Linear { w, b, input, output })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var, TensorError> {
        let g = ctx.graph;
        let xw = g.matmul(x, ctx.p(self.w))?;
        g.add(xw, ctx.p(self.b))
    }
}

/// Gate order used for parameter naming and packing.
const GATES: [&str; 4] = ["c", "i", "f", "o"];

/// A single LSTM cell with separate recurrent (`U`) and input (`W`) weights
/// and a bias on each, per gate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub u: [ParamId; 4],
    pub w: [ParamId; 4],
    pub b_u: [ParamId; 4],
    pub b_w: [ParamId; 4],
    pub input: usize,
    pub hidden: usize,
}

/// Per-step state; `None` stands for the all-zero initial state.
type State = Option<(Var, Var)>;

impl LstmCell {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, input: usize, hidden: usize) -> Result<Self, NnError> {
        let mut reg = |kind: &str, shape: &[usize], init: Init| -> Result<[ParamId; 4], NnError> {
            let mut ids = [ParamId(0); 4];
            for (id, gate) in ids.iter_mut().zip(GATES) {
                *id = store.register(format!("{name}.{kind}_{gate}"), shape, init)?;
            }
            Ok(ids)
        };
        Ok(LstmCell {
            u: reg("U", &[hidden, hidden], Init::Uniform { fan_in: hidden })?,
            w: reg("W", &[input, hidden], Init::Uniform { fan_in: input })?,
            b_u: reg("bU", &[hidden], Init::Zeros)?,
            b_w: reg("bW", &[hidden], Init::Zeros)?,
            input,
            hidden,
        })
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        4 * (hidden * hidden + input * hidden + 2 * hidden)
    }

    /// One step on `x_t: [1 x input]` with the unpacked weights, gate by gate.
    pub fn step<F: Scalar>(&self, ctx: &Ctx<'_, F>, x_t: Var, h: Var, c: Var) -> Result<(Var, Var), TensorError> {
        let g = ctx.graph;
        let pre = |k: usize| -> Result<Var, TensorError> {
            let hu = g.add(g.matmul(h, ctx.p(self.u[k]))?, ctx.p(self.b_u[k]))?;
            let xw = g.add(g.matmul(x_t, ctx.p(self.w[k]))?, ctx.p(self.b_w[k]))?;
            g.add(hu, xw)
        };
        let c_hat = g.tanh(pre(0)?);
        let i = g.sigmoid(pre(1)?);
        let f = g.sigmoid(pre(2)?);
        let o = g.sigmoid(pre(3)?);
        let c_t = g.add(g.mul(f, c)?, g.mul(i, c_hat)?)?;
        let h_t = g.mul(o, g.tanh(c_t))?;
        Ok((h_t, c_t))
    }

    /// Runs the cell over `x: [T x input]`, back to front when `reverse`, and
    /// returns the hidden states `[T x hidden]` in the original time order.
    /// Reference implementation built from [`LstmCell::step`].
    pub fn run_stepwise<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var, reverse: bool) -> Result<Var, TensorError> {
        let g = ctx.graph;
        let t_len = g.shape(x)[0];
        let zeros = g.constant(Tensor::zeros(&[1, self.hidden]));
        let (mut h, mut c) = (zeros, zeros);
        let mut out = vec![zeros; t_len];
        for t in order(t_len, reverse) {
            let x_t = g.slice(x, 0, t..t + 1)?;
            (h, c) = self.step(ctx, x_t, h, c)?;
            out[t] = h;
        }
        g.concat(&out, 0)
    }

    /// Same result as [`LstmCell::run_stepwise`] with the four gates packed
    /// into single matrices and the input projection done for all steps at
    /// once.
    pub fn run<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var, reverse: bool) -> Result<Var, TensorError> {
        let g = ctx.graph;
        let t_len = g.shape(x)[0];
        let hd = self.hidden;
        let pack = |ids: &[ParamId; 4], axis| g.concat(&ids.map(|id| ctx.p(id)), axis);
        let w = pack(&self.w, 1)?;
        let u = pack(&self.u, 1)?;
        let bias = g.add(pack(&self.b_u, 0)?, pack(&self.b_w, 0)?)?;
        let xw = g.add(g.matmul(x, w)?, bias)?;
        let mut state: State = None;
        let mut out: Vec<Option<Var>> = vec![None; t_len];
        for t in order(t_len, reverse) {
            let mut z = g.slice(xw, 0, t..t + 1)?;
            if let Some((h, _)) = state {
                z = g.add(z, g.matmul(h, u)?)?;
            }
            let gate = |k: usize| g.slice(z, 1, k * hd..(k + 1) * hd);
            let c_hat = g.tanh(gate(0)?);
            let i = g.sigmoid(gate(1)?);
            let f = g.sigmoid(gate(2)?);
            let o = g.sigmoid(gate(3)?);
            let mut c_t = g.mul(i, c_hat)?;
            if let Some((_, c)) = state {
                c_t = g.add(g.mul(f, c)?, c_t)?;
            }
            let h_t = g.mul(o, g.tanh(c_t))?;
            state = Some((h_t, c_t));
            out[t] = Some(h_t);
        }
        let out: Vec<Var> = out.into_iter().flatten().collect();
        g.concat(&out, 0)
    }
}

fn order(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

/// Forward and backward LSTM over the same sequence, concatenated per step.
#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstmLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, input: usize, hidden: usize) -> Result<Self, NnError> {
        Ok(BiLstmLayer {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), input, hidden)?,
            bwd: LstmCell::new(store, &format!("{name}.bwd"), input, hidden)?,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// `[T x input] -> [T x 2H]`.
    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var, TensorError> {
        if ctx.graph.shape(x).first().is_none_or(|&t| t == 0) {
            return Err(TensorError::invalid("bilstm", "empty sequence"));
        }
        let f = self.fwd.run(ctx, x, false)?;
        let b = self.bwd.run(ctx, x, true)?;
        ctx.graph.concat(&[f, b], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut s = ParamStore::<f64>::new();
            s.register("w", &[100, 10], Init::Uniform { fan_in: 100 }).unwrap();
            s.register("b", &[10], Init::Zeros).unwrap();
            s.init(seed);
            s
        };
        let (a, b, c) = (build(3), build(3), build(4));
        assert_eq!(a.params()[0].value, b.params()[0].value);
        assert_ne!(a.params()[0].value, c.params()[0].value);
        assert!(a.params()[0].value.data().iter().all(|v| v.abs() < 0.1));
        assert!(a.params()[1].value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("a", &[1], Init::Zeros).unwrap();
        assert_eq!(
            s.register("a", &[2], Init::Zeros),
            Err(NnError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn lstm_param_count() {
        for (input, hidden) in [(3, 4), (32, 16), (7, 1)] {
            let mut s = ParamStore::<f32>::new();
            LstmCell::new(&mut s, "l", input, hidden).unwrap();
            assert_eq!(s.num_scalars(), LstmCell::num_params(input, hidden));
        }
    }

    #[test]
    fn zero_lstm_stays_zero() {
        let mut s = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut s, "l", 2, 3).unwrap();
        let g = Graph::new();
        let ctx = s.bind(&g, false, 0);
        let x = g.constant(Tensor::new(vec![1, 2], vec![5.0, -7.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let (h, c) = cell.step(&ctx, x, z, z).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_memory() {
        let mut s = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut s, "l", 2, 3).unwrap();
        s.init(9);
        let f_bias = cell.b_u[2].index();
        s.value_mut(f_bias).data_mut().iter_mut().for_each(|v| *v = 20.0);
        let g = Graph::new();
        let ctx = s.bind(&g, false, 0);
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.4]).unwrap());
        let c = g.constant(Tensor::new(vec![1, 3], vec![1.5, -2.0, 0.25]).unwrap());
        let (_, c_t) = cell.step(&ctx, x, h, c).unwrap();
        // i and c_hat recomputed independently of the graph
        let v = |id: ParamId| s.get(id).value.to_f64_vec();
        let (xv, hv, cv) = ([0.3, -0.8], [0.1, 0.2, -0.4], [1.5, -2.0, 0.25]);
        let pre = |k: usize, j: usize| {
            let (u, w, bu, bw) = (v(cell.u[k]), v(cell.w[k]), v(cell.b_u[k]), v(cell.b_w[k]));
            let hu: f64 = (0..3).map(|r| hv[r] * u[r * 3 + j]).sum();
            let xw: f64 = (0..2).map(|r| xv[r] * w[r * 3 + j]).sum();
            hu + bu[j] + xw + bw[j]
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expect: Vec<f64> = (0..3)
            .map(|j| cv[j] + sig(pre(1, j)) * pre(0, j).tanh())
            .collect();
        assert!(close(g.value(c_t).data(), &expect, 1e-6));
    }

    #[test]
    fn packed_run_matches_stepwise() {
        let mut s = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut s, "l", 3, 4).unwrap();
        s.init(1);
        for t in s.params.iter_mut().filter(|p| p.init == Init::Zeros) {
            let shape = t.value.shape().to_vec();
            let vals = (0..t.value.len()).map(|i| 0.05 * i as f64 - 0.1).collect();
            t.value = Arc::new(Tensor::new(shape, vals).unwrap());
        }
        let g = Graph::new();
        let ctx = s.bind(&g, false, 0);
        let x = g.constant(Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        for rev in [false, true] {
            let a = g.value(cell.run(&ctx, x, rev).unwrap());
            let b = g.value(cell.run_stepwise(&ctx, x, rev).unwrap());
            assert_eq!(a.shape(), b.shape());
            assert!(close(a.data(), b.data(), 1e-12));
        }
    }

    #[test]
    fn bilstm_shapes_and_symmetry() {
        let mut s = ParamStore::<f64>::new();
        let layer = BiLstmLayer::new(&mut s, "bi", 2, 3).unwrap();
        s.init(5);
        // tie the backward cell to the forward one
        let n = s.len() / 2;
        for i in 0..n {
            let v = s.params[i].value.clone();
            s.params[n + i].value = v;
        }
        let g = Graph::new();
        let ctx = s.bind(&g, false, 0);
        let x = g.constant(Tensor::new(vec![5, 2], vec![1.0, 0.0, 0.5, -1.0, 2.0, 2.0, 0.5, -1.0, 1.0, 0.0]).unwrap());
        let y = g.value(layer.forward(&ctx, x).unwrap());
        assert_eq!(y.shape(), &[5, 6]);
        for t in 0..5 {
            let (row, mirror) = (y.row(t), y.row(4 - t));
            assert!(close(&row[..3], &mirror[3..], 1e-12));
        }
        let one = g.constant(Tensor::new(vec![1, 2], vec![0.4, -0.2]).unwrap());
        let y1 = g.value(layer.forward(&ctx, one).unwrap());
        assert!(close(&y1.data()[..3], &y1.data()[3..], 1e-12));
    }

    #[test]
    fn skip_requires_matching_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(skip_add(&g, a, b).is_err());
        let c = g.constant(Tensor::full(&[2, 3], 1.0));
        assert_eq!(g.value(skip_add(&g, a, c).unwrap()).sum(), 6.0);
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut s = ParamStore::<f64>::new();
        let conv = Conv1dLayer::new(&mut s, "c", 2, 3, 3, PadMode::Causal).unwrap();
        s.init(2);
        let run = |tail: f64| {
            let g = Graph::new();
            let ctx = s.bind(&g, false, 0);
            let mut data: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
            data[5] = tail;
            data[11] = tail;
            let x = g.constant(Tensor::new(vec![2, 6], data).unwrap());
            g.value(conv.forward(&ctx, x).unwrap()).as_ref().clone()
        };
        let (a, b) = (run(0.0), run(9.0));
        for o in 0..3 {
            assert_eq!(&a.row(o)[..5], &b.row(o)[..5]);
        }
    }
}
