use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, ConvTGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `round` behaves in forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundMode {
    /// Forward rounds, backward passes the gradient unchanged.
    #[default]
    StraightThrough,
    /// Forward rounds, backward is the true (zero) derivative.
    Hard,
    /// Forward and backward are the identity. Used to build the smooth
    /// surrogate whose exact gradient the straight-through estimator returns.
    Identity,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param(String),
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        rope_base: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Elu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    Round(Var, RoundMode),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    L2NormRows(Var),
    Mse(Var, Var),
    KlMargin {
        mu: Var,
        sigma: Var,
    },
    SymCrossEntropy(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Linear { .. } => "linear",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Conv { .. } => "conv",
            Op::ConvT { .. } => "conv_transpose",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Elu(_) => "elu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Round(..) => "round",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Embedding { .. } => "embedding",
            Op::RepeatRows(..) => "repeat_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::L2NormRows(_) => "l2_normalize_rows",
            Op::Mse(..) => "mse",
            Op::KlMargin { .. } => "kl_margin",
            Op::SymCrossEntropy(_) => "symmetric_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of operations recorded in construction (hence topological) order.
///
/// Values are computed eagerly when a node is added; [`Graph::backward`]
/// walks the tape once in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    round_mode: RoundMode,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: BTreeMap<String, (Var, Vec<usize>)>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a trainable parameter; zeros when the loss does not reach it.
    pub fn param(&self, name: &str) -> Option<Tensor<F>> {
        let (v, shape) = self.params.get(name)?;
        Some(
            self.get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<F>> {
        let mut grads = self.grads;
        self.params
            .into_iter()
            .map(|(name, (v, shape))| {
                let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&shape));
                (name, g)
            })
            .collect()
    }
}

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> bool {
    a.shape() == b.shape()
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            round_mode: RoundMode::default(),
        }
    }

    pub fn set_round_mode(&mut self, mode: RoundMode) {
        self.round_mode = mode;
    }

    pub fn round_mode(&self) -> RoundMode {
        self.round_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Human readable node label used in error messages.
    pub fn describe(&self, v: Var) -> String {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Param(name) => format!("#{} param '{}' {:?}", v.0, name, node.value.shape()),
            op => format!("#{} {} {:?}", v.0, op.name(), node.value.shape()),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.describe(a),
            right: self.describe(b),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (for differentiating w.r.t. inputs).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter. Names are unique within a graph: binding
    /// the same name twice returns the original node.
    pub fn param(&mut self, name: &str, value: &Tensor<F>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: if trainable {
                Op::Param(name.to_string())
            } else {
                Op::Leaf
            },
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_shape(ta, tb) {
            return Err(self.mismatch(op.name(), a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.numel() != tx.cols() {
            return Err(self.mismatch(op.name(), x, v));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, tv.data()[i % c]))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[x, v]))
    }

    /// `x[r, :] + v` for every row of a matrix.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, Op::AddRow(x, v), |a, b| a + b)
    }

    /// `x[r, :] ⊙ v` for every row of a matrix.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, Op::MulRow(x, v), |a, b| a * b)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// `s · x` where `s` is a scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("mul_scalar", x, s));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| c * v);
        Ok(self.push(value, Op::MulScalarVar(x, s), &[x, s]))
    }

    /// `x · W (+ b)` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tw.shape()[0] != tx.cols() {
            return Err(self.mismatch("linear", x, w));
        }
        let n_out = tw.shape()[1];
        if let Some(b) = b {
            if self.value(b).numel() != n_out {
                return Err(self.mismatch("linear", w, b));
            }
        }
        let rows = tx.rows();
        let mut out = vec![F::zero(); rows * n_out];
        let bias = b.map(|b| self.value(b).data());
        for r in 0..rows {
            kernels::linear_row(
                tx.row(r),
                tw.data(),
                bias,
                &mut out[r * n_out..(r + 1) * n_out],
            );
        }
        let value = Tensor::matrix(rows, n_out, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// `A · Bᵀ` for `A: [n, d]`, `B: [m, d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = F::zero();
                for (&x, &y) in ta.row(i).iter().zip(tb.row(j)) {
                    acc += x * y;
                }
                out[i * m + j] = acc;
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Causal 1-D convolution; `w: [kernel, cin, cout]`. Output has
    /// `ceil(frames / stride)` rows; missing frames on either side are zero.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 3 || tw.shape()[1] != tx.cols() {
            return Err(self.mismatch("conv", x, w));
        }
        let geom = ConvGeom {
            kernel: tw.shape()[0],
            stride,
            dilation,
            cin: tw.shape()[1],
            cout: tw.shape()[2],
        };
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(self.mismatch("conv", w, b));
            }
        }
        let t_in = tx.rows();
        let t_out = geom.out_len(t_in);
        let mut out = vec![F::zero(); t_out * geom.cout];
        let bias = b.map(|b| self.value(b).data());
        let row = |j: isize| (j >= 0 && (j as usize) < t_in).then(|| tx.row(j as usize));
        for i in 0..t_out {
            kernels::conv_frame(
                &geom,
                tw.data(),
                bias,
                i,
                row,
                &mut out[i * geom.cout..(i + 1) * geom.cout],
            );
        }
        let value = Tensor::matrix(t_out, geom.cout, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Causal transposed convolution; `w: [kernel, cin, cout]`, output has
    /// `frames · stride` rows.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 3 || tw.shape()[1] != tx.cols() {
            return Err(self.mismatch("conv_transpose", x, w));
        }
        let geom = ConvTGeom {
            kernel: tw.shape()[0],
            stride,
            cin: tw.shape()[1],
            cout: tw.shape()[2],
        };
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(self.mismatch("conv_transpose", w, b));
            }
        }
        let t_in = tx.rows();
        let t_out = geom.out_len(t_in);
        let mut out = vec![F::zero(); t_out * geom.cout];
        let bias = b.map(|b| self.value(b).data());
        let row = |j: usize| (j < t_in).then(|| tx.row(j));
        for o in 0..t_out {
            kernels::conv_t_frame(
                &geom,
                tw.data(),
                bias,
                o,
                row,
                &mut out[o * geom.cout..(o + 1) * geom.cout],
            );
        }
        let value = Tensor::matrix(t_out, geom.cout, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT { x, w, b, geom }, &inputs))
    }

    /// Multi-head causal self-attention with rotary positions (applied to
    /// `q`, `k` here) and a hard window: frame `t` attends to frames
    /// `t − window + 1 ..= t`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        rope_base: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if !same_shape(tq, tk) {
            return Err(self.mismatch("attention", q, k));
        }
        if !same_shape(tq, tv) {
            return Err(self.mismatch("attention", q, v));
        }
        if tq.rank() != 2 || heads == 0 || tq.cols() % heads != 0 || !(tq.cols() / heads).is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "attention over {} needs an even head dimension for {heads} heads",
                self.describe(q)
            )));
        }
        if window == 0 {
            return Err(Error::invalid("attention window must be positive"));
        }
        let (qr, kr) = rotated(tq, tk, heads, rope_base);
        let (t, d) = (tq.rows(), tq.cols());
        let mut out = vec![F::zero(); t * d];
        let mut probs = Vec::new();
        for i in 0..t {
            let lo = (i + 1).saturating_sub(window);
            kernels::attend_row(
                &qr[i * d..(i + 1) * d],
                &kr[lo * d..(i + 1) * d],
                &tv.data()[lo * d..(i + 1) * d],
                heads,
                &mut out[i * d..(i + 1) * d],
                &mut probs,
            );
        }
        let value = Tensor::matrix(t, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                window,
                rope_base,
            },
            &[q, k, v],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || self.value(gamma).numel() != tx.cols() {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).numel() != tx.cols() {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); tx.numel()];
        let c = tx.cols();
        for r in 0..tx.rows() {
            kernels::layer_norm_row(tx.row(r), g, b, &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta]))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), kernels::elu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), kernels::relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Round to nearest (ties away from zero) under the graph's [`RoundMode`].
    pub fn round(&mut self, x: Var) -> Var {
        let mode = self.round_mode;
        match mode {
            RoundMode::Identity => self.unary(x, Op::Round(x, mode), |v| v),
            _ => self.unary(x, Op::Round(x, mode), |v| v.round()),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(F::zero(), |a, &b| a + b);
        let m = s / F::lit(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over rows: `[rows, cols] → [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.rows() == 0 {
            return Err(Error::invalid(format!(
                "mean_rows needs a non-empty matrix, got {}",
                self.describe(x)
            )));
        }
        let c = t.cols();
        let mut acc = vec![F::zero(); c];
        for r in 0..t.rows() {
            for (a, &v) in acc.iter_mut().zip(t.row(r)) {
                *a += v;
            }
        }
        let n = F::lit(t.rows() as f64);
        for a in &mut acc {
            *a /= n;
        }
        let value = Tensor::matrix(1, c, acc)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// Row lookup `table[ids[r], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::invalid(format!(
                "embedding table must be a matrix: {}",
                self.describe(table)
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for {}",
                self.describe(table)
            )));
        }
        let c = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Nearest-neighbour upsampling: every row repeated `factor` times.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || factor == 0 {
            return Err(Error::invalid(format!(
                "repeat_rows x{factor} on {}",
                self.describe(x)
            )));
        }
        let mut out = Vec::with_capacity(t.numel() * factor);
        for r in 0..t.rows() {
            for _ in 0..factor {
                out.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::matrix(t.rows() * factor, t.cols(), out)?;
        Ok(self.push(value, Op::RepeatRows(x, factor), &[x]))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.cols() != c {
                return Err(self.mismatch("concat_rows", first, x));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::matrix(rows, c, out)?;
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} of {}",
                start + len,
                self.describe(x)
            )));
        }
        let value = t.slice_rows(start, len);
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid(format!(
                "l2_normalize_rows on {}",
                self.describe(x)
            )));
        }
        let c = t.cols();
        let mut out = vec![F::zero(); t.numel()];
        for r in 0..t.rows() {
            let n = t.row(r).iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
            if n == F::zero() || !n.is_finite() {
                return Err(Error::invalid(format!(
                    "row {r} of {} has zero or non-finite norm",
                    self.describe(x)
                )));
            }
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(t.row(r)) {
                *o = v / n;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2NormRows(x), &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_shape(ta, tb) {
            return Err(self.mismatch("mse", a, b));
        }
        let mut s = F::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            s += d * d;
        }
        let m = s / F::lit(ta.numel().max(1) as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), &[a, b]))
    }

    /// `max(0, KL[N(μ, σ²) ‖ N(0, I)] − Δ)` with the KL summed over the last
    /// axis and averaged over rows.
    pub fn kl_margin(&mut self, mu: Var, sigma: Var, delta: F) -> Result<Var> {
        let (tm, ts) = (self.value(mu), self.value(sigma));
        if !same_shape(tm, ts) {
            return Err(self.mismatch("kl_margin", mu, sigma));
        }
        if let Some(bad) = ts.data().iter().find(|&&s| !(s > F::zero())) {
            return Err(Error::invalid(format!(
                "kl_margin needs positive sigma, {} contains {bad}",
                self.describe(sigma)
            )));
        }
        let kl = kl_value(tm, ts);
        let loss = (kl - delta).max(F::zero());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlMargin { mu, sigma },
            &[mu, sigma],
        ))
    }

    /// Symmetric cross-entropy over a square logit matrix whose diagonal
    /// holds the positive pairs: `−½·(mean_i log softmax_row(C)_ii + mean_j log softmax_col(C)_jj)`.
    pub fn symmetric_cross_entropy(&mut self, c: Var) -> Result<Var> {
        let t = self.value(c);
        if t.rank() != 2 || t.rows() != t.cols() || t.rows() < 2 {
            return Err(Error::invalid(format!(
                "symmetric_cross_entropy needs a square matrix with N >= 2, got {}",
                self.describe(c)
            )));
        }
        let n = t.rows();
        let (row_lse, col_lse) = log_sum_exps(t);
        let mut row_term = F::zero();
        let mut col_term = F::zero();
        for i in 0..n {
            let d = t.data()[i * n + i];
            row_term += d - row_lse[i];
            col_term += d - col_lse[i];
        }
        let nf = F::lit(n as f64);
        let loss = -F::lit(0.5) * (row_term / nf + col_term / nf);
        Ok(self.push(Tensor::scalar(loss), Op::SymCrossEntropy(c), &[c]))
    }

    /// Loss value and gradients of every trainable parameter.
    pub fn forward_backward(&self, loss: Var) -> Result<(F, Gradients<F>)> {
        let grads = self.backward(loss)?;
        Ok((self.value(loss).item(), grads))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                node: self.describe(loss),
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, &v)| (k.clone(), (v, self.shape(v).to_vec())))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        accumulate(grads, v, gy.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, zip(gy, tb, |g, x| g * x));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip(gy, ta, |g, x| g * x));
                }
            }
            Op::AddRow(x, v) => {
                if self.needs(*x) {
                    accumulate(grads, *x, gy.clone());
                }
                if self.needs(*v) {
                    let tv = self.value(*v);
                    let c = gy.cols();
                    let mut g = vec![F::zero(); c];
                    for r in 0..gy.rows() {
                        for (a, &b) in g.iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(
                        grads,
                        *v,
                        Tensor::new(tv.shape().to_vec(), g).expect("shape"),
                    );
                }
            }
            Op::MulRow(x, v) => {
                let (tx, tv) = (self.value(*x), self.value(*v));
                let c = gy.cols();
                if self.needs(*x) {
                    let data = gy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * tv.data()[i % c])
                        .collect();
                    accumulate(
                        grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), data).expect("shape"),
                    );
                }
                if self.needs(*v) {
                    let mut g = vec![F::zero(); c];
                    for r in 0..gy.rows() {
                        for ((a, &b), &xv) in g.iter_mut().zip(gy.row(r)).zip(tx.row(r)) {
                            *a += b * xv;
                        }
                    }
                    accumulate(
                        grads,
                        *v,
                        Tensor::new(tv.shape().to_vec(), g).expect("shape"),
                    );
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let c = *c;
                    accumulate(grads, *x, gy.map(|g| g * c));
                }
            }
            Op::AddScalar(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, gy.clone());
                }
            }
            Op::MulScalarVar(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                if self.needs(*x) {
                    let c = ts.item();
                    accumulate(grads, *x, gy.map(|g| g * c));
                }
                if self.needs(*s) {
                    let mut acc = F::zero();
                    for (&g, &v) in gy.data().iter().zip(tx.data()) {
                        acc += g * v;
                    }
                    accumulate(
                        grads,
                        *s,
                        Tensor::new(ts.shape().to_vec(), vec![acc]).expect("shape"),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, n_in, n_out) = (tx.rows(), tx.cols(), tw.shape()[1]);
                if self.needs(*x) {
                    let mut gx = vec![F::zero(); rows * n_in];
                    for r in 0..rows {
                        let g = gy.row(r);
                        for i in 0..n_in {
                            let wr = &tw.data()[i * n_out..(i + 1) * n_out];
                            let mut acc = F::zero();
                            for (&a, &b) in g.iter().zip(wr) {
                                acc += a * b;
                            }
                            gx[r * n_in + i] = acc;
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(rows, n_in, gx).expect("shape"));
                }
                if self.needs(*w) {
                    let mut gw = vec![F::zero(); n_in * n_out];
                    for r in 0..rows {
                        let g = gy.row(r);
                        for (i, &xv) in tx.row(r).iter().enumerate() {
                            if xv == F::zero() {
                                continue;
                            }
                            for (a, &b) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(g) {
                                *a += xv * b;
                            }
                        }
                    }
                    accumulate(grads, *w, Tensor::matrix(n_in, n_out, gw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let tb = self.value(*b);
                        let mut gb = vec![F::zero(); n_out];
                        for r in 0..rows {
                            for (a, &v) in gb.iter_mut().zip(gy.row(r)) {
                                *a += v;
                            }
                        }
                        accumulate(
                            grads,
                            *b,
                            Tensor::new(tb.shape().to_vec(), gb).expect("shape"),
                        );
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); n * d];
                    for i in 0..n {
                        for j in 0..m {
                            let g = gy.data()[i * m + j];
                            for (o, &v) in ga[i * d..(i + 1) * d].iter_mut().zip(tb.row(j)) {
                                *o += g * v;
                            }
                        }
                    }
                    accumulate(grads, *a, Tensor::matrix(n, d, ga).expect("shape"));
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let g = gy.data()[i * m + j];
                            for (o, &v) in gb[j * d..(j + 1) * d].iter_mut().zip(ta.row(i)) {
                                *o += g * v;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::matrix(m, d, gb).expect("shape"));
                }
            }
            Op::Conv { x, w, b, geom } => self.conv_backward(gy, *x, *w, *b, geom, grads),
            Op::ConvT { x, w, b, geom } => self.conv_t_backward(gy, *x, *w, *b, geom, grads),
            Op::Attention {
                q,
                k,
                v,
                heads,
                window,
                rope_base,
            } => self.attention_backward(gy, [*q, *k, *v], *heads, *window, *rope_base, grads),
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let c = tx.cols();
                let cf = F::lit(c as f64);
                let mut gx = vec![F::zero(); tx.numel()];
                let mut gg = vec![F::zero(); c];
                let mut gb = vec![F::zero(); c];
                let mut xhat = vec![F::zero(); c];
                let mut dxhat = vec![F::zero(); c];
                for r in 0..tx.rows() {
                    let (mean, inv) = kernels::row_stats(tx.row(r));
                    let g = gy.row(r);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..c {
                        xhat[j] = (tx.row(r)[j] - mean) * inv;
                        dxhat[j] = g[j] * tg.data()[j];
                        gg[j] += g[j] * xhat[j];
                        gb[j] += g[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for j in 0..c {
                        gx[r * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.needs(*x) {
                    accumulate(
                        grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), gx).expect("shape"),
                    );
                }
                if self.needs(*gamma) {
                    accumulate(
                        grads,
                        *gamma,
                        Tensor::new(tg.shape().to_vec(), gg).expect("shape"),
                    );
                }
                if self.needs(*beta) {
                    let shape = self.shape(*beta).to_vec();
                    accumulate(grads, *beta, Tensor::new(shape, gb).expect("shape"));
                }
            }
            Op::Elu(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    accumulate(
                        grads,
                        *x,
                        zip3(gy, tx, y, |g, xv, yv| {
                            if xv > F::zero() {
                                g
                            } else {
                                g * (yv + F::one())
                            }
                        }),
                    );
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    accumulate(
                        grads,
                        *x,
                        zip(gy, tx, |g, xv| if xv > F::zero() { g } else { F::zero() }),
                    );
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, zip(gy, y, |g, yv| g * (F::one() - yv * yv)));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, zip(gy, y, |g, yv| g * yv * (F::one() - yv)));
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, zip(gy, y, |g, yv| g * yv));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let tx = self.value(*x);
                    accumulate(
                        grads,
                        *x,
                        zip(
                            gy,
                            tx,
                            |g, xv| {
                                if xv >= lo && xv <= hi {
                                    g
                                } else {
                                    F::zero()
                                }
                            },
                        ),
                    );
                }
            }
            Op::Round(x, mode) => {
                if self.needs(*x) {
                    let g = match mode {
                        RoundMode::Hard => gy.map(|_| F::zero()),
                        RoundMode::StraightThrough | RoundMode::Identity => gy.clone(),
                    };
                    accumulate(grads, *x, g);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let g = gy.item();
                    accumulate(grads, *x, Tensor::full(self.shape(*x), g));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = F::lit(self.value(*x).numel() as f64);
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gy.item() / n));
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let n = F::lit(tx.rows() as f64);
                    let c = tx.cols();
                    let data = (0..tx.numel()).map(|i| gy.data()[i % c] / n).collect();
                    accumulate(
                        grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), data).expect("shape"),
                    );
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let tt = self.value(*table);
                    let mut g = Tensor::zeros(tt.shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, &b) in g.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *table, g);
                }
            }
            Op::RepeatRows(x, factor) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let mut g = Tensor::zeros(tx.shape());
                    for r in 0..gy.rows() {
                        for (a, &b) in g.row_mut(r / factor).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let rows = self.value(x).rows();
                    if self.needs(x) {
                        accumulate(grads, x, gy.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let mut g = Tensor::zeros(self.shape(*x));
                    for r in 0..gy.rows() {
                        g.row_mut(start + r).copy_from_slice(gy.row(r));
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::L2NormRows(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut g = vec![F::zero(); tx.numel()];
                    for r in 0..tx.rows() {
                        let n = tx.row(r).iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..c {
                            g[r * c + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    accumulate(
                        grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), g).expect("shape"),
                    );
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = F::lit(2.0) * gy.item() / F::lit(ta.numel().max(1) as f64);
                let ga = zip(ta, tb, |x, y| k * (x - y));
                if self.needs(*b) {
                    accumulate(grads, *b, ga.map(|v| -v));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, ga);
                }
            }
            Op::KlMargin { mu, sigma, .. } => {
                // Hinge: zero gradient wherever the loss is clamped at 0.
                if y.item() <= F::zero() {
                    return;
                }
                let (tm, ts) = (self.value(*mu), self.value(*sigma));
                let k = gy.item() / F::lit(tm.rows() as f64);
                if self.needs(*mu) {
                    accumulate(grads, *mu, tm.map(|m| k * m));
                }
                if self.needs(*sigma) {
                    accumulate(grads, *sigma, ts.map(|s| k * (s - F::one() / s)));
                }
            }
            Op::SymCrossEntropy(c) => {
                if self.needs(*c) {
                    let t = self.value(*c);
                    let n = t.rows();
                    let (row_lse, col_lse) = log_sum_exps(t);
                    let k = gy.item() * F::lit(0.5) / F::lit(n as f64);
                    let mut g = vec![F::zero(); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let v = t.data()[i * n + j];
                            let mut s = (v - row_lse[i]).exp() + (v - col_lse[j]).exp();
                            if i == j {
                                s -= F::lit(2.0);
                            }
                            g[i * n + j] = k * s;
                        }
                    }
                    accumulate(grads, *c, Tensor::matrix(n, n, g).expect("shape"));
                }
            }
        }
    }

    fn conv_backward(
        &self,
        gy: &Tensor<F>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, cout) = (geom.cin, geom.cout);
        let t_in = tx.rows() as isize;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = vec![F::zero(); if need_x { tx.numel() } else { 0 }];
        let mut gw = vec![F::zero(); if need_w { tw.numel() } else { 0 }];
        for i in 0..gy.rows() {
            let g = gy.row(i);
            for tap in 0..geom.kernel {
                let j = geom.input_index(i, tap);
                if j < 0 || j >= t_in {
                    continue;
                }
                let j = j as usize;
                let wt = &tw.data()[tap * cin * cout..(tap + 1) * cin * cout];
                if need_x {
                    for c in 0..cin {
                        let wr = &wt[c * cout..(c + 1) * cout];
                        let mut acc = F::zero();
                        for (&a, &bv) in g.iter().zip(wr) {
                            acc += a * bv;
                        }
                        gx[j * cin + c] += acc;
                    }
                }
                if need_w {
                    let gwt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                    for (c, &xv) in tx.row(j).iter().enumerate() {
                        for (a, &gv) in gwt[c * cout..(c + 1) * cout].iter_mut().zip(g) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(
                grads,
                x,
                Tensor::new(tx.shape().to_vec(), gx).expect("shape"),
            );
        }
        if need_w {
            accumulate(
                grads,
                w,
                Tensor::new(tw.shape().to_vec(), gw).expect("shape"),
            );
        }
        self.bias_backward(gy, b, grads);
    }

    fn conv_t_backward(
        &self,
        gy: &Tensor<F>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvTGeom,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, cout) = (geom.cin, geom.cout);
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = vec![F::zero(); if need_x { tx.numel() } else { 0 }];
        let mut gw = vec![F::zero(); if need_w { tw.numel() } else { 0 }];
        for o in 0..gy.rows() {
            let g = gy.row(o);
            for tap in 0..geom.kernel.min(o + 1) {
                if (o - tap) % geom.stride != 0 {
                    continue;
                }
                let i = (o - tap) / geom.stride;
                if i >= tx.rows() {
                    continue;
                }
                let wt = &tw.data()[tap * cin * cout..(tap + 1) * cin * cout];
                if need_x {
                    for c in 0..cin {
                        let wr = &wt[c * cout..(c + 1) * cout];
                        let mut acc = F::zero();
                        for (&a, &bv) in g.iter().zip(wr) {
                            acc += a * bv;
                        }
                        gx[i * cin + c] += acc;
                    }
                }
                if need_w {
                    let gwt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                    for (c, &xv) in tx.row(i).iter().enumerate() {
                        for (a, &gv) in gwt[c * cout..(c + 1) * cout].iter_mut().zip(g) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(
                grads,
                x,
                Tensor::new(tx.shape().to_vec(), gx).expect("shape"),
            );
        }
        if need_w {
            accumulate(
                grads,
                w,
                Tensor::new(tw.shape().to_vec(), gw).expect("shape"),
            );
        }
        self.bias_backward(gy, b, grads);
    }

    fn bias_backward(&self, gy: &Tensor<F>, b: Option<Var>, grads: &mut [Option<Tensor<F>>]) {
        if let Some(b) = b {
            if self.needs(b) {
                let mut gb = vec![F::zero(); gy.cols()];
                for r in 0..gy.rows() {
                    for (a, &v) in gb.iter_mut().zip(gy.row(r)) {
                        *a += v;
                    }
                }
                let shape = self.shape(b).to_vec();
                accumulate(grads, b, Tensor::new(shape, gb).expect("shape"));
            }
        }
    }

    fn attention_backward(
        &self,
        gy: &Tensor<F>,
        [q, k, v]: [Var; 3],
        heads: usize,
        window: usize,
        rope_base: f64,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (tq.rows(), tq.cols());
        let hd = d / heads;
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let (qr, kr) = rotated(tq, tk, heads, rope_base);
        let mut gq = vec![F::zero(); t * d];
        let mut gk = vec![F::zero(); t * d];
        let mut gv = vec![F::zero(); t * d];
        let mut probs = Vec::new();
        let mut scratch = vec![F::zero(); d];
        let mut dp = Vec::new();
        for i in 0..t {
            let lo = (i + 1).saturating_sub(window);
            let n = i + 1 - lo;
            kernels::attend_row(
                &qr[i * d..(i + 1) * d],
                &kr[lo * d..(i + 1) * d],
                &tv.data()[lo * d..(i + 1) * d],
                heads,
                &mut scratch,
                &mut probs,
            );
            let g = gy.row(i);
            for h in 0..heads {
                let gh = &g[h * hd..(h + 1) * hd];
                let p = &probs[h * n..(h + 1) * n];
                dp.clear();
                let mut s = F::zero();
                for (jj, &pj) in p.iter().enumerate() {
                    let j = lo + jj;
                    let vh = &tv.data()[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut acc = F::zero();
                    for (&a, &b) in gh.iter().zip(vh) {
                        acc += a * b;
                    }
                    dp.push(acc);
                    s += pj * acc;
                    for (o, &a) in gv[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(gh) {
                        *o += pj * a;
                    }
                }
                let qh = &qr[i * d + h * hd..i * d + (h + 1) * hd];
                for (jj, &pj) in p.iter().enumerate() {
                    let j = lo + jj;
                    let ds = pj * (dp[jj] - s) * scale;
                    let kh = &kr[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &a) in gq[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(kh) {
                        *o += ds * a;
                    }
                    for (o, &a) in gk[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(qh) {
                        *o += ds * a;
                    }
                }
            }
        }
        for i in 0..t {
            kernels::rope_rotate(&mut gq[i * d..(i + 1) * d], i, heads, rope_base, -1.0);
            kernels::rope_rotate(&mut gk[i * d..(i + 1) * d], i, heads, rope_base, -1.0);
        }
        let shape = tq.shape().to_vec();
        if self.needs(q) {
            accumulate(grads, q, Tensor::new(shape.clone(), gq).expect("shape"));
        }
        if self.needs(k) {
            accumulate(grads, k, Tensor::new(shape.clone(), gk).expect("shape"));
        }
        if self.needs(v) {
            accumulate(grads, v, Tensor::new(shape, gv).expect("shape"));
        }
    }
}

fn rotated<F: Real>(q: &Tensor<F>, k: &Tensor<F>, heads: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let d = q.cols();
    let mut qr = q.data().to_vec();
    let mut kr = k.data().to_vec();
    for i in 0..q.rows() {
        kernels::rope_rotate(&mut qr[i * d..(i + 1) * d], i, heads, base, 1.0);
        kernels::rope_rotate(&mut kr[i * d..(i + 1) * d], i, heads, base, 1.0);
    }
    (qr, kr)
}

fn zip<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(b.shape().to_vec(), data).expect("shape")
}

fn zip3<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    c: &Tensor<F>,
    f: impl Fn(F, F, F) -> F,
) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(b.shape().to_vec(), data).expect("shape")
}

/// Diagonal Gaussian KL to the standard normal: summed over the last axis,
/// averaged over rows.
fn kl_value<F: Real>(mu: &Tensor<F>, sigma: &Tensor<F>) -> F {
    let mut s = F::zero();
    for (&m, &sg) in mu.data().iter().zip(sigma.data()) {
        s += m * m + sg * sg - F::one() - F::lit(2.0) * sg.ln();
    }
    F::lit(0.5) * s / F::lit(mu.rows() as f64)
}

/// Row-wise and column-wise log-sum-exp of a square matrix.
fn log_sum_exps<F: Real>(t: &Tensor<F>) -> (Vec<F>, Vec<F>) {
    let n = t.rows();
    let lse = |get: &dyn Fn(usize) -> F| {
        let mut m = F::neg_infinity();
        for j in 0..n {
            m = m.max(get(j));
        }
        let mut s = F::zero();
        for j in 0..n {
            s += (get(j) - m).exp();
        }
        m + s.ln()
    };
    let d = t.data();
    let rows = (0..n).map(|i| lse(&|j| d[i * n + j])).collect();
    let cols = (0..n).map(|j| lse(&|i| d[i * n + j])).collect();
    (rows, cols)
}
