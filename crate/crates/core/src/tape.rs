//! Reverse-mode automatic differentiation.
//!
//! Every primitive appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the recording order is already a topological order and
//! [`Tape::backward`] simply walks it in reverse. Tensors flowing through the
//! model are 2-D `[rows, cols]` matrices; sequence batches are stored as
//! `[batch * time, width]`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds, used to select a gradient rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Relu,
    Sum,
    Mean,
    Softmax,
    LayerNorm,
    Concat,
    SliceRows,
    SliceCols,
    Transpose,
    GatherRows,
    Dropout,
    CrossEntropy,
    KlDivergence,
    Attention,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let kind = match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "addrow" => OpKind::AddRow,
            "relu" => OpKind::Relu,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "softmax" => OpKind::Softmax,
            "layernorm" => OpKind::LayerNorm,
            "concat" => OpKind::Concat,
            "slicerows" => OpKind::SliceRows,
            "slicecols" => OpKind::SliceCols,
            "transpose" => OpKind::Transpose,
            "gatherrows" => OpKind::GatherRows,
            "dropout" => OpKind::Dropout,
            "crossentropy" => OpKind::CrossEntropy,
            "kldivergence" | "kl" => OpKind::KlDivergence,
            "attention" => OpKind::Attention,
            _ => return Err(format!("unknown op kind `{s}`")),
        };
        Ok(kind)
    }
}

/// Masking for [`Tape::attention_core`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnMask {
    /// Per batch item, number of leading keys that are real; later keys are padding.
    pub key_lens: Option<Vec<usize>>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            key_lens: None,
            causal: true,
        }
    }

    pub fn keys(key_lens: Vec<usize>) -> Self {
        Self {
            key_lens: Some(key_lens),
            causal: false,
        }
    }

    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_lens {
            Some(lens) => j < lens[b],
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    width: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: F },
    AddRow { x: Var, bias: Var },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    CrossEntropy { logits: Var, probs: Vec<F>, targets: Vec<Option<usize>>, count: usize },
    KlDivergence { student: Var, q: Vec<F>, p: Vec<F>, mask: Vec<bool>, count: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, scale: F, probs: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDivergence { .. } => OpKind::KlDivergence,
            Op::Attention { .. } => OpKind::Attention,
        })
    }
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records primitives and replays their gradient rules.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Test hook: perturbs the gradient rule of one primitive kind so that
    /// gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter that was reached by `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[F])> {
        let mut out: Vec<(ParamId, &[F])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    // ----- leaves -------------------------------------------------------

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a parameter as a gradient-tracked leaf. Repeated calls with the
    /// same id return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            F::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Usage(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| e.max(F::zero())).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`; identity when
    /// `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Usage(format!(
                "dropout rate must lie in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: F = d.iter().copied().sum::<F>() / F::lit(d.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    // ----- normalisation --------------------------------------------------

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(x);
        if d.iter().any(|v| v.is_nan() || *v == F::infinity()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let mut out = vec![F::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| d[at(j)]).fold(F::neg_infinity(), F::max);
                if max == F::neg_infinity() {
                    return Err(TensorError::Numeric { op: "softmax" });
                }
                let mut total = F::zero();
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if c < 2 {
            return Err(TensorError::Usage(
                "layer_norm needs at least two features".into(),
            ));
        }
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).rows();
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let cf = F::lit(c as f64);
        let eps = F::lit(eps);
        let mut xhat = vec![F::zero(); d.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let inv = F::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ----- shape manipulation ----------------------------------------------

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Usage(
                "concat needs at least one part and axis 0 or 1".into(),
            ));
        }
        let first = self.shape(parts[0]).to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let (rows, cols) = if axis == 0 {
            (total, first[1])
        } else {
            (first[0], total)
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.data(p));
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: s[0],
            });
        }
        let c = s[1];
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, c], out)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: *s.last().unwrap_or(&0),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Selects rows of a matrix by index; with an embedding table this is the
    /// token lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if idx.is_empty() {
            return Err(TensorError::Usage("gather_rows with no indices".into()));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: s[0],
                });
            }
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----- losses ---------------------------------------------------------

    /// Mean over non-pad rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (rows, v) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let d = self.data(logits);
        if d.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::Numeric { op: "cross_entropy" });
        }
        let mut probs = vec![F::zero(); rows * v];
        let mut tgt = Vec::with_capacity(rows);
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &d[r * v..(r + 1) * v];
            let logp = crate::tensor::log_softmax_row(row);
            for j in 0..v {
                probs[r * v + j] = logp[j].exp();
            }
            if t == pad_id {
                tgt.push(None);
                continue;
            }
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            total -= logp[t];
            count += 1;
            tgt.push(Some(t));
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::lit(count as f64)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: tgt,
                count,
            },
            rg,
        ))
    }

    /// Mean over unmasked rows of `KL(softmax(teacher) || softmax(student))`.
    /// The teacher is a constant: no gradient reaches it.
    pub fn kl_divergence(&mut self, student: Var, teacher: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("kl_divergence", student, teacher)?;
        let (rows, v) = (self.value(student).rows(), self.value(student).cols());
        if mask.len() != rows {
            return Err(TensorError::Shape {
                op: "kl_divergence",
                lhs: self.shape(student).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let (s, t) = (self.data(student), self.data(teacher));
        if s.iter().chain(t).any(|x| !x.is_finite()) {
            return Err(TensorError::Numeric { op: "kl_divergence" });
        }
        let mut q = vec![F::zero(); rows * v];
        let mut p = vec![F::zero(); rows * v];
        let mut total = F::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let lq = crate::tensor::log_softmax_row(&s[r * v..(r + 1) * v]);
            let lp = crate::tensor::log_softmax_row(&t[r * v..(r + 1) * v]);
            for j in 0..v {
                q[r * v + j] = lq[j].exp();
                p[r * v + j] = lp[j].exp();
            }
            if !mask[r] {
                continue;
            }
            count += 1;
            for j in 0..v {
                let pj = p[r * v + j];
                if pj > F::zero() {
                    total += pj * (lp[j] - lq[j]);
                }
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            (total / F::lit(count as f64)).max(F::zero())
        };
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                student,
                q,
                p,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    // ----- attention --------------------------------------------------------

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `[batch * tq, width]`, `k` and `v` are `[batch * tk, width]`;
    /// head `h` uses columns `h*d..(h+1)*d` with `d = width / heads`. Scores are
    /// multiplied by `scale` before the masked softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: F,
        mask: &AttnMask,
    ) -> Result<Var> {
        self.same_shape("attention(k, v)", k, v)?;
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let width = qs[1];
        if batch == 0 || heads == 0 || width % heads != 0 || qs[0] % batch != 0 || ks[0] % batch != 0
        {
            return Err(TensorError::Usage(format!(
                "attention: width {width} / heads {heads} / batch {batch} do not tile shapes {qs:?}, {ks:?}"
            )));
        }
        let dims = AttnDims {
            batch,
            heads,
            tq: qs[0] / batch,
            tk: ks[0] / batch,
            width,
        };
        if let Some(lens) = &mask.key_lens {
            if lens.len() != batch {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: vec![batch],
                    rhs: vec![lens.len()],
                });
            }
            if lens.iter().any(|&l| l == 0 || l > dims.tk) {
                return Err(TensorError::Usage(
                    "attention row has every key masked".into(),
                ));
            }
        }
        let d = width / heads;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![F::zero(); batch * heads * dims.tq * dims.tk];
        let mut out = vec![F::zero(); batch * dims.tq * width];
        let mut scores = vec![F::zero(); dims.tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for i in 0..dims.tq {
                    let qrow = &qd[(b * dims.tq + i) * width + off..][..d];
                    let mut max = F::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        if mask.allowed(b, i, j) {
                            let krow = &kd[(b * dims.tk + j) * width + off..][..d];
                            let dot: F = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                            *s = dot * scale;
                            if s.is_nan() {
                                return Err(TensorError::Numeric { op: "attention" });
                            }
                            max = max.max(*s);
                        } else {
                            *s = F::neg_infinity();
                        }
                    }
                    if max == F::neg_infinity() {
                        return Err(TensorError::Usage(
                            "attention row has every key masked".into(),
                        ));
                    }
                    let prow = &mut probs[((b * heads + h) * dims.tq + i) * dims.tk..][..dims.tk];
                    let mut total = F::zero();
                    for j in 0..dims.tk {
                        let e = if scores[j] == F::neg_infinity() {
                            F::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        prow[j] = e;
                        total += e;
                    }
                    let orow = &mut out[(b * dims.tq + i) * width + off..][..d];
                    for j in 0..dims.tk {
                        prow[j] = prow[j] / total;
                        let a = prow[j];
                        if a == F::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * dims.tk + j) * width + off..][..d];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![batch * dims.tq, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every reachable node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(TensorError::Usage(
                "backward called on an inference tape".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if self.fault.is_some() && self.nodes[i].op.kind() == self.fault {
                for e in g.iter_mut() {
                    *e *= F::lit(1.25);
                }
            }
            self.apply_rule(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize) -> F) {
        if let Some(slot) = self.slot(v) {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }

    fn apply_rule(&mut self, i: usize, g: &[F]) {
        // Split borrows: the node being processed is only read.
        let node_value = Arc::clone(&self.nodes[i].value);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bval = Arc::clone(&self.nodes[b.0].value);
                let aval = Arc::clone(&self.nodes[a.0].value);
                if let Some(slot) = self.slot(*a) {
                    // dA[m,k] += G[m,n] . B^T
                    F::gemm(m, n, k, g, (n as isize, 1), bval.data(), (1, n as isize), F::one(), slot);
                }
                if let Some(slot) = self.slot(*b) {
                    // dB[k,n] += A^T . G
                    F::gemm(k, m, n, aval.data(), (1, k as isize), g, (n as isize, 1), F::one(), slot);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |j| g[j]);
                self.accumulate(*b, |j| g[j]);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, |j| g[j]);
                self.accumulate(*b, |j| -g[j]);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (
                    Arc::clone(&self.nodes[a.0].value),
                    Arc::clone(&self.nodes[b.0].value),
                );
                self.accumulate(*a, |j| g[j] * bv.data()[j]);
                self.accumulate(*b, |j| g[j] * av.data()[j]);
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(*x, |j| g[j] * s);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(*x, |j| g[j]);
                let c = self.nodes[bias.0].value.numel();
                if let Some(slot) = self.slot(*bias) {
                    for (j, &e) in g.iter().enumerate() {
                        slot[j % c] += e;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                self.accumulate(*x, |j| {
                    if xv.data()[j] > F::zero() {
                        g[j]
                    } else {
                        F::zero()
                    }
                });
            }
            Op::Sum { x } => self.accumulate(*x, |_| g[0]),
            Op::Mean { x } => {
                let n = F::lit(self.nodes[x.0].value.numel() as f64);
                self.accumulate(*x, |_| g[0] / n);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node_value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(slot) = self.slot(*x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + c;
                            let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                slot[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.nodes[gain.0].value.numel();
                let gv = Arc::clone(&self.nodes[gain.0].value);
                if let Some(slot) = self.slot(*gain) {
                    for (j, &e) in g.iter().enumerate() {
                        slot[j % c] += e * xhat[j];
                    }
                }
                if let Some(slot) = self.slot(*bias) {
                    for (j, &e) in g.iter().enumerate() {
                        slot[j % c] += e;
                    }
                }
                if let Some(slot) = self.slot(*x) {
                    let cf = F::lit(c as f64);
                    for (r, &inv) in rstd.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let dxh: Vec<F> = g[range.clone()]
                            .iter()
                            .zip(gv.data())
                            .map(|(&e, &w)| e * w)
                            .collect();
                        let xh = &xhat[range.clone()];
                        let s1: F = dxh.iter().copied().sum();
                        let s2: F = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            slot[r * c + j] += inv / cf * (cf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let cols = node_value.cols();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p.0].value.shape().to_vec();
                    if *axis == 0 {
                        let n = ps[0] * ps[1];
                        let base = offset;
                        self.accumulate(p, |j| g[base + j]);
                        offset += n;
                    } else {
                        let (pc, base) = (ps[1], offset);
                        self.accumulate(p, |j| g[(j / pc) * cols + base + j % pc]);
                        offset += pc;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node_value.cols();
                let (lo, hi) = (start * c, start * c + g.len());
                self.accumulate(*x, |j| {
                    if j >= lo && j < hi {
                        g[j - lo]
                    } else {
                        F::zero()
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = node_value.cols();
                let xc = self.nodes[x.0].value.cols();
                let start = *start;
                self.accumulate(*x, |j| {
                    let (r, c) = (j / xc, j % xc);
                    if c >= start && c < start + len {
                        g[r * len + c - start]
                    } else {
                        F::zero()
                    }
                });
            }
            Op::Transpose { x } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (r, c) = (s[0], s[1]);
                self.accumulate(*x, |j| g[(j % c) * r + j / c]);
            }
            Op::GatherRows { x, idx } => {
                let c = node_value.cols();
                if let Some(slot) = self.slot(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            slot[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.accumulate(*x, |j| g[j] * mask[j]),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                if *count > 0 {
                    let v = probs.len() / targets.len();
                    let scale = g[0] / F::lit(*count as f64);
                    self.accumulate(*logits, |j| {
                        let (r, c) = (j / v, j % v);
                        match targets[r] {
                            None => F::zero(),
                            Some(t) => {
                                let onehot = if c == t { F::one() } else { F::zero() };
                                scale * (probs[j] - onehot)
                            }
                        }
                    });
                }
            }
            Op::KlDivergence {
                student,
                q,
                p,
                mask,
                count,
            } => {
                if *count > 0 {
                    let v = q.len() / mask.len();
                    let scale = g[0] / F::lit(*count as f64);
                    self.accumulate(*student, |j| {
                        if mask[j / v] {
                            scale * (q[j] - p[j])
                        } else {
                            F::zero()
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            } => self.attention_backward(*q, *k, *v, *dims, *scale, probs, g),
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        scale: F,
        probs: &[F],
        g: &[F],
    ) {
        let AttnDims {
            batch,
            heads,
            tq,
            tk,
            width,
        } = dims;
        let d = width / heads;
        let (qv, kv, vv) = (
            Arc::clone(&self.nodes[q.0].value),
            Arc::clone(&self.nodes[k.0].value),
            Arc::clone(&self.nodes[v.0].value),
        );
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut dalpha = vec![F::zero(); tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for i in 0..tq {
                    let prow = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * width + off..][..d];
                    let mut dot = F::zero();
                    for j in 0..tk {
                        if prow[j] == F::zero() {
                            dalpha[j] = F::zero();
                            continue;
                        }
                        let vrow = &vd[(b * tk + j) * width + off..][..d];
                        dalpha[j] = grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                        dot += prow[j] * dalpha[j];
                        let dvrow = &mut dv[(b * tk + j) * width + off..][..d];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += prow[j] * x;
                        }
                    }
                    let qrow = &qd[(b * tq + i) * width + off..][..d];
                    for j in 0..tk {
                        if prow[j] == F::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dalpha[j] - dot) * scale;
                        let krow = &kd[(b * tk + j) * width + off..][..d];
                        let dqrow = &mut dq[(b * tq + i) * width + off..][..d];
                        for (o, &x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[(b * tk + j) * width + off..][..d];
                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(q, |j| dq[j]);
        self.accumulate(k, |j| dk[j]);
        self.accumulate(v, |j| dv[j]);
    }
}
