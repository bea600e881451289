//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is the computation record for one forward pass: every
//! operation appends a node, so node order is already a topological order.
//! [`Graph::backward`] walks that order in reverse exactly once and
//! accumulates gradients into every leaf that requires them.
//!
//! Shapes are strict. The only implicit broadcasts are [`Graph::scale`],
//! [`Graph::add_scalar`] and [`Graph::add_bias`].

use std::collections::BTreeMap;

use crate::error::{Result, VoltaError};
use crate::tensor::{ParamStore, Tensor};

/// Epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean {
        input: Var,
        axis: Option<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Take {
        input: Var,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    ClampMin {
        input: Var,
        min: f64,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean { .. } => "mean",
            Op::Gather { .. } => "gather",
            Op::Take { .. } => "take",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ClampMin { .. } => "clamp_min",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::AddConst(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::Mean { input, .. }
            | Op::Take { input, .. }
            | Op::Softmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::ClampMin { input, .. } => vec![*input],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// One entry of the computation record, as exposed by [`Graph::record`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecordEntry {
    pub tag: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Computation record for one forward pass.
///
/// A graph belongs to a single step and a single thread; independent graphs
/// can be evaluated in parallel.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(&Tensor::scalar(value))
    }

    /// Binds a named parameter from `store`, reusing the node if it was
    /// already bound in this graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients of all bound parameters.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.params
            .iter()
            .map(|(name, v)| (name.as_str(), self.nodes[v.0].grad.as_deref()))
    }

    pub fn zero_grad(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    /// The recorded operations in topological order.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                tag: n.op.tag(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VoltaError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::AddScalar(a), a, |x| x + c)
    }

    /// Adds a bias vector of length `n` to every row of an `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.numel(b) != n {
            return Err(VoltaError::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddBias(x, b)))
    }

    /// Adds a constant tensor (for example an attention mask); no gradient
    /// flows into `c`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(VoltaError::Dimension {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let value = self.value(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddConst(x)))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(VoltaError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_kernel(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(VoltaError::Dimension {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) || shape.contains(&0) {
            return Err(VoltaError::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| VoltaError::DegenerateInput("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(VoltaError::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(VoltaError::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                value.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(VoltaError::Dimension {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(a);
        let mut value = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            value.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(shape, value, Op::Slice { input: a, axis, start }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Mean of all elements (`axis = None`) or along one axis, keeping that
    /// axis with length 1.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        match axis {
            None => {
                let x = self.value(a);
                let m = x.iter().sum::<f64>() / x.len() as f64;
                Ok(self.push(vec![1], vec![m], Op::Mean { input: a, axis }))
            }
            Some(ax) => {
                let s = self.shape(a).to_vec();
                if ax >= s.len() {
                    return Err(VoltaError::Dimension {
                        op: "mean",
                        lhs: s,
                        rhs: vec![ax],
                    });
                }
                let (outer, len, inner) = axis_split(&s, ax);
                let x = self.value(a);
                let mut value = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for r in 0..inner {
                            value[o * inner + r] += x[(o * len + i) * inner + r];
                        }
                    }
                }
                value.iter_mut().for_each(|v| *v /= len as f64);
                let mut shape = s;
                shape[ax] = 1;
                Ok(self.push(shape, value, Op::Mean { input: a, axis }))
            }
        }
    }

    /// Embedding lookup: rows `ids` of a `[V×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(VoltaError::Dimension {
                op: "gather",
                lhs: s,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(VoltaError::DegenerateInput("gather with no ids".into()));
        }
        let (v, d) = (s[0], s[1]);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(VoltaError::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            value.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks flat elements by index into a 1-D result.
    pub fn take(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(VoltaError::DegenerateInput("take with no indices".into()));
        }
        let n = self.numel(a);
        let mut value = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(VoltaError::Index {
                    what: "take",
                    index: i,
                    size: n,
                });
            }
            value.push(self.value(a)[i]);
        }
        Ok(self.push(
            vec![indices.len()],
            value,
            Op::Take {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.numel(gamma) != d || self.numel(beta) != d {
            return Err(VoltaError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(Op::Gelu(a), a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(Op::Exp(a), a, f64::exp)
    }

    /// Natural log; negative inputs are rejected, zero maps to `-inf`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| **x < 0.0 || x.is_nan()) {
            return Err(VoltaError::Contract(format!("log of {x}")));
        }
        Ok(self.map(Op::Log(a), a, f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(Op::Sigmoid(a), a, sigmoid)
    }

    /// `log σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(Op::LogSigmoid(a), a, |x| x.min(0.0) - (-x.abs()).exp().ln_1p())
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(VoltaError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let s = self.shape(a).to_vec();
        let mut value = self.value(a).to_vec();
        let (outer, len, inner) = axis_split(&s, axis);
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + r;
                let max = (0..len).map(|i| value[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (value[idx(i)] - max).exp();
                    value[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    value[idx(i)] /= z;
                }
            }
        }
        Ok(self.push(s, value, Op::Softmax { input: a, axis }))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let s = self.shape(a).to_vec();
        let mut value = self.value(a).to_vec();
        let (outer, len, inner) = axis_split(&s, axis);
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + r;
                let max = (0..len).map(|i| value[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (value[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    value[idx(i)] -= lse;
                }
            }
        }
        Ok(self.push(s, value, Op::LogSoftmax { input: a, axis }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n×V]` logits, skipping positions equal to `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(VoltaError::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (s[0], s[1]);
        let mut kept = Vec::with_capacity(n);
        for &t in targets {
            if t == ignore_id {
                kept.push(None);
            } else if t >= v {
                return Err(VoltaError::Index {
                    what: "vocabulary",
                    index: t,
                    size: v,
                });
            } else {
                kept.push(Some(t));
            }
        }
        let n_eff = kept.iter().filter(|t| t.is_some()).count();
        if n_eff == 0 {
            return Err(VoltaError::DegenerateInput("every target position is ignored".into()));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, t) in kept.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|r| (r - max).exp()).sum();
            for (j, r) in row.iter().enumerate() {
                probs[i * v + j] = (r - max).exp() / z;
            }
            if let Some(t) = t {
                loss += max + z.ln() - row[*t];
            }
        }
        loss /= n_eff as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
            },
        ))
    }

    /// `max(x, min)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.map(Op::ClampMin { input: a, min }, a, move |x| x.max(min))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Gradients are *added* to the leaves' existing gradients, so calling
    /// this twice without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(VoltaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Adds into the gradient slot of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G · Bᵀ
                acc(*a, &mut |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            d[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va[r * k + p];
                            let drow = &mut d[p * n..(p + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(x, y)| *x += av * y);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = &nodes[a.0].shape;
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    acc(*v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = axis_split(&nodes[input.0].shape, *axis);
                let width = node.shape[*axis];
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean { input, axis } => match axis {
                None => {
                    let n = nodes[input.0].value.len() as f64;
                    acc(*input, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Some(ax) => {
                    let (outer, len, inner) = axis_split(&nodes[input.0].shape, *ax);
                    acc(*input, &mut |d| {
                        for o in 0..outer {
                            for i in 0..len {
                                for r in 0..inner {
                                    d[(o * len + i) * inner + r] += g[o * inner + r] / len as f64;
                                }
                            }
                        }
                    });
                }
            },
            Op::Gather { table, ids } => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * dim..(id + 1) * dim];
                        dst.iter_mut()
                            .zip(&g[row * dim..(row + 1) * dim])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Take { input, indices } => acc(*input, &mut |d| {
                for (k, &i) in indices.iter().enumerate() {
                    d[i] += g[k];
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dim = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                acc(*gamma, &mut |d| {
                    for (r, row) in g.chunks(dim).enumerate() {
                        for j in 0..dim {
                            d[j] += row[j] * xhat[r * dim + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(dim) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(dim).enumerate() {
                        let xh = &xhat[r * dim..(r + 1) * dim];
                        let dxhat: Vec<f64> = row.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xs = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        let x = xs[k];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let xs = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xs[k];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let xs = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(-xs[k]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + r;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                d[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + r;
                            let gs: f64 = (0..len).map(|i| g[idx(i)]).sum();
                            for i in 0..len {
                                d[idx(i)] += g[idx(i)] - y[idx(i)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].shape[1];
                let n_eff = targets.iter().filter(|t| t.is_some()).count() as f64;
                acc(*logits, &mut |d| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            d[i * v + j] += g[0] * (probs[i * v + j] - onehot) / n_eff;
                        }
                    }
                });
            }
            Op::ClampMin { input, min } => {
                let xs = &nodes[input.0].value;
                acc(*input, &mut |d| {
                    for k in 0..d.len() {
                        if xs[k] > *min {
                            d[k] += g[k];
                        }
                    }
                });
            }
        }
    }
}
