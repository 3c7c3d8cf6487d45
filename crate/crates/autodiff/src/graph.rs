//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output; nodes only reference earlier
//! nodes, so the node vector is already in topological order and backward is
//! a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttnDims};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        len: usize,
        dilation: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    BroadcastRows {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        norm: T,
    },
    KlDiv {
        log_probs: Var,
        target: Vec<T>,
        rows: usize,
    },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// A computation graph. Parameters are read from an optional borrowed store.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// Graph without trainable parameters.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("param node requires a store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant or differentiable input (gradients are available via [`Gradients::wrt`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| TensorError::InvalidArgument {
            op: "param",
            msg: "graph has no parameter store".into(),
        })?;
        if id.0 >= store.len() {
            return Err(TensorError::UnknownParam(format!("#{}", id.0)));
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op_name, out, op)
    }

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(op_name, out, op)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.numel() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        self.push("add_bias", out, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        Ok(kernels::split_axis(s, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (o, n, i) = self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_axis(t.data(), o, n, i, false))?;
        self.push("softmax", out, Op::Softmax { x: a, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (o, n, i) = self.check_axis("log_softmax", a, axis)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_axis(t.data(), o, n, i, true))?;
        self.push("log_softmax", out, Op::LogSoftmax { x: a, axis })
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("layer_norm", a, axis)?;
        let t = self.value(a);
        let x = t.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let nf = T::of(n as f64);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| x[idx(i)]).sum::<T>() / nf;
                let var = (0..n).map(|i| (x[idx(i)] - mean).powi(2)).sum::<T>() / nf;
                let is = T::one() / (var + T::of(eps)).sqrt();
                inv_std[o * inner + j] = is;
                for i in 0..n {
                    xhat[idx(i)] = (x[idx(i)] - mean) * is;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        self.push("layer_norm", out, Op::LayerNorm { x: a, axis, xhat, inv_std })
    }

    /// Causal dilated convolution over `x: [batch*seq_len, cin]` with
    /// `w: [kernel, cin, cout]`. The sequence is left-padded with
    /// `(kernel-1)*dilation` zeros so the output keeps `seq_len` steps.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, seq_len: usize, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] || seq_len == 0 || sx[0] % seq_len != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                msg: "dilation must be >= 1".into(),
            });
        }
        let (kernel, cin, cout) = (sw[0], sw[1], sw[2]);
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let batch = sx[0] / seq_len;
        let data = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            seq_len,
            cin,
            cout,
            kernel,
            dilation,
        );
        let out = Tensor::new(vec![sx[0], cout], data)?;
        self.push(
            "conv1d",
            out,
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len: seq_len,
                dilation,
            },
        )
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q: [batch*lq, d]`, `k, v: [batch*lk, d]`; heads split `d` evenly.
    /// `mask[i*lk + j] == false` blocks query `i` from key `j`.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let bad = sq.len() != 2
            || sk != sv
            || sk.len() != 2
            || sq[1] != sk[1]
            || batch == 0
            || heads == 0
            || sq[0] % batch != 0
            || sk[0] % batch != 0
            || sq[1] % heads != 0;
        if bad {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let dims = AttnDims {
            batch,
            lq: sq[0] / batch,
            lk: sk[0] / batch,
            heads,
            dim: sq[1],
        };
        if let Some(m) = mask {
            if m.len() != dims.lq * dims.lk {
                return Err(TensorError::InvalidArgument {
                    op: "multi_head_attention",
                    msg: format!("mask has {} entries, expected {}", m.len(), dims.lq * dims.lk),
                });
            }
            if (0..dims.lq).any(|i| m[i * dims.lk..(i + 1) * dims.lk].iter().all(|&x| !x)) {
                return Err(TensorError::InvalidArgument {
                    op: "multi_head_attention",
                    msg: "mask blocks every key for some query".into(),
                });
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            dims,
        );
        let out = Tensor::new(vec![sq[0], sq[1]], out)?;
        self.push("multi_head_attention", out, Op::Attention { q, k, v, dims, probs })
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("table must be 2-D, got {:?}", t.shape()),
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for vocabulary {vocab}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Columns `start..start+len` of a 2-D view over the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    /// Repeats each row `times` times consecutively: `[b, d] -> [b*times, d]`.
    pub fn broadcast_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "broadcast_rows",
                msg: format!("expected 2-D input, got {:?}", t.shape()),
            });
        }
        let mut data = Vec::with_capacity(t.numel() * times);
        for r in 0..t.rows() {
            for _ in 0..times {
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::new(vec![t.rows() * times, t.cols()], data)?;
        self.push("broadcast_rows", out, Op::BroadcastRows { x, times })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / T::of(t.numel().max(1) as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    data[o * inner + j] += t.data()[(o * n + i) * inner + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push("sum_axis", out, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-sample mean over consecutive groups of `group` rows:
    /// `[b*group, d] -> [b, d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_groups",
                msg: format!("cannot group {s:?} by {group}"),
            });
        }
        let r = self.reshape(x, &[s[0] / group, group, s[1]])?;
        self.mean_axis(r, 1)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::of(p.numel().max(1) as f64);
        let s = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        self.push("mse", Tensor::scalar(s), Op::Mse(pred, target))
    }

    /// Softmax cross-entropy against class indices; weighted mean over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target class {bad} out of range for {c} classes"),
            });
        }
        let weights: Vec<T> = match weights {
            Some(w) => w.iter().map(|&x| T::of(x)).collect(),
            None => vec![T::one(); rows],
        };
        let norm = weights.iter().copied().sum::<T>();
        if norm <= T::zero() {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: "row weights sum to zero".into(),
            });
        }
        let logp = kernels::softmax_axis(t.data(), rows, c, 1, true);
        let loss = (0..rows).map(|r| -weights[r] * logp[r * c + targets[r]]).sum::<T>() / norm;
        let probs = logp.iter().map(|x| x.exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                norm,
            },
        )
    }

    /// `mean_rows Σ_c target·(ln target − log_probs)` with `0·ln 0 = 0`.
    /// Rows of `target` must be probability vectors within 1e-6.
    pub fn kl_div(&mut self, log_probs: Var, target: &Tensor<T>) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                lhs: lp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (rows, c) = (lp.rows(), lp.cols());
        for r in 0..rows {
            let row = target.row(r);
            let sum = row.iter().map(|x| x.as_f64()).sum::<f64>();
            let min = row.iter().map(|x| x.as_f64()).fold(f64::INFINITY, f64::min);
            if (sum - 1.0).abs() > 1e-6 || min < -1e-12 {
                return Err(TensorError::NotSimplex {
                    op: "kl_div",
                    row: r,
                    sum,
                    min,
                });
            }
        }
        let mut total = T::zero();
        for i in 0..rows * c {
            let p = target.data()[i];
            if p > T::zero() {
                total += p * (p.ln() - lp.data()[i]);
            }
        }
        let loss = total / T::of(rows.max(1) as f64);
        self.push(
            "kl_div",
            Tensor::scalar(loss),
            Op::KlDiv {
                log_probs,
                target: target.data().to_vec(),
                rows,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.insert(*id, g.clone());
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.value(Var(i));
        let shaped = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                kernels::matmul_nt_acc(&mut da, g.data(), tb.data(), m, n, k);
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_tn_acc(&mut db, ta.data(), g.data(), m, k, n);
                accumulate(grads, *a, shaped(*a, da)?);
                accumulate(grads, *b, shaped(*b, db)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, shaped(*a, da)?);
                accumulate(grads, *b, shaped(*b, db)?);
            }
            Op::AddBias(x, b) => {
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for (j, &v) in g.data().iter().enumerate() {
                    db[j % c] += v;
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, shaped(*b, db)?);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                accumulate(grads, *a, shaped(*a, d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * (T::one() - y * y)).collect();
                accumulate(grads, *a, shaped(*a, d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                accumulate(grads, *a, shaped(*a, d)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *a, shaped(*a, d)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let s: T = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = y[idx(k)] * (gd[idx(k)] - s);
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let s: T = (0..n).map(|k| gd[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * s;
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::LayerNorm { x, axis, xhat, inv_std } => {
                let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
                let gd = g.data();
                let nf = T::of(n as f64);
                let mut d = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let mg = (0..n).map(|k| gd[idx(k)]).sum::<T>() / nf;
                        let mgx = (0..n).map(|k| gd[idx(k)] * xhat[idx(k)]).sum::<T>() / nf;
                        let is = inv_std[o * inner + j];
                        for k in 0..n {
                            d[idx(k)] = is * (gd[idx(k)] - mg - xhat[idx(k)] * mgx);
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len,
                dilation,
            } => {
                let sw = self.shape(*w);
                let (kernel, cin, cout) = (sw[0], sw[1], sw[2]);
                let (dx, dw, db) = kernels::conv1d_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    *batch,
                    *len,
                    cin,
                    cout,
                    kernel,
                    *dilation,
                );
                accumulate(grads, *x, shaped(*x, dx)?);
                accumulate(grads, *w, shaped(*w, dw)?);
                if let Some(b) = b {
                    accumulate(grads, *b, shaped(*b, db)?);
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    *dims,
                );
                accumulate(grads, *q, shaped(*q, dq)?);
                accumulate(grads, *k, shaped(*k, dk)?);
                accumulate(grads, *v, shaped(*v, dv)?);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![T::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(&mut dt[id * d..(id + 1) * d], T::one(), &g.data()[r * d..(r + 1) * d]);
                }
                accumulate(grads, *table, shaped(*table, dt)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::split_axis(out.shape(), *axis);
                let mut bufs: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let chunk = self.shape(*p)[*axis] * inner;
                        bufs[pi].extend_from_slice(&g.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (p, buf) in parts.iter().zip(bufs) {
                    accumulate(grads, *p, shaped(*p, buf)?);
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), g.cols());
                let mut d = vec![T::zero(); tx.numel()];
                for r in 0..tx.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::BroadcastRows { x, times } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![T::zero(); tx.numel()];
                for r in 0..tx.rows() {
                    for t in 0..*times {
                        kernels::axpy(&mut d[r * c..(r + 1) * c], T::one(), g.row(r * times + t));
                    }
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.clone().reshape(self.shape(*x).to_vec())?),
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let gv = g.item() / T::of(n as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::SumAxis { x, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = kernels::split_axis(sx, *axis);
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            d[(o * n + k) * inner + j] = g.data()[o * inner + j];
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let c = T::of(2.0) * g.item() / T::of(tp.numel().max(1) as f64);
                let dp: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&a, &b)| c * (a - b)).collect();
                let dt = dp.iter().map(|&x| -x).collect();
                accumulate(grads, *p, shaped(*p, dp)?);
                accumulate(grads, *t, shaped(*t, dt)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                norm,
            } => {
                let c = self.value(*logits).cols();
                let gv = g.item();
                let mut d = probs.clone();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * c + y] -= T::one();
                    let s = gv * weights[r] / *norm;
                    d[r * c..(r + 1) * c].iter_mut().for_each(|x| *x *= s);
                }
                accumulate(grads, *logits, shaped(*logits, d)?);
            }
            Op::KlDiv { log_probs, target, rows } => {
                let s = -g.item() / T::of((*rows).max(1) as f64);
                let d = target.iter().map(|&p| p * s).collect();
                accumulate(grads, *log_probs, shaped(*log_probs, d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
