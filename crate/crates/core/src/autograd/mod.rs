//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! forward value and enough saved state to run its backward rule, and hands
//! back a [`Var`] handle. Node indices are a topological order by
//! construction, so [`Graph::backward`] is a single reverse sweep.

mod gradcheck;

pub use gradcheck::{check_gradients, finite_diff_grad, max_rel_error};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    SelectToken {
        x: Var,
        position: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatLast(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the last [`Graph::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of `x` cut out of the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `a[n, p, q] · b[n, q, r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; n * p * r];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            gemm_acc(
                &ad[i * p * q..(i + 1) * p * q],
                &bd[i * q * r..(i + 1) * q * r],
                &mut out[i * p * r..(i + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, p, r], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(x).data(), r, c);
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + bias[n]`, broadcast over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Adds a non-differentiable tensor of the same shape (e.g. an attention mask bias).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("add_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    /// Elementwise product with a non-differentiable tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("mul_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `x * s` where `s` is a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    /// `x + s` where `s` is a one-element variable.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("add_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v + sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::AddScalar(x, s), rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Per-row normalization over the last axis (1/d variance) then `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.rows().map(|r| r.iter().sum()).collect();
        let mut shape = xv.shape().to_vec();
        shape.pop();
        let value = Tensor::new(shape, data).expect("rows");
        let rg = self.rg(x);
        self.push(value, Op::SumLast(x), rg)
    }

    /// Gathers rows of `table[V, d]`; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(shape_err("embedding", ts, &[]));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", prefix, &[ids.len()]));
        }
        let tdata = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[B, T, d]` → `[B·heads, T, d/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(shape_err("split_heads", &s, &[heads]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (bi * t + ti) * d + h * dh;
                    let to = ((bi * heads + h) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b * heads, t, dh], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SplitHeads { x, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(shape_err("merge_heads", &s, &[heads]));
        }
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let to = (bi * t + ti) * d + h * dh;
                    let from = ((bi * heads + h) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MergeHeads { x, heads }, rg))
    }

    /// `x[:, position, :]` of a `[B, T, d]` tensor.
    pub fn select_token(&mut self, x: Var, position: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || position >= s[1] {
            return Err(shape_err("select_token", &s, &[position]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let from = (bi * t + position) * d;
            out.extend_from_slice(&src[from..from + d]);
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectToken { x, position }, rg))
    }

    /// Mask-weighted mean over the sequence axis of `[B, T, d]`; `mask` is `[B·T]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(shape_err("masked_mean", &s, &[mask.len()]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count: f64 = mask[bi * t..(bi + 1) * t].iter().sum();
            if count <= 0.0 {
                return Err(Error::invalid(format!("row {bi} has an all-zero mask")));
            }
            for ti in 0..t {
                let w = mask[bi * t + ti] / count;
                if w == 0.0 {
                    continue;
                }
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last of nothing"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", self.shape(*first), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Scales every row (last axis) to unit L2 norm. Its backward is the
    /// tangent projection `(g − y(g·y)) / ‖x‖`, finite even when two
    /// normalized rows coincide downstream.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.numel() / d);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm("l2_normalize"));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, norms }, rg))
    }

    /// Mean over rows of `−log softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let t = targets[i];
            if t >= c {
                return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `max(z,0) − z·t + log(1 + e^{−|z|})` over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let zs = self.value(logits).data();
        if zs.len() != targets.len() {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("BCE target {t} outside [0, 1]")));
        }
        let total: f64 = zs
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / zs.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of the scalar `loss` on every reachable node that
    /// requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_same(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
        if let Some(buf) = self.buf(grads, v) {
            buf.iter_mut().zip(g).for_each(|(b, x)| *b += scale * x);
        }
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if let Some(buf) = self.buf(grads, v) {
            for (i, (b, &x)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(i, x);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.buf(grads, *a) {
                    gemm_bt_acc(g, bd, da, m, n, k);
                }
                if let Some(db) = self.buf(grads, *b) {
                    gemm_at_acc(ad, g, db, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.buf(grads, *a) {
                    for j in 0..n {
                        gemm_bt_acc(
                            &g[j * p * r..(j + 1) * p * r],
                            &bd[j * q * r..(j + 1) * q * r],
                            &mut da[j * p * q..(j + 1) * p * q],
                            p,
                            r,
                            q,
                        );
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for j in 0..n {
                        gemm_at_acc(
                            &ad[j * p * q..(j + 1) * p * q],
                            &g[j * p * r..(j + 1) * p * r],
                            &mut db[j * q * r..(j + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            Op::TransposeLast(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                self.acc_same(grads, *x, &back, 1.0);
            }
            Op::Reshape(x) | Op::AddConst(x) => self.acc_same(grads, *x, g, 1.0),
            Op::Add(a, b) => {
                self.acc_same(grads, *a, g, 1.0);
                self.acc_same(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_same(grads, *a, g, 1.0);
                self.acc_same(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |j, x| x * bd[j]);
                self.acc_map(grads, *b, g, |j, x| x * ad[j]);
            }
            Op::AddBias(x, bias) => {
                self.acc_same(grads, *x, g, 1.0);
                let n = self.value(*bias).numel();
                if let Some(db) = self.buf(grads, *bias) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MulConst(x, c) => self.acc_map(grads, *x, g, |j, v| v * c[j]),
            Op::Scale(x, s) => self.acc_same(grads, *x, g, *s),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                self.acc_same(grads, *x, g, sv);
                let xd = self.value(*x).data();
                let ds: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum();
                if let Some(buf) = self.buf(grads, *s) {
                    buf[0] += ds;
                }
            }
            Op::AddScalar(x, s) => {
                self.acc_same(grads, *x, g, 1.0);
                let ds: f64 = g.iter().sum();
                if let Some(buf) = self.buf(grads, *s) {
                    buf[0] += ds;
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dxr, yr), gr) in dx
                        .chunks_exact_mut(n)
                        .zip(out.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.buf(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    let df = d as f64;
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..d {
                            dxr[j] += inv / df * (df * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, v| v * gelu_grad(xd[j]));
            }
            Op::Tanh(x) => self.acc_map(grads, *x, g, |j, v| v * (1.0 - out[j] * out[j])),
            Op::Sigmoid(x) => self.acc_map(grads, *x, g, |j, v| v * out[j] * (1.0 - out[j])),
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, v| {
                    if xd[j] > 0.0 {
                        v
                    } else if xd[j] < 0.0 {
                        -v
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_map(grads, *x, &vec![g0; self.value(*x).numel()], |_, v| v);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / n as f64;
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|b| *b += gv);
                }
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                if let Some(buf) = self.buf(grads, *x) {
                    for (row, &gv) in buf.chunks_exact_mut(n).zip(g) {
                        row.iter_mut().for_each(|b| *b += gv);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                if let Some(dt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                if let Some(dx) = self.buf(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let to = (bi * t + ti) * d + h * dh;
                                let from = ((bi * heads + h) * t + ti) * dh;
                                for j in 0..dh {
                                    dx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = dh * heads;
                if let Some(dx) = self.buf(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let from = (bi * t + ti) * d + h * dh;
                                let to = ((bi * heads + h) * t + ti) * dh;
                                for j in 0..dh {
                                    dx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectToken { x, position } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(dx) = self.buf(grads, *x) {
                    for bi in 0..b {
                        let to = (bi * t + position) * d;
                        for j in 0..d {
                            dx[to + j] += g[bi * d + j];
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(dx) = self.buf(grads, *x) {
                    for bi in 0..b {
                        let count: f64 = mask[bi * t..(bi + 1) * t].iter().sum();
                        for ti in 0..t {
                            let w = mask[bi * t + ti] / count;
                            for j in 0..d {
                                dx[(bi * t + ti) * d + j] += w * g[bi * d + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(dp) = self.buf(grads, *p) {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, ((dxr, yr), gr)) in dx
                        .chunks_exact_mut(d)
                        .zip(out.chunks_exact(d))
                        .zip(g.chunks_exact(d))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / targets.len() as f64;
                if let Some(dl) = self.buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let zs = self.value(*logits).data();
                let scale = g[0] / targets.len() as f64;
                if let Some(dl) = self.buf(grads, *logits) {
                    for (j, (&z, &t)) in zs.iter().zip(targets).enumerate() {
                        dl[j] += scale * (sigmoid(z) - t);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    sigmoid(z)
}

/// Transposes every trailing `[r, c]` block of `data`.
fn transpose_blocks(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (blk_in, blk_out) in data.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                blk_out[j * r + i] = blk_in[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
