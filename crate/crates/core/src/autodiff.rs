//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends one node whose inputs
//! were created earlier, so creation order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are built fresh
//! for every training step and dropped afterwards.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, Tensor};

/// Row-wise layer-norm epsilon. Small enough that normalized rows have unit
/// variance to ~1e-9 for any non-degenerate row.
pub const LAYER_NORM_EPS: f64 = 1e-12;

const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    TopKMean {
        x: Var,
        k: usize,
        selected: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is not on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn require_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err!("{what} expects a 2-D tensor, got shape {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d(a, "matmul")?;
        let (k2, n) = self.require_2d(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a[M×N] + b[N]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.require_2d(a, "add_row")?;
        if self.value(b).numel() != n {
            return Err(dim_err!("add_row: bias of {} values for {n} columns", self.value(b).numel()));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *x += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(dim_err!("mul_const: shapes {:?} and {:?} differ", self.shape(a), c.shape()));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c.data().to_vec()), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, math::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + math::erf(x / core::f64::consts::SQRT_2)),
            Op::Gelu(a),
        )
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for shape {:?}", shape));
        }
        let input = self.value(x);
        if input.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = input.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = math::exp(src[at(j)] - m);
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` over columns.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.require_2d(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err!("layer_norm affine parameters must have {n} values"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_2d(x, "transpose")?;
        let src = self.value(x);
        let value = Tensor::from_fn(n, m, |r, c| src.at(c, r));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of zero tensors"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.require_2d(p, "concat")?);
        }
        let value = match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(dim_err!("concat axis 0: column counts differ"));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
                Tensor::new(vec![m, n], data)?
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(dim_err!("concat axis 1: row counts differ"));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            _ => return Err(dim_err!("concat axis must be 0 or 1, got {axis}")),
        };
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup: `out[i] = table[idx[i]]`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.require_2d(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(dim_err!("gather_rows index {bad} out of range for {m} rows"));
        }
        let t = self.value(table);
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![idx.len(), n], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean of the `k` largest entries along axis 0: `[T] -> []`,
    /// `[T×C] -> [C]`. Ties go to the lowest index.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (t, c, out_shape) = match shape.len() {
            1 => (shape[0], 1, Vec::new()),
            2 => (shape[0], shape[1], vec![shape[1]]),
            _ => return Err(dim_err!("topk_mean expects 1-D or 2-D input, got {:?}", shape)),
        };
        if k == 0 || k > t {
            return Err(Error::Parameter(format!("top-k size {k} outside 1..={t}")));
        }
        let src = self.value(x).data();
        let mut selected = Vec::with_capacity(k * c);
        let mut out = Vec::with_capacity(c);
        let mut order: Vec<usize> = Vec::with_capacity(t);
        for col in 0..c {
            order.clear();
            order.extend(0..t);
            order.sort_by(|&i, &j| {
                src[j * c + col]
                    .partial_cmp(&src[i * c + col])
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            let mut s = 0.0;
            for &i in &order[..k] {
                s += src[i * c + col];
                selected.push(i * c + col);
            }
            out.push(s / k as f64);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::TopKMean { x, k, selected }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Divide every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_2d(x, "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let norm = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
            norms.push(norm);
            for c in 0..n {
                out[r * n + c] = row[c] / norm;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Per-row `log Σ_{j: mask[i][j]} exp(x[i][j])`, `[M×N] -> [M]`.
    /// Every row must select at least one entry.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.require_2d(x, "masked_log_sum_exp")?;
        if mask.len() != m * n {
            return Err(dim_err!("mask has {} entries for a {m}×{n} input", mask.len()));
        }
        let src = self.value(x).data();
        let mut probs = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let sel = &mask[r * n..(r + 1) * n];
            let row = &src[r * n..(r + 1) * n];
            let mx = (0..n)
                .filter(|&c| sel[c])
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Parameter(format!("masked_log_sum_exp: row {r} selects nothing")));
            }
            let mut z = 0.0;
            for c in (0..n).filter(|&c| sel[c]) {
                let e = math::exp(row[c] - mx);
                probs[r * n + c] = e;
                z += e;
            }
            for c in (0..n).filter(|&c| sel[c]) {
                probs[r * n + c] /= z;
            }
            out.push(mx + math::ln(z));
        }
        let value = Tensor::new(vec![m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Full (non-causal) multi-head scaled dot-product attention over
    /// already-projected `q`, `k`, `v` of shape `[T×d]`. Columns are split
    /// into `heads` contiguous groups.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.require_2d(q, "attention")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("attention width {d} not divisible into {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut p[i * t..(i + 1) * t];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..t {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = math::exp(*s - mx);
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let a = row[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm_a_bt_acc(g, bd, ga, m, n, k));
                self.acc(grads, *b, |gb| gemm_at_b_acc(ad, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc_zip(grads, *a, g, |_| 1.0);
                self.acc_zip(grads, *b, g, |_| 1.0);
            }
            Op::AddRow(a, b) => {
                self.acc_zip(grads, *a, g, |_| 1.0);
                let n = self.value(*b).numel();
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc_zip(grads, *a, g, |_| 1.0);
                self.acc_zip(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_zip(grads, *a, g, |i| bd[i]);
                self.acc_zip(grads, *b, g, |i| ad[i]);
            }
            Op::MulConst(a, c) => self.acc_zip(grads, *a, g, |i| c[i]),
            Op::Affine(a, s) => self.acc_zip(grads, *a, g, |_| *s),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc_zip(grads, *a, g, |i| 1.0 / x[i]);
            }
            Op::Exp(a) => self.acc_zip(grads, *a, g, |i| y[i]),
            Op::Sigmoid(a) => self.acc_zip(grads, *a, g, |i| y[i] * (1.0 - y[i])),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc_zip(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc_zip(grads, *a, g, |i| {
                    let v = x[i];
                    let cdf = 0.5 * (1.0 + math::erf(v / core::f64::consts::SQRT_2));
                    let pdf = math::exp(-0.5 * v * v) / math::sqrt(2.0 * core::f64::consts::PI);
                    cdf + v * pdf
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc_zip(grads, *a, g, |i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let m = rstd.len();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, |gx| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for c in 0..n {
                            let gg = gr[c] * gam[c];
                            mean_g += gg;
                            mean_gh += gg * hr[c];
                        }
                        mean_g /= n as f64;
                        mean_gh /= n as f64;
                        for c in 0..n {
                            let gg = gr[c] * gam[c];
                            gx[r * n + c] += rstd[r] * (gg - mean_g - hr[c] * mean_gh);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = (self.value(p).rows(), self.value(p).cols());
                    match axis {
                        0 => {
                            let start = offset * pn;
                            self.acc(grads, p, |gp| {
                                for (o, v) in gp.iter_mut().zip(&g[start..start + pm * pn]) {
                                    *o += v;
                                }
                            });
                            offset += pm;
                        }
                        _ => {
                            self.acc(grads, p, |gp| {
                                for r in 0..pm {
                                    for c in 0..pn {
                                        gp[r * pn + c] += g[r * total_cols + offset + c];
                                    }
                                }
                            });
                            offset += pn;
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc_zip(grads, *a, g, |_| 1.0),
            Op::GatherRows { table, idx } => {
                let n = self.value(*table).cols();
                self.acc(grads, *table, |gt| {
                    for (i, &row) in idx.iter().enumerate() {
                        for c in 0..n {
                            gt[row * n + c] += g[i * n + c];
                        }
                    }
                });
            }
            Op::TopKMean { x, k, selected } => {
                let inv = 1.0 / *k as f64;
                self.acc(grads, *x, |gx| {
                    for (n, &flat) in selected.iter().enumerate() {
                        gx[flat] += g[n / *k] * inv;
                    }
                });
            }
            Op::Sum(a) => self.acc_zip(grads, *a, g, |_| 1.0),
            Op::Mean(a) => {
                let inv = 1.0 / self.value(*a).numel().max(1) as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] * inv));
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
            Op::MaskedLogSumExp { x, mask, probs } => {
                let n = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (i, (&sel, &p)) in mask.iter().zip(probs).enumerate() {
                        if sel {
                            gx[i] += g[i / n] * p;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = (self.value(q).rows(), self.value(q).cols());
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut ds = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let gi = &g[i * d + off..i * d + off + dh];
                let pi = &p[i * t..(i + 1) * t];
                // dA_ij = g_i · v_j ; dS = A ⊙ (dA − Σ_j dA_ij A_ij)
                let mut dot = 0.0;
                for j in 0..t {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let da: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = da;
                    dot += da * pi[j];
                }
                for j in 0..t {
                    let s = pi[j] * (ds[j] - dot) * scale;
                    let a = pi[j];
                    for c in 0..dh {
                        gv[j * d + off + c] += a * gi[c];
                        gq[i * d + off + c] += s * kd[j * d + off + c];
                        gk[j * d + off + c] += s * qd[i * d + off + c];
                    }
                }
            }
        }
        self.acc_slice(grads, q, &gq);
        self.acc_slice(grads, k, &gk);
        self.acc_slice(grads, v, &gv);
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_slice(&self, grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64]) {
        self.acc(grads, v, |gv| {
            for (o, s) in gv.iter_mut().zip(src) {
                *o += s;
            }
        });
    }

    /// `grad[v][i] += g[i or 0] * d(i)`; a single-element upstream gradient is
    /// broadcast over `v`.
    fn acc_zip(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], d: impl Fn(usize) -> f64) {
        let scalar = g.len() == 1;
        self.acc(grads, v, |gv| {
            for (i, o) in gv.iter_mut().enumerate() {
                *o += if scalar { g[0] } else { g[i] } * d(i);
            }
        });
    }
}
