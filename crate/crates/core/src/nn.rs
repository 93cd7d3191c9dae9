//! Layers shared by both branches.

use alloc::format;

use rand::Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let weight = if zero {
            store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]), true)
        } else {
            let std = 1.0 / libm::sqrt(fan_in as f64);
            store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, true, rng)
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerBlock {
    pub heads: usize,
    pub activation: Activation,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    /// With `zero_residual`, both residual branches start at exactly zero so
    /// the block is the identity at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        heads: usize,
        activation: Activation,
        zero_residual: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            activation,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, false, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, false, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, false, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, zero_residual, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, hidden, false, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, width, zero_residual, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let a = g.scaled_dot_attention(q, k, v, self.heads)?;
        let a = self.out.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.activation(h, self.activation);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}
