//! Classification-based branch: transformer backbone over the two-stream
//! features, a per-frame sigmoid head, and top-k multiple-instance pooling
//! for video-level supervision.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::data::{Branch, Cas, ClsLoss, Config};
use crate::error::{dim_err, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CbpModel {
    pub store: ParamStore,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    head: Linear,
    embed_scale: f64,
    in_width: usize,
    num_classes: usize,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// `T×C` frame-level probabilities.
    pub cas: Var,
    /// `T×d` frame embeddings used by the contrastive loss.
    pub embeddings: Var,
}

impl CbpModel {
    pub fn new(in_width: usize, num_classes: usize, cfg: &Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.cbp_width;
        let input = Linear::new(&mut store, "cbp.input", in_width, d, false, &mut rng);
        let blocks = (0..cfg.cbp_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("cbp.block{i}"),
                    d,
                    cfg.cbp_hidden,
                    cfg.cbp_heads,
                    Activation::Gelu,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::new(&mut store, "cbp.head", d, num_classes, true, &mut rng);
        Self {
            store,
            input,
            blocks,
            head,
            embed_scale: libm::sqrt(d as f64),
            in_width,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, features: &Tensor) -> Result<BranchOutput> {
        if features.ndim() != 2 || features.cols() != self.in_width {
            return Err(dim_err!(
                "CBP branch expects T×{} features, got {:?}",
                self.in_width,
                features.shape()
            ));
        }
        let x = g.constant(features.clone());
        // projected frames are scaled by √d_model, as for token embeddings
        let proj = self.input.forward(g, p, x)?;
        let mut h = g.scale(proj, self.embed_scale);
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        let logits = self.head.forward(g, p, h)?;
        let cas = g.sigmoid(logits);
        Ok(BranchOutput { cas, embeddings: h })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, features: &Tensor) -> Result<Cas> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, features)?;
        Cas::new(Branch::Cbp, g.value(out.cas).clone())
    }
}

/// Video-level class scores `ŷ`: top-k mean over time per class, then the
/// configured squashing across classes.
pub fn mil_video_scores(g: &mut Graph, cas: Var, k: usize, mode: ClsLoss) -> Result<Var> {
    let pooled = g.topk_mean(cas, k)?;
    match mode {
        ClsLoss::Softmax => g.softmax(pooled, 0),
        ClsLoss::SigmoidBce => Ok(pooled),
    }
}

/// Value-only version of [`mil_video_scores`].
pub fn video_scores(cas: &Cas, k: usize, mode: ClsLoss) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(cas.values.clone());
    let s = mil_video_scores(&mut g, x, k, mode)?;
    Ok(g.value(s).data().to_vec())
}

/// Classification loss on video-level scores. Softmax mode is
/// `Σ −y_c log ŷ_c` with `ŷ` clamped to `[1e-7, 1]`; sigmoid mode is the
/// per-class binary cross-entropy.
pub fn loss_cls(g: &mut Graph, scores: Var, y: &[f64], mode: ClsLoss) -> Result<Var> {
    if g.value(scores).numel() != y.len() {
        return Err(dim_err!(
            "{} video scores for {} labels",
            g.value(scores).numel(),
            y.len()
        ));
    }
    let shape = g.shape(scores).to_vec();
    let neg_y = Tensor::new(shape.clone(), y.iter().map(|v| -v).collect())?;
    match mode {
        ClsLoss::Softmax => {
            let c = g.clamp(scores, PROB_FLOOR, 1.0);
            let l = g.log(c);
            let w = g.mul_const(l, &neg_y)?;
            Ok(g.sum(w))
        }
        ClsLoss::SigmoidBce => {
            let c = g.clamp(scores, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let lp = g.log(c);
            let q = g.affine(c, -1.0, 1.0);
            let lq = g.log(q);
            let neg_not_y = Tensor::new(shape, y.iter().map(|v| v - 1.0).collect())?;
            let a = g.mul_const(lp, &neg_y)?;
            let b = g.mul_const(lq, &neg_not_y)?;
            let s = g.add(a, b)?;
            Ok(g.sum(s))
        }
    }
}
