//! Vision-language branch: a frozen linear "text encoder" over prompted
//! class tokens, a trainable temporal transformer over frame features, and
//! temperature-scaled cosine similarity between the two.
//!
//! Only the prompt vectors and the temporal transformer are trainable. The
//! text map and the class tokens are frozen leaves and never receive
//! gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Activation, Graph, Var};
use crate::cbp::BranchOutput;
use crate::data::{Branch, Cas, Config, SimilarityActivation};
use crate::error::{dim_err, Result};
use crate::nn::TransformerBlock;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROMPT_PREFIX: &str = "vlp.prompt.prefix";
pub const PROMPT_SUFFIX: &str = "vlp.prompt.suffix";
pub const CLASS_TOKENS: &str = "vlp.text.class_tokens";
pub const TEXT_MAP: &str = "vlp.text.map";

#[derive(Debug, Clone, PartialEq)]
pub struct VlpModel {
    pub store: ParamStore,
    prefix: ParamId,
    suffix: ParamId,
    class_tokens: ParamId,
    text_map: ParamId,
    blocks: Vec<TransformerBlock>,
    tau: f64,
    activation: SimilarityActivation,
    width: usize,
    num_classes: usize,
    prompt_count: usize,
}

/// Fixed `(2·n_p + 1)·D × D` text map: identity on the class-token slot and
/// Gaussian blocks on the prompt slots, drawn from `seed`.
pub fn text_encoder_map(width: usize, prompt_count: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = 2 * prompt_count + 1;
    let normal = Normal::new(0.0, 1.0 / libm::sqrt(width as f64)).expect("finite std");
    let mut m = Tensor::zeros(&[tokens * width, width]);
    for tok in 0..tokens {
        for i in 0..width {
            for j in 0..width {
                let v = if tok == prompt_count {
                    if i == j {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    normal.sample(&mut rng)
                };
                m.set(tok * width + i, j, v);
            }
        }
    }
    m
}

impl VlpModel {
    /// `class_tokens` is the `C×D` frozen class embedding table.
    pub fn new(class_tokens: &Tensor, text_encoder_seed: u64, cfg: &Config, seed: u64) -> Self {
        let (num_classes, width) = (class_tokens.rows(), class_tokens.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n_p = cfg.prompt_count;
        let prefix = store.add_normal(PROMPT_PREFIX, &[n_p, width], cfg.prompt_init_std, true, &mut rng);
        let suffix = store.add_normal(PROMPT_SUFFIX, &[n_p, width], cfg.prompt_init_std, true, &mut rng);
        let class_tokens = store.add(CLASS_TOKENS, class_tokens.clone(), false);
        let text_map = store.add(TEXT_MAP, text_encoder_map(width, n_p, text_encoder_seed), false);
        let blocks = (0..cfg.vlp_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("vlp.temporal{i}"),
                    width,
                    cfg.vlp_hidden,
                    cfg.vlp_heads,
                    Activation::Gelu,
                    true,
                    &mut rng,
                )
            })
            .collect();
        Self {
            store,
            prefix,
            suffix,
            class_tokens,
            text_map,
            blocks,
            tau: cfg.tau,
            activation: cfg.vlp_activation,
            width,
            num_classes,
            prompt_count: n_p,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn text_map_id(&self) -> ParamId {
        self.text_map
    }

    pub fn class_tokens_id(&self) -> ParamId {
        self.class_tokens
    }

    /// `F_txt ∈ R^{C×D}`: per class, `[prefix; e_c; suffix]` flattened,
    /// mapped through the frozen text map and L2-normalized.
    pub fn text_features(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let tokens = 2 * self.prompt_count + 1;
        let mut rows = Vec::with_capacity(self.num_classes);
        for c in 0..self.num_classes {
            let e_c = g.embedding_lookup(p.var(self.class_tokens), &[c])?;
            let seq = if self.prompt_count == 0 {
                e_c
            } else {
                g.concat(&[p.var(self.prefix), e_c, p.var(self.suffix)], 0)?
            };
            let flat = g.reshape(seq, &[1, tokens * self.width])?;
            rows.push(g.matmul(flat, p.var(self.text_map))?);
        }
        let txt = g.concat(&rows, 0)?;
        g.l2_normalize_rows(txt)
    }

    /// `F_vid ∈ R^{T×D}`: temporal transformer over `F_vis`, rows L2-normalized.
    pub fn video_features(&self, g: &mut Graph, p: &Bound, features: &Tensor) -> Result<Var> {
        if features.ndim() != 2 || features.cols() != self.width {
            return Err(dim_err!(
                "VLP branch expects T×{} features, got {:?}",
                self.width,
                features.shape()
            ));
        }
        let mut h = g.constant(features.clone());
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        g.l2_normalize_rows(h)
    }

    /// `P^vl = σ(F_vid · F_txtᵀ / τ)` with σ the configured squashing.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: &Tensor) -> Result<BranchOutput> {
        let vid = self.video_features(g, p, features)?;
        let txt = self.text_features(g, p)?;
        let txt_t = g.transpose(txt)?;
        let sim = g.matmul(vid, txt_t)?;
        let logits = g.scale(sim, 1.0 / self.tau);
        let cas = match self.activation {
            SimilarityActivation::Softmax => g.softmax(logits, 1)?,
            SimilarityActivation::Sigmoid => g.sigmoid(logits),
        };
        Ok(BranchOutput { cas, embeddings: vid })
    }

    pub fn predict(&self, features: &Tensor) -> Result<Cas> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, features)?;
        Cas::new(Branch::Vlp, g.value(out.cas).clone())
    }
}
