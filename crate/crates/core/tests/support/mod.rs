//! Shared fixtures for the integration tests and the acceptance suite:
//! random micro-instances, brute-force reference implementations, and the
//! finite-difference gradient cases.
#![allow(dead_code)]

pub mod agreement;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wtal_core::autodiff::{Graph, Var};
use wtal_core::cbp::{loss_cls, mil_video_scores, CbpModel};
use wtal_core::data::{Branch, Cas, ClsLoss, Config, GroundTruthSegment, Proposal, SimilarityActivation, Split, VideoRecord};
use wtal_core::distill::{build_contrast_sets, loss_fb, loss_kd, loss_total, PseudoLabelGrid};
use wtal_core::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use wtal_core::params::ParamStore;
use wtal_core::vlp::VlpModel;
use wtal_core::{Result, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries of magnitude in `[margin, 1]` with random sign, away from a kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct entries spaced at least `gap` apart, so top-k selection is
/// stable under a finite-difference step.
fn spaced(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let mut levels: Vec<f64> = (0..rows * cols).map(|i| i as f64 * gap).collect();
    levels.shuffle(rng);
    Tensor::new(vec![rows, cols], levels).unwrap()
}

fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.mul_const(out, weights)?;
    Ok(g.sum(w))
}

fn reduce_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>().max(1);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Draws one random instance of a primitive and returns the worst relative
/// error over its inputs.
pub type GradCase = fn(&mut ChaCha8Rng) -> Result<f64>;

macro_rules! unary_case {
    ($name:ident, $gen:expr, $op:expr) => {
        fn $name(rng: &mut ChaCha8Rng) -> Result<f64> {
            let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
            #[allow(clippy::redundant_closure_call)]
            let x = ($gen)(rng, r, c);
            let w = reduce_weights(rng, &[r, c]);
            let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
                #[allow(clippy::redundant_closure_call)]
                let y = ($op)(g, v[0])?;
                weighted_sum(g, y, &w)
            })?;
            Ok(report.max_error())
        }
    };
}

fn plain(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    normal_tensor(rng, r, c, 1.0)
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(0.3..2.0))
}

fn kinkless_relu(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    away_from_zero(rng, r, c, 0.05)
}

fn kinkless_clamp(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    // the kinks sit at ±0.5
    Tensor::from_fn(r, c, |_, _| loop {
        let x: f64 = rng.random_range(-1.0..1.0);
        if (x.abs() - 0.5).abs() > 0.05 {
            break x;
        }
    })
}

unary_case!(grad_log, positive, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.log(x)));
unary_case!(grad_exp, plain, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.exp(x)));
unary_case!(grad_sigmoid, plain, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.sigmoid(x)));
unary_case!(grad_relu, kinkless_relu, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.relu(x)));
unary_case!(grad_gelu, plain, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.gelu(x)));
unary_case!(grad_clamp, kinkless_clamp, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.clamp(x, -0.5, 0.5)));
unary_case!(grad_affine, plain, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.affine(x, -1.7, 0.3)));
unary_case!(grad_scale, plain, |g: &mut Graph, x| Ok::<_, wtal_core::Error>(g.scale(x, 2.5)));
unary_case!(grad_softmax_rows, plain, |g: &mut Graph, x| g.softmax(x, 1));
unary_case!(grad_softmax_cols, plain, |g: &mut Graph, x| g.softmax(x, 0));
unary_case!(grad_l2_normalize, positive, |g: &mut Graph, x| g.l2_normalize_rows(x));

fn grad_binary(rng: &mut ChaCha8Rng, which: u8) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let a = plain(rng, r, c);
    let b = plain(rng, r, c);
    let w = reduce_weights(rng, &[r, c]);
    let report = check_inputs(&[a, b], DEFAULT_STEP, |g, v| {
        let y = match which {
            0 => g.add(v[0], v[1])?,
            1 => g.sub(v[0], v[1])?,
            _ => g.mul(v[0], v[1])?,
        };
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    grad_binary(rng, 0)
}

fn grad_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    grad_binary(rng, 1)
}

fn grad_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    grad_binary(rng, 2)
}

fn grad_mul_const(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let a = plain(rng, r, c);
    let k = plain(rng, r, c);
    let w = reduce_weights(rng, &[r, c]);
    let report = check_inputs(&[a], DEFAULT_STEP, |g, v| {
        let y = g.mul_const(v[0], &k)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = plain(rng, m, k);
    let b = plain(rng, k, n);
    let w = reduce_weights(rng, &[m, n]);
    let report = check_inputs(&[a, b], DEFAULT_STEP, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_add_row(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let a = plain(rng, r, c);
    let b = vector(rng, c);
    let w = reduce_weights(rng, &[r, c]);
    let report = check_inputs(&[a, b], DEFAULT_STEP, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    // two-column rows normalize to ±1 whatever the input, so the input
    // gradient vanishes and only rounding noise would be compared
    let (r, c) = (rng.random_range(1..5), rng.random_range(3..6));
    let x = plain(rng, r, c);
    let gamma = vector(rng, c);
    let beta = vector(rng, c);
    let w = reduce_weights(rng, &[r, c]);
    let report = check_inputs(&[x, gamma, beta], DEFAULT_STEP, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_transpose(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = plain(rng, r, c);
    let w = reduce_weights(rng, &[c, r]);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let axis = rng.random_range(0..2);
    let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
    let (r2, c2) = if axis == 0 { (rng.random_range(1..4), c) } else { (r, rng.random_range(1..4)) };
    let a = plain(rng, r, c);
    let b = plain(rng, r2, c2);
    let out = if axis == 0 { [r + r2, c] } else { [r, c + c2] };
    let w = reduce_weights(rng, &out);
    let report = check_inputs(&[a, b], DEFAULT_STEP, |g, v| {
        let y = g.concat(&[v[0], v[1]], axis)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = plain(rng, r, c);
    let w = reduce_weights(rng, &[c, r]);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let y = g.reshape(v[0], &[c, r])?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_gather_rows(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = plain(rng, r, c);
    let n = rng.random_range(1..7);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
    let w = reduce_weights(rng, &[n, c]);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let y = g.gather_rows(v[0], &idx)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_embedding_lookup(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (vocab, d) = (rng.random_range(2..6), rng.random_range(1..5));
    let table = plain(rng, vocab, d);
    let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..vocab)).collect();
    let w = reduce_weights(rng, &[3, d]);
    let report = check_inputs(&[table], DEFAULT_STEP, |g, v| {
        let y = g.embedding_lookup(v[0], &ids)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_topk_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, c) = (rng.random_range(1..7), rng.random_range(1..4));
    let k = rng.random_range(1..=t);
    let x = spaced(rng, t, c, 0.01);
    let w = reduce_weights(rng, &[c]);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let y = g.topk_mean(v[0], k)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_sum_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = plain(rng, r, c);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq);
        let m = g.mean(v[0]);
        let m = g.scale(m, 3.0);
        g.add(s, m)
    })?;
    Ok(report.max_error())
}

fn grad_masked_log_sum_exp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = normal_tensor(rng, r, c, 3.0);
    let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
    for row in 0..r {
        let keep = rng.random_range(0..c);
        mask[row * c + keep] = true;
    }
    let w = reduce_weights(rng, &[r]);
    let report = check_inputs(&[x], DEFAULT_STEP, |g, v| {
        let y = g.masked_log_sum_exp(v[0], &mask)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

fn grad_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = rng.random_range(1..3);
    let t = rng.random_range(1..5);
    let d = heads * rng.random_range(1..3);
    let q = plain(rng, t, d);
    let k = plain(rng, t, d);
    let v = plain(rng, t, d);
    let w = reduce_weights(rng, &[t, d]);
    let report = check_inputs(&[q, k, v], DEFAULT_STEP, |g, x| {
        let y = g.scaled_dot_attention(x[0], x[1], x[2], heads)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(report.max_error())
}

/// Every differentiable primitive with its instance generator.
pub fn primitive_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("matmul", grad_matmul as GradCase),
        ("add", grad_add),
        ("add_row", grad_add_row),
        ("sub", grad_sub),
        ("mul", grad_mul),
        ("mul_const", grad_mul_const),
        ("affine", grad_affine),
        ("scale", grad_scale),
        ("log", grad_log),
        ("exp", grad_exp),
        ("sigmoid", grad_sigmoid),
        ("relu", grad_relu),
        ("gelu", grad_gelu),
        ("clamp", grad_clamp),
        ("softmax_rows", grad_softmax_rows),
        ("softmax_cols", grad_softmax_cols),
        ("layer_norm", grad_layer_norm),
        ("transpose", grad_transpose),
        ("concat", grad_concat),
        ("reshape", grad_reshape),
        ("gather_rows", grad_gather_rows),
        ("embedding_lookup", grad_embedding_lookup),
        ("topk_mean", grad_topk_mean),
        ("sum_mean", grad_sum_mean),
        ("l2_normalize_rows", grad_l2_normalize),
        ("masked_log_sum_exp", grad_masked_log_sum_exp),
        ("scaled_dot_attention", grad_attention),
    ]
}

/// Small architecture for gradient and contract checks.
pub fn micro_config(rng: &mut ChaCha8Rng) -> Config {
    Config {
        cbp_width: 4,
        cbp_blocks: 1,
        cbp_heads: 2,
        cbp_hidden: 4,
        vlp_layers: 1,
        vlp_heads: 2,
        vlp_hidden: 4,
        prompt_count: 1,
        cls_loss: if rng.random_bool(0.5) { ClsLoss::SigmoidBce } else { ClsLoss::Softmax },
        vlp_activation: if rng.random_bool(0.5) {
            SimilarityActivation::Sigmoid
        } else {
            SimilarityActivation::Softmax
        },
        tau: 0.5,
        ..Config::default()
    }
}

/// Replace every trainable value with a random draw so that zero-initialized
/// residual paths are exercised too.
pub fn randomize_trainable(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0) * scale;
        }
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng, t: usize, c: usize) -> PseudoLabelGrid {
    let labels: Vec<bool> = (0..c).map(|i| i == 0 || rng.random_bool(0.4)).collect();
    let values = (0..t * c)
        .map(|i| if labels[i % c] { rng.random_range(-1i8..=1) } else { 0 })
        .collect();
    PseudoLabelGrid::new(values, c, labels, Branch::Vlp).unwrap()
}

/// Grid with at least one foreground frame pair sharing class 0 and one
/// background frame, so the contrastive term is active.
pub fn contrastive_grid(rng: &mut ChaCha8Rng, t: usize, c: usize) -> PseudoLabelGrid {
    loop {
        let h = random_grid(rng, t, c);
        let sets = build_contrast_sets(&h);
        if !sets.negatives.is_empty() && sets.positives.iter().any(|p| !p.is_empty()) {
            return h;
        }
    }
}

/// Warm-up loss (top-k MIL + classification loss) of a random micro CBP
/// branch, checked with respect to every backbone weight.
pub fn grad_cbp_warmup(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = micro_config(rng);
    let (t, in_w, c) = (rng.random_range(2..6), 3, rng.random_range(2..4));
    let mut model = CbpModel::new(in_w, c, &cfg, rng.random());
    randomize_trainable(&mut model.store, rng, 0.5);
    let x = normal_tensor(rng, t, in_w, 1.0);
    let y: Vec<f64> = (0..c).map(|i| if i == 0 || rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let k = cfg.topk(t);
    let report = check_params(&model.store, DEFAULT_STEP, |g, p| {
        let out = model.forward(g, p, &x)?;
        let s = mil_video_scores(g, out.cas, k, cfg.cls_loss)?;
        loss_cls(g, s, &y, cfg.cls_loss)
    })?;
    Ok(report.max_error())
}

/// F-step loss (distillation + contrastive + classification) of the CBP branch.
pub fn grad_cbp_distill(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = micro_config(rng);
    let (t, in_w, c) = (rng.random_range(3..6), 3, rng.random_range(2..4));
    let mut model = CbpModel::new(in_w, c, &cfg, rng.random());
    randomize_trainable(&mut model.store, rng, 0.5);
    let x = normal_tensor(rng, t, in_w, 1.0);
    let h = contrastive_grid(rng, t, c);
    let y: Vec<f64> = h.labels().iter().map(|&b| f64::from(u8::from(b))).collect();
    let report = check_params(&model.store, DEFAULT_STEP, |g, p| {
        let out = model.forward(g, p, &x)?;
        let kd = loss_kd(g, &h, out.cas)?.value;
        let fb = loss_fb(g, out.embeddings, &build_contrast_sets(&h), cfg.tau)?.value;
        let total = loss_total(g, kd, fb, cfg.lambda)?;
        let s = mil_video_scores(g, out.cas, cfg.topk(t), cfg.cls_loss)?;
        let cls = loss_cls(g, s, &y, cfg.cls_loss)?;
        g.add(total, cls)
    })?;
    Ok(report.max_error())
}

/// B-step loss (distillation + contrastive) of the VLP branch with respect
/// to the prompt vectors and temporal transformer.
pub fn grad_vlp_distill(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = micro_config(rng);
    let (t, d, c) = (rng.random_range(3..6), 4, rng.random_range(2..4));
    let tokens = normal_tensor(rng, c, d, 1.0);
    let mut model = VlpModel::new(&tokens, rng.random(), &cfg, rng.random());
    randomize_trainable(&mut model.store, rng, 0.5);
    let x = normal_tensor(rng, t, d, 1.0);
    let h = contrastive_grid(rng, t, c);
    let report = check_params(&model.store, DEFAULT_STEP, |g, p| {
        let out = model.forward(g, p, &x)?;
        let kd = loss_kd(g, &h, out.cas)?.value;
        let fb = loss_fb(g, out.embeddings, &build_contrast_sets(&h), cfg.tau)?.value;
        loss_total(g, kd, fb, cfg.lambda)
    })?;
    Ok(report.max_error())
}

pub fn branch_loss_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("cbp_warmup_loss", grad_cbp_warmup as GradCase),
        ("cbp_distill_loss", grad_cbp_distill),
        ("vlp_distill_loss", grad_vlp_distill),
    ]
}

/// Worst error of `case` over `n` instances seeded from `seed`.
pub fn worst_over(case: GradCase, n: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        worst = worst.max(case(&mut r)?);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Brute-force reference implementations.

pub fn oracle_pseudo_labels(p: &[Vec<f64>], y: &[bool], hi: f64, lo: f64) -> Vec<i8> {
    let mut out = Vec::new();
    for row in p {
        for (c, &v) in row.iter().enumerate() {
            let label = match (y[c], v.partial_cmp(&hi), v.partial_cmp(&lo)) {
                (false, _, _) => 0,
                (true, Some(std::cmp::Ordering::Greater), _) => 1,
                (true, _, Some(std::cmp::Ordering::Less)) => 0,
                _ => -1,
            };
            out.push(label);
        }
    }
    out
}

/// Sort each column descending and average its first `k` values.
pub fn oracle_topk_mean(x: &[Vec<f64>], k: usize) -> Vec<f64> {
    let cols = x[0].len();
    (0..cols)
        .map(|c| {
            let mut col: Vec<f64> = x.iter().map(|r| r[c]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            col[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// IoU from explicit frame sets.
pub fn oracle_segment_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let sa: BTreeSet<usize> = (a.0..=a.1).collect();
    let sb: BTreeSet<usize> = (b.0..=b.1).collect();
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

/// Linear soft-NMS by repeated full re-sorting of the survivors.
pub fn oracle_soft_nms(props: &[Proposal], iou_threshold: f64, floor: f64) -> Vec<Proposal> {
    let mut pool: Vec<(usize, Proposal)> = props
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, p)| p.score >= floor)
        .collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        pool.sort_by(|(ia, a), (ib, b)| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.start.cmp(&b.start))
                .then(a.end.cmp(&b.end))
                .then(ia.cmp(ib))
        });
        let (_, top) = pool.remove(0);
        let mut next = Vec::new();
        for (i, mut p) in pool {
            let iou = oracle_segment_iou((top.start, top.end), (p.start, p.end));
            if iou > iou_threshold {
                p.score *= 1.0 - iou;
            }
            if p.score >= floor {
                next.push((i, p));
            }
        }
        pool = next;
        kept.push(top);
    }
    kept
}

/// `(video, start, end, score)` detections and `(video, start, end)` ground
/// truths of a single class.
pub type OracleDet = (usize, usize, usize, f64);
pub type OracleGt = (usize, usize, usize);

/// AP as the sum over true positives of `(1/N_gt)·max precision at or after
/// that rank` (equivalent to all-point interpolation).
pub fn oracle_average_precision(dets: &[OracleDet], gts: &[OracleGt], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<OracleDet> = dets.to_vec();
    order.sort_by(|a, b| {
        b.3.partial_cmp(&a.3)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used = BTreeSet::new();
    let mut hits = Vec::new();
    for d in &order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| g.0 == d.0 && !used.contains(j))
            .map(|(j, g)| (j, oracle_segment_iou((d.1, d.2), (g.1, g.2))))
            .filter(|&(_, iou)| iou >= thr)
            .fold(None::<(usize, f64)>, |acc, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((j, _)) = best {
            used.insert(j);
        }
        hits.push(best.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
        .collect();
    (0..hits.len())
        .filter(|&i| hits[i])
        .map(|i| precision[i..].iter().copied().fold(0.0, f64::max) / gts.len() as f64)
        .sum()
}

/// Pooled fore/back mIoU from explicit `(video, frame)` sets.
pub fn oracle_miou(preds: &[Vec<Vec<bool>>], truths: &[Vec<Vec<bool>>], num_classes: usize) -> (f64, f64) {
    let set = |grids: &[Vec<Vec<bool>>], c: usize| -> BTreeSet<(usize, usize)> {
        grids
            .iter()
            .enumerate()
            .flat_map(|(v, g)| g.iter().enumerate().filter(move |(_, row)| row[c]).map(move |(t, _)| (v, t)))
            .collect()
    };
    let background = |grids: &[Vec<Vec<bool>>]| -> BTreeSet<(usize, usize)> {
        grids
            .iter()
            .enumerate()
            .flat_map(|(v, g)| g.iter().enumerate().filter(|(_, row)| !row.iter().any(|&b| b)).map(move |(t, _)| (v, t)))
            .collect()
    };
    let mut ious = Vec::new();
    let mut any_pred = false;
    for c in 0..num_classes {
        let (p, g) = (set(preds, c), set(truths, c));
        any_pred |= !p.is_empty();
        if !g.is_empty() {
            ious.push(p.intersection(&g).count() as f64 / p.union(&g).count() as f64);
        }
    }
    let fore = if ious.is_empty() {
        if any_pred {
            0.0
        } else {
            1.0
        }
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    let (pb, gb) = (background(preds), background(truths));
    let union = pb.union(&gb).count();
    let back = if union == 0 {
        1.0
    } else {
        pb.intersection(&gb).count() as f64 / union as f64
    };
    (fore, back)
}

pub fn oracle_fuse(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (w * x + (1.0 - w) * y).clamp(0.0, 1.0)).collect()
}

// ---------------------------------------------------------------------------
// Random instance builders for the oracle comparisons.

pub fn random_cas(rng: &mut ChaCha8Rng, t: usize, c: usize, levels: Option<&[f64]>) -> Cas {
    let values = Tensor::from_fn(t, c, |_, _| match levels {
        Some(l) => l[rng.random_range(0..l.len())],
        None => rng.random_range(0.0..=1.0),
    });
    Cas::new(Branch::Cbp, values).unwrap()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn random_span(rng: &mut ChaCha8Rng, len: usize) -> (usize, usize) {
    let a = rng.random_range(0..len);
    let b = rng.random_range(0..len);
    (a.min(b), a.max(b))
}

/// Scores drawn from a small set so that ties occur often.
pub fn tie_prone_score(rng: &mut ChaCha8Rng) -> f64 {
    [0.2, 0.4, 0.5, 0.7, 0.9][rng.random_range(0..5)]
}

pub fn random_record(rng: &mut ChaCha8Rng, id: usize, t: usize, c: usize) -> VideoRecord {
    let mut gt_segments = Vec::new();
    let mut labels = BTreeSet::new();
    for _ in 0..rng.random_range(0..3) {
        let (start, end) = random_span(rng, t);
        let category = rng.random_range(0..c);
        labels.insert(category);
        gt_segments.push(GroundTruthSegment { start, end, category });
    }
    VideoRecord {
        video_id: format!("v{id}"),
        num_frames: t,
        labels: labels.into_iter().collect(),
        gt_segments,
        split: Split::Test,
        fps: None,
    }
}

/// `grid[t][c]` view of the ground-truth foreground of a record.
pub fn truth_grid(r: &VideoRecord, c: usize) -> Vec<Vec<bool>> {
    let mut g = vec![vec![false; c]; r.num_frames];
    for s in &r.gt_segments {
        for row in &mut g[s.start..=s.end] {
            row[s.category] = true;
        }
    }
    g
}
