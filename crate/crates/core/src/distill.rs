//! Ternary pseudo-labels, the masked distillation and foreground-background
//! contrastive losses, and the alternating training schedule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cbp::{loss_cls, mil_video_scores, CbpModel};
use crate::data::{sample_snippets, Branch, Cas, Config, Dataset, Split, Video};
use crate::error::{dim_err, Error, Result};
use crate::eval::{miou, FramePrediction, Miou};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vlp::VlpModel;

const PROB_FLOOR: f64 = 1e-7;

pub const FOREGROUND: i8 = 1;
pub const BACKGROUND: i8 = 0;
pub const UNCERTAIN: i8 = -1;

/// `H ∈ {−1, 0, 1}^{T×C}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelGrid {
    values: Vec<i8>,
    num_frames: usize,
    num_classes: usize,
    /// Video-level labels the grid was made with.
    labels: Vec<bool>,
    pub source: Branch,
}

impl PseudoLabelGrid {
    /// Grid from raw row-major values. Entries must be in `{−1, 0, 1}` and
    /// columns of absent classes all 0.
    pub fn new(values: Vec<i8>, num_classes: usize, labels: Vec<bool>, source: Branch) -> Result<Self> {
        if num_classes == 0 || !values.len().is_multiple_of(num_classes) || labels.len() != num_classes {
            return Err(dim_err!(
                "{} values and {} labels for {num_classes} classes",
                values.len(),
                labels.len()
            ));
        }
        if let Some(i) = values
            .iter()
            .enumerate()
            .position(|(i, &h)| !(-1..=1).contains(&h) || (!labels[i % num_classes] && h != BACKGROUND))
        {
            return Err(Error::Parameter(format!(
                "invalid pseudo-label {} at entry {i}",
                values[i]
            )));
        }
        Ok(Self {
            num_frames: values.len() / num_classes,
            values,
            num_classes,
            labels,
            source,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn at(&self, t: usize, c: usize) -> i8 {
        self.values[t * self.num_classes + c]
    }

    fn row(&self, t: usize) -> &[i8] {
        &self.values[t * self.num_classes..(t + 1) * self.num_classes]
    }

    pub fn is_foreground_frame(&self, t: usize) -> bool {
        self.row(t).contains(&FOREGROUND)
    }

    /// No foreground class, and some ground-truth class confidently 0.
    pub fn is_background_frame(&self, t: usize) -> bool {
        let row = self.row(t);
        !row.contains(&FOREGROUND) && (0..self.num_classes).any(|c| self.labels[c] && row[c] == BACKGROUND)
    }

    pub fn num_confident(&self) -> usize {
        self.values.iter().filter(|&&h| h != UNCERTAIN).count()
    }

    /// `mask[t * C + c]` is true where `h = 1`.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&h| h == FOREGROUND).collect()
    }
}

/// Double-threshold conversion of a CAS into ternary labels. For a class with
/// `y_c = 1`: 1 where `p > delta_high`, 0 where `p < delta_low`, −1
/// otherwise. Columns of absent classes are all 0.
pub fn make_pseudo_labels(p: &Cas, y: &[f64], delta_high: f64, delta_low: f64) -> Result<PseudoLabelGrid> {
    if delta_high.is_nan() || delta_low.is_nan() || delta_high <= delta_low {
        return Err(Error::Parameter(format!(
            "delta_high ({delta_high}) must exceed delta_low ({delta_low})"
        )));
    }
    let (t_len, c_len) = (p.num_frames(), p.num_classes());
    if y.len() != c_len {
        return Err(dim_err!("{} labels for a CAS with {c_len} classes", y.len()));
    }
    let labels: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
    let mut values = vec![BACKGROUND; t_len * c_len];
    for t in 0..t_len {
        for c in (0..c_len).filter(|&c| labels[c]) {
            let v = p.at(t, c);
            values[t * c_len + c] = if v > delta_high {
                FOREGROUND
            } else if v < delta_low {
                BACKGROUND
            } else {
                UNCERTAIN
            };
        }
    }
    Ok(PseudoLabelGrid {
        values,
        num_frames: t_len,
        num_classes: c_len,
        labels,
        source: p.branch,
    })
}

/// A loss node plus a flag set when there was nothing to supervise (the
/// value is then the constant 0).
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub value: Var,
    pub empty: bool,
}

/// Mean binary cross-entropy between confident labels and `p` (a `T×C`
/// node), `p` clamped to `[1e-7, 1 − 1e-7]`. Uncertain entries are
/// multiplied by an exact zero and so carry neither value nor gradient.
pub fn loss_kd(g: &mut Graph, h: &PseudoLabelGrid, p: Var) -> Result<MaskedLoss> {
    let shape = g.shape(p).to_vec();
    if shape != [h.num_frames, h.num_classes] {
        return Err(dim_err!(
            "pseudo-labels are {}×{}, predictions {:?}",
            h.num_frames,
            h.num_classes,
            shape
        ));
    }
    let confident = h.num_confident();
    if confident == 0 {
        return Ok(MaskedLoss {
            value: g.scalar(0.0),
            empty: true,
        });
    }
    let norm = 1.0 / confident as f64;
    let on: Vec<f64> = h.values.iter().map(|&v| if v == FOREGROUND { -norm } else { 0.0 }).collect();
    let off: Vec<f64> = h.values.iter().map(|&v| if v == BACKGROUND { -norm } else { 0.0 }).collect();
    let c = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let log_p = g.log(c);
    let q = g.affine(c, -1.0, 1.0);
    let log_q = g.log(q);
    let a = g.mul_const(log_p, &Tensor::new(shape.clone(), on)?)?;
    let b = g.mul_const(log_q, &Tensor::new(shape, off)?)?;
    let s = g.add(a, b)?;
    Ok(MaskedLoss {
        value: g.sum(s),
        empty: false,
    })
}

/// Frame index sets for the contrastive loss of one video.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContrastSets {
    /// Confident foreground frames, ascending.
    pub anchors: Vec<usize>,
    /// For each anchor, the other foreground frames sharing a class with it.
    pub positives: Vec<Vec<usize>>,
    /// Confident background frames, shared by every anchor.
    pub negatives: Vec<usize>,
}

pub fn build_contrast_sets(h: &PseudoLabelGrid) -> ContrastSets {
    let t_len = h.num_frames;
    let anchors: Vec<usize> = (0..t_len).filter(|&t| h.is_foreground_frame(t)).collect();
    let negatives: Vec<usize> = (0..t_len).filter(|&t| h.is_background_frame(t)).collect();
    let positives = anchors
        .iter()
        .map(|&i| {
            anchors
                .iter()
                .copied()
                .filter(|&m| m != i && (0..h.num_classes).any(|c| h.at(i, c) == FOREGROUND && h.at(m, c) == FOREGROUND))
                .collect()
        })
        .collect();
    ContrastSets {
        anchors,
        positives,
        negatives,
    }
}

/// Contrastive loss over L2-normalized rows of `embeddings` (`T×d`). Each
/// anchor with at least one positive and one negative contributes
/// `−log Σ_pos e^{s/τ} / Σ_{pos ∪ neg} e^{s/τ}`; the result is the mean
/// over contributing anchors.
pub fn loss_fb(g: &mut Graph, embeddings: Var, sets: &ContrastSets, tau: f64) -> Result<MaskedLoss> {
    let t_len = g.shape(embeddings)[0];
    let valid: Vec<usize> = if sets.negatives.is_empty() {
        Vec::new()
    } else {
        (0..sets.anchors.len()).filter(|&a| !sets.positives[a].is_empty()).collect()
    };
    if valid.is_empty() {
        return Ok(MaskedLoss {
            value: g.scalar(0.0),
            empty: true,
        });
    }
    let f = g.l2_normalize_rows(embeddings)?;
    let idx: Vec<usize> = valid.iter().map(|&a| sets.anchors[a]).collect();
    let rows = g.gather_rows(f, &idx)?;
    let ft = g.transpose(f)?;
    let sim = g.matmul(rows, ft)?;
    let logits = g.scale(sim, 1.0 / tau);
    let mut pos_mask = vec![false; valid.len() * t_len];
    let mut all_mask = vec![false; valid.len() * t_len];
    for (r, &a) in valid.iter().enumerate() {
        for &m in &sets.positives[a] {
            pos_mask[r * t_len + m] = true;
            all_mask[r * t_len + m] = true;
        }
        for &n in &sets.negatives {
            all_mask[r * t_len + n] = true;
        }
    }
    let lse_all = g.masked_log_sum_exp(logits, &all_mask)?;
    let lse_pos = g.masked_log_sum_exp(logits, &pos_mask)?;
    let per_anchor = g.sub(lse_all, lse_pos)?;
    Ok(MaskedLoss {
        value: g.mean(per_anchor),
        empty: false,
    })
}

/// `L_kd + λ·L_fb`.
pub fn loss_total(g: &mut Graph, kd: Var, fb: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(fb, lambda);
    g.add(kd, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    BStep,
    FStep,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::BStep => "b_step",
            Phase::FStep => "f_step",
        }
    }
}

/// Summary of one training phase. Losses are means over its iterations;
/// the mIoU pair scores the trained branch's pseudo-labels on the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub cycle: usize,
    /// Global iteration count at the end of the phase.
    pub iteration: usize,
    pub loss_kd: f64,
    pub loss_fb: f64,
    pub loss_cls: f64,
    pub fore_miou: Option<f64>,
    pub back_miou: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    kd: f64,
    fb: f64,
    cls: f64,
    n: usize,
}

impl LossSums {
    fn mean(&self) -> (f64, f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let n = self.n as f64;
        (self.kd / n, self.fb / n, self.cls / n)
    }
}

/// Seeds for the three independent random streams of a run.
pub fn derived_seeds(seed: u64) -> (u64, u64, u64) {
    (
        seed,
        seed ^ 0x9e37_79b9_7f4a_7c15,
        seed.wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(1),
    )
}

fn adam(cfg: &Config) -> AdamConfig {
    AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    }
}

fn training_error(phase: Phase, iteration: usize, err: Error) -> Error {
    match err {
        Error::Training { .. } => err,
        other => Error::Training {
            phase: phase.name().to_string(),
            iteration,
            reason: other.to_string(),
        },
    }
}

/// Pseudo-labels of `cas` against the video's own labels.
pub fn video_pseudo_labels(video: &Video, cas: &Cas, num_classes: usize, cfg: &Config) -> Result<PseudoLabelGrid> {
    make_pseudo_labels(cas, &video.record.label_vector(num_classes), cfg.delta_high, cfg.delta_low)
}

/// mIoU of pseudo-labels produced by `predict` over `videos`.
pub fn pseudo_label_miou<F>(videos: &[&Video], num_classes: usize, cfg: &Config, predict: F) -> Result<Miou>
where
    F: Fn(&Video) -> Result<Cas>,
{
    let masks = videos
        .iter()
        .map(|v| Ok(video_pseudo_labels(v, &predict(v)?, num_classes, cfg)?.foreground_mask()))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<FramePrediction<'_>> = videos
        .iter()
        .zip(&masks)
        .map(|(v, m)| FramePrediction {
            record: &v.record,
            foreground: m,
        })
        .collect();
    miou(&items, num_classes)
}

/// Mutable state of one training run: both branches, one optimizer per
/// branch, the sampling stream and the phase history.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    train: Vec<&'a Video>,
    cfg: Config,
    pub cbp: CbpModel,
    pub vlp: VlpModel,
    cbp_opt: AdamState,
    vlp_opt: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
    cycle: usize,
    pub history: Vec<PhaseRecord>,
    /// Score every phase's pseudo-labels against ground truth.
    pub track_miou: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let train = dataset.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("no training videos".into()));
        }
        let (cbp_seed, vlp_seed, sample_seed) = derived_seeds(cfg.seed);
        let cbp = CbpModel::new(dataset.cbp_width(), dataset.num_classes, cfg, cbp_seed);
        let vlp = VlpModel::new(&dataset.prototypes.vlp_classes, dataset.text_encoder_seed, cfg, vlp_seed);
        let cbp_opt = AdamState::new(&cbp.store, adam(cfg));
        let vlp_opt = AdamState::new(&vlp.store, adam(cfg));
        Ok(Self {
            dataset,
            train,
            cfg: cfg.clone(),
            cbp,
            vlp,
            cbp_opt,
            vlp_opt,
            rng: ChaCha8Rng::seed_from_u64(sample_seed),
            iteration: 0,
            cycle: 0,
            history: Vec::new(),
            track_miou: true,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn sample_batch(&mut self) -> Vec<Video> {
        (0..self.cfg.batch_size.max(1))
            .map(|_| {
                let i = self.rng.random_range(0..self.train.len());
                sample_snippets(self.train[i], self.cfg.t_sample, &mut self.rng)
            })
            .collect()
    }

    fn record(&mut self, phase: Phase, sums: LossSums) -> Result<()> {
        let (loss_kd, loss_fb, loss_cls) = sums.mean();
        let m = if self.track_miou {
            let c = self.dataset.num_classes;
            Some(match phase {
                Phase::BStep => pseudo_label_miou(&self.train, c, &self.cfg, |v| self.vlp.predict(&v.vlp.values))?,
                _ => pseudo_label_miou(&self.train, c, &self.cfg, |v| self.cbp.predict(&v.cbp.values))?,
            })
        } else {
            None
        };
        self.history.push(PhaseRecord {
            phase,
            cycle: self.cycle,
            iteration: self.iteration,
            loss_kd,
            loss_fb,
            loss_cls,
            fore_miou: m.map(|m| m.fore),
            back_miou: m.map(|m| m.back),
        });
        Ok(())
    }

    /// CBP alone on the multiple-instance classification loss.
    pub fn warmup(&mut self, iters: usize) -> Result<()> {
        let mut sums = LossSums::default();
        for _ in 0..iters {
            let batch = self.sample_batch();
            let it = self.iteration;
            let cls = warmup_iteration(&mut self.cbp, &mut self.cbp_opt, &batch, self.dataset.num_classes, &self.cfg)
                .map_err(|e| training_error(Phase::Warmup, it, e))?;
            sums.cls += cls;
            sums.n += 1;
            self.iteration += 1;
        }
        self.record(Phase::Warmup, sums)
    }

    /// CBP frozen; its pseudo-labels supervise VLP.
    pub fn b_step(&mut self, iters: usize) -> Result<()> {
        let mut sums = LossSums::default();
        for _ in 0..iters {
            let batch = self.sample_batch();
            let it = self.iteration;
            let (kd, fb) = b_iteration(&self.cbp, &mut self.vlp, &mut self.vlp_opt, &batch, self.dataset.num_classes, &self.cfg)
                .map_err(|e| training_error(Phase::BStep, it, e))?;
            sums.kd += kd;
            sums.fb += fb;
            sums.n += 1;
            self.iteration += 1;
        }
        self.record(Phase::BStep, sums)
    }

    /// VLP frozen; its pseudo-labels supervise CBP.
    pub fn f_step(&mut self, iters: usize) -> Result<()> {
        let mut sums = LossSums::default();
        for _ in 0..iters {
            let batch = self.sample_batch();
            let it = self.iteration;
            let (kd, fb, cls) = f_iteration(&self.vlp, &mut self.cbp, &mut self.cbp_opt, &batch, self.dataset.num_classes, &self.cfg)
                .map_err(|e| training_error(Phase::FStep, it, e))?;
            sums.kd += kd;
            sums.fb += fb;
            sums.cls += cls;
            sums.n += 1;
            self.iteration += 1;
        }
        self.record(Phase::FStep, sums)
    }

    /// One B step followed by one F step.
    pub fn cycle(&mut self) -> Result<()> {
        self.cycle += 1;
        let n = self.cfg.iters_per_step;
        self.b_step(n)?;
        self.f_step(n)
    }

    /// Warm-up, then `cycles` × (B step, F step).
    pub fn run_alternating(&mut self) -> Result<()> {
        self.warmup(self.cfg.warmup_iters)?;
        for _ in 0..self.cfg.cycles {
            self.cycle()?;
        }
        Ok(())
    }

    pub fn into_models(self) -> (CbpModel, VlpModel, Vec<PhaseRecord>) {
        (self.cbp, self.vlp, self.history)
    }
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

fn apply(store: &mut ParamStore, opt: &mut AdamState, g: &Graph, p: &crate::params::Bound, loss: Var) -> Result<()> {
    let mut grads = g.backward(loss)?;
    let collected = store.collect_grads(p, &mut grads);
    opt.step(store, &collected)
}

/// One warm-up update on a batch; returns the batch-mean classification loss.
pub fn warmup_iteration(
    cbp: &mut CbpModel,
    opt: &mut AdamState,
    batch: &[Video],
    num_classes: usize,
    cfg: &Config,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = cbp.store.bind(&mut g);
    let mut terms = Vec::with_capacity(batch.len());
    for v in batch {
        let out = cbp.forward(&mut g, &p, &v.cbp.values)?;
        let k = cfg.topk(v.record.num_frames);
        let s = mil_video_scores(&mut g, out.cas, k, cfg.cls_loss)?;
        terms.push(loss_cls(&mut g, s, &v.record.label_vector(num_classes), cfg.cls_loss)?);
    }
    let loss = batch_mean(&mut g, &terms)?;
    let value = g.value(loss).data()[0];
    check_finite(value)?;
    apply(&mut cbp.store, opt, &g, &p, loss)?;
    Ok(value)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Distillation terms of one video: `(L_kd + λ·L_fb, L_kd, L_fb)` nodes.
fn distill_terms(
    g: &mut Graph,
    h: &PseudoLabelGrid,
    cas: Var,
    embeddings: Var,
    cfg: &Config,
) -> Result<(Var, Var, Var)> {
    let kd = loss_kd(g, h, cas)?.value;
    let sets = build_contrast_sets(h);
    let fb = loss_fb(g, embeddings, &sets, cfg.tau)?.value;
    Ok((loss_total(g, kd, fb, cfg.lambda)?, kd, fb))
}

/// One B-step update of `vlp` from frozen `cbp`; returns mean `(L_kd, L_fb)`.
pub fn b_iteration(
    cbp: &CbpModel,
    vlp: &mut VlpModel,
    opt: &mut AdamState,
    batch: &[Video],
    num_classes: usize,
    cfg: &Config,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = vlp.store.bind(&mut g);
    let (mut totals, mut kds, mut fbs) = (Vec::new(), Vec::new(), Vec::new());
    for v in batch {
        let h = video_pseudo_labels(v, &cbp.predict(&v.cbp.values)?, num_classes, cfg)?;
        let out = vlp.forward(&mut g, &p, &v.vlp.values)?;
        let (total, kd, fb) = distill_terms(&mut g, &h, out.cas, out.embeddings, cfg)?;
        totals.push(total);
        kds.push(kd);
        fbs.push(fb);
    }
    let loss = batch_mean(&mut g, &totals)?;
    let (kd, fb) = (mean_value(&g, &kds), mean_value(&g, &fbs));
    check_finite(g.value(loss).data()[0])?;
    apply(&mut vlp.store, opt, &g, &p, loss)?;
    Ok((kd, fb))
}

/// One F-step update of `cbp` from frozen `vlp`; returns mean
/// `(L_kd, L_fb, L_cls)`.
pub fn f_iteration(
    vlp: &VlpModel,
    cbp: &mut CbpModel,
    opt: &mut AdamState,
    batch: &[Video],
    num_classes: usize,
    cfg: &Config,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let p = cbp.store.bind(&mut g);
    let (mut totals, mut kds, mut fbs, mut clss) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for v in batch {
        let h = video_pseudo_labels(v, &vlp.predict(&v.vlp.values)?, num_classes, cfg)?;
        let out = cbp.forward(&mut g, &p, &v.cbp.values)?;
        let (mut total, kd, fb) = distill_terms(&mut g, &h, out.cas, out.embeddings, cfg)?;
        if cfg.cls_in_f_step {
            let s = mil_video_scores(&mut g, out.cas, cfg.topk(v.record.num_frames), cfg.cls_loss)?;
            let cls = loss_cls(&mut g, s, &v.record.label_vector(num_classes), cfg.cls_loss)?;
            total = g.add(total, cls)?;
            clss.push(cls);
        }
        totals.push(total);
        kds.push(kd);
        fbs.push(fb);
    }
    let loss = batch_mean(&mut g, &totals)?;
    let (kd, fb, cls) = (mean_value(&g, &kds), mean_value(&g, &fbs), mean_value(&g, &clss));
    check_finite(g.value(loss).data()[0])?;
    apply(&mut cbp.store, opt, &g, &p, loss)?;
    Ok((kd, fb, cls))
}

fn mean_value(g: &Graph, vars: &[Var]) -> f64 {
    if vars.is_empty() {
        return 0.0;
    }
    vars.iter().map(|&v| g.value(v).data()[0]).sum::<f64>() / vars.len() as f64
}

/// Run a full alternating schedule from scratch.
pub fn train_alternating(dataset: &Dataset, cfg: &Config) -> Result<(CbpModel, VlpModel, Vec<PhaseRecord>)> {
    let mut t = Trainer::new(dataset, cfg)?;
    t.run_alternating()?;
    Ok(t.into_models())
}

/// Name of the phase that produced a history record, with its cycle.
pub fn phase_label(r: &PhaseRecord) -> String {
    match r.phase {
        Phase::Warmup => r.phase.name().to_string(),
        _ => format!("{}#{}", r.phase.name(), r.cycle),
    }
}
