//! Proposal generation, soft-NMS and localization metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cbp::video_scores;
use crate::data::{Cas, ClsLoss, Config, NmsDecay, Proposal, VideoRecord};
use crate::error::{dim_err, Error, Result};

/// IoU thresholds reported by [`evaluate`].
pub const IOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// Classes whose video-level score exceeds `theta_cls`, or the single argmax
/// (lowest index on ties) when none does.
pub fn select_classes(scores: &[f64], theta_cls: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..scores.len()).filter(|&c| scores[c] > theta_cls).collect();
    if !picked.is_empty() || scores.is_empty() {
        return picked;
    }
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    vec![best]
}

pub fn classify_video(cas: &Cas, k: usize, mode: ClsLoss, theta_cls: f64) -> Result<Vec<usize>> {
    Ok(select_classes(&video_scores(cas, k, mode)?, theta_cls))
}

/// Maximal runs of frames with `p > theta_loc`, scored by their maximum.
pub fn extract_proposals(cas: &Cas, classes: &[usize], theta_loc: f64) -> Vec<Proposal> {
    let t_len = cas.num_frames();
    let mut out = Vec::new();
    for &c in classes {
        let mut t = 0;
        while t < t_len {
            if cas.at(t, c) > theta_loc {
                let start = t;
                let mut score = cas.at(t, c);
                while t + 1 < t_len && cas.at(t + 1, c) > theta_loc {
                    t += 1;
                    score = score.max(cas.at(t, c));
                }
                out.push(Proposal {
                    start,
                    end: t,
                    category: c,
                    score,
                });
            }
            t += 1;
        }
    }
    out
}

/// IoU of inclusive frame spans `[start, end]`.
pub fn segment_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn span(p: &Proposal) -> (usize, usize) {
    (p.start, p.end)
}

/// Soft-NMS over proposals of one class. Repeatedly keeps the highest
/// scoring proposal (earlier start, then earlier end, then input order on
/// ties) and decays every remaining proposal whose IoU with it exceeds
/// `iou_threshold`. Proposals scoring below `floor` are dropped.
pub fn soft_nms(proposals: &[Proposal], decay: NmsDecay, iou_threshold: f64, floor: f64) -> Vec<Proposal> {
    let mut pool: Vec<Proposal> = proposals.iter().copied().filter(|p| p.score >= floor).collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            let better = a.score > b.score
                || (a.score == b.score && (a.start, a.end) < (b.start, b.end));
            if better {
                best = i;
            }
        }
        let top = pool.remove(best);
        for p in &mut pool {
            let iou = segment_iou(span(&top), span(p));
            if iou > iou_threshold {
                p.score *= match decay {
                    NmsDecay::Linear => 1.0 - iou,
                    NmsDecay::Gaussian { sigma } => libm::exp(-iou * iou / sigma),
                };
            }
        }
        pool.retain(|p| p.score >= floor);
        kept.push(top);
    }
    kept
}

/// Soft-NMS applied independently to each class present in `proposals`.
pub fn soft_nms_per_class(proposals: &[Proposal], decay: NmsDecay, iou_threshold: f64, floor: f64) -> Vec<Proposal> {
    let mut classes: Vec<usize> = proposals.iter().map(|p| p.category).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let of_class: Vec<Proposal> = proposals.iter().copied().filter(|p| p.category == c).collect();
        out.extend(soft_nms(&of_class, decay, iou_threshold, floor));
    }
    out
}

/// A proposal tagged with the index of the video it was made on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub video: usize,
    pub proposal: Proposal,
}

/// A ground-truth instance tagged with its video index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub video: usize,
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

/// Order used to rank detections: score descending, then video, start, end.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.proposal
        .score
        .partial_cmp(&a.proposal.score)
        .unwrap_or(Ordering::Equal)
        .then(a.video.cmp(&b.video))
        .then(a.proposal.start.cmp(&b.proposal.start))
        .then(a.proposal.end.cmp(&b.proposal.end))
}

/// All-point interpolated AP of one class. A detection is a true positive
/// when it overlaps a not-yet-matched ground truth of its video with
/// `IoU >= iou_threshold`; among candidates the highest-IoU one is taken.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(sorted.len());
    for d in &sorted {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.video != d.video || matched[j] {
                continue;
            }
            let iou = segment_iou(span(&d.proposal), (g.start, g.end));
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                matched[j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let n_gt = gts.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        hits += usize::from(hit);
        recall.push(hits as f64 / n_gt);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    interpolated_ap(&recall, &precision)
}

fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mprec = vec![0.0];
    mprec.extend_from_slice(precision);
    mprec.push(0.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mprec[i])
        .sum()
}

/// Mean AP over classes that have at least one ground-truth instance.
pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let g: Vec<GroundTruth> = gts.iter().copied().filter(|g| g.category == c).collect();
        if g.is_empty() {
            continue;
        }
        let d: Vec<Detection> = dets.iter().copied().filter(|d| d.proposal.category == c).collect();
        total += average_precision(&d, &g, iou_threshold);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metric("no ground-truth instances for any class".into()));
    }
    Ok(total / counted as f64)
}

/// Frame-level foreground prediction for one video: `mask[t * C + c]`.
#[derive(Debug, Clone, Copy)]
pub struct FramePrediction<'a> {
    pub record: &'a VideoRecord,
    pub foreground: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    pub fore: f64,
    pub back: f64,
}

/// Foreground and background mIoU with frame sets pooled over all videos.
///
/// Foreground IoU is computed per class and averaged over classes with at
/// least one ground-truth frame. The background set is every frame with no
/// foreground class, for both prediction and ground truth. When no class
/// has ground truth the foreground score is 1 if nothing was predicted and
/// 0 otherwise; an empty background union likewise scores 1.
pub fn miou(items: &[FramePrediction<'_>], num_classes: usize) -> Result<Miou> {
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut gt_frames = vec![0usize; num_classes];
    let mut any_pred = false;
    let (mut back_inter, mut back_union) = (0usize, 0usize);
    for it in items {
        let t_len = it.record.num_frames;
        if it.foreground.len() != t_len * num_classes {
            return Err(dim_err!(
                "video `{}`: foreground mask has {} entries for {}×{}",
                it.record.video_id,
                it.foreground.len(),
                t_len,
                num_classes
            ));
        }
        let truth = it.record.foreground_mask(num_classes);
        for t in 0..t_len {
            let row = t * num_classes;
            let mut pred_fg = false;
            let mut true_fg = false;
            for c in 0..num_classes {
                let (p, g) = (it.foreground[row + c], truth[row + c]);
                pred_fg |= p;
                true_fg |= g;
                inter[c] += usize::from(p && g);
                union[c] += usize::from(p || g);
                gt_frames[c] += usize::from(g);
            }
            any_pred |= pred_fg;
            back_inter += usize::from(!pred_fg && !true_fg);
            back_union += usize::from(!pred_fg || !true_fg);
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| gt_frames[c] > 0).collect();
    let fore = if present.is_empty() {
        if any_pred {
            0.0
        } else {
            1.0
        }
    } else {
        present.iter().map(|&c| inter[c] as f64 / union[c] as f64).sum::<f64>() / present.len() as f64
    };
    let back = if back_union == 0 {
        1.0
    } else {
        back_inter as f64 / back_union as f64
    };
    Ok(Miou { fore, back })
}

/// Frames with `p > theta_loc` for each selected class.
pub fn binarize(cas: &Cas, classes: &[usize], theta_loc: f64) -> Vec<bool> {
    let c_len = cas.num_classes();
    let mut m = vec![false; cas.num_frames() * c_len];
    for t in 0..cas.num_frames() {
        for &c in classes {
            m[t * c_len + c] = cas.at(t, c) > theta_loc;
        }
    }
    m
}

/// Output of inference on one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInference {
    pub classes: Vec<usize>,
    pub proposals: Vec<Proposal>,
    pub foreground: Vec<bool>,
}

/// Classify with `cls_cas` (the CBP branch), then localize on `loc_cas`.
pub fn infer_video(cls_cas: &Cas, loc_cas: &Cas, cfg: &Config) -> Result<VideoInference> {
    if cls_cas.values.shape() != loc_cas.values.shape() {
        return Err(dim_err!(
            "classification CAS {:?} and localization CAS {:?} differ",
            cls_cas.values.shape(),
            loc_cas.values.shape()
        ));
    }
    let k = cfg.topk(cls_cas.num_frames());
    let classes = classify_video(cls_cas, k, cfg.cls_loss, cfg.theta_cls)?;
    let raw = extract_proposals(loc_cas, &classes, cfg.theta_loc);
    let proposals = soft_nms_per_class(&raw, cfg.nms_decay, cfg.nms_iou_threshold, cfg.nms_score_floor);
    let foreground = binarize(loc_cas, &classes, cfg.theta_loc);
    Ok(VideoInference {
        classes,
        proposals,
        foreground,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoProposals {
    pub video_id: String,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(threshold, mAP)` for each of [`IOU_THRESHOLDS`].
    pub per_iou: Vec<(f64, f64)>,
    pub avg_01_05: f64,
    pub avg_03_07: f64,
    pub fore_miou: f64,
    pub back_miou: f64,
    pub videos: Vec<VideoProposals>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.per_iou
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, m)| m)
    }
}

fn mean_over(per_iou: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let sel: Vec<f64> = per_iou
        .iter()
        .filter(|(t, _)| *t > lo - 1e-9 && *t < hi + 1e-9)
        .map(|&(_, m)| m)
        .collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

/// Metrics over a set of inferred videos.
pub fn evaluate(results: &[(&VideoRecord, &VideoInference)], num_classes: usize) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Metric("nothing to evaluate: empty split".into()));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, (rec, inf)) in results.iter().enumerate() {
        dets.extend(inf.proposals.iter().map(|&proposal| Detection { video: i, proposal }));
        gts.extend(rec.gt_segments.iter().map(|s| GroundTruth {
            video: i,
            start: s.start,
            end: s.end,
            category: s.category,
        }));
    }
    let per_iou = IOU_THRESHOLDS
        .iter()
        .map(|&t| mean_average_precision(&dets, &gts, num_classes, t).map(|m| (t, m)))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<FramePrediction<'_>> = results
        .iter()
        .map(|(rec, inf)| FramePrediction {
            record: rec,
            foreground: &inf.foreground,
        })
        .collect();
    let m = miou(&frames, num_classes)?;
    Ok(EvalReport {
        avg_01_05: mean_over(&per_iou, 0.1, 0.5),
        avg_03_07: mean_over(&per_iou, 0.3, 0.7),
        per_iou,
        fore_miou: m.fore,
        back_miou: m.back,
        videos: results
            .iter()
            .map(|(rec, inf)| VideoProposals {
                video_id: rec.video_id.clone(),
                proposals: inf.proposals.clone(),
            })
            .collect(),
    })
}

/// Human-readable one-line summary.
pub fn summary_line(r: &EvalReport) -> String {
    format!(
        "avg mAP 0.1-0.5 {:.4} | 0.3-0.7 {:.4} | fore mIoU {:.4} | back mIoU {:.4}",
        r.avg_01_05, r.avg_03_07, r.fore_miou, r.back_miou
    )
}
