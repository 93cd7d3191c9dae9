//! Domain records, run configuration and snippet sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which feature stream / branch a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Cbp,
    Vlp,
}

/// Source of a class-activation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cbp,
    Vlp,
    Fused,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth action instance on inclusive frame span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

impl GroundTruthSegment {
    pub fn num_frames(&self) -> usize {
        self.end + 1 - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_frames: usize,
    /// Positive class ids (the nonzero entries of the video-level label vector).
    pub labels: Vec<usize>,
    pub gt_segments: Vec<GroundTruthSegment>,
    pub split: Split,
    /// Optional frame rate for second-denominated output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl VideoRecord {
    /// `y ∈ {0,1}^C`.
    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        let mut y = alloc::vec![0.0; num_classes];
        for &c in &self.labels {
            if c < num_classes {
                y[c] = 1.0;
            }
        }
        y
    }

    pub fn has_label(&self, c: usize) -> bool {
        self.labels.contains(&c)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let id = &self.video_id;
        if self.num_frames == 0 {
            return Err(Error::Data(format!("video `{id}`: zero frames")));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!(
                "video `{id}`: label {c} out of range for {num_classes} classes"
            )));
        }
        if self.split == Split::Train && self.labels.is_empty() {
            return Err(Error::Data(format!("video `{id}`: training video without labels")));
        }
        for s in &self.gt_segments {
            if s.start > s.end {
                return Err(Error::Data(format!(
                    "video `{id}`: segment [{}, {}] has start after end",
                    s.start, s.end
                )));
            }
            if s.end >= self.num_frames {
                return Err(Error::Data(format!(
                    "video `{id}`: segment [{}, {}] exceeds {} frames",
                    s.start, s.end, self.num_frames
                )));
            }
            if s.category >= num_classes {
                return Err(Error::Data(format!(
                    "video `{id}`: segment category {} out of range",
                    s.category
                )));
            }
        }
        Ok(())
    }

    /// `fg[t][c]` is true when frame `t` lies inside a ground-truth segment of class `c`.
    pub fn foreground_mask(&self, num_classes: usize) -> Vec<bool> {
        let mut m = alloc::vec![false; self.num_frames * num_classes];
        for s in &self.gt_segments {
            for t in s.start..=s.end.min(self.num_frames - 1) {
                m[t * num_classes + s.category] = true;
            }
        }
        m
    }
}

/// Per-frame features of one stream, `T×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub stream: Stream,
    pub values: Tensor,
}

impl FeatureTensor {
    pub fn new(stream: Stream, values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "features must be T×D, got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(Self { stream, values })
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Class-activation sequence `P ∈ [0,1]^{T×C}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cas {
    pub branch: Branch,
    pub values: Tensor,
}

impl Cas {
    pub fn new(branch: Branch, values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Dimension(format!("CAS must be T×C, got {:?}", values.shape())));
        }
        if values.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numeric("CAS entries must lie in [0, 1]".into()));
        }
        Ok(Self { branch, values })
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values.at(t, c)
    }
}

/// Detected action instance `(s, e, c, p)` on an inclusive frame span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub category: usize,
    pub score: f64,
}

/// One video with both feature streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub record: VideoRecord,
    pub cbp: FeatureTensor,
    pub vlp: FeatureTensor,
}

impl Video {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.record.validate(num_classes)?;
        for f in [&self.cbp, &self.vlp] {
            if f.num_frames() != self.record.num_frames {
                return Err(Error::Data(format!(
                    "video `{}`: {:?} features have {} frames, record says {}",
                    self.record.video_id,
                    f.stream,
                    f.num_frames(),
                    self.record.num_frames
                )));
            }
        }
        Ok(())
    }
}

/// Class and background prototypes for both streams. They define the
/// synthetic data and double as the frozen class-token embeddings of the
/// VLP branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `C×2D`
    pub cbp_classes: Tensor,
    pub cbp_background: Vec<f64>,
    /// `C×D`
    pub vlp_classes: Tensor,
    pub vlp_background: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub prototypes: Prototypes,
    /// Seed of the frozen text-encoder map.
    pub text_encoder_seed: u64,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn cbp_width(&self) -> usize {
        self.prototypes.cbp_classes.cols()
    }

    pub fn vlp_width(&self) -> usize {
        self.prototypes.vlp_classes.cols()
    }

    pub fn split(&self, split: Split) -> Vec<&Video> {
        self.videos.iter().filter(|v| v.record.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            v.validate(self.num_classes)?;
            if v.cbp.width() != self.cbp_width() || v.vlp.width() != self.vlp_width() {
                return Err(Error::Data(format!(
                    "video `{}`: feature width disagrees with prototypes",
                    v.record.video_id
                )));
            }
        }
        Ok(())
    }
}

/// Crop a random window of `t_sample` consecutive frames. Videos no longer
/// than `t_sample` are returned whole. Segments are clipped to the window,
/// shifted to window coordinates, and dropped when nothing is left.
pub fn sample_snippets<R: Rng + ?Sized>(video: &Video, t_sample: usize, rng: &mut R) -> Video {
    let t = video.record.num_frames;
    if t <= t_sample || t_sample == 0 {
        return video.clone();
    }
    let offset = rng.random_range(0..=t - t_sample);
    crop(video, offset, t_sample)
}

/// Window `[offset, offset + len)` of a video.
pub fn crop(video: &Video, offset: usize, len: usize) -> Video {
    let last = offset + len - 1;
    let gt_segments = video
        .record
        .gt_segments
        .iter()
        .filter(|s| s.end >= offset && s.start <= last)
        .map(|s| GroundTruthSegment {
            start: s.start.max(offset) - offset,
            end: s.end.min(last) - offset,
            category: s.category,
        })
        .collect();
    let record = VideoRecord {
        num_frames: len,
        gt_segments,
        ..video.record.clone()
    };
    let cut = |f: &FeatureTensor| FeatureTensor {
        stream: f.stream,
        values: f.values.slice_rows(offset, offset + len),
    };
    Video {
        record,
        cbp: cut(&video.cbp),
        vlp: cut(&video.vlp),
    }
}

/// Squashing used for the pooled video-level class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    /// Softmax across classes followed by `Σ −y log ŷ`.
    Softmax,
    /// Independent per-class binary cross-entropy on the pooled scores.
    SigmoidBce,
}

/// Squashing of the frame-text similarity grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityActivation {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NmsDecay {
    /// `score *= 1 − IoU` when `IoU > threshold`.
    Linear,
    /// `score *= exp(−IoU² / sigma)` when `IoU > threshold`.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    WarmupOnly,
    OnlyB,
    OnlyF,
    Alternating,
    FuseAvg,
    FuseWeight,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::WarmupOnly,
        Strategy::OnlyB,
        Strategy::OnlyF,
        Strategy::Alternating,
        Strategy::FuseAvg,
        Strategy::FuseWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::WarmupOnly => "warmup_only",
            Strategy::OnlyB => "only_b",
            Strategy::OnlyF => "only_f",
            Strategy::Alternating => "alternating",
            Strategy::FuseAvg => "fuse_avg",
            Strategy::FuseWeight => "fuse_weight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    Avg,
    Weight,
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Number of consecutive snippets sampled per training video.
    pub t_sample: usize,
    /// MIL pool size is `max(1, ceil(T / topk_divisor))`.
    pub topk_divisor: usize,
    pub delta_high: f64,
    pub delta_low: f64,
    pub theta_cls: f64,
    pub theta_loc: f64,
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Prompt vectors prepended and appended to each class token (each side).
    pub prompt_count: usize,
    pub prompt_init_std: f64,
    pub cbp_width: usize,
    pub cbp_blocks: usize,
    pub cbp_heads: usize,
    pub cbp_hidden: usize,
    pub vlp_layers: usize,
    pub vlp_heads: usize,
    pub vlp_hidden: usize,
    pub warmup_iters: usize,
    pub cycles: usize,
    pub iters_per_step: usize,
    pub nms_decay: NmsDecay,
    pub nms_iou_threshold: f64,
    pub nms_score_floor: f64,
    pub cls_loss: ClsLoss,
    pub vlp_activation: SimilarityActivation,
    pub cls_in_f_step: bool,
    pub strategy: Strategy,
    /// Fusion used by the `only_b` / `only_f` baselines.
    pub fusion: FuseMode,
    /// CBP weight `w` in `w·P^cb + (1 − w)·P^vl`.
    pub fuse_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 2023,
            t_sample: 96,
            topk_divisor: 8,
            delta_high: 0.3,
            delta_low: 0.1,
            theta_cls: 0.85,
            theta_loc: 0.45,
            lambda: 0.05,
            tau: 0.07,
            learning_rate: 1e-3,
            batch_size: 2,
            prompt_count: 16,
            prompt_init_std: 0.01,
            cbp_width: 64,
            cbp_blocks: 2,
            cbp_heads: 4,
            cbp_hidden: 128,
            vlp_layers: 2,
            vlp_heads: 4,
            vlp_hidden: 32,
            warmup_iters: 300,
            cycles: 3,
            iters_per_step: 200,
            nms_decay: NmsDecay::Linear,
            nms_iou_threshold: 0.3,
            nms_score_floor: 1e-3,
            cls_loss: ClsLoss::SigmoidBce,
            vlp_activation: SimilarityActivation::Sigmoid,
            cls_in_f_step: true,
            strategy: Strategy::Alternating,
            fusion: FuseMode::Weight,
            fuse_weight: 0.5,
        }
    }
}

impl Config {
    pub fn topk(&self, num_frames: usize) -> usize {
        let div = self.topk_divisor.max(1);
        num_frames.div_ceil(div).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("delta_high", self.delta_high)?;
        unit("delta_low", self.delta_low)?;
        unit("theta_cls", self.theta_cls)?;
        unit("theta_loc", self.theta_loc)?;
        unit("nms_iou_threshold", self.nms_iou_threshold)?;
        unit("nms_score_floor", self.nms_score_floor)?;
        unit("fuse_weight", self.fuse_weight)?;
        if self.delta_high <= self.delta_low {
            return Err(Error::Parameter(format!(
                "delta_high ({}) must exceed delta_low ({})",
                self.delta_high, self.delta_low
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Parameter("lambda must be non-negative".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Parameter("tau must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.topk_divisor == 0 || self.t_sample == 0 {
            return Err(Error::Parameter(
                "batch_size, topk_divisor and t_sample must be at least 1".into(),
            ));
        }
        if self.cbp_heads == 0 || !self.cbp_width.is_multiple_of(self.cbp_heads) {
            return Err(Error::Parameter("cbp_width must be divisible by cbp_heads".into()));
        }
        if self.vlp_heads == 0 {
            return Err(Error::Parameter("vlp_heads must be positive".into()));
        }
        if let NmsDecay::Gaussian { sigma } = self.nms_decay {
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::Parameter("gaussian NMS sigma must be positive".into()));
            }
        }
        Ok(())
    }
}
