//! Synthetic two-stream datasets with planted action segments.
//!
//! The CBP stream carries the class prototype only on a sparse random
//! subset of each segment's frames; the remaining action frames are
//! background plus a faint class residual. The VLP stream carries the class
//! prototype on every action frame and also on `vlp_bleed` context frames
//! either side of each segment, where it is mixed with a little background.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Branch, Dataset, FeatureTensor, GroundTruthSegment, Prototypes, Split, Stream, Video, VideoRecord};
use crate::distill::PseudoLabelGrid;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_videos: usize,
    /// The last `num_test` videos form the test split.
    pub num_test: usize,
    pub num_classes: usize,
    /// VLP width `D`; the CBP stream is `2·D` wide.
    pub width: usize,
    /// Inclusive ranges.
    pub frames: [usize; 2],
    pub segments: [usize; 2],
    pub segment_length: [usize; 2],
    pub classes_per_video: [usize; 2],
    /// Minimum number of background frames between two segments.
    pub min_gap: usize,
    pub cbp_peak_fraction: f64,
    /// Range of the class-prototype weight added to non-peak CBP action
    /// frames, drawn per frame.
    pub cbp_residual: [f64; 2],
    pub vlp_bleed: usize,
    /// Weight of the background prototype added to VLP bleed frames.
    pub bleed_background: f64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_videos: 64,
            num_test: 16,
            num_classes: 6,
            width: 16,
            frames: [80, 104],
            segments: [3, 3],
            segment_length: [14, 22],
            classes_per_video: [1, 1],
            min_gap: 6,
            cbp_peak_fraction: 0.3,
            cbp_residual: [0.1, 0.35],
            vlp_bleed: 5,
            bleed_background: 0.3,
            noise_std: 0.03,
        }
    }
}

fn check_range(name: &str, r: [usize; 2], min: usize) -> Result<()> {
    if r[0] > r[1] || r[0] < min {
        return Err(Error::Parameter(format!("{name} range [{}, {}] is invalid", r[0], r[1])));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cbp_peak_fraction > 0.0 && self.cbp_peak_fraction <= 1.0) {
            return Err(Error::Parameter("cbp_peak_fraction must lie in (0, 1]".into()));
        }
        if self.num_classes == 0 || self.num_classes + 1 > self.width {
            return Err(Error::Parameter(format!(
                "{} classes plus background do not fit in width {}",
                self.num_classes, self.width
            )));
        }
        if self.num_test > self.num_videos {
            return Err(Error::Parameter("num_test exceeds num_videos".into()));
        }
        check_range("frames", self.frames, 1)?;
        check_range("segments", self.segments, 1)?;
        check_range("segment_length", self.segment_length, 1)?;
        check_range("classes_per_video", self.classes_per_video, 1)?;
        if self.classes_per_video[1] > self.num_classes || self.classes_per_video[0] > self.segments[0] {
            return Err(Error::Parameter("classes_per_video does not fit the class count or segment count".into()));
        }
        let [lo, hi] = self.cbp_residual;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::Parameter("cbp_residual must be a finite non-negative range".into()));
        }
        for (name, v) in [
            ("bleed_background", self.bleed_background),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `n` orthonormal random vectors of length `width` (Gram-Schmidt on
/// Gaussian draws).
fn orthonormal<R: Rng + ?Sized>(n: usize, width: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Non-overlapping segment spans `(start, len)` separated by at least
/// `min_gap` frames, with slack spread uniformly.
fn place<R: Rng + ?Sized>(t_len: usize, lengths: &[usize], min_gap: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    let needed = lengths.iter().sum::<usize>() + min_gap * lengths.len().saturating_sub(1);
    let slack = t_len.checked_sub(needed)?;
    // stars and bars: n + 1 free gaps summing to `slack`
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(lengths.len());
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        spans.push((cursor, len));
        cursor += len + min_gap;
    }
    Some(spans)
}

fn noisy_row<R: Rng + ?Sized>(base: &[f64], noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    base.iter().map(|b| b + noise.sample(rng)).collect()
}

fn mix(a: &[f64], b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + wb * y).collect()
}

/// Deterministic dataset from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c_len, d) = (spec.num_classes, spec.width);
    let mut cbp_protos = orthonormal(c_len + 1, 2 * d, &mut rng);
    let mut vlp_protos = orthonormal(c_len + 1, d, &mut rng);
    let cbp_bg = cbp_protos.pop().unwrap_or_default();
    let vlp_bg = vlp_protos.pop().unwrap_or_default();
    let text_encoder_seed = rng.random();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Parameter(format!("noise_std: {e}")))?;

    let mut videos = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let video_id = format!("video_{i:04}");
        let t_len = rng.random_range(spec.frames[0]..=spec.frames[1]);
        let n_seg = rng.random_range(spec.segments[0]..=spec.segments[1]);
        let lengths: Vec<usize> = (0..n_seg)
            .map(|_| rng.random_range(spec.segment_length[0]..=spec.segment_length[1]))
            .collect();
        let spans = place(t_len, &lengths, spec.min_gap, &mut rng).ok_or_else(|| {
            Error::Generation(format!(
                "{video_id}: {n_seg} segments of lengths {lengths:?} with gap {} do not fit in {t_len} frames",
                spec.min_gap
            ))
        })?;
        let n_cls = rng.random_range(spec.classes_per_video[0]..=spec.classes_per_video[1].min(n_seg));
        let mut labels: Vec<usize> = index::sample(&mut rng, c_len, n_cls).into_vec();
        // every label gets at least one segment
        let mut cats: Vec<usize> = (0..n_seg).map(|s| labels[s % n_cls]).collect();
        for s in (1..n_seg).rev() {
            let j = rng.random_range(0..=s);
            cats.swap(s, j);
        }
        labels.sort_unstable();

        // 0 = background, 1 = CBP peak, 2 = non-peak action
        let mut cbp_kind = vec![(0u8, 0usize); t_len];
        // class of the nearest segment whose bleed covers the frame
        let mut vlp_class: Vec<Option<(usize, bool)>> = vec![None; t_len];
        let mut gt_segments = Vec::with_capacity(n_seg);
        for (&(start, len), &cat) in spans.iter().zip(&cats) {
            let end = start + len - 1;
            gt_segments.push(GroundTruthSegment { start, end, category: cat });
            let peaks = (libm::round(spec.cbp_peak_fraction * len as f64) as usize).clamp(1, len);
            cbp_kind[start..=end].fill((2, cat));
            let first = start + rng.random_range(0..=len - peaks);
            for kind in &mut cbp_kind[first..first + peaks] {
                *kind = (1, cat);
            }
            let lo = start.saturating_sub(spec.vlp_bleed);
            let hi = (end + spec.vlp_bleed).min(t_len - 1);
            for (t, slot) in vlp_class.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let inside = (start..=end).contains(&t);
                if inside || slot.is_none() {
                    *slot = Some((cat, inside));
                }
            }
        }

        let mut cbp = Vec::with_capacity(t_len * 2 * d);
        let mut vlp = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            let cbp_base = match cbp_kind[t] {
                (1, c) => cbp_protos[c].clone(),
                (2, c) => {
                    let w = rng.random_range(spec.cbp_residual[0]..=spec.cbp_residual[1]);
                    mix(&cbp_bg, &cbp_protos[c], w)
                }
                _ => cbp_bg.clone(),
            };
            cbp.extend(noisy_row(&cbp_base, &noise, &mut rng));
            let vlp_base = match vlp_class[t] {
                Some((c, true)) => vlp_protos[c].clone(),
                Some((c, false)) => mix(&vlp_protos[c], &vlp_bg, spec.bleed_background),
                None => vlp_bg.clone(),
            };
            vlp.extend(noisy_row(&vlp_base, &noise, &mut rng));
        }
        let split = if i + spec.num_test >= spec.num_videos {
            Split::Test
        } else {
            Split::Train
        };
        videos.push(Video {
            record: VideoRecord {
                video_id,
                num_frames: t_len,
                labels,
                gt_segments,
                split,
                fps: None,
            },
            cbp: FeatureTensor::new(Stream::Cbp, Tensor::new(vec![t_len, 2 * d], cbp)?)?,
            vlp: FeatureTensor::new(Stream::Vlp, Tensor::new(vec![t_len, d], vlp)?)?,
        });
    }
    let to_tensor = |rows: &[Vec<f64>]| Tensor::from_rows(rows);
    let ds = Dataset {
        num_classes: c_len,
        prototypes: Prototypes {
            cbp_classes: to_tensor(&cbp_protos)?,
            cbp_background: cbp_bg,
            vlp_classes: to_tensor(&vlp_protos)?,
            vlp_background: vlp_bg,
        },
        text_encoder_seed,
        videos,
    };
    ds.validate()?;
    Ok(ds)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Label each frame by its most cosine-similar prototype. Class prototypes
/// are rows of `classes`; `background` is ranked after every class, so on
/// ties the lowest id wins and background loses. Background frames get an
/// all-zero row.
pub fn nearest_prototype_labels(features: &Tensor, classes: &Tensor, background: &[f64]) -> Result<PseudoLabelGrid> {
    let c_len = classes.rows();
    if features.cols() != classes.cols() || background.len() != classes.cols() {
        return Err(dim_err!(
            "features {:?}, prototypes {:?}, background {}",
            features.shape(),
            classes.shape(),
            background.len()
        ));
    }
    let mut values = vec![0i8; features.rows() * c_len];
    for t in 0..features.rows() {
        let row = features.row(t);
        let mut best = (cosine(row, classes.row(0)), 0);
        for c in 1..c_len {
            let s = cosine(row, classes.row(c));
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.0 >= cosine(row, background) {
            values[t * c_len + best.1] = 1;
        }
    }
    PseudoLabelGrid::new(values, c_len, vec![true; c_len], Branch::Oracle)
}
