//! JSON dataset manifest: class list, prototypes, and one entry per video
//! pointing at its two feature files (paths relative to the manifest).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wtal_core::data::{Dataset, FeatureTensor, GroundTruthSegment, Prototypes, Split, Stream, Video, VideoRecord};
use wtal_core::Tensor;

use crate::error::{read, write, Result, WtalError};
use crate::featfile;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    /// Seed of the frozen text-encoder map.
    pub text_encoder_seed: u64,
    pub prototypes: PrototypeTables,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeTables {
    pub cbp_classes: Vec<Vec<f64>>,
    pub cbp_background: Vec<f64>,
    pub vlp_classes: Vec<Vec<f64>>,
    pub vlp_background: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub num_frames: usize,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub segments: Vec<GroundTruthSegment>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    pub features: FeaturePaths,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub cbp: PathBuf,
    pub vlp: PathBuf,
}

impl ManifestVideo {
    pub fn record(&self) -> VideoRecord {
        VideoRecord {
            video_id: self.video_id.clone(),
            num_frames: self.num_frames,
            labels: self.labels.clone(),
            gt_segments: self.segments.clone(),
            split: self.split,
            fps: self.fps,
        }
    }
}

/// A loaded dataset plus the digest that checkpoints and reports cite.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub data_hash: String,
    pub manifest_path: PathBuf,
}

/// `path` may name the manifest itself or the directory holding it.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn table(rows: &[Vec<f64>], what: &str, path: &Path) -> Result<Tensor> {
    Tensor::from_rows(rows).map_err(|e| WtalError::manifest(path, format!("{what}: {e}")))
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read(path)?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| WtalError::manifest(path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(WtalError::manifest(path, format!("unsupported manifest version {}", m.version)));
    }
    let c = m.classes.len();
    if c == 0 {
        return Err(WtalError::manifest(path, "empty class list"));
    }
    let p = &m.prototypes;
    for (what, rows, bg) in [
        ("cbp prototypes", &p.cbp_classes, &p.cbp_background),
        ("vlp prototypes", &p.vlp_classes, &p.vlp_background),
    ] {
        if rows.len() != c || rows.iter().any(|r| r.len() != bg.len()) || bg.is_empty() {
            return Err(WtalError::manifest(path, format!("{what} must be {c} rows of the background width")));
        }
    }
    let mut seen = BTreeSet::new();
    for v in &m.videos {
        if !seen.insert(&v.video_id) {
            return Err(WtalError::manifest(path, format!("duplicate video_id `{}`", v.video_id)));
        }
    }
    Ok(m)
}

/// Validated video records, sorted by id.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoRecord>> {
    let path = resolve_manifest(path);
    let m = parse_manifest(&path)?;
    let mut records: Vec<VideoRecord> = m.videos.iter().map(ManifestVideo::record).collect();
    for r in &records {
        r.validate(m.classes.len()).map_err(|e| load_error(&r.video_id, e))?;
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(records)
}

fn load_error(video_id: &str, e: impl std::fmt::Display) -> WtalError {
    WtalError::Load {
        video_id: video_id.to_string(),
        reason: e.to_string(),
    }
}

/// Manifest, feature files and the data hash, which covers the manifest
/// content without file paths and every feature file's bytes.
pub fn load_dataset(path: &Path) -> Result<LoadedData> {
    let manifest_path = resolve_manifest(path);
    let mut m = parse_manifest(&manifest_path)?;
    m.videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let num_classes = m.classes.len();
    let p = &m.prototypes;
    let prototypes = Prototypes {
        cbp_classes: table(&p.cbp_classes, "cbp prototypes", &manifest_path)?,
        cbp_background: p.cbp_background.clone(),
        vlp_classes: table(&p.vlp_classes, "vlp prototypes", &manifest_path)?,
        vlp_background: p.vlp_background.clone(),
    };

    let mut hasher = Sha256::new();
    let mut stripped = m.clone();
    for v in &mut stripped.videos {
        v.features = FeaturePaths {
            cbp: PathBuf::new(),
            vlp: PathBuf::new(),
        };
    }
    hasher.update(serde_json::to_vec(&serde_json::to_value(&stripped).expect("manifest serializes")).expect("json"));

    let mut videos = Vec::with_capacity(m.videos.len());
    for entry in &m.videos {
        let mut stream = |s: Stream, rel: &Path| -> Result<FeatureTensor> {
            let file = root.join(rel);
            let bytes = read(&file).map_err(|e| load_error(&entry.video_id, e))?;
            hasher.update(&bytes);
            let values = featfile::decode(&bytes, &file).map_err(|e| load_error(&entry.video_id, e))?;
            FeatureTensor::new(s, values).map_err(|e| load_error(&entry.video_id, e))
        };
        let cbp = stream(Stream::Cbp, &entry.features.cbp)?;
        let vlp = stream(Stream::Vlp, &entry.features.vlp)?;
        let video = Video {
            record: entry.record(),
            cbp,
            vlp,
        };
        video.validate(num_classes).map_err(|e| load_error(&entry.video_id, e))?;
        if video.cbp.width() != prototypes.cbp_classes.cols() || video.vlp.width() != prototypes.vlp_classes.cols() {
            return Err(load_error(&entry.video_id, "feature width disagrees with the prototypes"));
        }
        videos.push(video);
    }
    Ok(LoadedData {
        dataset: Dataset {
            num_classes,
            prototypes,
            text_encoder_seed: m.text_encoder_seed,
            videos,
        },
        data_hash: hex::encode(hasher.finalize()),
        manifest_path,
    })
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Write `dir/manifest.json` and `dir/features/<id>.{cbp,vlp}.feat`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let r = &v.record;
        let features = FeaturePaths {
            cbp: Path::new("features").join(format!("{}.cbp.feat", r.video_id)),
            vlp: Path::new("features").join(format!("{}.vlp.feat", r.video_id)),
        };
        featfile::write_features(&dir.join(&features.cbp), &v.cbp.values)?;
        featfile::write_features(&dir.join(&features.vlp), &v.vlp.values)?;
        videos.push(ManifestVideo {
            video_id: r.video_id.clone(),
            num_frames: r.num_frames,
            labels: r.labels.clone(),
            segments: r.gt_segments.clone(),
            split: r.split,
            fps: r.fps,
            features,
        });
    }
    let p = &dataset.prototypes;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: (0..dataset.num_classes).map(|c| format!("class_{c}")).collect(),
        text_encoder_seed: dataset.text_encoder_seed,
        prototypes: PrototypeTables {
            cbp_classes: rows(&p.cbp_classes),
            cbp_background: p.cbp_background.clone(),
            vlp_classes: rows(&p.vlp_classes),
            vlp_background: p.vlp_background.clone(),
        },
        videos,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&path, text.as_bytes())?;
    Ok(path)
}
