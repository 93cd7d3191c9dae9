//! JSON evaluation reports, inference outputs, training history lines and
//! the cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wtal_core::data::{Proposal, Strategy};
use wtal_core::distill::PhaseRecord;
use wtal_core::eval::{EvalReport, VideoProposals};

use crate::error::{read, write, Result, WtalError};

/// `[start, end, category, score]`.
pub type ProposalRow = (usize, usize, usize, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub proposals: Vec<ProposalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub data_hash: String,
    pub strategy: Strategy,
    /// mAP keyed by IoU threshold, `"0.1"` … `"0.7"`.
    pub per_iou: BTreeMap<String, f64>,
    #[serde(rename = "avg_0.1_0.5")]
    pub avg_01_05: f64,
    #[serde(rename = "avg_0.3_0.7")]
    pub avg_03_07: f64,
    pub fore_miou: f64,
    pub back_miou: f64,
    pub videos: Vec<VideoEntry>,
}

/// Proposals only, for data without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceFile {
    pub config_hash: String,
    pub data_hash: String,
    pub strategy: Strategy,
    pub videos: Vec<VideoEntry>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

fn rows(p: &[Proposal]) -> Vec<ProposalRow> {
    p.iter().map(|p| (p.start, p.end, p.category, p.score)).collect()
}

pub fn video_entries(videos: &[VideoProposals]) -> Vec<VideoEntry> {
    videos
        .iter()
        .map(|v| VideoEntry {
            video_id: v.video_id.clone(),
            proposals: rows(&v.proposals),
        })
        .collect()
}

impl ReportFile {
    pub fn new(r: &EvalReport, config_hash: &str, data_hash: &str, strategy: Strategy) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            data_hash: data_hash.to_string(),
            strategy,
            per_iou: r.per_iou.iter().map(|&(t, m)| (threshold_key(t), m)).collect(),
            avg_01_05: r.avg_01_05,
            avg_03_07: r.avg_03_07,
            fore_miou: r.fore_miou,
            back_miou: r.back_miou,
            videos: video_entries(&r.videos),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read(path)?).map_err(|e| WtalError::format(path, e.to_string()))
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, to_json(value).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub config_hash: String,
    pub phase: String,
    pub cycle: usize,
    pub iteration: usize,
    pub loss_kd: f64,
    pub loss_fb: f64,
    pub loss_cls: f64,
    pub fore_miou: Option<f64>,
    pub back_miou: Option<f64>,
}

/// One JSON object per phase.
pub fn history_jsonl(history: &[PhaseRecord], config_hash: &str) -> String {
    let mut out = String::new();
    for r in history {
        let line = HistoryLine {
            config_hash: config_hash.to_string(),
            phase: r.phase.name().to_string(),
            cycle: r.cycle,
            iteration: r.iteration,
            loss_kd: r.loss_kd,
            loss_fb: r.loss_fb,
            loss_cls: r.loss_cls,
            fore_miou: r.fore_miou,
            back_miou: r.back_miou,
        };
        out.push_str(&serde_json::to_string(&line).expect("history serializes"));
        out.push('\n');
    }
    out
}

/// Text table with one row per report: per-threshold mAP, both averages
/// and the frame-level mIoU pair, in percent.
pub fn comparison_table(reports: &[(String, ReportFile)]) -> String {
    let keys: Vec<String> = reports
        .iter()
        .flat_map(|(_, r)| r.per_iou.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let name_w = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("run".len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "run");
    for k in &keys {
        let _ = write!(out, " | {:>6}", format!("@{k}"));
    }
    let _ = writeln!(out, " | {:>8} | {:>8} | {:>6} | {:>6}", "avg.1-.5", "avg.3-.7", "fore", "back");
    for (name, r) in reports {
        let _ = write!(out, "{name:<name_w$}");
        for k in &keys {
            match r.per_iou.get(k) {
                Some(m) => {
                    let _ = write!(out, " | {:>6.2}", 100.0 * m);
                }
                None => {
                    let _ = write!(out, " | {:>6}", "-");
                }
            }
        }
        let _ = writeln!(
            out,
            " | {:>8.2} | {:>8.2} | {:>6.2} | {:>6.2}",
            100.0 * r.avg_01_05,
            100.0 * r.avg_03_07,
            100.0 * r.fore_miou,
            100.0 * r.back_miou
        );
    }
    out
}
