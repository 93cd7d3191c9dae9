//! End-to-end steps shared by the command line and the tests.

use std::path::{Path, PathBuf};

use wtal_core::data::{Config, Split};
use wtal_core::experiment::{train, TrainedModels};
use wtal_core::synth::{generate, SynthSpec};

use crate::checkpoint::Checkpoint;
use crate::config::config_hash;
use crate::error::{Result, WtalError};
use crate::manifest::{write_dataset, LoadedData};
use crate::report::{video_entries, InferenceFile, ReportFile};

pub fn gen_data(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let dataset = generate(spec)?;
    write_dataset(out_dir, &dataset)
}

/// Train with `cfg.strategy` and package the result.
pub fn train_run(data: &LoadedData, cfg: &Config) -> Result<(Checkpoint, TrainedModels)> {
    let models = train(&data.dataset, cfg)?;
    let ck = Checkpoint::from_models(&models, &data.dataset, &data.data_hash, cfg);
    Ok((ck, models))
}

/// Refuse a checkpoint trained on other data unless forced.
pub fn check_data_hash(ck: &Checkpoint, data: &LoadedData, force: bool) -> Result<()> {
    if !force && ck.meta.data_hash != data.data_hash {
        return Err(WtalError::HashMismatch {
            what: "data",
            expected: ck.meta.data_hash.clone(),
            found: data.data_hash.clone(),
        });
    }
    Ok(())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: &LoadedData, split: Split, force: bool) -> Result<ReportFile> {
    check_data_hash(ck, data, force)?;
    let models = ck.models()?;
    let cfg = &ck.meta.config;
    let report = models.evaluate(&data.dataset, split, cfg)?;
    Ok(ReportFile::new(&report, &config_hash(cfg), &data.data_hash, models.strategy))
}

pub fn infer_checkpoint(ck: &Checkpoint, data: &LoadedData, split: Split, force: bool) -> Result<InferenceFile> {
    check_data_hash(ck, data, force)?;
    let models = ck.models()?;
    let cfg = &ck.meta.config;
    let videos = data
        .dataset
        .split(split)
        .into_iter()
        .map(|v| {
            models.infer(v, cfg).map(|inf| wtal_core::eval::VideoProposals {
                video_id: v.record.video_id.clone(),
                proposals: inf.proposals,
            })
        })
        .collect::<wtal_core::Result<Vec<_>>>()?;
    Ok(InferenceFile {
        config_hash: config_hash(cfg),
        data_hash: data.data_hash.clone(),
        strategy: models.strategy,
        videos: video_entries(&videos),
    })
}
