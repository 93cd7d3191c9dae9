//! Training and inference for each optimization strategy.

use alloc::vec::Vec;

use crate::cbp::CbpModel;
use crate::data::{Cas, Config, Dataset, FuseMode, Split, Strategy, Video};
use crate::distill::{PhaseRecord, Trainer};
use crate::error::Result;
use crate::eval::{evaluate, infer_video, EvalReport, VideoInference};
use crate::fuse::fuse_cas;
use crate::vlp::VlpModel;

/// Both trained branches plus the strategy that produced them.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub strategy: Strategy,
    pub cbp: CbpModel,
    pub vlp: VlpModel,
    pub history: Vec<PhaseRecord>,
}

/// Train with `cfg.strategy`. `only_b` and `only_f` run `cycles` steps of
/// a single kind after warm-up; the fusion baselines stop after warm-up and
/// pair the CBP branch with the untrained VLP branch.
pub fn train(dataset: &Dataset, cfg: &Config) -> Result<TrainedModels> {
    let mut t = Trainer::new(dataset, cfg)?;
    t.warmup(cfg.warmup_iters)?;
    match cfg.strategy {
        Strategy::Alternating => {
            for _ in 0..cfg.cycles {
                t.cycle()?;
            }
        }
        Strategy::OnlyB => {
            for _ in 0..cfg.cycles {
                t.b_step(cfg.iters_per_step)?;
            }
        }
        Strategy::OnlyF => {
            for _ in 0..cfg.cycles {
                t.f_step(cfg.iters_per_step)?;
            }
        }
        Strategy::WarmupOnly | Strategy::FuseAvg | Strategy::FuseWeight => {}
    }
    let (cbp, vlp, history) = t.into_models();
    Ok(TrainedModels {
        strategy: cfg.strategy,
        cbp,
        vlp,
        history,
    })
}

impl TrainedModels {
    /// `(classification CAS, localization CAS)` for one video. Classification
    /// always uses the CBP branch.
    pub fn cas_pair(&self, video: &Video, cfg: &Config) -> Result<(Cas, Cas)> {
        let cbp = self.cbp.predict(&video.cbp.values)?;
        let fused = |mode: FuseMode| -> Result<Cas> {
            let vlp = self.vlp.predict(&video.vlp.values)?;
            fuse_cas(&cbp, &vlp, mode, cfg.fuse_weight)
        };
        let loc = match self.strategy {
            Strategy::WarmupOnly | Strategy::Alternating => cbp.clone(),
            Strategy::OnlyB | Strategy::OnlyF => fused(cfg.fusion)?,
            Strategy::FuseAvg => fused(FuseMode::Avg)?,
            Strategy::FuseWeight => fused(FuseMode::Weight)?,
        };
        Ok((cbp, loc))
    }

    pub fn infer(&self, video: &Video, cfg: &Config) -> Result<VideoInference> {
        let (cls, loc) = self.cas_pair(video, cfg)?;
        infer_video(&cls, &loc, cfg)
    }

    /// Inference and metrics over one split.
    pub fn evaluate(&self, dataset: &Dataset, split: Split, cfg: &Config) -> Result<EvalReport> {
        let videos = dataset.split(split);
        let inferred = videos
            .iter()
            .map(|v| self.infer(v, cfg))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = videos.iter().map(|v| &v.record).zip(&inferred).collect();
        evaluate(&pairs, dataset.num_classes)
    }
}
