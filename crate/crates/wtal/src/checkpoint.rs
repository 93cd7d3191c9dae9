//! Binary checkpoints: magic `WTALCKPT\0`, a version byte, a JSON metadata
//! block, then every named parameter of both branches as
//! `{name, shape, little-endian f64 payload}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wtal_core::cbp::CbpModel;
use wtal_core::data::{Config, Dataset, Strategy};
use wtal_core::experiment::TrainedModels;
use wtal_core::params::ParamStore;
use wtal_core::vlp::{VlpModel, CLASS_TOKENS};
use wtal_core::Tensor;

use crate::config::config_hash;
use crate::error::{read, write, Result, WtalError};

pub const MAGIC: &[u8; 9] = b"WTALCKPT\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub strategy: Strategy,
    pub config_hash: String,
    pub data_hash: String,
    /// SHA-256 of the frozen text-encoder parameters.
    pub frozen_hash: String,
    pub num_classes: usize,
    pub cbp_input_width: usize,
    pub text_encoder_seed: u64,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// `(name, value)` in store order, CBP first.
    pub params: Vec<(String, Tensor)>,
}

pub fn frozen_hash(vlp: &VlpModel) -> String {
    hex::encode(Sha256::digest(vlp.store.frozen_bytes()))
}

impl Checkpoint {
    pub fn from_models(models: &TrainedModels, dataset: &Dataset, data_hash: &str, cfg: &Config) -> Self {
        let params = models
            .cbp
            .store
            .named()
            .chain(models.vlp.store.named())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Self {
            meta: CheckpointMeta {
                strategy: models.strategy,
                config_hash: config_hash(cfg),
                data_hash: data_hash.to_string(),
                frozen_hash: frozen_hash(&models.vlp),
                num_classes: dataset.num_classes,
                cbp_input_width: dataset.cbp_width(),
                text_encoder_seed: dataset.text_encoder_seed,
                config: cfg.clone(),
            },
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&serde_json::to_value(&self.meta).expect("meta serializes")).expect("json");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            store.add(name.clone(), value.clone(), true);
        }
        out.extend_from_slice(&store.all_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.bad("bad magic, expected WTALCKPT"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.bad(&format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.bad("parameter name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.bad("shape overflows"))?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| r.bad("shape overflows"))?)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes after the last parameter"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?, path)
    }

    /// Rebuild both branches; every parameter must be present exactly once
    /// and the frozen text encoder must match its recorded hash.
    pub fn models(&self) -> Result<TrainedModels> {
        let cfg = &self.meta.config;
        if config_hash(cfg) != self.meta.config_hash {
            return Err(WtalError::HashMismatch {
                what: "embedded config",
                expected: self.meta.config_hash.clone(),
                found: config_hash(cfg),
            });
        }
        let tokens = self
            .params
            .iter()
            .find(|(n, _)| n == CLASS_TOKENS)
            .map(|(_, t)| t)
            .ok_or_else(|| wtal_core::Error::Data(format!("checkpoint lacks `{CLASS_TOKENS}`")))?;
        let mut cbp = CbpModel::new(self.meta.cbp_input_width, self.meta.num_classes, cfg, 0);
        let mut vlp = VlpModel::new(tokens, self.meta.text_encoder_seed, cfg, 0);
        let expected = cbp.store.len() + vlp.store.len();
        if self.params.len() != expected {
            return Err(wtal_core::Error::Data(format!(
                "checkpoint has {} parameters, the configured model has {expected}",
                self.params.len()
            ))
            .into());
        }
        for (name, value) in &self.params {
            let store = if cbp.store.find(name).is_some() { &mut cbp.store } else { &mut vlp.store };
            store.assign(name, value.clone())?;
        }
        let found = frozen_hash(&vlp);
        if found != self.meta.frozen_hash {
            return Err(WtalError::HashMismatch {
                what: "frozen text encoder",
                expected: self.meta.frozen_hash.clone(),
                found,
            });
        }
        Ok(TrainedModels {
            strategy: self.meta.strategy,
            cbp,
            vlp,
            history: Vec::new(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: &str) -> WtalError {
        WtalError::format(self.path, format!("{reason} (offset {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
