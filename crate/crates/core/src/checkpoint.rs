//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMVL" | u32 version | u32 n + n bytes of JSON header
//! | u32 count + parameter records | u32 count + optimizer records
//! | u64 CRC-64/XZ of everything before it
//! ```
//!
//! A record is `u32 name length | name | u32 rank | rank × u64 dim | f64 data`.
//! Optimizer records are named `m:<param>`, `v:<param>` and `vhat:<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{verified_payload, Reader, CRC64};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, MultimodalModel};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::RngState;
use crate::tensor::{ParamStore, Tensor};
use crate::train::{EpochRecord, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMVL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Hash of the dataset configuration the model was trained on.
    pub data_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    config_hash: String,
    train_config: TrainConfig,
    rng: RngState,
    step: u64,
    epoch: usize,
    history: Vec<EpochRecord>,
    data_hash: Option<String>,
    optimizer_t: u64,
    adam: AdamConfig,
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let n = r.u32()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("record {name}: shape overflows")))?;
    Ok((name.clone(), Tensor::new(shape, r.f64s(len)?).map_err(|e| Error::Format(format!("record {name}: {e}")))?))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, data_hash: Option<String>) -> Self {
        Checkpoint {
            model_config: t.model.config().clone(),
            train_config: t.config.clone(),
            params: t.model.params().clone(),
            optimizer: t.optimizer.clone(),
            rng: RngState::capture(&t.rng),
            step: t.step,
            epoch: t.epoch,
            history: t.history.clone(),
            data_hash,
        }
    }

    /// Rebuilds a trainer at the saved position. `config` replaces the
    /// saved training configuration (e.g. with more epochs).
    pub fn into_trainer(self, config: Option<TrainConfig>) -> Result<Trainer> {
        let config = config.unwrap_or(self.train_config);
        let model = MultimodalModel::from_parts(self.model_config, self.params)?;
        let mut t = Trainer::with_model(model, config)?;
        t.optimizer = self.optimizer;
        t.rng = self.rng.restore()?;
        t.step = self.step;
        t.epoch = self.epoch;
        t.history = self.history;
        Ok(t)
    }

    pub fn model(&self) -> Result<MultimodalModel> {
        MultimodalModel::from_parts(self.model_config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model_config: self.model_config.clone(),
            config_hash: self.model_config.hash(),
            train_config: self.train_config.clone(),
            rng: self.rng.clone(),
            step: self.step,
            epoch: self.epoch,
            history: self.history.clone(),
            data_hash: self.data_hash.clone(),
            optimizer_t: self.optimizer.t,
            adam: self.optimizer.config,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_record(&mut out, name, t);
        }
        let moments = [("m", &self.optimizer.m), ("v", &self.optimizer.v), ("vhat", &self.optimizer.vhat)];
        let count: usize = moments.iter().map(|(_, m)| m.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, map) in moments {
            for (name, t) in map {
                write_record(&mut out, &format!("{prefix}:{name}"), t);
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verified_payload(bytes, CHECKPOINT_MAGIC)?;
        let mut r = Reader::new(body);
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let hash = header.model_config.hash();
        if hash != header.config_hash {
            return Err(Error::Format(format!(
                "config hash mismatch: header says {}, config hashes to {hash}",
                header.config_hash
            )));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = read_record(&mut r)?;
            params.insert(name, t)?;
        }
        let mut optimizer = OptimizerState::new(header.adam, &ParamStore::new());
        optimizer.t = header.optimizer_t;
        for _ in 0..r.u32()? {
            let (name, t) = read_record(&mut r)?;
            let (prefix, param) = name
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("optimizer record '{name}' lacks a prefix")))?;
            let map: &mut BTreeMap<String, Tensor> = match prefix {
                "m" => &mut optimizer.m,
                "v" => &mut optimizer.v,
                "vhat" => &mut optimizer.vhat,
                _ => return Err(Error::Format(format!("unknown optimizer record '{name}'"))),
            };
            map.insert(param.to_string(), t);
        }
        if !r.finished() {
            return Err(Error::Format("trailing bytes after optimizer records".into()));
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            params,
            optimizer,
            rng: header.rng,
            step: header.step,
            epoch: header.epoch,
            history: header.history,
            data_hash: header.data_hash,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
