//! Versioned binary container for weights, optimizer state and config.
//!
//! Layout: magic, `u32` version, 32-byte config hash, `u32` header length,
//! JSON header, then every tensor as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SddNet;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: usize,
    adam_t: Option<u64>,
    config: RunConfig,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub config: RunConfig,
    /// Every parameter, frozen ones included, in store order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(model: &SddNet, optimizer: Option<&Adam>, config: &RunConfig, epoch: usize, step: usize) -> Self {
        Checkpoint {
            epoch,
            step,
            config: config.clone(),
            params: model.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.map(|o| {
                let (m, v) = o.moments();
                OptimizerState {
                    t: o.steps(),
                    m: m.to_vec(),
                    v: v.to_vec(),
                }
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Tensor> = Vec::new();
        for (name, t) in &self.params {
            tensors.push(Entry {
                name: name.clone(),
                slot: Slot::Param,
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        if let Some(o) = &self.optimizer {
            for (slot, group) in [(Slot::AdamM, &o.m), (Slot::AdamV, &o.v)] {
                for ((name, _), t) in self.params.iter().zip(group.iter()) {
                    tensors.push(Entry {
                        name: name.clone(),
                        slot,
                        shape: t.shape().to_vec(),
                    });
                    data.push(t);
                }
            }
        }
        let header = Header {
            epoch: self.epoch,
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_all(&self.config.hash())?;
        w.write_u32::<LittleEndian>(header_len)?;
        w.write_all(&json)?;
        for t in data {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| bad(e.to_string()))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        if header.config.hash() != hash {
            return Err(bad("config hash does not match the stored config".into()));
        }

        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(|e| bad(e.to_string()))?;
            let t = Tensor::from_vec(&entry.shape, data)?;
            match entry.slot {
                Slot::Param => params.push((entry.name, t)),
                Slot::AdamM => m.push(t),
                Slot::AdamV => v.push(t),
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        let optimizer = match header.adam_t {
            Some(t) if m.len() == params.len() && v.len() == params.len() => Some(OptimizerState { t, m, v }),
            Some(_) => return Err(bad("optimizer state is incomplete".into())),
            None => None,
        };
        Ok(Checkpoint {
            epoch: header.epoch,
            step: header.step,
            config: header.config,
            params,
            optimizer,
        })
    }

    /// Rebuilds the network described by the stored config with the stored weights.
    pub fn build_model(&self) -> Result<SddNet> {
        let mut model_cfg = self.config.model.clone();
        model_cfg.encoder.pretrained = None;
        model_cfg.encoder.allow_random_init = true;
        let mut model = SddNet::new(&model_cfg, self.config.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn restore_into(&self, model: &mut SddNet) -> Result<()> {
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter named {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn optimizer(&self, config: &RunConfig) -> Result<Option<Adam>> {
        self.optimizer
            .as_ref()
            .map(|o| Adam::from_state(config.train.adam, o.t, o.m.clone(), o.v.clone()))
            .transpose()
    }
}
