//! The `ARFC` checkpoint format.
//!
//! Layout: magic `ARFC`, version byte (1), 32-byte architecture hash,
//! little-endian u32 tensor count, then per tensor a little-endian u16 name
//! length, the UTF-8 name and an embedded f64 `ARFT` tensor. Tensors are
//! written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARFC";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const MOMENTUM_PREFIX: &str = "optim.momentum.";
pub const EPOCH_KEY: &str = "state.epoch";
pub const STEP_KEY: &str = "state.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub tensors: BTreeMap<String, Tensor>,
}

/// Training position stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub momentum: ParamStore,
}

impl Checkpoint {
    pub fn capture(model: &Model, state: Option<&TrainState>) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in model.params.iter().chain(model.buffers.iter()) {
            tensors.insert(name.clone(), t.clone());
        }
        if let Some(s) = state {
            for (name, t) in s.momentum.iter() {
                tensors.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
            }
            tensors.insert(EPOCH_KEY.to_string(), Tensor::scalar(s.epoch as f64));
            tensors.insert(STEP_KEY.to_string(), Tensor::scalar(s.step as f64));
        }
        Self { config_hash: model.config.hash(), tensors }
    }

    /// Rebuilds the model described by `config` from this checkpoint.
    pub fn restore(&self, config: &ModelConfig) -> Result<(Model, TrainState)> {
        if config.hash() != self.config_hash {
            return Err(Error::Config("checkpoint was written for a different architecture".into()));
        }
        let mut model = Model::new(config.clone(), 0)?;
        let mut used = 0;
        for store in [&mut model.params, &mut model.buffers] {
            for (name, slot) in store.iter_mut() {
                let t = self
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
                used += 1;
            }
        }
        let mut state = TrainState::default();
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                state.momentum.insert(p, t.clone());
                used += 1;
            } else if name == EPOCH_KEY || name == STEP_KEY {
                let v = t.data().first().copied().unwrap_or(-1.0);
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Format(format!("bad `{name}` value {v}")));
                }
                if name == EPOCH_KEY { state.epoch = v as usize } else { state.step = v as usize }
                used += 1;
            }
        }
        if used != self.tensors.len() {
            return Err(Error::Format(format!("checkpoint has {} unrecognized tensors", self.tensors.len() - used)));
        }
        Ok((model, state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_hash);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t, DType::F64)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        fn take(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            Ok(buf)
        }
        if take(&mut r, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = take(&mut r, 1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = take(&mut r, 32)?.try_into().expect("32 bytes");
        let count = u32::from_le_bytes(take(&mut r, 4)?.try_into().expect("4 bytes"));
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(&mut r, 2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(&mut r, len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (t, _) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Self { config_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
