//! Binary checkpoint format.
//!
//! Layout (little endian): magic `COOLCKP1`, version `u32`, step `u64`,
//! seed `u64`, config hash `u64`, config text (`u32` length + UTF-8), tensor
//! count `u32`, then one record per tensor sorted by name (`u32` name length,
//! name, `u32` rank, `u32` dims, raw `f64` values), and finally a CRC32 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COOLCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub config_hash: u64,
    pub config_text: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Parameters plus optimizer moments of a training run.
    pub fn capture(config: &Config, store: &ParameterStore, optim: Option<&AdamW>) -> Self {
        let mut tensors: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n.to_string(), t.with_requires_grad(false))
            })
            .collect();
        if let Some(opt) = optim {
            tensors.extend(opt.moment_tensors(store));
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: optim.map_or(0, |o| o.step),
            seed: config.model.seed,
            config_hash: config.hash(),
            config_text: config.canonical_text(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<Config> {
        Ok(Config::parse(&self.config_text)?)
    }

    /// Copies stored parameter values into `store`, which must hold exactly
    /// the same parameter names and shapes.
    pub fn restore_params(&self, store: &mut ParameterStore) -> Result<()> {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            let saved = self
                .tensors
                .get(name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing parameter {name}")))?;
            let slot = store.get_mut(name).expect("name from store");
            if saved.shape() != slot.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    saved.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(saved.data());
        }
        let extra = self
            .tensors
            .keys()
            .find(|n| !store.contains(n) && !n.starts_with("adam."));
        if let Some(n) = extra {
            return Err(CheckpointError::Corrupt(format!("unexpected tensor {n}")));
        }
        Ok(())
    }

    /// Restores optimizer moments and step count into `optim`.
    pub fn restore_optim(&self, optim: &mut AdamW) {
        for (name, t) in &self.tensors {
            optim.load_moment(name, t);
        }
        optim.step = self.step;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 12 + 4 {
            return Err(CheckpointError::Truncated);
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let step = r.u64()?;
        let seed = r.u64()?;
        let config_hash = r.u64()?;
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            version,
            step,
            seed,
            config_hash,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample() -> (Config, ParameterStore) {
        let mut cfg = Config::default();
        for kv in ["hidden=8", "heads=2", "ffn_dim=8", "vocab_size=20", "max_len=8", "use_conv_block=false"] {
            cfg.apply_override(kv).unwrap();
        }
        let (_, store) = Model::assemble(&cfg.model).unwrap();
        (cfg, store)
    }

    #[test]
    fn bytes_roundtrip_identically() {
        let (cfg, store) = sample();
        let ck = Checkpoint::capture(&cfg, &store, None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (cfg, store) = sample();
        let mut bytes = Checkpoint::capture(&cfg, &store, None).to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn wrong_version_and_magic() {
        let (cfg, store) = sample();
        let mut bytes = Checkpoint::capture(&cfg, &store, None).to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        let mut bytes = Checkpoint::capture(&cfg, &store, None).to_bytes();
        bytes.truncate(40);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let (cfg, store) = sample();
        let mut ck = Checkpoint::capture(&cfg, &store, None);
        ck.tensors.insert("head.span.bias".into(), Tensor::zeros([3]));
        let mut target = store.clone();
        assert!(ck.restore_params(&mut target).is_err());
    }
}
