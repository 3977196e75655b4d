//! Binary checkpoint files. Layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes  magic "CARSRCKP"
//! 8   u32      format version (1)
//! 12  u64      header length H in bytes
//! 20  H bytes  UTF-8 JSON header
//! 20+H         blob region: f32 values, little-endian, tightly packed
//! ```
//!
//! See `docs/checkpoint-format.md` for the header schema.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{ConvLayer, ParameterStore};
use crate::training::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CARSRCKP";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob region.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub iteration: u64,
    /// Adam step count, or `null` when no optimizer state is stored.
    pub optimizer_step: Option<u64>,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Model weights plus, for training checkpoints, the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
    pub params: ParameterStore<f32>,
    pub opt: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_state(model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            model: model.clone(),
            train: Some(train.clone()),
            iteration: state.iter,
            params: state.params.clone(),
            opt: Some(state.opt.clone()),
        }
    }

    /// Training state to resume from; a fresh optimizer if none was stored.
    pub fn into_state(self) -> TrainState {
        let opt = self.opt.unwrap_or_else(|| AdamState::new(&self.params));
        TrainState {
            iter: self.iteration,
            params: self.params,
            opt,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &ParameterStore<f32>)> = vec![("param", &self.params)];
        if let Some(opt) = &self.opt {
            groups.push(("adam_m", &opt.m));
            groups.push(("adam_v", &opt.v));
        }
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (prefix, store) in groups {
            for (name, layer) in store.iter() {
                for (suffix, shape, vals) in [
                    ("weight", layer.weight.shape().to_vec(), layer.weight.data()),
                    ("bias", vec![layer.bias.len()], &layer.bias[..]),
                ] {
                    let offset = blob.len() as u64;
                    for v in vals {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    tensors.push(TensorEntry {
                        name: format!("{prefix}/{name}.{suffix}"),
                        shape,
                        dtype: "f32".into(),
                        offset,
                        len: blob.len() as u64 - offset,
                    });
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            iteration: self.iteration,
            optimizer_step: self.opt.as_ref().map(|o| o.step),
            train: self.train.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
            what: "checkpoint header",
            reason: e.to_string(),
        })?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            reason,
        };
        if bytes.len() < PREFIX_LEN || &bytes[..8] != MAGIC {
            return Err(bad("missing CARSRCKP magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = PREFIX_LEN
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..blob_start]).map_err(|e| bad(format!("header: {e}")))?;
        let blob = &bytes[blob_start..];
        header.model.validate()?;

        let mut found = std::collections::BTreeMap::new();
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(bad(format!("{}: dtype {} unsupported", t.name, t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let end = t.offset.checked_add(t.len).filter(|&e| e as usize <= blob.len());
            if t.len as usize != 4 * n || end.is_none() {
                return Err(bad(format!("{}: bad extent", t.name)));
            }
            let raw = &blob[t.offset as usize..(t.offset + t.len) as usize];
            let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            found.insert(t.name.clone(), (t.shape.clone(), vals));
        }

        let plan = model::layer_plan(&header.model)?;
        let mut take = |prefix: &str| -> Result<ParameterStore<f32>> {
            let mut store = ParameterStore::new();
            for (name, out, inp, k, dil) in &plan {
                let mut layer = ConvLayer::<f32>::zeros(*out, *inp, *k, *dil);
                for (suffix, expect) in [("weight", vec![*out, *inp, *k, *k]), ("bias", vec![*out])] {
                    let key = format!("{prefix}/{name}.{suffix}");
                    let (shape, vals) = found
                        .remove(&key)
                        .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {key}")))?;
                    if shape != expect {
                        return Err(Error::Incompatible(format!("{key}: stored shape {shape:?}, model needs {expect:?}")));
                    }
                    if suffix == "weight" {
                        layer.weight.data_mut().copy_from_slice(&vals);
                    } else {
                        layer.bias = vals;
                    }
                }
                store.insert(name.clone(), layer)?;
            }
            Ok(store)
        };
        let params = take("param")?;
        let opt = match header.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: take("adam_m")?,
                v: take("adam_v")?,
            }),
            None => None,
        };
        if let Some(extra) = found.keys().next() {
            return Err(Error::Incompatible(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            iteration: header.iteration,
            params,
            opt,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// `ckpt_00001234.bin`
pub fn checkpoint_name(iter: u64) -> String {
    format!("ckpt_{iter:08}.bin")
}

/// The highest-iteration `ckpt_*.bin` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, std::path::PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let iter = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_")?.strip_suffix(".bin")?.parse::<u64>().ok());
        if let Some(i) = iter {
            if best.as_ref().map_or(true, |(b, _)| i > *b) {
                best = Some((i, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_f: 8,
            num_rrdb: 1,
            growth_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let cfg = tiny();
        let mut state = TrainState::fresh(model::build_model(&cfg, 3).unwrap());
        state.iter = 42;
        state.opt.step = 42;
        state.opt.m.get_mut("head").unwrap().bias[0] = 0.5;
        let ck = Checkpoint::from_state(&cfg, &TrainConfig::desk(), &state);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn mismatched_model_is_incompatible() {
        let cfg = tiny();
        let ck = Checkpoint {
            model: cfg.clone(),
            train: None,
            iteration: 0,
            params: model::build_model(&cfg, 0).unwrap(),
            opt: None,
        };
        let mut bytes = ck.to_bytes().unwrap();
        // Rewrite the header to claim a wider model.
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        header.model.n_f = 16;
        let json = serde_json::to_vec(&header).unwrap();
        let blob = bytes.split_off(20 + hlen);
        bytes.truncate(12);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&blob);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Incompatible(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Format { .. })));
    }

    #[test]
    fn latest_picks_highest_iteration() {
        let dir = tempfile::tempdir().unwrap();
        for i in [0u64, 500, 20] {
            std::fs::write(dir.path().join(checkpoint_name(i)), b"").unwrap();
        }
        let p = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert!(p.ends_with("ckpt_00000500.bin"));
    }
}
