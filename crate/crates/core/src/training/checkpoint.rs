//! Checkpoint directories.
//!
//! ```text
//! <dir>/checkpoint.json      metadata, resolved config and tensor index
//! <dir>/params/<name>.bin    one raster file per parameter (1 x rows x cols, f32)
//! <dir>/adam_m/<name>.bin    optimizer first moments (when present)
//! <dir>/adam_v/<name>.bin    optimizer second moments (when present)
//! ```
//!
//! Parameters and moments are kept f32-representable in memory, so the f32
//! files are lossless and save -> load -> save is byte-identical.

use std::path::{Path, PathBuf};

use eomae_grad::{Matrix, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use crate::datamodel::{read_raster, write_raster, ElementType, Raster};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    kind: String,
    fingerprint: String,
    config: serde_json::Value,
    epoch: usize,
    step: usize,
    seed: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Serialized training state. Random streams are derived from
/// `(seed, epoch)`, so those two fields are the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"pretrain"` or `"finetune"`.
    pub kind: String,
    pub fingerprint: String,
    pub config: serde_json::Value,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub params: Vec<Matrix>,
    pub optimizer: Option<OptimizerState>,
}

/// SHA-256 over the compact JSON form of `config` (object keys sorted).
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(Error::json("<config>"))?;
    let text = serde_json::to_string(&value).map_err(Error::json("<config>"))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn capture<T: Serialize>(
        kind: &str,
        config: &T,
        store: &ParamStore,
        optimizer: Option<&AdamW>,
        epoch: usize,
        step: usize,
        seed: u64,
    ) -> Result<Self> {
        let tensors = store
            .ids()
            .map(|id| {
                let v = store.get(id);
                TensorEntry { name: store.name(id).to_string(), rows: v.rows(), cols: v.cols(), decay: store.decays(id) }
            })
            .collect();
        Ok(Self {
            kind: kind.to_string(),
            fingerprint: fingerprint(config)?,
            config: serde_json::to_value(config).map_err(Error::json("<config>"))?,
            epoch,
            step,
            seed,
            tensors,
            params: store.ids().map(|id| store.get(id).clone()).collect(),
            optimizer: optimizer.map(|o| OptimizerState { step: o.step, m: o.m.clone(), v: o.v.clone() }),
        })
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().position(|t| t.name == name).map(|i| &self.params[i])
    }

    /// Copies every checkpoint tensor accepted by `filter` into the
    /// same-named parameter of `store`. Returns the number copied.
    pub fn apply_to(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (t, value) in self.tensors.iter().zip(&self.params) {
            if !filter(&t.name) {
                continue;
            }
            let id = store
                .id(&t.name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor {} has no counterpart in the model", t.name)))?;
            let dst = store.get_mut(id);
            if dst.shape() != value.shape() {
                return Err(Error::config(format!(
                    "tensor {} has shape {:?} in the checkpoint but {:?} in the model",
                    t.name,
                    value.shape(),
                    dst.shape()
                )));
            }
            *dst = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Restores the whole store (all names must match) and optimizer.
    pub fn restore(&self, store: &mut ParamStore, optimizer: &mut AdamW) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        self.apply_to(store, |_| true)?;
        let state = self.optimizer.as_ref().ok_or_else(|| Error::config("checkpoint has no optimizer state"))?;
        optimizer.step = state.step;
        optimizer.m = state.m.clone();
        optimizer.v = state.v.clone();
        Ok(())
    }

    /// Writes to a sibling temp directory, then swaps it in; a failed write
    /// leaves any previous checkpoint at `dir` intact.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        let leaf = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
        let tmp = parent.join(format!(".{leaf}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
        }
        let written = self.write_into(&tmp);
        if let Err(e) = written {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let old = parent.join(format!(".{leaf}.old-{}", std::process::id()));
        if dir.exists() {
            std::fs::rename(dir, &old).map_err(Error::io(dir))?;
        }
        std::fs::rename(&tmp, dir).map_err(Error::io(dir))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(Error::io(&old))?;
        }
        Ok(())
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        let meta = Meta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: self.tensors.clone(),
        };
        write_group(&dir.join("params"), &self.tensors, &self.params)?;
        if let Some(o) = &self.optimizer {
            write_group(&dir.join("adam_m"), &self.tensors, &o.m)?;
            write_group(&dir.join("adam_v"), &self.tensors, &o.v)?;
        }
        let path = dir.join(CHECKPOINT_FILE);
        let mut text = serde_json::to_string_pretty(&meta).map_err(Error::json(&path))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let meta: Meta = serde_json::from_str(&text).map_err(Error::json(&path))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format { path, reason: format!("unsupported format_version {}", meta.format_version) });
        }
        let params = read_group(&dir.join("params"), &meta.tensors)?;
        let optimizer = match meta.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                m: read_group(&dir.join("adam_m"), &meta.tensors)?,
                v: read_group(&dir.join("adam_v"), &meta.tensors)?,
            }),
            None => None,
        };
        Ok(Self {
            kind: meta.kind,
            fingerprint: meta.fingerprint,
            config: meta.config,
            epoch: meta.epoch,
            step: meta.step,
            seed: meta.seed,
            tensors: meta.tensors,
            params,
            optimizer,
        })
    }

    /// Deserializes the stored config.
    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(Error::json("<checkpoint config>"))
    }
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn write_group(dir: &Path, tensors: &[TensorEntry], values: &[Matrix]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (t, v) in tensors.iter().zip(values) {
        let data: Vec<f32> = v.data().iter().map(|&x| x as f32).collect();
        let r = Raster::from_vec(1, v.rows(), v.cols(), data)?;
        write_raster(&tensor_path(dir, &t.name), &r, ElementType::F32)?;
    }
    Ok(())
}

fn read_group(dir: &Path, tensors: &[TensorEntry]) -> Result<Vec<Matrix>> {
    tensors
        .iter()
        .map(|t| {
            let path = tensor_path(dir, &t.name);
            let r = read_raster(&path, ElementType::F32)?;
            if r.shape() != (1, t.rows, t.cols) {
                return Err(Error::Format { path, reason: format!("shape {:?}, index says {}x{}", r.shape(), t.rows, t.cols) });
            }
            Ok(Matrix::from_vec(t.rows, t.cols, r.data().iter().map(|&x| x as f64).collect()))
        })
        .collect()
}
