use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_raster, write_raster, ElementType, Label, Modality, ModalityDescriptor, MultiModalSample, NormalizationStats};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LABEL_FILE: &str = "label.json";
const LABEL_MASK_FILE: &str = "LABEL.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pretrain,
    Classification,
    Multilabel,
    Segmentation,
}

/// Dataset description stored as `manifest.json` at the dataset root.
///
/// Samples live in `samples/<id>/`, one `<MODALITY>.bin` raster per modality,
/// plus `label.json` (class / multi-label tasks) or `LABEL.bin` (segmentation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub modalities: Vec<ModalityDescriptor>,
    pub sample_ids: Vec<String>,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub stats: NormalizationStats,
    pub task: Task,
    pub image_size: usize,
    pub patch_size: usize,
    /// Classes of the downstream label; `None` for pretraining data.
    #[serde(default)]
    pub label_classes: Option<usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LabelFile {
    Class(usize),
    Multilabel(Vec<u8>),
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()?).map_err(Error::io(&path))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(Error::json(self.root.join(MANIFEST_FILE)))?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported manifest format_version {}", self.format_version)));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Schema(format!("image_size {} not divisible by patch {}", self.image_size, self.patch_size)));
        }
        let mut seen = BTreeSet::new();
        for d in &self.modalities {
            d.validate()?;
            if !seen.insert(d.name) {
                return Err(Error::Schema(format!("modality {} listed twice", d.name)));
            }
        }
        self.stats.validate()?;
        let continuous: BTreeSet<Modality> = seen.iter().copied().filter(|m| !m.is_categorical()).collect();
        let covered: BTreeSet<Modality> = self.stats.per_modality.keys().copied().collect();
        if continuous != covered {
            return Err(Error::Schema("normalization stats must cover exactly the continuous modalities".into()));
        }
        let all: BTreeSet<&String> = self.sample_ids.iter().collect();
        let mut assigned = BTreeSet::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !all.contains(id) {
                    return Err(Error::Schema(format!("{split:?} split names unknown sample {id}")));
                }
                if !assigned.insert(id) {
                    return Err(Error::Schema(format!("sample {id} appears in more than one split")));
                }
            }
        }
        if !self.root.as_os_str().is_empty() {
            for id in &self.sample_ids {
                if !self.sample_dir(id).is_dir() {
                    return Err(Error::Schema(format!("sample {id} has no directory")));
                }
            }
        }
        Ok(())
    }

    pub fn modality_list(&self) -> Vec<Modality> {
        let mut v: Vec<Modality> = self.modalities.iter().map(|d| d.name).collect();
        v.sort();
        v
    }

    pub fn descriptor(&self, m: Modality) -> Option<&ModalityDescriptor> {
        self.modalities.iter().find(|d| d.name == m)
    }

    pub fn seg_classes(&self) -> Option<usize> {
        self.descriptor(Modality::Seg).and_then(|d| d.num_classes)
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }
}

/// Writes every raster and the label of `sample` under `root/samples/<id>/`.
pub fn write_sample(root: &Path, sample: &MultiModalSample) -> Result<()> {
    let dir = root.join("samples").join(&sample.sample_id);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    for (m, r) in &sample.rasters {
        write_raster(&dir.join(m.file_name()), r, m.element_type())?;
    }
    match &sample.label {
        None => {}
        Some(Label::Mask(mask)) => write_raster(&dir.join(LABEL_MASK_FILE), mask, ElementType::U16)?,
        Some(label) => {
            let lf = match label {
                Label::Class(k) => LabelFile::Class(*k),
                Label::MultiLabel(bits) => LabelFile::Multilabel(bits.iter().map(|&b| b as u8).collect()),
                Label::Mask(_) => unreachable!(),
            };
            let path = dir.join(LABEL_FILE);
            let text = serde_json::to_string(&lf).map_err(Error::json(&path))?;
            std::fs::write(&path, text).map_err(Error::io(&path))?;
        }
    }
    Ok(())
}

/// Reads one sample, validating it against the manifest.
pub fn load_sample(manifest: &DatasetManifest, sample_id: &str, normalize: bool) -> Result<MultiModalSample> {
    if !manifest.sample_ids.iter().any(|s| s == sample_id) {
        return Err(Error::Load { sample: sample_id.into(), modality: "-".into(), reason: "not in manifest".into() });
    }
    let dir = manifest.sample_dir(sample_id);
    let load_err = |m: &str, reason: String| Error::Load { sample: sample_id.into(), modality: m.into(), reason };
    let size = manifest.image_size;
    let mut rasters = BTreeMap::new();
    for d in &manifest.modalities {
        let m = d.name;
        let path = dir.join(m.file_name());
        if !path.is_file() {
            return Err(load_err(m.name(), format!("missing file {}", path.display())));
        }
        let r = read_raster(&path, m.element_type()).map_err(|e| load_err(m.name(), e.to_string()))?;
        if r.shape() != (d.channels, size, size) {
            return Err(load_err(m.name(), format!("shape {:?}, manifest expects {:?}", r.shape(), (d.channels, size, size))));
        }
        if r.data().iter().any(|v| !v.is_finite()) {
            return Err(load_err(m.name(), "non-finite values".into()));
        }
        rasters.insert(m, r);
    }
    let label = match manifest.task {
        Task::Pretrain => None,
        Task::Segmentation => {
            let path = dir.join(LABEL_MASK_FILE);
            let r = read_raster(&path, ElementType::U16).map_err(|e| load_err("LABEL", e.to_string()))?;
            if r.shape() != (1, size, size) {
                return Err(load_err("LABEL", format!("mask shape {:?}", r.shape())));
            }
            let k = manifest.label_classes.unwrap_or(usize::MAX) as f32;
            if r.data().iter().any(|&v| v >= k) {
                return Err(load_err("LABEL", "mask class out of range".into()));
            }
            Some(Label::Mask(r))
        }
        Task::Classification | Task::Multilabel => {
            let path = dir.join(LABEL_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| load_err("LABEL", e.to_string()))?;
            let lf: LabelFile = serde_json::from_str(&text).map_err(|e| load_err("LABEL", e.to_string()))?;
            let k = manifest.label_classes.unwrap_or(usize::MAX);
            Some(match lf {
                LabelFile::Class(c) if c < k => Label::Class(c),
                LabelFile::Multilabel(bits) if bits.len() == k || manifest.label_classes.is_none() => {
                    Label::MultiLabel(bits.iter().map(|&b| b != 0).collect())
                }
                _ => return Err(load_err("LABEL", "label inconsistent with label_classes".into())),
            })
        }
    };
    let mut sample = MultiModalSample { sample_id: sample_id.to_string(), rasters, label };
    sample.validate(manifest.patch_size, manifest.seg_classes())?;
    if normalize {
        manifest.stats.normalize(&mut sample)?;
    }
    Ok(sample)
}
