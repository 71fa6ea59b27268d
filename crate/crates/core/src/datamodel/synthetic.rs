//! Desk-scale stand-in for a multi-modal Earth-observation corpus.
//!
//! Every sample is driven by three smooth latent fields (a terrain field, a
//! vegetation field and a moisture field) plus an oriented texture selected by
//! the sample's latent surface type. All ten Sentinel-2 bands are fixed linear
//! mixtures of those fields, elevation follows the terrain field and the SEG
//! land-cover map thresholds elevation. Masked patches of any modality are
//! therefore predictable from visible patches of the others.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    compute_stats_from, group_s2_bands, write_sample, DatasetManifest, Label, Modality, ModalityDescriptor,
    MultiModalSample, Raster, Split, Task, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub task: Task,
    /// Land-cover classes of the SEG modality.
    pub num_classes: usize,
    /// Downstream label classes (and latent surface types); defaults to `num_classes`.
    pub label_classes: Option<usize>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Strength of the per-type spectral signature relative to the shared fields.
    pub class_signal: f64,
    /// Strength of the per-type oriented texture.
    pub texture_signal: f64,
    /// Per-pixel noise std relative to each band's scale.
    pub noise: f64,
    /// Modalities to emit; all six by default.
    pub modalities: Vec<Modality>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            image_size: 32,
            patch_size: 8,
            seed: 0,
            task: Task::Pretrain,
            num_classes: 5,
            label_classes: None,
            val_fraction: 0.2,
            test_fraction: 0.2,
            class_signal: 0.4,
            texture_signal: 0.6,
            noise: 0.05,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

impl SyntheticConfig {
    pub fn label_classes(&self) -> usize {
        self.label_classes.unwrap_or(self.num_classes)
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes == 0 || self.label_classes() == 0 {
            return Err(Error::config("class counts must be positive"));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) || f >= 1.0 {
            return Err(Error::config("split fractions must be in [0, 1) and sum below 1"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("no modalities requested"));
        }
        Ok(())
    }
}

/// Weights of (terrain, vegetation, moisture, texture) per band, stack order.
const MIXING: [[f64; 4]; 10] = [
    [0.3, -0.5, 0.2, 0.4],
    [0.3, -0.3, 0.2, 0.4],
    [0.3, -0.6, 0.1, 0.4],
    [0.2, 0.2, 0.2, 0.3],
    [0.2, 0.6, 0.1, 0.3],
    [0.2, 0.7, 0.1, 0.3],
    [0.2, 0.8, 0.0, 0.3],
    [0.2, 0.8, 0.1, 0.3],
    [0.4, 0.1, -0.6, 0.2],
    [0.4, 0.0, -0.7, 0.2],
];
const BAND_MEAN: [f64; 10] = [800.0, 1000.0, 900.0, 1300.0, 2000.0, 2300.0, 2500.0, 2600.0, 1800.0, 1200.0];
const BAND_SCALE: [f64; 10] = [250.0, 280.0, 300.0, 320.0, 400.0, 450.0, 500.0, 500.0, 380.0, 330.0];
/// Signatures are a property of the simulated world, shared by every dataset.
const SIGNATURE_SEED: u64 = 0x5e17_2b0d;

struct Wave {
    freq: f64,
    dir: (f64, f64),
    phase: f64,
    amp: f64,
}

fn smooth_field<R: Rng>(rng: &mut R) -> Vec<Wave> {
    (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            Wave {
                freq: rng.random_range(0.5..2.0),
                dir: (theta.cos(), theta.sin()),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

fn eval_waves(waves: &[Wave], u: f64, v: f64) -> f64 {
    let norm = (waves.iter().map(|w| w.amp * w.amp).sum::<f64>() / 2.0).sqrt();
    waves.iter().map(|w| w.amp * (2.0 * PI * w.freq * (w.dir.0 * u + w.dir.1 * v) + w.phase).sin()).sum::<f64>() / norm
}

fn type_texture(kind: usize, types: usize) -> Wave {
    let theta = PI * kind as f64 / types as f64;
    Wave { freq: 2.0 + (kind % 2) as f64, dir: (theta.cos(), theta.sin()), phase: 0.0, amp: 1.0 }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quantize(u: f64, classes: usize) -> f32 {
    ((u * classes as f64).floor() as usize).min(classes - 1) as f32
}

fn signatures(types: usize) -> Vec<[f64; 10]> {
    let mut rng = stream(SIGNATURE_SEED, Purpose::ClassSignatures, types as u64);
    (0..types).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Generates sample `index` of the dataset described by `cfg`.
pub(crate) fn synth_sample(cfg: &SyntheticConfig, index: usize, signatures: &[[f64; 10]]) -> MultiModalSample {
    let types = signatures.len();
    let mut rng = stream(cfg.seed, Purpose::SampleFields, index as u64);
    let fields: Vec<Vec<Wave>> = (0..3).map(|_| smooth_field(&mut rng)).collect();
    let present: Vec<usize> = match cfg.task {
        Task::Multilabel => {
            let mut p: Vec<usize> = (0..types).filter(|_| rng.random_bool(0.3)).collect();
            if p.is_empty() {
                p.push(rng.random_range(0..types));
            }
            p
        }
        Task::Classification => vec![index % types],
        _ => vec![rng.random_range(0..types)],
    };
    let share = 1.0 / (present.len() as f64).sqrt();
    let textures: Vec<Wave> = present.iter().map(|&k| type_texture(k, types)).collect();
    let texture_phase = rng.random_range(0.0..2.0 * PI);
    let mut spectral = [0.0; 10];
    for &k in &present {
        spectral.iter_mut().zip(&signatures[k]).for_each(|(s, v)| *s += share * v);
    }

    let n = cfg.image_size;
    let mut stack = Raster::zeros(10, n, n);
    let mut depth = Raster::zeros(1, n, n);
    let mut seg = Raster::zeros(1, n, n);
    let mut label_mask = Raster::zeros(1, n, n);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let f: Vec<f64> = fields.iter().map(|w| eval_waves(w, u, v)).collect();
            let tex = share
                * textures
                    .iter()
                    .map(|w| (2.0 * PI * w.freq * (w.dir.0 * u + w.dir.1 * v) + texture_phase).sin())
                    .sum::<f64>();
            for b in 0..10 {
                let m = &MIXING[b];
                let latent = m[0] * f[0] + m[1] * f[1] + m[2] * f[2] + cfg.texture_signal * m[3] * tex;
                let noise: f64 = rng.sample(StandardNormal);
                let val = BAND_MEAN[b] + BAND_SCALE[b] * (latent + cfg.class_signal * spectral[b] + cfg.noise * noise);
                stack.set(b, y, x, val as f32);
            }
            let elev_noise: f64 = rng.sample(StandardNormal);
            let elev = f[0] + 0.3 * f[2];
            depth.set(0, y, x, (200.0 + 80.0 * elev + 80.0 * cfg.noise * elev_noise) as f32);
            seg.set(0, y, x, quantize(logistic(1.5 * elev), cfg.num_classes));
            label_mask.set(0, y, x, quantize(logistic(1.5 * f[1] + 0.5 * tex), cfg.label_classes()));
        }
    }

    let mut rasters = group_s2_bands(&stack).expect("stack has ten bands");
    rasters.insert(Modality::Depth, depth);
    rasters.insert(Modality::Seg, seg);
    rasters.retain(|m, _| cfg.modalities.contains(m));
    let label = match cfg.task {
        Task::Pretrain => None,
        Task::Classification => Some(Label::Class(present[0])),
        Task::Multilabel => Some(Label::MultiLabel((0..types).map(|k| present.contains(&k)).collect())),
        Task::Segmentation => Some(Label::Mask(label_mask)),
    };
    MultiModalSample { sample_id: sample_id(index), rasters, label }
}

pub(crate) fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Writes a complete dataset (samples + `manifest.json`) under `out`.
///
/// Output is a pure function of `cfg`: the same config yields identical bytes.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let sigs = signatures(cfg.label_classes());
    let ids: Vec<String> = (0..cfg.n_samples).map(sample_id).collect();

    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut stream(cfg.seed, Purpose::Splits, 0));
    let n = cfg.n_samples as f64;
    let n_val = (n * cfg.val_fraction).round() as usize;
    let n_test = ((n * cfg.test_fraction).round() as usize).min(cfg.n_samples - n_val - 1);
    let mut splits = BTreeMap::new();
    let sorted = |v: &[String]| {
        let mut v = v.to_vec();
        v.sort();
        v
    };
    splits.insert(Split::Val, sorted(&shuffled[..n_val]));
    splits.insert(Split::Test, sorted(&shuffled[n_val..n_val + n_test]));
    splits.insert(Split::Train, sorted(&shuffled[n_val + n_test..]));

    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut train = Vec::new();
    for i in 0..cfg.n_samples {
        let s = synth_sample(cfg, i, &sigs);
        write_sample(out, &s)?;
        if splits[&Split::Train].contains(&s.sample_id) {
            train.push(s);
        }
    }
    let stats = compute_stats_from(&train)?;
    let mut modalities = cfg.modalities.clone();
    modalities.sort();
    modalities.dedup();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        modalities: modalities
            .iter()
            .map(|&m| ModalityDescriptor::new(m, Some(cfg.num_classes)))
            .collect::<Result<_>>()?,
        sample_ids: ids,
        splits,
        stats,
        task: cfg.task,
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        label_classes: (cfg.task != Task::Pretrain).then(|| cfg.label_classes()),
        root: out.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}
