use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{load_sample, DatasetManifest, Modality, MultiModalSample, Split};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-modality, per-channel z-score statistics for continuous modalities.
///
/// Categorical modalities never appear here; they are not normalized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationStats {
    pub per_modality: BTreeMap<Modality, Vec<ChannelStats>>,
}

impl NormalizationStats {
    pub fn get(&self, m: Modality) -> Option<&[ChannelStats]> {
        self.per_modality.get(&m).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, chans) in &self.per_modality {
            if m.is_categorical() {
                return Err(Error::Schema(format!("normalization stats present for categorical {m}")));
            }
            if chans.len() != m.channels() {
                return Err(Error::Schema(format!("{m} stats have {} channels", chans.len())));
            }
            if chans.iter().any(|c| !(c.std > 0.0) || !c.mean.is_finite() || !c.std.is_finite()) {
                return Err(Error::Schema(format!("{m} stats need finite mean and positive std")));
            }
        }
        Ok(())
    }

    /// Standardizes every continuous raster in place.
    pub fn normalize(&self, sample: &mut MultiModalSample) -> Result<()> {
        for (m, r) in sample.rasters.iter_mut() {
            if m.is_categorical() {
                continue;
            }
            let stats = self.get(*m).ok_or_else(|| Error::Load {
                sample: sample.sample_id.clone(),
                modality: m.to_string(),
                reason: "no normalization statistics".into(),
            })?;
            for (c, s) in stats.iter().enumerate() {
                r.channel_mut(c).iter_mut().for_each(|v| *v = ((*v as f64 - s.mean) / s.std) as f32);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    shift: Option<f64>,
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Acc {
    fn push(&mut self, v: f64) {
        let k = *self.shift.get_or_insert(v);
        let d = v - k;
        self.n += 1.0;
        self.sum += d;
        self.sum_sq += d * d;
    }

    fn finish(&self) -> ChannelStats {
        let k = self.shift.unwrap_or(0.0);
        let mean_d = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean_d * mean_d).max(0.0);
        ChannelStats { mean: k + mean_d, std: var.sqrt().max(STD_FLOOR) }
    }
}

/// Population mean/std of every continuous channel over `samples`.
pub fn compute_stats_from<'a>(samples: impl IntoIterator<Item = &'a MultiModalSample>) -> Result<NormalizationStats> {
    let mut accs: BTreeMap<Modality, Vec<Acc>> = BTreeMap::new();
    let mut any = false;
    for s in samples {
        any = true;
        for (&m, r) in &s.rasters {
            if m.is_categorical() {
                continue;
            }
            let a = accs.entry(m).or_insert_with(|| vec![Acc::default(); r.channels()]);
            for (c, acc) in a.iter_mut().enumerate() {
                r.channel(c).iter().for_each(|&v| acc.push(v as f64));
            }
        }
    }
    if !any {
        return Err(Error::config("cannot compute statistics over an empty split"));
    }
    Ok(NormalizationStats {
        per_modality: accs.into_iter().map(|(m, a)| (m, a.iter().map(Acc::finish).collect())).collect(),
    })
}

/// Statistics over the raw (unnormalized) rasters of one split.
pub fn compute_stats(manifest: &DatasetManifest, split: Split) -> Result<NormalizationStats> {
    let ids = manifest.split_ids(split);
    if ids.is_empty() {
        return Err(Error::config(format!("{split:?} split is empty")));
    }
    let samples = ids.iter().map(|id| load_sample(manifest, id, false)).collect::<Result<Vec<_>>>()?;
    compute_stats_from(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Raster;

    fn sample_with(id: &str, value: f32) -> MultiModalSample {
        let mut rasters = BTreeMap::new();
        rasters.insert(Modality::Rgb, Raster::from_fn(3, 4, 4, |c, _, _| if c == 0 { value } else { c as f32 }));
        rasters.insert(Modality::Seg, Raster::zeros(1, 4, 4));
        MultiModalSample { sample_id: id.into(), rasters, label: None }
    }

    #[test]
    fn constant_channel_std_is_floored() {
        let s = compute_stats_from([&sample_with("a", 5.0)]).unwrap();
        let c0 = s.get(Modality::Rgb).unwrap()[0];
        assert_eq!(c0.mean, 5.0);
        assert_eq!(c0.std, 1e-6);
        assert!(s.get(Modality::Seg).is_none());
    }

    #[test]
    fn two_constant_rasters() {
        // {0,...,0} and {2,...,2}: mean 1, population variance ((1)^2 + (1)^2)/2 = 1.
        let s = compute_stats_from([&sample_with("a", 0.0), &sample_with("b", 2.0)]).unwrap();
        let c0 = s.get(Modality::Rgb).unwrap()[0];
        assert_eq!(c0.mean, 1.0);
        assert_eq!(c0.std, 1.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(compute_stats_from(std::iter::empty()).is_err());
    }

    #[test]
    fn mean_raster_normalizes_to_zero() {
        let samples = [sample_with("a", 0.0), sample_with("b", 2.0)];
        let stats = compute_stats_from(&samples).unwrap();
        let mut s = sample_with("c", 1.0);
        stats.normalize(&mut s).unwrap();
        assert!(s.rasters[&Modality::Rgb].channel(0).iter().all(|&v| v == 0.0));
        // SEG untouched.
        assert!(s.rasters[&Modality::Seg].data().iter().all(|&v| v == 0.0));
    }
}
