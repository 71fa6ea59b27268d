//! Modality schema, on-disk sample format, band grouping, normalization and
//! the synthetic dataset generator.

mod bands;
mod format;
mod manifest;
mod stats;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bands::{group_s2_bands, ungroup_s2_bands, Band, S2_STACK_ORDER};
pub use format::{decode_raster, encode_raster, read_raster, write_raster, ElementType, MAGIC};
pub use manifest::{load_sample, write_sample, DatasetManifest, Split, Task, FORMAT_VERSION};
pub use stats::{compute_stats, compute_stats_from, ChannelStats, NormalizationStats, STD_FLOOR};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

/// One aligned input stream.
///
/// The derived ordering is the canonical modality order used everywhere a
/// sequence of modalities is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "IRED")]
    Ired,
    #[serde(rename = "SIRED")]
    Sired,
    #[serde(rename = "EB")]
    Eb,
    #[serde(rename = "DEPTH")]
    Depth,
    #[serde(rename = "SEG")]
    Seg,
}

impl Modality {
    pub const ALL: [Modality; 6] =
        [Modality::Rgb, Modality::Ired, Modality::Sired, Modality::Eb, Modality::Depth, Modality::Seg];

    /// The four Sentinel-2 band groups.
    pub const S2: [Modality; 4] = [Modality::Rgb, Modality::Ired, Modality::Sired, Modality::Eb];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Ired => "IRED",
            Modality::Sired => "SIRED",
            Modality::Eb => "EB",
            Modality::Depth => "DEPTH",
            Modality::Seg => "SEG",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb | Modality::Ired => 3,
            Modality::Sired | Modality::Eb => 2,
            Modality::Depth | Modality::Seg => 1,
        }
    }

    pub fn kind(self) -> ValueKind {
        match self {
            Modality::Seg => ValueKind::Categorical,
            _ => ValueKind::Continuous,
        }
    }

    pub fn is_categorical(self) -> bool {
        self.kind() == ValueKind::Categorical
    }

    pub fn source_bands(self) -> &'static [Band] {
        match self {
            Modality::Rgb => &[Band::B4, Band::B3, Band::B2],
            Modality::Ired => &[Band::B5, Band::B6, Band::B7],
            Modality::Sired => &[Band::B11, Band::B12],
            Modality::Eb => &[Band::B8, Band::B8A],
            Modality::Depth | Modality::Seg => &[],
        }
    }

    pub fn element_type(self) -> ElementType {
        match self.kind() {
            ValueKind::Continuous => ElementType::F32,
            ValueKind::Categorical => ElementType::U16,
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.bin", self.name())
    }

    /// Parses a comma-separated list such as `rgb,ired,depth` into canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let mut out: Vec<Modality> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::config("empty modality list"));
        }
        Ok(out)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Continuous,
    Categorical,
}

/// Static schema of one modality as recorded in a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: Modality,
    pub channels: usize,
    pub kind: ValueKind,
    pub source_bands: Vec<Band>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl ModalityDescriptor {
    /// `num_classes` is required for SEG and ignored otherwise.
    pub fn new(name: Modality, num_classes: Option<usize>) -> Result<Self> {
        let num_classes = match (name.kind(), num_classes) {
            (ValueKind::Categorical, Some(k)) if k >= 1 => Some(k),
            (ValueKind::Categorical, _) => {
                return Err(Error::Schema(format!("{name} needs a positive class count")));
            }
            (ValueKind::Continuous, _) => None,
        };
        Ok(Self { name, channels: name.channels(), kind: name.kind(), source_bands: name.source_bands().to_vec(), num_classes })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = ModalityDescriptor::new(self.name, self.num_classes)?;
        if *self != expect {
            return Err(Error::Schema(format!("descriptor for {} does not match the fixed schema", self.name)));
        }
        Ok(())
    }
}

/// A `(channels, height, width)` float raster in C order.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Schema(format!(
                "raster buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies the listed channels, in that order, into a new raster.
    pub fn select_channels(&self, channels: &[usize]) -> Raster {
        let mut data = Vec::with_capacity(channels.len() * self.height * self.width);
        for &c in channels {
            data.extend_from_slice(self.channel(c));
        }
        Raster { channels: channels.len(), height: self.height, width: self.width, data }
    }
}

/// Downstream supervision attached to a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    MultiLabel(Vec<bool>),
    /// Per-pixel class indices, `(1, H, W)`.
    Mask(Raster),
}

/// Aligned per-modality rasters for one geolocated patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub rasters: BTreeMap<Modality, Raster>,
    pub label: Option<Label>,
}

impl MultiModalSample {
    pub fn raster(&self, m: Modality) -> Option<&Raster> {
        self.rasters.get(&m)
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.rasters.keys().copied()
    }

    /// Common `(H, W)` of all rasters.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let mut dims = self.rasters.values().map(|r| (r.height(), r.width()));
        let first = dims.next().ok_or_else(|| Error::Schema(format!("sample {} has no rasters", self.sample_id)))?;
        if dims.any(|d| d != first) {
            return Err(Error::Schema(format!("sample {} rasters disagree on spatial size", self.sample_id)));
        }
        Ok(first)
    }

    /// Checks shared geometry, patch divisibility and categorical ranges.
    pub fn validate(&self, patch: usize, seg_classes: Option<usize>) -> Result<()> {
        let (h, w) = self.spatial()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Schema(format!("sample {}: {h}x{w} not divisible by patch {patch}", self.sample_id)));
        }
        for (&m, r) in &self.rasters {
            if r.channels() != m.channels() {
                return Err(Error::Load {
                    sample: self.sample_id.clone(),
                    modality: m.to_string(),
                    reason: format!("{} channels, expected {}", r.channels(), m.channels()),
                });
            }
            if m.is_categorical() {
                let k = seg_classes.ok_or_else(|| Error::Schema("SEG present without a class count".into()))?;
                if let Some(bad) = r.data().iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v >= k as f32) {
                    return Err(Error::Load {
                        sample: self.sample_id.clone(),
                        modality: m.to_string(),
                        reason: format!("class value {bad} outside [0, {k})"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_invariants() {
        for m in Modality::ALL {
            let d = ModalityDescriptor::new(m, Some(5)).unwrap();
            assert_eq!(d.channels, m.channels());
            assert_eq!(d.kind == ValueKind::Categorical, m == Modality::Seg);
            d.validate().unwrap();
        }
        let expected = [(Modality::Rgb, 3), (Modality::Ired, 3), (Modality::Sired, 2), (Modality::Eb, 2), (Modality::Depth, 1), (Modality::Seg, 1)];
        for (m, c) in expected {
            assert_eq!(m.channels(), c);
        }
        assert_eq!(Modality::Rgb.source_bands(), &[Band::B4, Band::B3, Band::B2]);
        assert_eq!(Modality::Eb.source_bands(), &[Band::B8, Band::B8A]);
        assert!(ModalityDescriptor::new(Modality::Seg, None).is_err());
    }

    #[test]
    fn modality_list_parsing_is_canonical() {
        let l = Modality::parse_list("depth, rgb,IRED,rgb").unwrap();
        assert_eq!(l, vec![Modality::Rgb, Modality::Ired, Modality::Depth]);
        assert!(Modality::parse_list("rgb,nir").is_err());
        assert!(Modality::parse_list("").is_err());
    }

    #[test]
    fn seg_range_enforced() {
        let mut rasters = BTreeMap::new();
        rasters.insert(Modality::Seg, Raster::from_vec(1, 2, 2, vec![0.0, 1.0, 4.0, 5.0]).unwrap());
        let s = MultiModalSample { sample_id: "x".into(), rasters, label: None };
        let err = s.validate(1, Some(5)).unwrap_err();
        assert!(err.to_string().contains("SEG"));
        assert!(s.validate(1, Some(6)).is_ok());
        assert!(s.validate(3, Some(6)).is_err());
    }
}
