use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Modality, Raster};
use crate::error::{Error, Result};

/// Sentinel-2 bands at 10 m and 20 m resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B8A,
    B11,
    B12,
}

/// Channel order of a raw 10-band stack (ascending band number).
pub const S2_STACK_ORDER: [Band; 10] =
    [Band::B2, Band::B3, Band::B4, Band::B5, Band::B6, Band::B7, Band::B8, Band::B8A, Band::B11, Band::B12];

impl Band {
    pub fn stack_index(self) -> usize {
        S2_STACK_ORDER.iter().position(|&b| b == self).expect("every band is in the stack")
    }
}

/// Splits a 10-band stack into the RGB, IRED, SIRED and EB groups.
pub fn group_s2_bands(stack: &Raster) -> Result<BTreeMap<Modality, Raster>> {
    if stack.channels() != S2_STACK_ORDER.len() {
        return Err(Error::Schema(format!(
            "Sentinel-2 stack has {} channels, expected 10 ordered {:?}",
            stack.channels(),
            S2_STACK_ORDER
        )));
    }
    Ok(Modality::S2
        .into_iter()
        .map(|m| {
            let idx: Vec<usize> = m.source_bands().iter().map(|b| b.stack_index()).collect();
            (m, stack.select_channels(&idx))
        })
        .collect())
}

/// Reassembles the 10-band stack from its four groups.
pub fn ungroup_s2_bands(groups: &BTreeMap<Modality, Raster>) -> Result<Raster> {
    let first = groups.get(&Modality::Rgb).ok_or_else(|| Error::Schema("missing RGB group".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Raster::zeros(S2_STACK_ORDER.len(), h, w);
    for m in Modality::S2 {
        let r = groups.get(&m).ok_or_else(|| Error::Schema(format!("missing {m} group")))?;
        if r.shape() != (m.channels(), h, w) {
            return Err(Error::Schema(format!("{m} group has shape {:?}", r.shape())));
        }
        for (c, band) in m.source_bands().iter().enumerate() {
            out.channel_mut(band.stack_index()).copy_from_slice(r.channel(c));
        }
    }
    Ok(out)
}
