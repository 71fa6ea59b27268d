//! Raw raster files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..8    magic "EOMM0001"
//! bytes 8..20   u32 C, u32 H, u32 W
//! bytes 20..    C*H*W elements in C order, f32 or u16
//! ```
//!
//! The element type is not stored; readers derive it from the modality kind
//! (u16 for categorical rasters, f32 otherwise).

use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EOMM0001";
const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    F32,
    U16,
}

impl ElementType {
    fn width(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::U16 => 2,
        }
    }
}

/// Fails for U16 when a value is not an integer in `0..=65535`.
pub fn encode_raster(r: &Raster, ty: ElementType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + r.data().len() * ty.width());
    out.extend_from_slice(MAGIC);
    for d in [r.channels(), r.height(), r.width()] {
        let d = u32::try_from(d).map_err(|_| Error::Schema(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match ty {
        ElementType::F32 => r.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        ElementType::U16 => {
            for &v in r.data() {
                if v.fract() != 0.0 || !(0.0..=65535.0).contains(&v) {
                    return Err(Error::Schema(format!("value {v} is not representable as u16")));
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8], ty: ElementType) -> std::result::Result<Raster, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c.checked_mul(h).and_then(|x| x.checked_mul(w)).ok_or("dimension overflow")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * ty.width() {
        return Err(format!("payload is {} bytes, header {c}x{h}x{w} needs {}", payload.len(), n * ty.width()));
    }
    let data = match ty {
        ElementType::F32 => payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        ElementType::U16 => payload.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()) as f32).collect(),
    };
    Raster::from_vec(c, h, w, data).map_err(|e| e.to_string())
}

pub fn write_raster(path: &Path, r: &Raster, ty: ElementType) -> Result<()> {
    let bytes = encode_raster(r, ty)?;
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_raster(path: &Path, ty: ElementType) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_raster(&bytes, ty).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let r = Raster::from_vec(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let b = encode_raster(&r, ElementType::F32).unwrap();
        assert_eq!(&b[..8], b"EOMM0001");
        assert_eq!(&b[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(decode_raster(&b, ElementType::F32).unwrap(), r);
    }

    #[test]
    fn u16_payload() {
        let r = Raster::from_vec(1, 1, 3, vec![0.0, 4.0, 65535.0]).unwrap();
        let b = encode_raster(&r, ElementType::U16).unwrap();
        assert_eq!(b.len(), 20 + 6);
        assert_eq!(&b[22..24], &[4, 0]);
        assert_eq!(decode_raster(&b, ElementType::U16).unwrap(), r);
        let bad = Raster::from_vec(1, 1, 1, vec![1.5]).unwrap();
        assert!(encode_raster(&bad, ElementType::U16).is_err());
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let r = Raster::zeros(2, 2, 2);
        let b = encode_raster(&r, ElementType::F32).unwrap();
        assert!(decode_raster(&b[..b.len() - 1], ElementType::F32).is_err());
        assert!(decode_raster(&b[..10], ElementType::F32).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_raster(&bad, ElementType::F32).unwrap_err().contains("magic"));
    }
}
