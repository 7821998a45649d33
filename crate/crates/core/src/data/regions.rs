//! `KRFF` region-feature files.
//!
//! Layout (little-endian): magic `KRFF`, `u32` version, `u32` region count N,
//! `u32` appearance width A, `N·A` f32 appearance values, `N·4` f32 boxes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::RegionFeatureSet;

pub const MAGIC: &[u8; 4] = b"KRFF";
pub const VERSION: u32 = 1;

pub fn encode_regions(set: &RegionFeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * (set.appearance.len() + set.bbox.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.appearance_dim as u32).to_le_bytes());
    for v in set.appearance.iter().chain(&set.bbox) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a region file held in memory; `path` only labels errors.
pub fn decode_regions(bytes: &[u8], path: &Path, expected_dim: Option<usize>) -> Result<RegionFeatureSet> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let n = word(8) as usize;
    let dim = word(12) as usize;
    if let Some(e) = expected_dim {
        if dim != e {
            return Err(fail(format!("appearance width {dim}, expected {e}")));
        }
    }
    let floats = n
        .checked_mul(dim + 4)
        .ok_or_else(|| fail("region count overflows".into()))?;
    let body = &bytes[16..];
    if body.len() != floats * 4 {
        return Err(fail(format!(
            "expected {} payload bytes for {n} regions of width {dim}, found {}",
            floats * 4,
            body.len()
        )));
    }
    let mut vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    let appearance: Vec<f32> = vals.by_ref().take(n * dim).collect();
    let bbox: Vec<f32> = vals.collect();
    RegionFeatureSet::new(dim.max(1), appearance, bbox).map_err(|e| fail(e.to_string()))
}

pub fn write_region_file(path: &Path, set: &RegionFeatureSet) -> Result<()> {
    std::fs::write(path, encode_regions(set))?;
    Ok(())
}

pub fn read_region_file(path: &Path, expected_dim: Option<usize>) -> Result<RegionFeatureSet> {
    let bytes = crate::error::read_file(path)?;
    decode_regions(&bytes, path, expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RegionFeatureSet {
        RegionFeatureSet::new(
            3,
            vec![0.5, -1.25, 3.0e-7, 7.0, 8.0, -9.5],
            vec![0.0, 0.1, 0.5, 0.9, 0.2, 0.2, 0.3, 0.4],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let s = sample();
        let bytes = encode_regions(&s);
        let back = decode_regions(&bytes, Path::new("x"), Some(3)).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_regions(&back), bytes);
    }

    #[test]
    fn empty_file_parses() {
        let s = RegionFeatureSet::new(2048, vec![], vec![]).unwrap();
        let back = decode_regions(&encode_regions(&s), Path::new("x"), Some(2048)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.appearance_dim, 2048);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mut bytes = encode_regions(&sample());
        assert!(decode_regions(&bytes, Path::new("x"), Some(4)).is_err());
        assert!(decode_regions(&bytes[..bytes.len() - 1], Path::new("x"), None).is_err());
        bytes[0] = b'X';
        let err = decode_regions(&bytes, Path::new("x"), None).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
