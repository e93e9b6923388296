//! Feature file layout, little-endian:
//!
//! ```text
//! "M2DT" | u32 version (1) | u32 N | u32 d | N·d × f32, row-major
//! ```
//!
//! Query embeddings use the same layout with `N = 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::ClipFeatureSequence;

pub const FEATURE_MAGIC: [u8; 4] = *b"M2DT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;

pub fn encode_features(seq: &ClipFeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + seq.data().len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.n_clips() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], video_id: &str) -> Result<ClipFeatureSequence> {
    if bytes.len() < FEATURE_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::TruncatedPayload {
            needed: FEATURE_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let needed = n * d * 4;
    if payload.len() < needed {
        return Err(Error::TruncatedPayload {
            needed,
            found: payload.len(),
        });
    }
    if payload.len() > needed {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after feature payload",
            payload.len() - needed
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index });
    }
    ClipFeatureSequence::new(video_id, n, d, data)
}

pub fn write_features(seq: &ClipFeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

/// Loads a feature file; the video id is the file stem.
pub fn load_features(path: &Path) -> Result<ClipFeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_features(&bytes, &id)
}

pub fn write_query_embedding(embedding: &[f32], path: &Path) -> Result<()> {
    let seq = ClipFeatureSequence::new("", 1, embedding.len(), embedding.to_vec())?;
    write_features(&seq, path)
}

pub fn load_query_embedding(path: &Path) -> Result<Vec<f32>> {
    let seq = load_features(path)?;
    if seq.n_clips() != 1 {
        return Err(Error::InvariantViolation(format!(
            "query embedding file {} has {} rows",
            path.display(),
            seq.n_clips()
        )));
    }
    Ok(seq.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_file_is_twenty_bytes() {
        let seq = ClipFeatureSequence::new("v", 1, 1, vec![0.0]).unwrap();
        let bytes = encode_features(&seq);
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"M2DT");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn non_finite_values_are_rejected_before_writing() {
        let err = ClipFeatureSequence::new("v", 1, 2, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn wrong_magic() {
        let seq = ClipFeatureSequence::new("v", 1, 1, vec![2.0]).unwrap();
        let mut bytes = encode_features(&seq);
        bytes[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode_features(&bytes, "v"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_payload_reports_needed_bytes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"M2DT");
        for w in [1u32, 2, 3] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 20]);
        match decode_features(&bytes, "v") {
            Err(Error::TruncatedPayload { needed, found }) => {
                assert_eq!((needed, found), (24, 20));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_rejected_on_load() {
        let seq = ClipFeatureSequence::new("v", 1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_features(&seq);
        bytes[20..24].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_features(&bytes, "v"),
            Err(Error::NonFiniteValue { index: 1 })
        ));
    }
}
