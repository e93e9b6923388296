//! Parameter checkpoint format (all integers little-endian):
//!
//! ```text
//! "M2DP" | u32 version | u32 count |
//!   count × ( u16 name_len | name (UTF-8) | u8 rank | rank × u32 dim | f32 payload )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamSet, Tensor};

pub const PARAM_MAGIC: [u8; 4] = *b"M2DP";
pub const PARAM_VERSION: u32 = 1;

pub fn write_param_set(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&PARAM_MAGIC);
    buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::InvariantViolation(format!("parameter name too long: {name}")))?;
        if !t.is_finite() {
            return Err(Error::InvariantViolation(format!("non-finite values in {name}")));
        }
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.shape().len() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                needed: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_param_set(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != PARAM_MAGIC {
        return Err(Error::BadMagic {
            expected: PARAM_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != PARAM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::InvariantViolation(format!("parameter name: {e}")))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_vec(&[1], vec![0.5]).unwrap()).unwrap();
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = sample();
        write_param_set(&p, &path).unwrap();
        let q = read_param_set(&path).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(q.iter().map(|(n, _)| n).collect::<Vec<_>>(), vec!["a.w", "b"]);
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_param_set(&sample(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_param_set(&path), Err(Error::BadMagic { .. })));

        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_param_set(&path), Err(Error::TruncatedPayload { .. })));
    }
}
