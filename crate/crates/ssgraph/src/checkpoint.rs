//! Parameter checkpoints.
//!
//! Layout: magic `SSGCKPT1`, little-endian `u64` tensor count, then per
//! tensor in name order: `u64` name length, UTF-8 name, `u8` kind, `u64` rows,
//! `u64` cols and the `f64` values row-major. The run configuration is
//! written next to it as `config.json`.

use std::fs;
use std::path::Path;

use ssgraph_core::params::ParamKind;
use ssgraph_core::{Matrix, ParamSet};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSGCKPT1";

const KINDS: [ParamKind; 7] = [
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Attention,
    ParamKind::NormScale,
    ParamKind::NormShift,
    ParamKind::Slope,
    ParamKind::Buffer,
];

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(KINDS.iter().position(|&k| k == p.kind).unwrap() as u8);
        buf.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Option<ParamSet> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return None;
    }
    let count = r.u64()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(len)?).ok()?.to_owned();
        let kind = *KINDS.get(r.take(1)?[0] as usize)?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let data = r.take(rows.checked_mul(cols)?.checked_mul(8)?)?;
        let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(name, Matrix::from_vec(rows, cols, values).ok()?, kind);
    }
    (r.at == bytes.len()).then_some(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: "not a valid SSGCKPT1 checkpoint".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_kinds() {
        let mut p = ParamSet::new();
        p.insert("enc.0.w", Matrix::from_rows(&[&[1.0, -0.5], &[f64::MIN_POSITIVE, 3.0]]), ParamKind::Weight);
        p.insert("enc.0.bn.mean", Matrix::zeros(1, 2), ParamKind::Buffer);
        p.insert("enc.0.act.slope", Matrix::scalar(0.25), ParamKind::Slope);
        let bytes = encode(&p);
        assert_eq!(decode(&bytes).unwrap(), p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_none());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_none());
        assert!(decode(b"SSGFEAT1").is_none());
    }
}
