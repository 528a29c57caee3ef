//! FEAT: a little-endian binary feature matrix.
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `FEAT`                       |
//! | 4      | 2    | version (1)                        |
//! | 6      | 2    | flags (bit 0: label block present) |
//! | 8      | 8    | n_rows                             |
//! | 16     | 4    | dim                                |
//! | 20     | 1    | dtype (1 = f32)                    |
//! | 21     | 11   | reserved, zero                     |
//! | 32     | ...  | row-major f32 payload              |
//!
//! An optional block of `n_rows` u32 labels follows the payload. The file
//! must end exactly there.

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::FeatureMatrix;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEAT_VERSION: u16 = 1;
pub const FEAT_HEADER_LEN: usize = 32;
const FLAG_LABELS: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatFile {
    pub features: FeatureMatrix,
    pub labels: Option<Vec<u32>>,
}

impl FeatFile {
    pub fn new(features: FeatureMatrix) -> Self {
        Self { features, labels: None }
    }
}

pub fn encode_feat(file: &FeatFile) -> Result<Vec<u8>> {
    let m = &file.features;
    if let Some(l) = &file.labels {
        if l.len() != m.n_rows() {
            return Err(Error::LengthMismatch { left: l.len(), right: m.n_rows() });
        }
    }
    let dim = u32::try_from(m.dim()).map_err(|_| Error::InvalidConfig("dim exceeds u32".into()))?;
    let label_len = file.labels.as_ref().map_or(0, |l| 4 * l.len());
    let mut out = Vec::with_capacity(FEAT_HEADER_LEN + 4 * m.as_slice().len() + label_len);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    let flags = if file.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(m.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.push(DTYPE_F32);
    out.resize(FEAT_HEADER_LEN, 0);
    for (i, v) in m.as_slice().iter().enumerate() {
        let f = *v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    if let Some(l) = &file.labels {
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn le<const N: usize>(b: &[u8], at: usize) -> [u8; N] {
    b[at..at + N].try_into().expect("range checked by caller")
}

pub fn decode_feat(bytes: &[u8]) -> Result<FeatFile> {
    if bytes.len() < FEAT_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != FEAT_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = u16::from_le_bytes(le(bytes, 4));
    if version != FEAT_VERSION {
        return Err(Error::format(4, "unsupported version"));
    }
    let flags = u16::from_le_bytes(le(bytes, 6));
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::format(6, "unknown flags"));
    }
    let n_rows = u64::from_le_bytes(le(bytes, 8));
    let dim = u32::from_le_bytes(le(bytes, 16));
    if dim == 0 {
        return Err(Error::format(16, "dim must be at least 1"));
    }
    if bytes[20] != DTYPE_F32 {
        return Err(Error::format(20, "unsupported dtype"));
    }
    if let Some(i) = bytes[21..FEAT_HEADER_LEN].iter().position(|b| *b != 0) {
        return Err(Error::format((21 + i) as u64, "reserved bytes must be zero"));
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let too_big = || Error::format(8, "declared size overflows");
    let n_values = n_rows.checked_mul(dim as u64).ok_or_else(too_big)?;
    let payload = n_values.checked_mul(4).ok_or_else(too_big)?;
    let label_bytes = if has_labels { n_rows.checked_mul(4).ok_or_else(too_big)? } else { 0 };
    let expected =
        (FEAT_HEADER_LEN as u64).checked_add(payload).and_then(|v| v.checked_add(label_bytes)).ok_or_else(too_big)?;
    let len = bytes.len() as u64;
    if len < expected {
        return Err(Error::format(len, format!("truncated payload: expected {expected} bytes")));
    }
    if len > expected {
        return Err(Error::format(expected, "trailing bytes after payload"));
    }
    let n = n_values as usize;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = FEAT_HEADER_LEN + 4 * i;
        let v = f32::from_le_bytes(le(bytes, at));
        if !v.is_finite() {
            return Err(Error::format(at as u64, "non-finite value"));
        }
        data.push(v as f64);
    }
    let labels = has_labels.then(|| {
        let base = FEAT_HEADER_LEN + 4 * n;
        (0..n_rows as usize).map(|i| u32::from_le_bytes(le(bytes, base + 4 * i))).collect()
    });
    Ok(FeatFile { features: FeatureMatrix::new(n_rows as usize, dim as usize, data)?, labels })
}

pub fn write_feat(path: &Path, file: &FeatFile) -> Result<()> {
    super::write_atomic(path, &encode_feat(file)?)
}

pub fn read_feat(path: &Path) -> Result<FeatFile> {
    decode_feat(&std::fs::read(path)?)
}
