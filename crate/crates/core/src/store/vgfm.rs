//! `.vgfm` feature-map files.
//!
//! Layout, all little-endian:
//!
//! | offset | type  | field                          |
//! |--------|-------|--------------------------------|
//! | 0      | [u8;4]| magic `VGFM`                   |
//! | 4      | u32   | version (= 1)                  |
//! | 8      | u32   | height                         |
//! | 12     | u32   | width                          |
//! | 16     | u32   | channels                       |
//! | 20     | f32   | stride (pixels per cell)       |
//! | 24     | f32[] | payload, row-major `(h, w, c)` |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"VGFM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Bytes occupied by a `height × width × channels` map on disk.
pub fn file_size(height: usize, width: usize, channels: usize) -> u64 {
    HEADER_LEN as u64 + 4 * (height as u64) * (width as u64) * (channels as u64)
}

pub fn encode<T: Scalar>(map: &FeatureMap<T>) -> Result<Vec<u8>> {
    let dims = [map.height(), map.width(), map.channels()];
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format {
            offset: 8,
            msg: format!("dimension {d} does not fit in u32"),
        })?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    let stride = map.stride().to_f32().unwrap_or(f32::NAN);
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::Format {
            offset: 20,
            msg: "stride not representable as positive f32".into(),
        });
    }
    header.extend_from_slice(&stride.to_le_bytes());
    let mut out = header;
    out.reserve(map.data().len() * 4);
    for v in map.data() {
        let f = v.to_f32().unwrap_or(f32::NAN);
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("value {v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<FeatureMap<T>> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"VGFM\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let (h, w, c) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64);
    if h == 0 || w == 0 || c == 0 {
        return Err(fail(8, format!("zero dimension in {h}x{w}x{c}")));
    }
    let payload =
        h.checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .and_then(|v| v.checked_mul(4))
            .filter(|v| *v <= usize::MAX as u64 - HEADER_LEN as u64)
            .ok_or_else(|| fail(8, format!("dimensions {h}x{w}x{c} overflow")))? as usize;
    let stride = f32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    if !(stride.is_finite() && stride > 0.0) {
        return Err(fail(20, format!("invalid stride {stride}")));
    }
    let expected = HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated payload: {h}x{w}x{c} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(
            expected,
            format!(
                "{} trailing bytes after declared payload",
                bytes.len() - expected
            ),
        ));
    }
    let mut data = Vec::with_capacity(payload / 4);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(T::from_f32(v).expect("f32 representable"));
    }
    let stride = T::from_f32(stride).expect("f32 representable");
    FeatureMap::new(h as usize, w as usize, c as usize, stride, data)
}

pub fn write_feature_map<T: Scalar>(path: impl AsRef<Path>, map: &FeatureMap<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(map)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_map<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
