//! Portable binary tensor files.
//!
//! Layout (little-endian): a 16-byte header `"PRSF"`, `u32 rows`, `u32 cols`,
//! `u32 flags`, then `rows * cols` values in row-major order. Flags `0` means
//! float32 payload (feature files); flag bit 0 set means float64 payload, used
//! by checkpoints so that resumed training is bit-exact.
//!
//! A keyed archive is `"PRSA"`, `u32 count`, then per entry `u32 name_len`,
//! the UTF-8 name and one tensor block as above.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PRSF";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"PRSA";
pub const FLAG_F64: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

fn encode_header(buf: &mut Vec<u8>, rows: usize, cols: usize, precision: Precision) {
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    let flags = match precision {
        Precision::F32 => 0,
        Precision::F64 => FLAG_F64,
    };
    buf.extend_from_slice(&flags.to_le_bytes());
}

pub fn encode_f32(buf: &mut Vec<u8>, m: &Array2<f32>) {
    encode_header(buf, m.nrows(), m.ncols(), Precision::F32);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_f64(buf: &mut Vec<u8>, m: &Array2<f64>) {
    encode_header(buf, m.nrows(), m.ncols(), Precision::F64);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor block from the front of `bytes`, returning the matrix
/// (widened to f64) and the number of bytes consumed.
fn decode_block(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, Precision, usize)> {
    if bytes.is_empty() {
        return Err(Error::format(path, "empty tensor data"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic, expected PRSF"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let rows = word(4) as usize;
    let cols = word(8) as usize;
    let flags = word(12);
    let precision = match flags {
        0 => Precision::F32,
        FLAG_F64 => Precision::F64,
        other => return Err(Error::format(path, format!("unknown flags {other:#x}"))),
    };
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(path, "shape overflow"))?;
    let need = HEADER_LEN + n * width;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: header declares {rows}x{cols} but only {} value bytes present",
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..need];
    let values: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value in payload"));
    }
    let m = Array2::from_shape_vec((rows, cols), values).expect("length checked above");
    Ok((m, precision, need))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_feature_file(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.len() * 4);
    encode_f32(&mut buf, m);
    write_all(path, &buf)
}

/// Reads a float32 feature file. Trailing bytes after the payload are rejected.
pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let bytes = read_all(path)?;
    let (m, precision, used) = decode_block(&bytes, path)?;
    if precision != Precision::F32 {
        return Err(Error::format(
            path,
            "feature files must hold float32 values",
        ));
    }
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(m.mapv(|v| v as f32))
}

pub fn write_archive<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Array2<f64>)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode_f64(&mut buf, m);
    }
    write_all(path, &buf)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let bytes = read_all(path)?;
    if bytes.len() < 8 || &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(Error::format(path, "bad archive header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < pos + 4 {
            return Err(Error::format(path, "truncated archive entry"));
        }
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + name_len)
            .ok_or_else(|| Error::format(path, "truncated entry name"))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
        pos += name_len;
        let (m, _, used) = decode_block(&bytes[pos..], path)?;
        pos += used;
        out.push((name, m));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after archive"));
    }
    Ok(out)
}

pub(crate) fn io_err(path: &Path, e: io::Error) -> Error {
    Error::io(path, e)
}
