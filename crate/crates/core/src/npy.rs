//! Minimal NPY reader/writer: versions 1.0 and 2.0, little-endian,
//! C-order, `float32` or `float16` (widened to `f32` on load).

use std::io::Write;

use half::f16;
use thiserror::Error;

use crate::quant::FloatTensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an NPY file (bad magic)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    Version(u8, u8),
    #[error("truncated NPY file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed NPY header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?} (expected '<f4' or '<f2')")]
    Dtype(String),
    #[error("Fortran-order arrays are not supported")]
    FortranOrder,
    #[error("expected a 2-D array, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("array contains NaN or infinite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Value of `'key': <value>` in the header dict, up to the next top-level
/// comma or closing brace.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str, NpyError> {
    let pat = format!("'{key}'");
    let start = header
        .find(&pat)
        .ok_or_else(|| NpyError::Header(format!("missing key {key}")))?
        + pat.len();
    let rest = header[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| NpyError::Header(format!("missing ':' after {key}")))?
        .trim_start();
    let mut depth = 0i32;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' | '}' if depth == 0 => return Ok(rest[..i].trim()),
            _ => {}
        }
    }
    Err(NpyError::Header(format!("unterminated value for {key}")))
}

fn parse_shape(s: &str) -> Result<Vec<usize>, NpyError> {
    let inner = s
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| NpyError::Header(format!("bad shape {s}")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| NpyError::Header(format!("bad dimension {p}"))))
        .collect()
}

/// Decodes an NPY byte buffer into a 2-D tensor.
pub fn read_npy(bytes: &[u8]) -> Result<FloatTensor, NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (hlen, hstart) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(NpyError::Truncated {
                    expected: 12,
                    found: bytes.len(),
                });
            }
            (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
        }
        _ => return Err(NpyError::Version(major, minor)),
    };
    if bytes.len() < hstart + hlen {
        return Err(NpyError::Truncated {
            expected: hstart + hlen,
            found: bytes.len(),
        });
    }
    let header = std::str::from_utf8(&bytes[hstart..hstart + hlen])
        .map_err(|_| NpyError::Header("header is not UTF-8".into()))?;
    let descr = dict_value(header, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let width = match descr {
        "<f4" => 4,
        "<f2" => 2,
        other => return Err(NpyError::Dtype(other.to_string())),
    };
    if dict_value(header, "fortran_order")? != "False" {
        return Err(NpyError::FortranOrder);
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;
    if shape.len() != 2 {
        return Err(NpyError::Rank(shape));
    }
    let n = shape[0] * shape[1];
    let body = &bytes[hstart + hlen..];
    if body.len() < n * width {
        return Err(NpyError::Truncated {
            expected: hstart + hlen + n * width,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = if width == 4 {
        body[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        body[..n * 2]
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
            .collect()
    };
    FloatTensor::new(shape[0], shape[1], data).map_err(|_| NpyError::NonFinite)
}

pub fn read_npy_file(path: &std::path::Path) -> Result<FloatTensor, NpyError> {
    read_npy(&std::fs::read(path)?)
}

/// Encodes a tensor as an NPY 1.0 `<f4` array.
pub fn write_npy<W: Write>(mut w: W, t: &FloatTensor) -> Result<(), NpyError> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        t.rows(),
        t.cols()
    );
    // magic + version + length + header + newline, padded to 64 bytes
    let total = (10 + header.len() + 1).next_multiple_of(64);
    header.push_str(&" ".repeat(total - 10 - header.len() - 1));
    header.push('\n');
    w.write_all(MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_npy_file(path: &std::path::Path, t: &FloatTensor) -> Result<(), NpyError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_npy(f, t)
}
