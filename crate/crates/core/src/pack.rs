//! Packed quantized-tensor file (`.bmod`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! header   "BMOD" | version u16 = 1 | dtype id u16 | K u32 | D u32 | G u32
//! channel  channel_scale f32, then ceil(D/G) groups
//! group    scale_q u8 | sv u8 | codes, bits_per_code bits each, LSB-first,
//!          padded to a byte boundary
//! ```
//!
//! `sv` holds the special-value index for BitMoD types (low 2 bits) and the
//! zero-point for asymmetric INT types; it is 0 otherwise. Symmetric INT
//! codes are stored in two's complement.

use std::sync::Arc;

use thiserror::Error;

use crate::dtype::{effective_grid, DataType, DataTypeSpec, Family, GroupingConfig};
use crate::quant::{ChannelQuantization, QuantizedGroup, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"BMOD";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackError {
    #[error("truncated file: need {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u16 },
    #[error("unknown dtype id {id} at offset {offset}")]
    UnknownDtype { offset: usize, id: u16 },
    #[error("invalid header field at offset {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("invalid group at offset {offset}: {reason}")]
    BadGroup { offset: usize, reason: String },
    #[error("{count} trailing byte(s) at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("cannot pack: {0}")]
    Unpackable(String),
}

fn code_bytes(dtype: DataType, group_size: usize) -> usize {
    (group_size * dtype.bits() as usize).div_ceil(8)
}

/// Exact size in bytes of a packed file.
pub fn packed_size(dtype: DataType, out_channels: usize, channel_size: usize, group_size: usize) -> usize {
    let groups = channel_size.div_ceil(group_size);
    HEADER_BYTES + out_channels * (4 + groups * (2 + code_bytes(dtype, group_size)))
}

fn push_bits(out: &mut Vec<u8>, codes: &[i32], bits: u32) {
    let mask = (1u32 << bits) - 1;
    let mut acc = 0u64;
    let mut filled = 0u32;
    for &c in codes {
        acc |= ((c as u32 & mask) as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn pull_bits(bytes: &[u8], count: usize, bits: u32, signed: bool) -> Vec<i32> {
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while filled < bits {
            acc |= (*it.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        let raw = (acc & mask) as u32;
        acc >>= bits;
        filled -= bits;
        let v = if signed && raw >> (bits - 1) == 1 {
            raw as i32 - (1 << bits)
        } else {
            raw as i32
        };
        out.push(v);
    }
    out
}

/// Serializes a quantized tensor. Only the default special values of a
/// data type can be stored, since the file records just the dtype id.
pub fn pack(t: &QuantizedTensor) -> Result<Vec<u8>, PackError> {
    let dtype = t.spec.dtype;
    if *t.spec != DataTypeSpec::new(dtype) {
        return Err(PackError::Unpackable(
            "custom special values are not representable".into(),
        ));
    }
    let g = t.grouping;
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| PackError::Unpackable(format!("{what} {v} exceeds u32")));
    let mut out = Vec::with_capacity(packed_size(dtype, g.out_channels, g.channel_size, g.group_size));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.id().to_le_bytes());
    out.extend_from_slice(&to_u32(g.out_channels, "K")?.to_le_bytes());
    out.extend_from_slice(&to_u32(g.channel_size, "D")?.to_le_bytes());
    out.extend_from_slice(&to_u32(g.group_size, "G")?.to_le_bytes());
    if t.channels.len() != g.out_channels {
        return Err(PackError::Unpackable("channel count does not match grouping".into()));
    }
    for ch in &t.channels {
        if ch.group_size != g.group_size || ch.groups.len() != g.groups_per_channel() {
            return Err(PackError::Unpackable("channel layout does not match grouping".into()));
        }
        out.extend_from_slice(&ch.channel_scale.to_le_bytes());
        for grp in &ch.groups {
            let sv = match dtype.family() {
                Family::IntAsym => grp.zero_point.unwrap_or(0),
                Family::FpBitMod => grp.sv_index as i32,
                _ => 0,
            };
            let sv = u8::try_from(sv).map_err(|_| PackError::Unpackable(format!("metadata byte {sv} out of range")))?;
            if grp.scale_q < 0 {
                return Err(PackError::Unpackable(format!("negative scale {}", grp.scale_q)));
            }
            out.push(grp.scale_q as u8);
            out.push(sv);
            push_bits(&mut out, &grp.codes, dtype.bits());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(PackError::Truncated {
                offset: self.bytes.len(),
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PackError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a packed file back into a quantized tensor.
pub fn unpack(bytes: &[u8]) -> Result<QuantizedTensor, PackError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(PackError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(PackError::UnsupportedVersion { offset: 4, version });
    }
    let id = r.u16()?;
    let dtype = DataType::from_id(id).ok_or(PackError::UnknownDtype { offset: 6, id })?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let g = r.u32()? as usize;
    for (v, offset, name) in [(k, 8, "K"), (d, 12, "D"), (g, 16, "G")] {
        if v == 0 {
            return Err(PackError::BadHeader {
                offset,
                reason: format!("{name} must be positive"),
            });
        }
    }
    let spec = Arc::new(DataTypeSpec::new(dtype));
    let grouping = GroupingConfig::new(g, d, k);
    let expected = packed_size(dtype, k, d, g);
    if bytes.len() < expected {
        return Err(PackError::Truncated {
            offset: bytes.len(),
            needed: expected - bytes.len(),
        });
    }
    let bits = dtype.bits();
    let family = dtype.family();
    let grids: Vec<usize> = (0..spec.sv_choices() as u8)
        .map(|i| effective_grid(&spec, i).map(|v| v.len()).unwrap_or(0))
        .collect();
    let mut channels = Vec::with_capacity(k);
    for _ in 0..k {
        let cs_off = r.pos;
        let channel_scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if !channel_scale.is_finite() || channel_scale < 0.0 {
            return Err(PackError::BadGroup {
                offset: cs_off,
                reason: format!("channel scale {channel_scale} is not a finite nonnegative value"),
            });
        }
        let mut groups = Vec::with_capacity(grouping.groups_per_channel());
        for _ in 0..grouping.groups_per_channel() {
            let off = r.pos;
            let scale = r.u8()?;
            if scale > 127 {
                return Err(PackError::BadGroup {
                    offset: off,
                    reason: format!("scale {scale} exceeds 127"),
                });
            }
            let meta = r.u8()?;
            let codes = pull_bits(r.take(code_bytes(dtype, g))?, g, bits, family == Family::IntSym);
            let (sv_index, zero_point) = match family {
                Family::IntAsym => {
                    if meta as u32 >= 1 << bits {
                        return Err(PackError::BadGroup {
                            offset: off + 1,
                            reason: format!("zero-point {meta} out of range"),
                        });
                    }
                    (0, Some(meta as i32))
                }
                Family::FpBitMod => (meta & 3, None),
                _ => (0, None),
            };
            if matches!(family, Family::FpBasic | Family::FpBitMod) {
                let levels = grids[sv_index as usize];
                if let Some(bad) = codes.iter().find(|&&c| c as usize >= levels) {
                    return Err(PackError::BadGroup {
                        offset: off + 2,
                        reason: format!("code {bad} has no grid level"),
                    });
                }
            }
            groups.push(QuantizedGroup {
                codes,
                sv_index,
                scale_q: scale as i8,
                zero_point,
            });
        }
        channels.push(ChannelQuantization {
            spec: Arc::clone(&spec),
            group_size: g,
            channel_size: d,
            groups,
            channel_scale,
        });
    }
    if r.pos != bytes.len() {
        return Err(PackError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(QuantizedTensor {
        spec,
        grouping,
        channels,
    })
}
