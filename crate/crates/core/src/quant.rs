//! Quantization and dequantization math.
//!
//! Covers integer symmetric/asymmetric quantization, nearest-level
//! quantization onto an arbitrary grid, the per-group special-value search
//! used by the BitMoD types, and second-level INT8 quantization of the
//! per-group scales.
//!
//! Rounding of codes, zero-points and scales is round-half-away-from-zero.
//! Nearest-level ties go to the smaller magnitude, then to the negative level.

use std::sync::Arc;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dtype::{effective_grid, grid_absmax, DataTypeSpec, DtypeError, Family, GridValue, GroupingConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} outside [2, 8]")]
    InvalidBits(u32),
    #[error("empty group")]
    EmptyGroup,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("tensor shape {rows}x{cols} does not match {len} values")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("group size must be positive")]
    ZeroGroupSize,
    #[error("{0} is not a BitMoD type")]
    NotBitMod(&'static str),
    #[error(transparent)]
    Dtype(#[from] DtypeError),
}

/// A `K x D` row-major tensor of finite values, one output channel per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, QuantError> {
        if rows * cols != data.len() {
            return Err(QuantError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(QuantError::NonFinite { index, value });
        }
        Ok(FloatTensor { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCodes {
    pub codes: Vec<i32>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricCodes {
    pub codes: Vec<i32>,
    pub delta: f64,
    pub zero_point: i32,
}

/// Grid indices plus the (unquantized) scale of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCodes {
    pub codes: Vec<i32>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveResult {
    pub codes: Vec<i32>,
    pub sv_index: u8,
    pub special_value: GridValue,
    pub delta: f64,
    pub mse: f64,
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

fn abs_max(group: &[f32]) -> f64 {
    group.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()))
}

pub fn quantize_symmetric(group: &[f32], bits: u32) -> Result<SymmetricCodes, QuantError> {
    check_bits(bits)?;
    if group.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let max = abs_max(group);
    if max == 0.0 {
        return Ok(SymmetricCodes {
            codes: vec![0; group.len()],
            delta: 0.0,
        });
    }
    let delta = max / qmax;
    let codes = group
        .iter()
        .map(|&w| ((w as f64) / delta).round().clamp(-qmax, qmax) as i32)
        .collect();
    Ok(SymmetricCodes { codes, delta })
}

/// Min/max asymmetric quantization. The zero-point is clamped into the code
/// range, so a group that does not straddle zero saturates at one end.
pub fn quantize_asymmetric(group: &[f32], bits: u32) -> Result<AsymmetricCodes, QuantError> {
    check_bits(bits)?;
    if group.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    let qmax = ((1i32 << bits) - 1) as f64;
    let (lo, hi) = group.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
        (lo.min(w as f64), hi.max(w as f64))
    });
    if hi == lo {
        return Ok(AsymmetricCodes {
            codes: vec![0; group.len()],
            delta: 0.0,
            zero_point: 0,
        });
    }
    let delta = (hi - lo) / qmax;
    let z = (-lo / delta).round().clamp(0.0, qmax);
    let codes = group
        .iter()
        .map(|&w| ((w as f64 / delta).round() + z).clamp(0.0, qmax) as i32)
        .collect();
    Ok(AsymmetricCodes {
        codes,
        delta,
        zero_point: z as i32,
    })
}

/// Index of the grid level nearest to `x`. `grid` must be strictly sorted.
pub fn nearest_level(grid: &[GridValue], x: f64) -> usize {
    let hi = grid.partition_point(|g| g.to_f64() < x);
    if hi == 0 {
        return 0;
    }
    if hi == grid.len() {
        return grid.len() - 1;
    }
    let (a, b) = (grid[hi - 1].to_f64(), grid[hi].to_f64());
    let (da, db) = (x - a, b - x);
    if da < db {
        hi - 1
    } else if db < da {
        hi
    } else if a.abs() <= b.abs() {
        // |a| == |b| only when a == -b; the lower index is the negative one.
        hi - 1
    } else {
        hi
    }
}

/// Quantizes a group onto `grid`: the scale maps the group's absolute
/// maximum onto the grid's absolute maximum.
pub fn nonlinear_quantize(group: &[f32], grid: &[GridValue]) -> Result<GridCodes, QuantError> {
    let absmax = grid_absmax(grid)?.to_f64();
    let max = abs_max(group);
    if max == 0.0 || absmax == 0.0 {
        let zero = nearest_level(grid, 0.0) as i32;
        return Ok(GridCodes {
            codes: vec![zero; group.len()],
            delta: 0.0,
        });
    }
    let delta = max / absmax;
    let codes = group
        .iter()
        .map(|&w| nearest_level(grid, w as f64 / delta) as i32)
        .collect();
    Ok(GridCodes { codes, delta })
}

fn grid_mse(group: &[f32], grid: &[GridValue], q: &GridCodes) -> f64 {
    let sum: f64 = group
        .iter()
        .zip(&q.codes)
        .map(|(&w, &c)| {
            let e = w as f64 - grid[c as usize].to_f64() * q.delta;
            e * e
        })
        .sum();
    sum / group.len().max(1) as f64
}

/// Per-group special-value search: quantize with every candidate grid and
/// keep the one with the lowest MSE. Ties go to the lowest `sv_index`.
pub fn adaptive_quant(group: &[f32], spec: &DataTypeSpec) -> Result<AdaptiveResult, QuantError> {
    if spec.dtype.family() != Family::FpBitMod || spec.special_values().is_empty() {
        return Err(QuantError::NotBitMod(spec.name()));
    }
    let mut best: Option<AdaptiveResult> = None;
    for (i, &sv) in spec.special_values().iter().enumerate() {
        let grid = effective_grid(spec, i as u8)?;
        let q = nonlinear_quantize(group, &grid)?;
        let mse = grid_mse(group, &grid, &q);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(AdaptiveResult {
                codes: q.codes,
                sv_index: i as u8,
                special_value: sv,
                delta: q.delta,
                mse,
            });
        }
    }
    Ok(best.expect("at least one special value"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleQuantization {
    pub scale_q: Vec<i8>,
    pub channel_scale: f64,
}

impl ScaleQuantization {
    pub fn reconstruct(&self, g: usize) -> f64 {
        self.scale_q[g] as f64 * self.channel_scale
    }
}

/// Second-level symmetric INT8 quantization of one channel's group scales.
pub fn quantize_scales(deltas: &[f64]) -> ScaleQuantization {
    let max = deltas.iter().fold(0.0f64, |m, &d| m.max(d));
    if max <= 0.0 {
        return ScaleQuantization {
            scale_q: vec![0; deltas.len()],
            channel_scale: 0.0,
        };
    }
    let channel_scale = max / 127.0;
    let scale_q = deltas
        .iter()
        .map(|&d| (d / channel_scale).round().clamp(0.0, 127.0) as i8)
        .collect();
    ScaleQuantization { scale_q, channel_scale }
}

/// One quantized group: `G` codes, its special-value index (BitMoD types),
/// its INT8 scale and its zero-point (asymmetric INT types).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedGroup {
    pub codes: Vec<i32>,
    pub sv_index: u8,
    pub scale_q: i8,
    pub zero_point: Option<i32>,
}

/// A quantized output channel. `channel_scale` is kept at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuantization {
    pub spec: Arc<DataTypeSpec>,
    pub group_size: usize,
    pub channel_size: usize,
    pub groups: Vec<QuantizedGroup>,
    pub channel_scale: f32,
}

/// First-level result for one group, before scale quantization.
#[derive(Debug, Clone, PartialEq)]
struct GroupCodes {
    codes: Vec<i32>,
    sv_index: u8,
    delta: f64,
    zero_point: Option<i32>,
}

fn quantize_group(group: &[f32], spec: &DataTypeSpec) -> Result<GroupCodes, QuantError> {
    let bits = spec.bits_per_code();
    Ok(match spec.dtype.family() {
        Family::IntSym => {
            let q = quantize_symmetric(group, bits)?;
            GroupCodes {
                codes: q.codes,
                sv_index: 0,
                delta: q.delta,
                zero_point: None,
            }
        }
        Family::IntAsym => {
            let q = quantize_asymmetric(group, bits)?;
            GroupCodes {
                codes: q.codes,
                sv_index: 0,
                delta: q.delta,
                zero_point: Some(q.zero_point),
            }
        }
        Family::FpBasic => {
            let q = nonlinear_quantize(group, spec.basic_values())?;
            GroupCodes {
                codes: q.codes,
                sv_index: 0,
                delta: q.delta,
                zero_point: None,
            }
        }
        Family::FpBitMod => {
            let r = adaptive_quant(group, spec)?;
            GroupCodes {
                codes: r.codes,
                sv_index: r.sv_index,
                delta: r.delta,
                zero_point: None,
            }
        }
    })
}

/// Quantizes one channel group by group. A trailing partial group is
/// quantized on its real lanes only; padded lanes carry code 0.
pub fn quantize_channel(
    channel: &[f32],
    spec: &Arc<DataTypeSpec>,
    group_size: usize,
) -> Result<ChannelQuantization, QuantError> {
    if group_size == 0 {
        return Err(QuantError::ZeroGroupSize);
    }
    if channel.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    let first: Vec<GroupCodes> = channel
        .chunks(group_size)
        .map(|g| quantize_group(g, spec))
        .collect::<Result<_, _>>()?;
    let deltas: Vec<f64> = first.iter().map(|g| g.delta).collect();
    let scales = quantize_scales(&deltas);
    let groups = first
        .into_iter()
        .zip(&scales.scale_q)
        .map(|(mut g, &scale_q)| {
            g.codes.resize(group_size, 0);
            QuantizedGroup {
                codes: g.codes,
                sv_index: g.sv_index,
                scale_q,
                zero_point: g.zero_point,
            }
        })
        .collect();
    Ok(ChannelQuantization {
        spec: Arc::clone(spec),
        group_size,
        channel_size: channel.len(),
        groups,
        channel_scale: scales.channel_scale as f32,
    })
}

/// Real value a code stands for, before scaling.
pub fn code_level(spec: &DataTypeSpec, group: &QuantizedGroup, code: i32) -> Result<f64, QuantError> {
    Ok(match spec.dtype.family() {
        Family::IntSym => code as f64,
        Family::IntAsym => (code - group.zero_point.unwrap_or(0)) as f64,
        Family::FpBasic | Family::FpBitMod => {
            let grid = effective_grid(spec, group.sv_index)?;
            grid.get(code as usize)
                .map(|g| g.to_f64())
                .ok_or(DtypeError::EmptyGrid)?
        }
    })
}

pub fn dequantize_channel(cq: &ChannelQuantization) -> Result<Vec<f32>, QuantError> {
    let mut out = Vec::with_capacity(cq.channel_size);
    let cs = cq.channel_scale as f64;
    for g in &cq.groups {
        let scale = g.scale_q as f64 * cs;
        let grid = match cq.spec.dtype.family() {
            Family::FpBasic | Family::FpBitMod => Some(effective_grid(&cq.spec, g.sv_index)?),
            _ => None,
        };
        let z = g.zero_point.unwrap_or(0);
        for &c in &g.codes {
            if out.len() == cq.channel_size {
                break;
            }
            let level = match &grid {
                Some(grid) => grid
                    .get(c as usize)
                    .ok_or(DtypeError::InvalidSpecialValueIndex {
                        dtype: cq.spec.dtype,
                        index: g.sv_index,
                        available: grid.len(),
                    })?
                    .to_f64(),
                None => (c - z) as f64,
            };
            out.push((level * scale) as f32);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    pub normalized_error: f64,
    pub max_abs_error: f64,
}

pub fn error_report(original: &[f32], dequantized: &[f32]) -> Result<ErrorReport, QuantError> {
    if original.len() != dequantized.len() {
        return Err(QuantError::LengthMismatch {
            left: original.len(),
            right: dequantized.len(),
        });
    }
    if original.is_empty() {
        return Ok(ErrorReport::default());
    }
    let n = original.len() as f64;
    let (mut se, mut sq, mut max) = (0.0f64, 0.0f64, 0.0f64);
    for (&w, &q) in original.iter().zip(dequantized) {
        let e = w as f64 - q as f64;
        se += e * e;
        sq += (w as f64) * (w as f64);
        max = max.max(e.abs());
    }
    let mse = se / n;
    let ms = sq / n;
    Ok(ErrorReport {
        mse,
        normalized_error: if ms > 0.0 { mse / ms } else { 0.0 },
        max_abs_error: max,
    })
}

/// Storage cost per weight: code bits plus per-group metadata amortized
/// over the group. The asymmetric INT baseline is charged a 16-bit scale
/// and an 8-bit zero-point per group.
pub fn memory_footprint_bits(spec: &DataTypeSpec, grouping: &GroupingConfig) -> Ratio<u64> {
    let per_group: u64 = match spec.dtype.family() {
        Family::FpBitMod => 8 + 2,
        Family::IntSym | Family::FpBasic => 8,
        Family::IntAsym => 16 + 8,
    };
    Ratio::from_integer(spec.bits_per_code() as u64) + Ratio::new(per_group, grouping.group_size as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub spec: Arc<DataTypeSpec>,
    pub grouping: GroupingConfig,
    pub channels: Vec<ChannelQuantization>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Result<FloatTensor, QuantError> {
        let mut data = Vec::with_capacity(self.grouping.out_channels * self.grouping.channel_size);
        for ch in &self.channels {
            data.extend(dequantize_channel(ch)?);
        }
        FloatTensor::new(self.grouping.out_channels, self.grouping.channel_size, data)
    }

    /// Special-value usage counts over all groups.
    pub fn sv_histogram(&self) -> [u64; 4] {
        let mut h = [0u64; 4];
        for g in self.channels.iter().flat_map(|c| &c.groups) {
            h[(g.sv_index & 3) as usize] += 1;
        }
        h
    }
}

/// Quantizes every output channel; channels are processed in parallel and
/// collected in order.
pub fn quantize_tensor(
    tensor: &FloatTensor,
    spec: &DataTypeSpec,
    group_size: usize,
) -> Result<QuantizedTensor, QuantError> {
    let spec = Arc::new(spec.clone());
    let channels = (0..tensor.rows())
        .into_par_iter()
        .map(|r| quantize_channel(tensor.row(r), &spec, group_size))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuantizedTensor {
        spec,
        grouping: GroupingConfig::new(group_size, tensor.cols(), tensor.rows()),
        channels,
    })
}

/// Tensor-level error: element-wise MSE and max error, with the normalized
/// error averaged over groups.
pub fn tensor_error(
    original: &FloatTensor,
    dequantized: &FloatTensor,
    group_size: usize,
) -> Result<ErrorReport, QuantError> {
    if original.data().len() != dequantized.data().len() {
        return Err(QuantError::LengthMismatch {
            left: original.data().len(),
            right: dequantized.data().len(),
        });
    }
    let whole = error_report(original.data(), dequantized.data())?;
    let mut norm_sum = 0.0;
    let mut groups = 0usize;
    for r in 0..original.rows() {
        for (a, b) in original
            .row(r)
            .chunks(group_size)
            .zip(dequantized.row(r).chunks(group_size))
        {
            norm_sum += error_report(a, b)?.normalized_error;
            groups += 1;
        }
    }
    Ok(ErrorReport {
        normalized_error: if groups > 0 { norm_sum / groups as f64 } else { 0.0 },
        ..whole
    })
}
