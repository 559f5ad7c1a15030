//! Bit-accurate model of the bit-serial processing element.
//!
//! Each cycle takes one term slot of four weights and four FP16
//! activations:
//!
//! 1. exponent sums `a_e + w_e`, their lane maximum and per-lane deltas;
//!    product signs `a_s ^ w_s`;
//! 2. `a_m * w_m`, right-aligned by the delta with 3 extra bits kept, then
//!    rounded to nearest even and summed in an adder tree;
//! 3. the tree output is scaled by `2^bsig` and added into the accumulator,
//!    which is renormalized so its leading one sits in bits 24..=31.
//!
//! After a group the accumulator mantissa is multiplied by the 8-bit group
//! scale one bit per cycle (shift-and-add), giving the group partial sum.
//!
//! Widths not fixed by the architecture are model choices: a 32-bit
//! accumulator mantissa, flush-to-zero for subnormal activations, and
//! exact alignment inside the accumulator adder with a single
//! round-to-nearest-even at renormalization.

use half::f16;
use thiserror::Error;

use crate::bitserial::{BitSerialError, BitSerialTerm, WeightEncoder};
use crate::dtype::DataTypeSpec;
use crate::quant::{ChannelQuantization, QuantizedGroup};

/// PE dot-product width.
pub const DOT_WIDTH: usize = 4;
/// Extra bits kept below the aligned product LSB for rounding.
pub const GUARD_BITS: u32 = 3;
/// Accumulator mantissa width.
pub const ACC_BITS: u32 = 32;
/// Lowest allowed position of the accumulator's leading one.
pub const ACC_MIN_LEAD: u32 = 24;
/// Cycles of the bit-serial dequantizer (one per scale bit).
pub const DEQUANT_CYCLES: u64 = 8;

const FP16_BIAS: i32 = 15;
const FP16_MANT_BITS: i32 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeError {
    #[error("activation {0} is NaN or infinite")]
    NonFiniteActivation(f32),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("terms in one cycle must share bit-significance")]
    MixedBitSignificance,
    #[error("no partial sums to drain")]
    EmptyDrain,
    #[error(transparent)]
    Encode(#[from] BitSerialError),
}

/// An FP16 activation split into sign, biased exponent and 11-bit mantissa
/// (hidden bit included).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp16Operand {
    pub sign: bool,
    pub exp: u8,
    pub mant: u16,
}

impl Fp16Operand {
    pub const ZERO: Fp16Operand = Fp16Operand {
        sign: false,
        exp: 0,
        mant: 0,
    };

    /// Subnormals are flushed to zero.
    pub fn from_f16(v: f16) -> Result<Self, PeError> {
        if !v.is_finite() {
            return Err(PeError::NonFiniteActivation(v.to_f32()));
        }
        let bits = v.to_bits();
        let sign = bits >> 15 == 1;
        let exp = ((bits >> 10) & 0x1f) as u8;
        if exp == 0 {
            return Ok(Fp16Operand { sign, ..Self::ZERO });
        }
        Ok(Fp16Operand {
            sign,
            exp,
            mant: (bits & 0x3ff) | 0x400,
        })
    }

    /// Rounds to FP16 first.
    pub fn from_f32(v: f32) -> Result<Self, PeError> {
        if !v.is_finite() {
            return Err(PeError::NonFiniteActivation(v));
        }
        Self::from_f16(f16::from_f32(v))
    }

    pub fn value(&self) -> f64 {
        if self.mant == 0 {
            return 0.0;
        }
        let m = self.mant as f64 * 2f64.powi(self.exp as i32 - FP16_BIAS - FP16_MANT_BITS);
        if self.sign {
            -m
        } else {
            m
        }
    }
}

/// Accumulator: value `mant * 2^exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccumulatorState {
    pub mant: i64,
    pub exp: i32,
}

impl AccumulatorState {
    pub fn value(&self) -> f64 {
        self.mant as f64 * 2f64.powi(self.exp)
    }
}

/// Dequantized group partial sum: value `mant * 2^exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupPartialSum {
    pub mant: i64,
    pub exp: i32,
}

impl GroupPartialSum {
    pub fn value(&self) -> f64 {
        self.mant as f64 * 2f64.powi(self.exp)
    }
}

fn bit_len(x: u128) -> u32 {
    128 - x.leading_zeros()
}

/// Brings `m * 2^e` into the accumulator window, rounding to nearest even
/// when bits are dropped.
fn normalize(m: i128, e: i32) -> AccumulatorState {
    if m == 0 {
        return AccumulatorState::default();
    }
    let neg = m < 0;
    let mut mag = m.unsigned_abs();
    let mut exp = e;
    let len = bit_len(mag);
    if len > ACC_BITS {
        let k = len - ACC_BITS;
        let rem = mag & ((1u128 << k) - 1);
        let half = 1u128 << (k - 1);
        mag >>= k;
        exp += k as i32;
        if rem > half || (rem == half && mag & 1 == 1) {
            mag += 1;
            if bit_len(mag) > ACC_BITS {
                mag >>= 1;
                exp += 1;
            }
        }
    } else if len <= ACC_MIN_LEAD {
        let k = ACC_MIN_LEAD + 1 - len;
        mag <<= k;
        exp -= k as i32;
    }
    debug_assert!((ACC_MIN_LEAD + 1..=ACC_BITS).contains(&bit_len(mag)));
    let mant = mag as i64;
    AccumulatorState {
        mant: if neg { -mant } else { mant },
        exp,
    }
}

/// Adds `s * 2^e` into the accumulator.
fn accumulate(acc: AccumulatorState, s: i64, e: i32) -> AccumulatorState {
    if s == 0 {
        return acc;
    }
    if acc.mant == 0 {
        return normalize(s as i128, e);
    }
    let lo = acc.exp.min(e);
    let gap = (acc.exp - e).unsigned_abs();
    // Beyond this gap the smaller operand is below half an ulp of the result
    // and cannot change the rounded sum.
    if gap > 90 {
        return if acc.exp > e { acc } else { normalize(s as i128, e) };
    }
    let a = (acc.mant as i128) << (acc.exp - lo);
    let b = (s as i128) << (e - lo);
    normalize(a + b, lo)
}

/// Aligned mantissa of one lane: `mant` shifted right by `delta` with
/// [`GUARD_BITS`] kept, then rounded to nearest even.
fn align_lane(mant: u16, delta: u32) -> i64 {
    let wide = (mant as u64) << GUARD_BITS;
    if delta >= 64 {
        return 0;
    }
    let shifted = wide >> delta;
    let q = shifted >> GUARD_BITS;
    let frac = shifted & ((1 << GUARD_BITS) - 1);
    let half = 1 << (GUARD_BITS - 1);
    (q + u64::from(frac > half || (frac == half && q & 1 == 1))) as i64
}

/// One PE cycle over a term slot of four weights.
pub fn pe_cycle(
    terms: &[BitSerialTerm; DOT_WIDTH],
    acts: &[Fp16Operand; DOT_WIDTH],
    acc: AccumulatorState,
) -> Result<AccumulatorState, PeError> {
    let bsig = terms[0].bsig;
    if terms.iter().any(|t| t.bsig != bsig) {
        return Err(PeError::MixedBitSignificance);
    }
    let active = |i: usize| terms[i].man && acts[i].mant != 0;
    let exp_sum = |i: usize| acts[i].exp as i32 + terms[i].exp as i32;
    let Some(max_e) = (0..DOT_WIDTH).filter(|&i| active(i)).map(exp_sum).max() else {
        return Ok(acc);
    };
    let tree: i64 = (0..DOT_WIDTH)
        .filter(|&i| active(i))
        .map(|i| {
            let m = align_lane(acts[i].mant, (max_e - exp_sum(i)) as u32);
            if acts[i].sign ^ terms[i].sign {
                -m
            } else {
                m
            }
        })
        .sum();
    Ok(accumulate(acc, tree, max_e - FP16_BIAS - FP16_MANT_BITS + bsig as i32))
}

/// Multiplies the accumulator mantissa by the group scale, one scale bit
/// per cycle. Always takes [`DEQUANT_CYCLES`] cycles.
pub fn bit_serial_dequant(acc: AccumulatorState, scale: u8) -> (GroupPartialSum, u64) {
    let mut m_grp = 0i64;
    for i in 0..DEQUANT_CYCLES as u32 {
        if (scale >> i) & 1 == 1 {
            m_grp += acc.mant << i;
        }
    }
    (
        GroupPartialSum {
            mant: m_grp,
            exp: acc.exp,
        },
        DEQUANT_CYCLES,
    )
}

/// Compute cycles of one group on one PE.
pub fn group_cycles(group_size: usize, spec: &DataTypeSpec) -> u64 {
    (group_size / DOT_WIDTH) as u64 * spec.terms_per_code() as u64
}

/// Runs one quantized group through the PE: for every batch of four
/// weights, one cycle per term slot while the activations stay latched.
/// Returns the dequantized partial sum and the compute cycles spent.
pub fn group_dot(
    weights: &QuantizedGroup,
    acts: &[Fp16Operand],
    encoder: &WeightEncoder<'_>,
) -> Result<(GroupPartialSum, u64), PeError> {
    let g = weights.codes.len();
    if acts.len() != g {
        return Err(PeError::ShapeMismatch {
            expected: g,
            got: acts.len(),
        });
    }
    if !g.is_multiple_of(DOT_WIDTH) {
        return Err(PeError::ShapeMismatch {
            expected: g.next_multiple_of(DOT_WIDTH),
            got: g,
        });
    }
    let slots = encoder.spec().terms_per_code() as usize;
    let mut acc = AccumulatorState::default();
    let mut cycles = 0u64;
    for (codes, batch) in weights.codes.chunks_exact(DOT_WIDTH).zip(acts.chunks_exact(DOT_WIDTH)) {
        // by_slot[slot][lane]
        let mut by_slot = [[BitSerialTerm::zero(0); DOT_WIDTH]; 4];
        for (lane, &code) in codes.iter().enumerate() {
            let terms = encoder.encode(code, weights)?;
            debug_assert_eq!(terms.len(), slots);
            for (slot, t) in terms.into_iter().enumerate() {
                by_slot[slot][lane] = t;
            }
        }
        let batch: &[Fp16Operand; DOT_WIDTH] = batch.try_into().expect("chunk of DOT_WIDTH");
        for terms in &by_slot[..slots] {
            acc = pe_cycle(terms, batch, acc)?;
            cycles += 1;
        }
    }
    let (partial, _) = bit_serial_dequant(acc, weights.scale_q.unsigned_abs());
    Ok((partial, cycles))
}

/// Sums all group partial sums of a channel exactly, applies the channel
/// scale once and rounds to `f32`.
pub fn drain_accumulate(partials: &[GroupPartialSum], channel_scale: f32) -> Result<f32, PeError> {
    if partials.is_empty() {
        return Err(PeError::EmptyDrain);
    }
    let nz = partials.iter().filter(|p| p.mant != 0);
    let Some(e_max) = nz.clone().map(|p| p.exp).max() else {
        return Ok(0.0);
    };
    let e_min = nz.map(|p| p.exp).min().expect("non-empty");
    let base = e_min.max(e_max - 80);
    let sum: i128 = partials
        .iter()
        .filter(|p| p.mant != 0)
        .map(|p| {
            let m = p.mant as i128;
            if p.exp >= base {
                m << (p.exp - base)
            } else {
                m >> (base - p.exp)
            }
        })
        .sum();
    let v = sum as f64 * 2f64.powi(base) * channel_scale as f64;
    Ok(v as f32)
}

/// Dot product of one quantized channel with an activation vector, as the
/// PE array computes it. Returns the output and the compute cycles spent.
pub fn channel_dot(cq: &ChannelQuantization, acts: &[Fp16Operand]) -> Result<(f32, u64), PeError> {
    if acts.len() != cq.channel_size {
        return Err(PeError::ShapeMismatch {
            expected: cq.channel_size,
            got: acts.len(),
        });
    }
    let encoder = WeightEncoder::new(&cq.spec)?;
    let mut padded = acts.to_vec();
    padded.resize(cq.groups.len() * cq.group_size, Fp16Operand::ZERO);
    let mut partials = Vec::with_capacity(cq.groups.len());
    let mut cycles = 0;
    for (g, a) in cq.groups.iter().zip(padded.chunks_exact(cq.group_size)) {
        let (p, c) = group_dot(g, a, &encoder)?;
        partials.push(p);
        cycles += c;
    }
    Ok((drain_accumulate(&partials, cq.channel_scale)?, cycles))
}

/// Per-PE throughput of the bit-serial PE relative to an FP16 MAC PE that
/// retires one multiply-accumulate per cycle.
pub fn throughput_vs_fp16(spec: &DataTypeSpec) -> num_rational::Ratio<u64> {
    num_rational::Ratio::new(DOT_WIDTH as u64, spec.terms_per_code() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DataType;
    use crate::dtype::GridValue;

    fn act(v: f32) -> Fp16Operand {
        Fp16Operand::from_f32(v).unwrap()
    }

    #[test]
    fn fp16_decode() {
        let one = act(1.0);
        assert_eq!((one.sign, one.exp, one.mant), (false, 15, 0x400));
        assert_eq!(act(-2.5).value(), -2.5);
        assert_eq!(act(6.0e-8), Fp16Operand::ZERO);
        assert!(Fp16Operand::from_f32(f32::NAN).is_err());
        assert!(Fp16Operand::from_f16(f16::INFINITY).is_err());
    }

    #[test]
    fn zero_terms_leave_accumulator() {
        let acc = AccumulatorState { mant: 1 << 30, exp: -3 };
        let terms = [BitSerialTerm::zero(0); 4];
        assert_eq!(pe_cycle(&terms, &[act(1.0); 4], acc).unwrap(), acc);
    }

    #[test]
    fn mixed_bsig_rejected() {
        let terms = [
            BitSerialTerm::one(false, 0, 0),
            BitSerialTerm::one(false, 0, -1),
            BitSerialTerm::zero(0),
            BitSerialTerm::zero(0),
        ];
        assert_eq!(
            pe_cycle(&terms, &[act(1.0); 4], AccumulatorState::default()),
            Err(PeError::MixedBitSignificance)
        );
    }

    #[test]
    fn fp3_ones_times_ones() {
        let spec = DataTypeSpec::new(DataType::Fp3Basic);
        let enc = WeightEncoder::new(&spec).unwrap();
        let one = spec
            .basic_values()
            .iter()
            .position(|&v| v == GridValue::from_int(1))
            .unwrap() as i32;
        let group = QuantizedGroup {
            codes: vec![one; 4],
            sv_index: 0,
            scale_q: 1,
            zero_point: None,
        };
        let (p, cycles) = group_dot(&group, &[act(1.0); 4], &enc).unwrap();
        assert_eq!(cycles, 2);
        assert_eq!(p.value(), 4.0);
    }

    #[test]
    fn lane_rounding_is_nearest_even() {
        // 0b100_0000_0001 >> 1 = 1024.5 -> 1024; 0b100_0000_0011 >> 1 = 1025.5 -> 1026
        assert_eq!(align_lane(0x401, 1), 0x200);
        assert_eq!(align_lane(0x403, 1), 0x202);
        assert_eq!(align_lane(0x7ff, 2), 0x200);
        assert_eq!(align_lane(0x7ff, 14), 0);
        assert_eq!(align_lane(0x7ff, 70), 0);
    }

    #[test]
    fn dequant_examples() {
        let acc = AccumulatorState { mant: 3, exp: 2 };
        assert_eq!(bit_serial_dequant(acc, 0).0.mant, 0);
        assert_eq!(bit_serial_dequant(acc, 1).0, GroupPartialSum { mant: 3, exp: 2 });
        let (p, c) = bit_serial_dequant(acc, 255);
        assert_eq!((p.mant, c), (765, 8));
    }

    #[test]
    fn drain_examples() {
        let p = GroupPartialSum {
            mant: 5 << 24,
            exp: -26,
        };
        assert_eq!(drain_accumulate(&[p], 1.0).unwrap(), 1.25);
        let n = GroupPartialSum {
            mant: -(5 << 24),
            exp: -26,
        };
        assert_eq!(drain_accumulate(&[p, n], 0.7).unwrap(), 0.0);
        assert_eq!(drain_accumulate(&[], 1.0), Err(PeError::EmptyDrain));
    }

    #[test]
    fn normalize_window() {
        let a = normalize(1, 0);
        assert_eq!((a.mant, a.exp), (1 << 24, -24));
        let a = normalize((1i128 << 40) + (1 << 8), 0);
        assert_eq!((a.mant, a.exp), (1 << 31, 9));
        // tie at the dropped bit rounds to even
        let a = normalize((1i128 << 32) + 1, 0);
        assert_eq!((a.mant, a.exp), (1 << 31, 1));
        let a = normalize((1i128 << 32) + 3, 0);
        assert_eq!((a.mant, a.exp), ((1 << 31) + 2, 1));
    }

    #[test]
    fn group_shape_errors() {
        let spec = DataTypeSpec::new(DataType::Int8Sym);
        let enc = WeightEncoder::new(&spec).unwrap();
        let g = QuantizedGroup {
            codes: vec![1; 8],
            sv_index: 0,
            scale_q: 1,
            zero_point: None,
        };
        assert!(matches!(
            group_dot(&g, &[act(1.0); 4], &enc),
            Err(PeError::ShapeMismatch { .. })
        ));
        let g6 = QuantizedGroup { codes: vec![1; 6], ..g };
        assert!(matches!(
            group_dot(&g6, &[act(1.0); 6], &enc),
            Err(PeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn throughput_ratios() {
        use num_rational::Ratio;
        assert_eq!(
            throughput_vs_fp16(&DataTypeSpec::new(DataType::Fp4BitMod)),
            Ratio::from_integer(2)
        );
        assert_eq!(
            throughput_vs_fp16(&DataTypeSpec::new(DataType::Int6Sym)),
            Ratio::new(4, 3)
        );
        assert_eq!(
            throughput_vs_fp16(&DataTypeSpec::new(DataType::Int8Sym)),
            Ratio::from_integer(1)
        );
    }
}
