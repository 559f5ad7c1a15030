//! Unified bit-serial term representation.
//!
//! Every weight is decomposed into terms `(-1)^sign * 2^exp * man * 2^bsig`.
//! Integer weights use radix-4 Booth recoding (one term per two bits). FP3
//! and FP4 weights go through a sign-magnitude fixed-point word with four
//! integer bits and one fraction bit; since every level has at most two set
//! bits, two leading-one detections produce exactly two terms.

use thiserror::Error;

use crate::dtype::{effective_grid, fp_magnitudes, DataTypeSpec, DtypeError, Family, GridValue};
use crate::quant::QuantizedGroup;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BitSerialError {
    #[error("value {value} does not fit {bits}-bit two's complement")]
    OutOfRange { value: i32, bits: u32 },
    #[error("Booth width {0} must be even and in [2, 8]")]
    BadWidth(u32),
    #[error("value {0} is not representable as a 4.1 fixed-point word")]
    UnrepresentableValue(f64),
    #[error("fixed-point word {0:#07b} has more than two set bits")]
    TooManySetBits(u8),
    #[error("code {code} outside the {dtype} code space")]
    InvalidCode { code: i32, dtype: &'static str },
    #[error(transparent)]
    Dtype(#[from] DtypeError),
}

/// One bit-serial term. `man == false` makes the term zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitSerialTerm {
    pub sign: bool,
    pub exp: u8,
    pub man: bool,
    pub bsig: i8,
}

impl BitSerialTerm {
    pub const fn zero(bsig: i8) -> Self {
        BitSerialTerm {
            sign: false,
            exp: 0,
            man: false,
            bsig,
        }
    }

    pub const fn one(sign: bool, exp: u8, bsig: i8) -> Self {
        BitSerialTerm {
            sign,
            exp,
            man: true,
            bsig,
        }
    }

    /// Exact value in units of one half (the finest `bsig` is -1).
    pub fn value_halves(&self) -> i64 {
        if !self.man {
            return 0;
        }
        let mag = 1i64 << (self.exp as i32 + self.bsig as i32 + 1);
        if self.sign {
            -mag
        } else {
            mag
        }
    }

    pub fn value(&self) -> f64 {
        self.value_halves() as f64 * 0.5
    }
}

/// Sum of a term list, in halves.
pub fn terms_value_halves(terms: &[BitSerialTerm]) -> i64 {
    terms.iter().map(BitSerialTerm::value_halves).sum()
}

/// Radix-4 Booth recoding of a two's-complement integer into `bits / 2`
/// terms; term `i` has `bsig = 2i`.
pub fn booth_encode(value: i32, bits: u32) -> Result<Vec<BitSerialTerm>, BitSerialError> {
    if !(2..=8).contains(&bits) || !bits.is_multiple_of(2) {
        return Err(BitSerialError::BadWidth(bits));
    }
    let lo = -(1i32 << (bits - 1));
    let hi = (1i32 << (bits - 1)) - 1;
    if value < lo || value > hi {
        return Err(BitSerialError::OutOfRange { value, bits });
    }
    let word = (value as u32) & ((1u32 << bits) - 1);
    let bit = |i: i32| -> u32 {
        if i < 0 {
            0
        } else {
            (word >> i) & 1
        }
    };
    Ok((0..bits as i32 / 2)
        .map(|i| {
            let bsig = (2 * i) as i8;
            let triplet = (bit(2 * i + 1) << 2) | (bit(2 * i) << 1) | bit(2 * i - 1);
            match triplet {
                0b001 | 0b010 => BitSerialTerm::one(false, 0, bsig),
                0b011 => BitSerialTerm::one(false, 1, bsig),
                0b100 => BitSerialTerm::one(true, 1, bsig),
                0b101 | 0b110 => BitSerialTerm::one(true, 0, bsig),
                _ => BitSerialTerm::zero(bsig),
            }
        })
        .collect())
}

/// Sign-magnitude fixed-point word: bits `I3 I2 I1 I0 . F0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCode {
    pub sign: bool,
    /// Magnitude in halves: `I3 I2 I1 I0 F0` as a 5-bit integer.
    pub magnitude: u8,
}

impl FixedPointCode {
    pub fn from_value(v: GridValue) -> Result<Self, BitSerialError> {
        let h = v.halves();
        if h.unsigned_abs() > 16 {
            return Err(BitSerialError::UnrepresentableValue(v.to_f64()));
        }
        Ok(FixedPointCode {
            sign: h < 0,
            magnitude: h.unsigned_abs() as u8,
        })
    }

    pub fn from_f64(v: f64) -> Result<Self, BitSerialError> {
        GridValue::from_f64(v)
            .ok_or(BitSerialError::UnrepresentableValue(v))
            .and_then(Self::from_value)
    }

    pub fn integer_bits(&self) -> u8 {
        self.magnitude >> 1
    }

    pub fn fraction_bit(&self) -> bool {
        self.magnitude & 1 == 1
    }

    pub fn value(&self) -> f64 {
        let m = self.magnitude as f64 * 0.5;
        if self.sign {
            -m
        } else {
            m
        }
    }
}

/// Four programmable special-value entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialValueRegister {
    entries: [FixedPointCode; 4],
}

impl SpecialValueRegister {
    pub fn program(values: &[GridValue]) -> Result<Self, BitSerialError> {
        let mut entries = [FixedPointCode {
            sign: false,
            magnitude: 0,
        }; 4];
        for (slot, &v) in entries.iter_mut().zip(values) {
            *slot = FixedPointCode::from_value(v)?;
        }
        Ok(SpecialValueRegister { entries })
    }

    /// Programs the register with the special values of `spec`.
    pub fn for_spec(spec: &DataTypeSpec) -> Result<Self, BitSerialError> {
        Self::program(spec.special_values())
    }

    pub fn entry(&self, index: u8) -> FixedPointCode {
        self.entries[(index & 3) as usize]
    }
}

/// Hardware sign-magnitude FP3/FP4 code. Sign set with a zero magnitude
/// field is the redundant negative zero, which selects the special value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HwFpCode {
    pub sign: bool,
    pub mag_field: u8,
}

impl HwFpCode {
    pub const NEG_ZERO: HwFpCode = HwFpCode {
        sign: true,
        mag_field: 0,
    };
}

/// Decodes a hardware FP code to fixed point, substituting the special
/// value for negative zero.
pub fn fp_code_to_fixed_point(
    code: HwFpCode,
    magnitudes: &[i32],
    sv_index: u8,
    svreg: &SpecialValueRegister,
) -> Result<FixedPointCode, BitSerialError> {
    if code == HwFpCode::NEG_ZERO {
        return Ok(svreg.entry(sv_index));
    }
    let mag = *magnitudes
        .get(code.mag_field as usize)
        .ok_or(BitSerialError::UnrepresentableValue(code.mag_field as f64))?;
    Ok(FixedPointCode {
        sign: code.sign && mag != 0,
        magnitude: mag as u8,
    })
}

/// Two leading-one detections: the first over `I3..I0` (bsig 0), the
/// second over `I2 I1 I0 F0` (bsig -1) after masking the bit already taken.
pub fn lod_decode(fp: FixedPointCode) -> Result<[BitSerialTerm; 2], BitSerialError> {
    let mut mag = fp.magnitude & 0b11111;
    let mut first = BitSerialTerm::zero(0);
    let high = mag >> 1;
    if high != 0 {
        let p = 7 - high.leading_zeros() as u8;
        first = BitSerialTerm::one(fp.sign, p, 0);
        mag &= !(1 << (p + 1));
    }
    let mut second = BitSerialTerm::zero(-1);
    let low = mag & 0b1111;
    if low != 0 {
        let p = 7 - low.leading_zeros() as u8;
        second = BitSerialTerm::one(fp.sign, p, -1);
        mag &= !(1 << p);
    }
    if mag != 0 {
        return Err(BitSerialError::TooManySetBits(fp.magnitude));
    }
    Ok([first, second])
}

/// Maps a grid level of an FP type onto its hardware code. The group's
/// special value is emitted as negative zero.
pub fn fp_hw_code(spec: &DataTypeSpec, sv_index: u8, level: GridValue) -> Result<HwFpCode, BitSerialError> {
    if spec.dtype.family() == Family::FpBitMod && spec.special_values().get(sv_index as usize) == Some(&level) {
        return Ok(HwFpCode::NEG_ZERO);
    }
    let mags = fp_magnitudes(spec.dtype);
    let field = mags
        .iter()
        .position(|&m| m == level.halves().abs())
        .ok_or(BitSerialError::UnrepresentableValue(level.to_f64()))?;
    Ok(HwFpCode {
        sign: level.is_negative(),
        mag_field: field as u8,
    })
}

/// Encoder state for one data type: the programmed register plus the
/// per-type decoding tables.
#[derive(Debug, Clone)]
pub struct WeightEncoder<'a> {
    spec: &'a DataTypeSpec,
    svreg: SpecialValueRegister,
}

impl<'a> WeightEncoder<'a> {
    pub fn new(spec: &'a DataTypeSpec) -> Result<Self, BitSerialError> {
        Ok(WeightEncoder {
            spec,
            svreg: SpecialValueRegister::for_spec(spec)?,
        })
    }

    pub fn with_register(spec: &'a DataTypeSpec, svreg: SpecialValueRegister) -> Self {
        WeightEncoder { spec, svreg }
    }

    pub fn spec(&self) -> &DataTypeSpec {
        self.spec
    }

    /// Encodes one weight code of a group into `terms_per_code` terms.
    /// Asymmetric INT codes are re-centred on the zero-point first.
    pub fn encode(&self, code: i32, group: &QuantizedGroup) -> Result<Vec<BitSerialTerm>, BitSerialError> {
        encode_weight(
            code,
            self.spec,
            group.sv_index,
            group.zero_point.unwrap_or(0),
            &self.svreg,
        )
    }
}

pub fn encode_weight(
    code: i32,
    spec: &DataTypeSpec,
    sv_index: u8,
    zero_point: i32,
    svreg: &SpecialValueRegister,
) -> Result<Vec<BitSerialTerm>, BitSerialError> {
    let invalid = || BitSerialError::InvalidCode {
        code,
        dtype: spec.name(),
    };
    match spec.dtype.family() {
        Family::IntSym => {
            let qmax = (1 << (spec.bits_per_code() - 1)) - 1;
            if code.abs() > qmax {
                return Err(invalid());
            }
            booth_encode(code, spec.dtype.booth_width())
        }
        Family::IntAsym => {
            if code < 0 || code >= 1 << spec.bits_per_code() {
                return Err(invalid());
            }
            booth_encode(code - zero_point, spec.dtype.booth_width())
        }
        Family::FpBasic | Family::FpBitMod => {
            let grid = effective_grid(spec, sv_index)?;
            let level = *grid
                .get(usize::try_from(code).map_err(|_| invalid())?)
                .ok_or_else(invalid)?;
            let hw = fp_hw_code(spec, sv_index, level)?;
            let fp = fp_code_to_fixed_point(hw, fp_magnitudes(spec.dtype), sv_index, svreg)?;
            Ok(lod_decode(fp)?.to_vec())
        }
    }
}
