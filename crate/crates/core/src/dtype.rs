//! Quantization data types: value grids, special values and per-type
//! storage/term budgets.
//!
//! Every grid level is held as an exact binary fraction ([`GridValue`]), so
//! grids sort and compare exactly. The FP4 family needs a 0.5 step, which is
//! the finest resolution any supported type uses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtypeError {
    #[error("special-value index {index} out of range for {dtype} ({available} candidates)")]
    InvalidSpecialValueIndex {
        dtype: DataType,
        index: u8,
        available: usize,
    },
    #[error("empty grid")]
    EmptyGrid,
    #[error("unknown data type `{0}`")]
    UnknownDataType(String),
    #[error("special value {0} collides with a basic value or is not a multiple of 0.5")]
    InvalidSpecialValue(f64),
    #[error("at most 4 special values fit a 2-bit index, got {0}")]
    TooManySpecialValues(usize),
}

/// An exact quantization level, stored in units of one half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridValue(i32);

impl GridValue {
    pub const ZERO: GridValue = GridValue(0);

    pub const fn from_halves(halves: i32) -> Self {
        GridValue(halves)
    }

    pub const fn from_int(v: i32) -> Self {
        GridValue(v * 2)
    }

    /// Converts an `f64` that is an exact multiple of 0.5.
    pub fn from_f64(v: f64) -> Option<Self> {
        let h = v * 2.0;
        (h.fract() == 0.0 && h.abs() <= i32::MAX as f64).then_some(GridValue(h as i32))
    }

    pub const fn halves(self) -> i32 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 * 0.5
    }

    pub const fn abs(self) -> Self {
        GridValue(self.0.abs())
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl std::ops::Neg for GridValue {
    type Output = GridValue;
    fn neg(self) -> GridValue {
        GridValue(-self.0)
    }
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}", self.to_f64())
        }
    }
}

/// The supported data types. Discriminants are the on-disk dtype ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u16)]
pub enum DataType {
    #[serde(rename = "INT8_SYM")]
    Int8Sym = 0,
    #[serde(rename = "INT6_SYM")]
    Int6Sym = 1,
    #[serde(rename = "INT6_ASYM")]
    Int6Asym = 2,
    #[serde(rename = "INT4_SYM")]
    Int4Sym = 3,
    #[serde(rename = "INT4_ASYM")]
    Int4Asym = 4,
    #[serde(rename = "INT3_ASYM")]
    Int3Asym = 5,
    #[serde(rename = "FP4_BASIC")]
    Fp4Basic = 6,
    #[serde(rename = "FP3_BASIC")]
    Fp3Basic = 7,
    #[serde(rename = "FP4_BITMOD")]
    Fp4BitMod = 8,
    #[serde(rename = "FP3_BITMOD")]
    Fp3BitMod = 9,
}

impl DataType {
    pub const ALL: [DataType; 10] = [
        DataType::Int8Sym,
        DataType::Int6Sym,
        DataType::Int6Asym,
        DataType::Int4Sym,
        DataType::Int4Asym,
        DataType::Int3Asym,
        DataType::Fp4Basic,
        DataType::Fp3Basic,
        DataType::Fp4BitMod,
        DataType::Fp3BitMod,
    ];

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn from_id(id: u16) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Int8Sym => "INT8_SYM",
            DataType::Int6Sym => "INT6_SYM",
            DataType::Int6Asym => "INT6_ASYM",
            DataType::Int4Sym => "INT4_SYM",
            DataType::Int4Asym => "INT4_ASYM",
            DataType::Int3Asym => "INT3_ASYM",
            DataType::Fp4Basic => "FP4_BASIC",
            DataType::Fp3Basic => "FP3_BASIC",
            DataType::Fp4BitMod => "FP4_BITMOD",
            DataType::Fp3BitMod => "FP3_BITMOD",
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            DataType::Int8Sym => 8,
            DataType::Int6Sym | DataType::Int6Asym => 6,
            DataType::Int4Sym | DataType::Int4Asym | DataType::Fp4Basic | DataType::Fp4BitMod => 4,
            DataType::Int3Asym | DataType::Fp3Basic | DataType::Fp3BitMod => 3,
        }
    }

    pub fn family(self) -> Family {
        match self {
            DataType::Int8Sym | DataType::Int6Sym | DataType::Int4Sym => Family::IntSym,
            DataType::Int6Asym | DataType::Int4Asym | DataType::Int3Asym => Family::IntAsym,
            DataType::Fp4Basic | DataType::Fp3Basic => Family::FpBasic,
            DataType::Fp4BitMod | DataType::Fp3BitMod => Family::FpBitMod,
        }
    }

    pub fn is_bitmod(self) -> bool {
        self.family() == Family::FpBitMod
    }

    pub fn is_fp(self) -> bool {
        matches!(self.family(), Family::FpBasic | Family::FpBitMod)
    }

    /// Width of the signed value handed to the Booth encoder. Asymmetric
    /// codes are re-centred (`code - z`) and need one extra bit; widths are
    /// rounded up to an even count so every Booth digit is complete.
    pub(crate) fn booth_width(self) -> u32 {
        match self.family() {
            Family::IntSym => (self.bits() + 1) & !1,
            Family::IntAsym => (self.bits() + 2) & !1,
            _ => 0,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataType {
    type Err = DtypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let alias = match norm.as_str() {
            "INT8" => "INT8_SYM",
            "INT6" => "INT6_SYM",
            "INT4" => "INT4_SYM",
            "INT3" => "INT3_ASYM",
            "FP4" => "FP4_BASIC",
            "FP3" => "FP3_BASIC",
            "BITMOD_FP4" => "FP4_BITMOD",
            "BITMOD_FP3" => "FP3_BITMOD",
            other => other,
        };
        DataType::ALL
            .into_iter()
            .find(|d| d.name() == alias)
            .ok_or_else(|| DtypeError::UnknownDataType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    IntSym,
    IntAsym,
    FpBasic,
    FpBitMod,
}

const FP3_MAGNITUDES: [i32; 4] = [0, 2, 4, 8];
const FP4_MAGNITUDES: [i32; 8] = [0, 1, 2, 3, 4, 6, 8, 12];

/// Sign-magnitude magnitude table (in halves) of the basic FP formats,
/// indexed by the hardware magnitude field.
pub(crate) fn fp_magnitudes(dtype: DataType) -> &'static [i32] {
    match dtype {
        DataType::Fp3Basic | DataType::Fp3BitMod => &FP3_MAGNITUDES,
        DataType::Fp4Basic | DataType::Fp4BitMod => &FP4_MAGNITUDES,
        _ => &[],
    }
}

/// A named quantization grid plus the metadata the rest of the crate needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTypeSpec {
    pub dtype: DataType,
    basic_values: Vec<GridValue>,
    special_values: Vec<GridValue>,
}

impl DataTypeSpec {
    /// The default definition of a data type. BitMoD types carry the
    /// ER/EA special values {±3, ±6} (FP3) and {±5, ±8} (FP4).
    pub fn new(dtype: DataType) -> Self {
        let basic_values = match dtype.family() {
            Family::IntSym => {
                let qmax = (1i32 << (dtype.bits() - 1)) - 1;
                (-qmax..=qmax).map(GridValue::from_int).collect()
            }
            Family::IntAsym => (0..(1i32 << dtype.bits())).map(GridValue::from_int).collect(),
            Family::FpBasic | Family::FpBitMod => {
                let mags = fp_magnitudes(dtype);
                let mut v: Vec<GridValue> = mags
                    .iter()
                    .rev()
                    .filter(|&&m| m != 0)
                    .map(|&m| GridValue::from_halves(-m))
                    .collect();
                v.extend(mags.iter().map(|&m| GridValue::from_halves(m)));
                v
            }
        };
        let special_values = match dtype {
            DataType::Fp3BitMod => [3, -3, 6, -6].map(GridValue::from_int).to_vec(),
            DataType::Fp4BitMod => [5, -5, 8, -8].map(GridValue::from_int).to_vec(),
            _ => Vec::new(),
        };
        DataTypeSpec {
            dtype,
            basic_values,
            special_values,
        }
    }

    /// A BitMoD type with a different special-value candidate list, e.g. only
    /// the extended-resolution pair. Candidates must avoid the basic grid.
    pub fn with_special_values(dtype: DataType, svs: &[f64]) -> Result<Self, DtypeError> {
        let mut spec = Self::new(dtype);
        if svs.len() > 4 {
            return Err(DtypeError::TooManySpecialValues(svs.len()));
        }
        let mut out = Vec::with_capacity(svs.len());
        for &v in svs {
            let g = GridValue::from_f64(v).ok_or(DtypeError::InvalidSpecialValue(v))?;
            if spec.basic_values.contains(&g) {
                return Err(DtypeError::InvalidSpecialValue(v));
            }
            out.push(g);
        }
        spec.special_values = out;
        Ok(spec)
    }

    /// FP3 with the extended-resolution candidates {+3, -3} only.
    pub fn fp3_er() -> Self {
        Self::with_special_values(DataType::Fp3BitMod, &[3.0, -3.0]).expect("valid")
    }

    /// FP3 with the extended-asymmetry candidates {+6, -6} only.
    pub fn fp3_ea() -> Self {
        Self::with_special_values(DataType::Fp3BitMod, &[6.0, -6.0]).expect("valid")
    }

    pub fn fp4_er() -> Self {
        Self::with_special_values(DataType::Fp4BitMod, &[5.0, -5.0]).expect("valid")
    }

    pub fn fp4_ea() -> Self {
        Self::with_special_values(DataType::Fp4BitMod, &[8.0, -8.0]).expect("valid")
    }

    pub fn name(&self) -> &'static str {
        self.dtype.name()
    }

    pub fn basic_values(&self) -> &[GridValue] {
        &self.basic_values
    }

    pub fn special_values(&self) -> &[GridValue] {
        &self.special_values
    }

    pub fn bits_per_code(&self) -> u32 {
        self.dtype.bits()
    }

    /// Bit-serial terms the PE consumes per weight code.
    pub fn terms_per_code(&self) -> u32 {
        match self.dtype.family() {
            Family::FpBasic | Family::FpBitMod => 2,
            _ => self.dtype.booth_width() / 2,
        }
    }

    /// Number of `sv_index` values accepted by [`effective_grid`].
    pub fn sv_choices(&self) -> usize {
        self.special_values.len().max(1)
    }
}

/// The grid a group is quantized with: the basic values plus, for BitMoD
/// types, the special value selected by `sv_index`.
pub fn effective_grid(spec: &DataTypeSpec, sv_index: u8) -> Result<Vec<GridValue>, DtypeError> {
    let svs = spec.special_values();
    let err = || DtypeError::InvalidSpecialValueIndex {
        dtype: spec.dtype,
        index: sv_index,
        available: svs.len(),
    };
    if svs.is_empty() {
        return if sv_index == 0 {
            Ok(spec.basic_values().to_vec())
        } else {
            Err(err())
        };
    }
    let sv = *svs.get(sv_index as usize).ok_or_else(err)?;
    let mut grid = spec.basic_values().to_vec();
    let pos = grid.binary_search(&sv).unwrap_err();
    grid.insert(pos, sv);
    Ok(grid)
}

pub fn grid_absmax(grid: &[GridValue]) -> Result<GridValue, DtypeError> {
    let (first, last) = (grid.first().ok_or(DtypeError::EmptyGrid)?, grid[grid.len() - 1]);
    Ok(first.abs().max(last.abs()))
}

/// Group layout of a `K x D` weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub group_size: usize,
    pub channel_size: usize,
    pub out_channels: usize,
}

impl GroupingConfig {
    pub fn new(group_size: usize, channel_size: usize, out_channels: usize) -> Self {
        GroupingConfig {
            group_size,
            channel_size,
            out_channels,
        }
    }

    /// Groups per channel; a trailing partial group is zero-padded.
    pub fn groups_per_channel(&self) -> usize {
        self.channel_size.div_ceil(self.group_size)
    }

    pub fn padded_channel_size(&self) -> usize {
        self.groups_per_channel() * self.group_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(v: &[f64]) -> Vec<GridValue> {
        v.iter().map(|&x| GridValue::from_f64(x).unwrap()).collect()
    }

    #[test]
    fn table_values() {
        let fp3 = DataTypeSpec::new(DataType::Fp3Basic);
        assert_eq!(fp3.basic_values(), ints(&[-4., -2., -1., 0., 1., 2., 4.]));
        let fp4 = DataTypeSpec::new(DataType::Fp4Basic);
        assert_eq!(
            fp4.basic_values(),
            ints(&[-6., -4., -3., -2., -1.5, -1., -0.5, 0., 0.5, 1., 1.5, 2., 3., 4., 6.])
        );
        assert_eq!(
            DataTypeSpec::new(DataType::Fp3BitMod).special_values(),
            ints(&[3., -3., 6., -6.])
        );
        assert_eq!(
            DataTypeSpec::new(DataType::Fp4BitMod).special_values(),
            ints(&[5., -5., 8., -8.])
        );
        assert!(fp3.special_values().is_empty());
    }

    #[test]
    fn int_grids() {
        let i4 = DataTypeSpec::new(DataType::Int4Sym);
        assert_eq!(i4.basic_values().len(), 15);
        assert_eq!(grid_absmax(i4.basic_values()).unwrap(), GridValue::from_int(7));
        let a4 = DataTypeSpec::new(DataType::Int4Asym);
        assert_eq!(a4.basic_values().first(), Some(&GridValue::ZERO));
        assert_eq!(a4.basic_values().last(), Some(&GridValue::from_int(15)));
        assert_eq!(DataTypeSpec::new(DataType::Int8Sym).basic_values().len(), 255);
    }

    #[test]
    fn effective_grid_examples() {
        let fp3 = DataTypeSpec::new(DataType::Fp3BitMod);
        let idx6 = fp3
            .special_values()
            .iter()
            .position(|&v| v == GridValue::from_int(6))
            .unwrap();
        assert_eq!(
            effective_grid(&fp3, idx6 as u8).unwrap(),
            ints(&[-4., -2., -1., 0., 1., 2., 4., 6.])
        );
        assert_eq!(
            effective_grid(&DataTypeSpec::new(DataType::Fp3Basic), 0).unwrap(),
            ints(&[-4., -2., -1., 0., 1., 2., 4.])
        );
        let fp4 = DataTypeSpec::new(DataType::Fp4BitMod);
        let idx = fp4
            .special_values()
            .iter()
            .position(|&v| v == GridValue::from_int(-5))
            .unwrap();
        assert_eq!(
            effective_grid(&fp4, idx as u8).unwrap(),
            ints(&[-6., -5., -4., -3., -2., -1.5, -1., -0.5, 0., 0.5, 1., 1.5, 2., 3., 4., 6.])
        );
    }

    #[test]
    fn effective_grid_rejects_bad_index() {
        let fp3 = DataTypeSpec::new(DataType::Fp3BitMod);
        assert!(matches!(
            effective_grid(&fp3, 4),
            Err(DtypeError::InvalidSpecialValueIndex { index: 4, .. })
        ));
        assert!(effective_grid(&DataTypeSpec::new(DataType::Int6Sym), 1).is_err());
    }

    #[test]
    fn absmax_examples() {
        assert_eq!(grid_absmax(&[]), Err(DtypeError::EmptyGrid));
        let sym = ints(&[-4., -2., -1., 0., 1., 2., 4.]);
        assert_eq!(grid_absmax(&sym).unwrap(), GridValue::from_int(4));
        let fp3 = DataTypeSpec::new(DataType::Fp3BitMod);
        assert_eq!(
            grid_absmax(&effective_grid(&fp3, 2).unwrap()).unwrap(),
            GridValue::from_int(6)
        );
        let fp4 = DataTypeSpec::new(DataType::Fp4BitMod);
        assert_eq!(
            grid_absmax(&effective_grid(&fp4, 3).unwrap()).unwrap(),
            GridValue::from_int(8)
        );
    }

    #[test]
    fn special_value_never_collides() {
        for dt in [DataType::Fp3BitMod, DataType::Fp4BitMod] {
            let spec = DataTypeSpec::new(dt);
            let basic_max = grid_absmax(spec.basic_values()).unwrap();
            for i in 0..spec.special_values().len() {
                let g = effective_grid(&spec, i as u8).unwrap();
                assert_eq!(g.len(), spec.basic_values().len() + 1);
                assert!(g.windows(2).all(|w| w[0] < w[1]));
                let m = grid_absmax(&g).unwrap();
                if spec.special_values()[i].abs() < basic_max {
                    assert_eq!(m, basic_max);
                } else {
                    assert!(m > basic_max);
                }
            }
        }
    }

    #[test]
    fn fp_and_sym_grids_are_symmetric() {
        for dt in DataType::ALL {
            if dt.family() == Family::IntAsym {
                continue;
            }
            let spec = DataTypeSpec::new(dt);
            for v in spec.basic_values() {
                assert!(spec.basic_values().contains(&-*v), "{dt}: {v}");
            }
        }
    }

    #[test]
    fn term_budgets() {
        assert_eq!(DataTypeSpec::new(DataType::Int8Sym).terms_per_code(), 4);
        assert_eq!(DataTypeSpec::new(DataType::Int6Sym).terms_per_code(), 3);
        assert_eq!(DataTypeSpec::new(DataType::Fp4BitMod).terms_per_code(), 2);
        assert_eq!(DataTypeSpec::new(DataType::Fp3Basic).terms_per_code(), 2);
    }

    #[test]
    fn parse_names() {
        for dt in DataType::ALL {
            assert_eq!(dt.name().parse::<DataType>().unwrap(), dt);
            assert_eq!(DataType::from_id(dt.id()), Some(dt));
        }
        assert_eq!("fp3-bitmod".parse::<DataType>().unwrap(), DataType::Fp3BitMod);
        assert!("fp5".parse::<DataType>().is_err());
    }

    #[test]
    fn custom_special_values() {
        assert!(DataTypeSpec::with_special_values(DataType::Fp3BitMod, &[2.0]).is_err());
        assert!(DataTypeSpec::with_special_values(DataType::Fp3BitMod, &[3., 5., 6., 7., 8.]).is_err());
        let s = DataTypeSpec::with_special_values(DataType::Fp3BitMod, &[5.0, -5.0]).unwrap();
        assert_eq!(s.sv_choices(), 2);
    }
}
