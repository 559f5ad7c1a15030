//! Straight-line reference model of the PE datapath, written from the
//! arithmetic rules rather than from the crate's implementation: exact
//! big-integer values instead of a normalized accumulator window, and
//! weights decomposed into signed powers of two directly from their
//! numeric value.
#![allow(dead_code)]

use bitmod::dtype::{effective_grid, DataType, DataTypeSpec, Family};
use bitmod::quant::QuantizedGroup;
use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;

/// `n * 2^e`
#[derive(Debug, Clone, PartialEq)]
pub struct Exact {
    pub n: BigInt,
    pub e: i64,
}

impl Exact {
    pub fn zero() -> Self {
        Exact {
            n: BigInt::zero(),
            e: 0,
        }
    }

    pub fn from_parts(n: i64, e: i64) -> Self {
        Exact { n: BigInt::from(n), e }
    }

    pub fn add(&self, o: &Exact) -> Exact {
        if self.n.is_zero() {
            return o.clone();
        }
        if o.n.is_zero() {
            return self.clone();
        }
        let e = self.e.min(o.e);
        Exact {
            n: (&self.n << (self.e - e) as usize) + (&o.n << (o.e - e) as usize),
            e,
        }
    }

    /// Rounds to `bits` significant bits, ties to even.
    pub fn round_sig(&self, bits: u64) -> Exact {
        let len = self.n.bits();
        if len <= bits {
            return self.clone();
        }
        let k = len - bits;
        let mag = self.n.abs();
        let mut q: BigInt = &mag >> k as usize;
        let rem = &mag - (&q << k as usize);
        let half = BigInt::one() << (k - 1) as usize;
        let odd = (&q & BigInt::one()) == BigInt::one();
        if rem > half || (rem == half && odd) {
            q += 1;
        }
        Exact {
            n: if self.n.is_negative() { -q } else { q },
            e: self.e + k as i64,
        }
    }

    pub fn to_f64(&self) -> f64 {
        let r = self.round_sig(53);
        r.n.to_f64().unwrap() * 2f64.powi(r.e as i32)
    }

    pub fn same_value(&self, n: i64, e: i32) -> bool {
        let other = Exact::from_parts(n, e as i64);
        if self.n.is_zero() || other.n.is_zero() {
            return self.n.is_zero() && other.n.is_zero();
        }
        let d = self.add(&Exact {
            n: -other.n,
            e: other.e,
        });
        d.n.is_zero()
    }
}

/// FP16 bits as (negative, biased exponent, mantissa with hidden bit).
/// Subnormals read as zero.
pub fn f16_fields(bits: u16) -> (bool, i64, i64) {
    let exp = ((bits >> 10) & 31) as i64;
    if exp == 0 {
        return (bits >> 15 == 1, 0, 0);
    }
    (bits >> 15 == 1, exp, ((bits & 1023) | 1024) as i64)
}

/// One weight as its per-cycle signed powers of two: slot `i` holds
/// `Some((negative, k))` for a term of value `±2^k`.
pub type Slots = Vec<Option<(bool, i64)>>;

fn booth_width(dtype: DataType) -> u32 {
    match dtype.family() {
        Family::IntAsym => (dtype.bits() + 1).next_multiple_of(2),
        _ => dtype.bits(),
    }
}

/// Radix-4 digits `b[2i-1] + b[2i] - 2 b[2i+1]` of a two's-complement value.
pub fn booth_slots(v: i64, width: u32) -> Slots {
    let bit = |j: i64| if j < 0 { 0 } else { (v >> j) & 1 };
    (0..width as i64 / 2)
        .map(|i| {
            let d = bit(2 * i - 1) + bit(2 * i) - 2 * bit(2 * i + 1);
            (d != 0).then(|| (d < 0, 2 * i + i64::from(d.abs() == 2)))
        })
        .collect()
}

/// Highest set bit of an integer number of halves, then the highest of the
/// remaining bits below bit 4.
pub fn fp_slots(halves: i64) -> Slots {
    let neg = halves < 0;
    let mut mag = halves.abs();
    let top = |m: i64, hi: u32, lo: u32| (lo..=hi).rev().find(|&b| (m >> b) & 1 == 1);
    let first = top(mag, 4, 1);
    if let Some(b) = first {
        mag &= !(1 << b);
    }
    let second = top(mag, 3, 0);
    if let Some(b) = second {
        mag &= !(1 << b);
    }
    assert_eq!(mag, 0, "level {halves} needs more than two terms");
    vec![first.map(|b| (neg, b as i64 - 1)), second.map(|b| (neg, b as i64 - 1))]
}

/// Level of a code: an integer for INT types, halves for FP types.
pub fn weight_slots(spec: &DataTypeSpec, g: &QuantizedGroup, code: i32) -> Slots {
    match spec.dtype.family() {
        Family::IntSym => booth_slots(code as i64, booth_width(spec.dtype)),
        Family::IntAsym => booth_slots((code - g.zero_point.unwrap()) as i64, booth_width(spec.dtype)),
        Family::FpBasic | Family::FpBitMod => {
            let grid = effective_grid(spec, g.sv_index).unwrap();
            fp_slots(grid[code as usize].halves() as i64)
        }
    }
}

/// Real level of a code (unscaled).
pub fn level(spec: &DataTypeSpec, g: &QuantizedGroup, code: i32) -> f64 {
    match spec.dtype.family() {
        Family::IntSym => code as f64,
        Family::IntAsym => (code - g.zero_point.unwrap()) as f64,
        _ => effective_grid(spec, g.sv_index).unwrap()[code as usize].to_f64(),
    }
}

/// Aligned lane magnitude: keep 3 bits below the LSB, drop the rest, then
/// round those 3 bits to nearest even.
fn lane(m: i64, delta: i64) -> i64 {
    let kept = (m as f64 * 2f64.powi(3 - delta as i32)).floor();
    (kept / 8.0).round_ties_even() as i64
}

/// Group partial sum after dequantization, as an exact value.
#[allow(clippy::needless_range_loop)]
pub fn oracle_group(spec: &DataTypeSpec, g: &QuantizedGroup, acts: &[u16]) -> Exact {
    let slots: Vec<Slots> = g.codes.iter().map(|&c| weight_slots(spec, g, c)).collect();
    let nslots = slots[0].len();
    let mut acc = Exact::zero();
    for b in 0..g.codes.len() / 4 {
        for s in 0..nslots {
            let mut lanes = Vec::new();
            for l in 0..4 {
                let (an, ae, am) = f16_fields(acts[4 * b + l]);
                if let Some((wn, k)) = slots[4 * b + l][s] {
                    if am != 0 {
                        lanes.push((an ^ wn, ae + k, am));
                    }
                }
            }
            let Some(max_e) = lanes.iter().map(|l| l.1).max() else {
                continue;
            };
            let sum: i64 = lanes
                .iter()
                .map(|&(neg, e, m)| {
                    let v = lane(m, max_e - e);
                    if neg {
                        -v
                    } else {
                        v
                    }
                })
                .sum();
            acc = acc.add(&Exact::from_parts(sum, max_e - 25)).round_sig(32);
        }
    }
    Exact {
        n: acc.n * BigInt::from(g.scale_q as i64),
        e: acc.e,
    }
}

/// Channel output: exact sum of the partials, to `f64`, scaled, to `f32`.
pub fn oracle_drain(partials: &[Exact], channel_scale: f32) -> f32 {
    let total = partials.iter().fold(Exact::zero(), |a, p| a.add(p));
    (total.to_f64() * channel_scale as f64) as f32
}

/// A random but valid group of `g` codes.
pub fn random_group<R: Rng>(rng: &mut R, spec: &DataTypeSpec, g: usize) -> QuantizedGroup {
    let bits = spec.bits_per_code();
    let (codes, sv_index, zero_point) = match spec.dtype.family() {
        Family::IntSym => {
            let q = (1 << (bits - 1)) - 1;
            ((0..g).map(|_| rng.gen_range(-q..=q)).collect(), 0, None)
        }
        Family::IntAsym => {
            let top = (1 << bits) - 1;
            let z = rng.gen_range(0..=top);
            ((0..g).map(|_| rng.gen_range(0..=top)).collect(), 0, Some(z))
        }
        Family::FpBasic | Family::FpBitMod => {
            let sv = rng.gen_range(0..spec.sv_choices()) as u8;
            let n = effective_grid(spec, sv).unwrap().len() as i32;
            ((0..g).map(|_| rng.gen_range(0..n)).collect(), sv, None)
        }
    };
    QuantizedGroup {
        codes,
        sv_index,
        scale_q: rng.gen_range(0..=127),
        zero_point,
    }
}

/// FP16 activation uniformly drawn from `[-8, 8]`, with occasional zeros.
pub fn random_act_bounded<R: Rng>(rng: &mut R) -> u16 {
    if rng.gen_bool(0.05) {
        return 0;
    }
    half::f16::from_f32(rng.gen_range(-8.0f32..8.0)).to_bits()
}

/// FP16 activation with a random normal exponent over the whole range.
pub fn random_act_wide<R: Rng>(rng: &mut R) -> u16 {
    match rng.gen_range(0..20) {
        0 => 0,
        1 => rng.gen_range(1..1024),
        _ => {
            let sign = rng.gen_range(0..2u16) << 15;
            let exp = rng.gen_range(1..31u16) << 10;
            sign | exp | rng.gen_range(0..1024u16)
        }
    }
}
