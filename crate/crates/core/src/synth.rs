//! Seeded synthetic weight generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::quant::FloatTensor;

pub const DEFAULT_SEED: u64 = 0xB17_30D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDistribution {
    /// N(0, sigma^2)
    Gaussian { sigma: f64 },
    /// Laplace(0, b)
    Laplacian { b: f64 },
    /// N(0, sigma^2), with each element replaced by N(0, (scale*sigma)^2)
    /// with probability `p`.
    OutlierMixture { sigma: f64, p: f64, scale: f64 },
}

impl WeightDistribution {
    pub const GAUSSIAN: Self = Self::Gaussian { sigma: 1.0 };
    pub const LAPLACIAN: Self = Self::Laplacian { b: 1.0 };
    pub const OUTLIER_MIXTURE: Self = Self::OutlierMixture {
        sigma: 1.0,
        p: 0.02,
        scale: 8.0,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Laplacian { .. } => "laplacian",
            Self::OutlierMixture { .. } => "outlier_mixture",
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            Self::Laplacian { b } => {
                let u: f64 = rng.gen_range(-0.5..0.5);
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Self::OutlierMixture { sigma, p, scale } => {
                let z: f64 = rng.sample(StandardNormal);
                if rng.gen_bool(p) {
                    z * sigma * scale
                } else {
                    z * sigma
                }
            }
        }
    }
}

impl std::str::FromStr for WeightDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" | "normal" => Ok(Self::GAUSSIAN),
            "laplacian" | "laplace" => Ok(Self::LAPLACIAN),
            "outlier_mixture" | "outliers" | "mixture" => Ok(Self::OUTLIER_MIXTURE),
            _ => Err(format!("unknown distribution {s:?}")),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn group<R: Rng + ?Sized>(rng: &mut R, dist: &WeightDistribution, len: usize) -> Vec<f32> {
    (0..len).map(|_| dist.sample(rng) as f32).collect()
}

/// Standard-normal group with one element replaced by `±k` (sign chosen at
/// random). Returns the group and the outlier sign.
pub fn single_outlier_group<R: Rng + ?Sized>(rng: &mut R, len: usize, k: f64) -> (Vec<f32>, bool) {
    let mut g = group(rng, &WeightDistribution::GAUSSIAN, len);
    let negative = rng.gen_bool(0.5);
    let at = rng.gen_range(0..len);
    g[at] = if negative { -k } else { k } as f32;
    (g, negative)
}

pub fn tensor(rows: usize, cols: usize, dist: &WeightDistribution, seed: u64) -> FloatTensor {
    let mut r = rng(seed);
    FloatTensor::new(rows, cols, group(&mut r, dist, rows * cols)).expect("finite samples")
}
