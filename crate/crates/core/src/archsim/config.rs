use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtype::DataTypeSpec;
use crate::pe::DEQUANT_CYCLES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be positive (got {value})")]
    NonPositive { field: &'static str, value: f64 },
}

/// Per-event energies in joules. The defaults are placeholders for relative
/// comparisons under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyTable {
    pub note: String,
    /// Bit-serial PE, per PE per cycle.
    pub e_pe_cycle: f64,
    /// FP16 MAC PE of the baseline, per PE per cycle.
    pub e_pe_cycle_fp16: f64,
    pub e_sram_byte: f64,
    pub e_dram_byte: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            note: "placeholder values, not paper data".into(),
            e_pe_cycle: 0.5e-12,
            e_pe_cycle_fp16: 1.0e-12,
            e_sram_byte: 5.0e-12,
            e_dram_byte: 160.0e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub pe_rows: u32,
    pub pe_cols: u32,
    pub dot_width: u32,
    /// Hz
    pub frequency: f64,
    pub act_buffer_bytes: u64,
    pub weight_buffer_bytes: u64,
    /// bytes/s
    pub dram_bandwidth: f64,
    /// PE array of one tile of the FP16 baseline.
    pub baseline_pe_rows: u32,
    pub baseline_pe_cols: u32,
    pub energy: EnergyTable,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            tiles_x: 4,
            tiles_y: 4,
            pe_rows: 8,
            pe_cols: 8,
            dot_width: 4,
            frequency: 1.0e9,
            act_buffer_bytes: 512 * 1024,
            weight_buffer_bytes: 512 * 1024,
            dram_bandwidth: 25.6e9,
            baseline_pe_rows: 6,
            baseline_pe_cols: 8,
            energy: EnergyTable::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ints = [
            ("tiles_x", self.tiles_x as f64),
            ("tiles_y", self.tiles_y as f64),
            ("pe_rows", self.pe_rows as f64),
            ("pe_cols", self.pe_cols as f64),
            ("dot_width", self.dot_width as f64),
            ("act_buffer_bytes", self.act_buffer_bytes as f64),
            ("weight_buffer_bytes", self.weight_buffer_bytes as f64),
            ("baseline_pe_rows", self.baseline_pe_rows as f64),
            ("baseline_pe_cols", self.baseline_pe_cols as f64),
            ("frequency", self.frequency),
            ("dram_bandwidth", self.dram_bandwidth),
        ];
        for (field, value) in ints {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        let e = &self.energy;
        for (field, value) in [
            ("e_pe_cycle", e.e_pe_cycle),
            ("e_pe_cycle_fp16", e.e_pe_cycle_fp16),
            ("e_sram_byte", e.e_sram_byte),
            ("e_dram_byte", e.e_dram_byte),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        Ok(())
    }

    pub fn pes(&self) -> u64 {
        (self.tiles_x * self.tiles_y * self.pe_rows * self.pe_cols) as u64
    }

    pub fn baseline_pes(&self) -> u64 {
        (self.tiles_x * self.tiles_y * self.baseline_pe_rows * self.baseline_pe_cols) as u64
    }

    /// DRAM bytes transferred per clock cycle.
    pub fn bytes_per_cycle(&self) -> f64 {
        self.dram_bandwidth / self.frequency
    }
}

/// Raised when dequantization of a group cannot hide behind its compute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StallWarning {
    pub dtype: String,
    pub group_size: usize,
    pub compute_cycles: u64,
    pub dequant_cycles: u64,
}

impl std::fmt::Display for StallWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} with G={}: group compute takes {} cycles, fewer than the {}-cycle dequantization",
            self.dtype, self.group_size, self.compute_cycles, self.dequant_cycles
        )
    }
}

pub fn check_no_stall(spec: &DataTypeSpec, group_size: usize, cfg: &ArchConfig) -> Option<StallWarning> {
    let compute = (group_size as u64 / cfg.dot_width as u64) * spec.terms_per_code() as u64;
    (compute < DEQUANT_CYCLES).then(|| StallWarning {
        dtype: spec.name().to_string(),
        group_size,
        compute_cycles: compute,
        dequant_cycles: DEQUANT_CYCLES,
    })
}

/// Checks every (data type, group size) pair.
pub fn validate_no_stall(specs: &[DataTypeSpec], group_sizes: &[usize], cfg: &ArchConfig) -> Vec<StallWarning> {
    specs
        .iter()
        .flat_map(|s| group_sizes.iter().filter_map(move |&g| check_no_stall(s, g, cfg)))
        .collect()
}
