use serde::Serialize;

use super::sim::{PhaseReports, SimReport};

pub const CSV_COLUMNS: [&str; 12] = [
    "workload",
    "dtype",
    "bits_per_weight",
    "compute_cycles",
    "dram_cycles",
    "total_cycles",
    "weight_bytes",
    "activation_bytes",
    "energy_compute_J",
    "energy_sram_J",
    "energy_dram_J",
    "speedup_vs_baseline",
];

impl SimReport {
    /// Fields in [`CSV_COLUMNS`] order.
    pub fn csv_row(&self) -> [String; 12] {
        [
            self.workload.clone(),
            self.dtype.clone(),
            format!("{:.6}", self.bits_per_weight),
            self.compute_cycles.to_string(),
            format!("{:.1}", self.dram_cycles),
            format!("{:.1}", self.total_cycles),
            format!("{:.1}", self.weight_bytes),
            format!("{:.1}", self.activation_bytes),
            format!("{:.6e}", self.energy.compute),
            format!("{:.6e}", self.energy.sram),
            format!("{:.6e}", self.energy.dram),
            self.speedup_vs_baseline.map_or(String::new(), |s| format!("{s:.4}")),
        ]
    }
}

/// Weight versus activation DRAM traffic of one phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficRow {
    pub phase: String,
    pub dtype: String,
    pub weight_bytes: f64,
    pub activation_bytes: f64,
    pub weight_to_activation: f64,
}

pub fn traffic_table(p: &PhaseReports) -> Vec<TrafficRow> {
    [("prefill", &p.prefill), ("decode", &p.decode), ("total", &p.total())]
        .into_iter()
        .map(|(phase, r)| TrafficRow {
            phase: phase.into(),
            dtype: r.dtype.clone(),
            weight_bytes: r.weight_bytes,
            activation_bytes: r.activation_bytes,
            weight_to_activation: if r.activation_bytes > 0.0 {
                r.weight_bytes / r.activation_bytes
            } else {
                f64::INFINITY
            },
        })
        .collect()
}
