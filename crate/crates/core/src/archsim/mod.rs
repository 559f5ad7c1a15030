//! Cycle and energy model of the accelerator: a grid of systolic tiles of
//! bit-serial PEs with output-stationary dataflow, double-buffered SRAM and
//! a bandwidth-limited DRAM, driven by LLM GEMM workloads.
//!
//! Each GEMM costs `max(compute, dram)` cycles: transfers fully overlap
//! compute, and group dequantization overlaps the next group's compute.

mod config;
mod report;
mod sim;
mod workload;

pub use config::{check_no_stall, validate_no_stall, ArchConfig, ConfigError, EnergyTable, StallWarning};
pub use report::{traffic_table, TrafficRow, CSV_COLUMNS};
pub use sim::{
    baseline_fp16_layer, baseline_fp16_sim, simulate_gemm, simulate_layer, simulate_phases, simulate_workload,
    EnergyBreakdown, Engine, Gemm, PhaseReports, SimError, SimReport,
};
pub use workload::{
    bundled, load_shape_file, profile_shapes, AttentionShape, Layer, ParseError, ShapeFileError, WorkloadSpec,
    LLAMA_2_7B_SHAPES, OPT_1_3B_SHAPES, TOY_SHAPES,
};
