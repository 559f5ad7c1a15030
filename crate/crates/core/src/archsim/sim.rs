use std::ops::Add;

use serde::Serialize;
use thiserror::Error;

use super::config::{ArchConfig, ConfigError};
use super::workload::{AttentionShape, WorkloadSpec};
use crate::dtype::{DataType, DataTypeSpec, GroupingConfig};
use crate::quant::memory_footprint_bits;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("group size {group_size} is not a multiple of the dot width {dot_width}")]
    GroupSize { group_size: usize, dot_width: u32 },
}

/// `(M x K) * (K x N)`, executed `repeat` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gemm {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub repeat: u64,
}

impl Gemm {
    pub fn new(m: u64, k: u64, n: u64) -> Self {
        Gemm { m, k, n, repeat: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyBreakdown {
    pub compute: f64,
    pub sram: f64,
    pub dram: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(compute: f64, sram: f64, dram: f64) -> Self {
        EnergyBreakdown {
            compute,
            sram,
            dram,
            total: compute + sram + dram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub workload: String,
    pub dtype: String,
    pub bits_per_weight: f64,
    pub compute_cycles: u64,
    pub dram_cycles: f64,
    pub total_cycles: f64,
    pub weight_bytes: f64,
    pub activation_bytes: f64,
    pub energy: EnergyBreakdown,
    pub baseline: Option<String>,
    pub speedup_vs_baseline: Option<f64>,
}

impl SimReport {
    fn empty(workload: &str, dtype: &str, bits_per_weight: f64) -> Self {
        SimReport {
            workload: workload.into(),
            dtype: dtype.into(),
            bits_per_weight,
            compute_cycles: 0,
            dram_cycles: 0.0,
            total_cycles: 0.0,
            weight_bytes: 0.0,
            activation_bytes: 0.0,
            energy: EnergyBreakdown::default(),
            baseline: None,
            speedup_vs_baseline: None,
        }
    }

    /// Records the speedup of this run over `baseline`.
    pub fn with_speedup(mut self, baseline: &SimReport) -> Self {
        self.baseline = Some(baseline.dtype.clone());
        self.speedup_vs_baseline = Some(if self.total_cycles > 0.0 {
            baseline.total_cycles / self.total_cycles
        } else {
            1.0
        });
        self
    }

    pub fn seconds(&self, cfg: &ArchConfig) -> f64 {
        self.total_cycles / cfg.frequency
    }
}

impl Add for SimReport {
    type Output = SimReport;

    fn add(self, o: SimReport) -> SimReport {
        SimReport {
            compute_cycles: self.compute_cycles + o.compute_cycles,
            dram_cycles: self.dram_cycles + o.dram_cycles,
            total_cycles: self.total_cycles + o.total_cycles,
            weight_bytes: self.weight_bytes + o.weight_bytes,
            activation_bytes: self.activation_bytes + o.activation_bytes,
            energy: EnergyBreakdown::new(
                self.energy.compute + o.energy.compute,
                self.energy.sram + o.energy.sram,
                self.energy.dram + o.energy.dram,
            ),
            baseline: None,
            speedup_vs_baseline: None,
            ..self
        }
    }
}

/// The PE design being simulated.
#[derive(Debug, Clone, Copy)]
pub enum Engine<'a> {
    /// Bit-serial PEs running the given weight data type.
    BitSerial { spec: &'a DataTypeSpec, group_size: usize },
    /// FP16 MAC PEs, one multiply-accumulate per PE per cycle.
    Fp16,
}

impl Engine<'_> {
    pub fn name(&self) -> &str {
        match self {
            Engine::BitSerial { spec, .. } => spec.name(),
            Engine::Fp16 => "FP16",
        }
    }

    fn bits_per_weight(&self, k: u64) -> f64 {
        match self {
            Engine::BitSerial { spec, group_size } => {
                let r = memory_footprint_bits(spec, &GroupingConfig::new(*group_size, k.max(1) as usize, 1));
                *r.numer() as f64 / *r.denom() as f64
            }
            Engine::Fp16 => 16.0,
        }
    }

    fn array(&self, cfg: &ArchConfig) -> (u64, u64) {
        match self {
            Engine::BitSerial { .. } => ((cfg.tiles_y * cfg.pe_rows) as u64, (cfg.tiles_x * cfg.pe_cols) as u64),
            Engine::Fp16 => (
                (cfg.tiles_y * cfg.baseline_pe_rows) as u64,
                (cfg.tiles_x * cfg.baseline_pe_cols) as u64,
            ),
        }
    }

    fn pe_energy(&self, cfg: &ArchConfig) -> f64 {
        match self {
            Engine::BitSerial { .. } => cfg.energy.e_pe_cycle * cfg.pes() as f64,
            Engine::Fp16 => cfg.energy.e_pe_cycle_fp16 * cfg.baseline_pes() as f64,
        }
    }

    /// Cycles one output tile spends reducing over `k` with weights of
    /// `terms` bit-serial terms.
    fn reduce_cycles(&self, k: u64, terms: u64, cfg: &ArchConfig) -> u64 {
        match self {
            Engine::BitSerial { .. } => k.div_ceil(cfg.dot_width as u64) * terms,
            Engine::Fp16 => k,
        }
    }

    fn check(&self, cfg: &ArchConfig) -> Result<(), SimError> {
        cfg.validate()?;
        if let Engine::BitSerial { group_size, .. } = self {
            if *group_size == 0 || *group_size % cfg.dot_width as usize != 0 {
                return Err(SimError::GroupSize {
                    group_size: *group_size,
                    dot_width: cfg.dot_width,
                });
            }
        }
        Ok(())
    }
}

/// Cost of one execution of a GEMM.
#[derive(Debug, Clone, Copy, Default)]
struct Cost {
    compute: u64,
    weight_bytes: f64,
    act_bytes: f64,
}

fn weight_gemm_cost(engine: &Engine<'_>, m: u64, k: u64, n: u64, cfg: &ArchConfig) -> Cost {
    let (rows, cols) = engine.array(cfg);
    let tiles = m.div_ceil(rows) * n.div_ceil(cols);
    let (compute, k_stored) = match engine {
        Engine::BitSerial { spec, group_size } => {
            let g = *group_size as u64;
            let groups = k.div_ceil(g);
            let per_group = (g / cfg.dot_width as u64) * spec.terms_per_code() as u64;
            (tiles * groups * per_group, groups * g)
        }
        Engine::Fp16 => (tiles * engine.reduce_cycles(k, 1, cfg), k),
    };
    Cost {
        compute,
        weight_bytes: (k_stored * n) as f64 * engine.bits_per_weight(k) / 8.0,
        act_bytes: ((m * k + m * n) * 2) as f64,
    }
}

/// Score and context GEMMs of all blocks for `m` queries over a context of
/// `ctx` tokens. Both operands and the output count as activation traffic;
/// on the bit-serial array the cached operand streams as INT8 terms.
fn attention_cost(engine: &Engine<'_>, m: u64, ctx: u64, a: &AttentionShape, cfg: &ArchConfig) -> Cost {
    let (rows, cols) = engine.array(cfg);
    let terms = DataTypeSpec::new(DataType::Int8Sym).terms_per_code() as u64;
    let mt = m.div_ceil(rows);
    let score = mt * ctx.div_ceil(cols) * engine.reduce_cycles(a.head_dim, terms, cfg);
    let context = mt * a.head_dim.div_ceil(cols) * engine.reduce_cycles(ctx, terms, cfg);
    let q_or_out = a.heads * m * a.head_dim;
    let kv = a.kv_heads * a.head_dim * ctx;
    let probs = a.heads * m * ctx;
    Cost {
        compute: a.blocks * a.heads * (score + context),
        weight_bytes: 0.0,
        act_bytes: (a.blocks * 2 * 2 * (q_or_out + kv + probs)) as f64,
    }
}

#[derive(Debug)]
struct Tally<'c> {
    cfg: &'c ArchConfig,
    pe_energy: f64,
    r: SimReport,
}

impl Tally<'_> {
    fn add(&mut self, c: Cost, times: u64) {
        if times == 0 {
            return;
        }
        let t = times as f64;
        let bytes = c.weight_bytes + c.act_bytes;
        let dram = bytes / self.cfg.bytes_per_cycle();
        let r = &mut self.r;
        r.compute_cycles += c.compute * times;
        r.dram_cycles += dram * t;
        r.total_cycles += (c.compute as f64).max(dram) * t;
        r.weight_bytes += c.weight_bytes * t;
        r.activation_bytes += c.act_bytes * t;
        r.energy = EnergyBreakdown::new(
            r.energy.compute + self.pe_energy * (c.compute * times) as f64,
            r.energy.sram + self.cfg.energy.e_sram_byte * 2.0 * bytes * t,
            r.energy.dram + self.cfg.energy.e_dram_byte * bytes * t,
        );
    }
}

fn tally<'c>(engine: &Engine<'_>, workload: &str, bpw: f64, cfg: &'c ArchConfig) -> Tally<'c> {
    Tally {
        cfg,
        pe_energy: engine.pe_energy(cfg),
        r: SimReport::empty(workload, engine.name(), bpw),
    }
}

/// Simulates one GEMM on the given engine.
pub fn simulate_gemm(gemm: &Gemm, engine: &Engine<'_>, cfg: &ArchConfig) -> Result<SimReport, SimError> {
    engine.check(cfg)?;
    for (field, v) in [("M", gemm.m), ("K", gemm.k), ("N", gemm.n)] {
        if v == 0 {
            return Err(ConfigError::NonPositive { field, value: 0.0 }.into());
        }
    }
    let mut t = tally(engine, "gemm", engine.bits_per_weight(gemm.k), cfg);
    t.add(weight_gemm_cost(engine, gemm.m, gemm.k, gemm.n, cfg), gemm.repeat);
    Ok(t.r)
}

/// One weight GEMM on the bit-serial accelerator.
pub fn simulate_layer(
    gemm: &Gemm,
    spec: &DataTypeSpec,
    group_size: usize,
    cfg: &ArchConfig,
) -> Result<SimReport, SimError> {
    simulate_gemm(gemm, &Engine::BitSerial { spec, group_size }, cfg)
}

/// One weight GEMM on the FP16 baseline.
pub fn baseline_fp16_layer(gemm: &Gemm, cfg: &ArchConfig) -> Result<SimReport, SimError> {
    simulate_gemm(gemm, &Engine::Fp16, cfg)
}

/// Prefill and decode reports of a workload.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReports {
    pub prefill: SimReport,
    pub decode: SimReport,
}

impl PhaseReports {
    pub fn total(&self) -> SimReport {
        self.prefill.clone() + self.decode.clone()
    }
}

/// Prefill runs once with `M = prefill_tokens`; each decode step runs with
/// `M = 1`, fetching every weight again, over a context that grows by one
/// token per step.
pub fn simulate_phases(w: &WorkloadSpec, engine: &Engine<'_>, cfg: &ArchConfig) -> Result<PhaseReports, SimError> {
    engine.check(cfg)?;
    let bpw = engine.bits_per_weight(w.layers.first().map_or(1, |l| l.k));
    let m_prefill = w.prefill_tokens * w.batch;
    let mut prefill = tally(engine, &w.name, bpw, cfg);
    let mut decode = tally(engine, &w.name, bpw, cfg);
    for l in &w.layers {
        if l.k == 0 || l.n == 0 {
            return Err(ConfigError::NonPositive {
                field: "layer dimension",
                value: 0.0,
            }
            .into());
        }
        if m_prefill > 0 {
            prefill.add(weight_gemm_cost(engine, m_prefill, l.k, l.n, cfg), l.repeat);
        }
        decode.add(
            weight_gemm_cost(engine, w.batch, l.k, l.n, cfg),
            l.repeat * w.decode_tokens,
        );
    }
    if let Some(a) = &w.attention {
        if m_prefill > 0 {
            prefill.add(attention_cost(engine, m_prefill, w.prefill_tokens, a, cfg), 1);
        }
        for step in 0..w.decode_tokens {
            decode.add(attention_cost(engine, w.batch, w.prefill_tokens + step + 1, a, cfg), 1);
        }
    }
    Ok(PhaseReports {
        prefill: prefill.r,
        decode: decode.r,
    })
}

pub fn simulate_workload(
    w: &WorkloadSpec,
    spec: &DataTypeSpec,
    group_size: usize,
    cfg: &ArchConfig,
) -> Result<SimReport, SimError> {
    Ok(simulate_phases(w, &Engine::BitSerial { spec, group_size }, cfg)?.total())
}

pub fn baseline_fp16_sim(w: &WorkloadSpec, cfg: &ArchConfig) -> Result<SimReport, SimError> {
    Ok(simulate_phases(w, &Engine::Fp16, cfg)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archsim::workload::{profile_shapes, TOY_SHAPES};

    fn iso_pe() -> ArchConfig {
        ArchConfig {
            baseline_pe_rows: 8,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn bandwidth_bound_ratio_matches_footprint() {
        let cfg = ArchConfig {
            dram_bandwidth: 12.8e9,
            ..ArchConfig::default()
        };
        let g = Gemm::new(1, 4096, 4096);
        let fp3 = simulate_layer(&g, &DataTypeSpec::new(DataType::Fp3BitMod), 128, &cfg).unwrap();
        let base = baseline_fp16_layer(&g, &cfg).unwrap();
        assert!(fp3.dram_cycles > fp3.compute_cycles as f64);
        assert!(base.dram_cycles > base.compute_cycles as f64);
        let want = 16.0 / (3.0 + 10.0 / 128.0);
        assert!((base.weight_bytes / fp3.weight_bytes - want).abs() < 1e-12);
        // activation bytes are shared, so the cycle ratio approaches the
        // weight ratio from below
        let r = base.total_cycles / fp3.total_cycles;
        assert!(r < want && r > want * 0.99, "{r}");
    }

    #[test]
    fn compute_bound_fp4_is_twice_fp16() {
        let cfg = iso_pe();
        let g = Gemm::new(256, 4096, 4096);
        let fp4 = simulate_layer(&g, &DataTypeSpec::new(DataType::Fp4BitMod), 128, &cfg).unwrap();
        let base = baseline_fp16_layer(&g, &cfg).unwrap();
        assert_eq!(base.compute_cycles, 2 * fp4.compute_cycles);
    }

    #[test]
    fn zero_repeat_is_empty() {
        let cfg = ArchConfig::default();
        let g = Gemm {
            repeat: 0,
            ..Gemm::new(4, 64, 64)
        };
        let r = simulate_layer(&g, &DataTypeSpec::new(DataType::Int8Sym), 64, &cfg).unwrap();
        assert_eq!(r.compute_cycles, 0);
        assert_eq!((r.total_cycles, r.weight_bytes, r.energy.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let cfg = ArchConfig::default();
        let spec = DataTypeSpec::new(DataType::Int8Sym);
        assert!(simulate_layer(&Gemm::new(0, 64, 64), &spec, 64, &cfg).is_err());
        assert!(simulate_layer(&Gemm::new(1, 64, 64), &spec, 6, &cfg).is_err());
        let bad = ArchConfig {
            dram_bandwidth: 0.0,
            ..ArchConfig::default()
        };
        assert!(simulate_layer(&Gemm::new(1, 64, 64), &spec, 64, &bad).is_err());
    }

    #[test]
    fn fp16_vs_itself() {
        let cfg = ArchConfig::default();
        let w = profile_shapes(TOY_SHAPES).unwrap();
        let b = baseline_fp16_sim(&w, &cfg).unwrap();
        assert_eq!(b.clone().with_speedup(&b).speedup_vs_baseline, Some(1.0));
    }

    #[test]
    fn energy_components_sum() {
        let cfg = ArchConfig::default();
        let w = profile_shapes(TOY_SHAPES).unwrap();
        let r = simulate_workload(&w, &DataTypeSpec::new(DataType::Fp4BitMod), 64, &cfg).unwrap();
        let e = r.energy;
        assert_eq!(e.compute + e.sram + e.dram, e.total);
    }
}
