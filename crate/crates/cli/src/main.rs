mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bitmod::archsim::{
    bundled, check_no_stall, load_shape_file, profile_shapes, simulate_phases, traffic_table, ArchConfig, Engine,
    SimReport, TrafficRow, WorkloadSpec, CSV_COLUMNS,
};
use bitmod::bitserial::{booth_encode, terms_value_halves, SpecialValueRegister, WeightEncoder};
use bitmod::dtype::{effective_grid, DataType, DataTypeSpec, Family, GridValue};
use bitmod::npy::{read_npy_file, write_npy_file};
use bitmod::pack::{pack, unpack};
use bitmod::quant::{memory_footprint_bits, quantize_tensor, tensor_error, FloatTensor, QuantizedGroup};
use bitmod::synth::{self, WeightDistribution};
use clap::{Args, Parser, Subcommand};
use config::{
    open_out, write_csv, write_csv_rows, write_json, FileConfig, Format, RunConfig, SynthConfig, TokenConfig,
};
use serde::Serialize;

/// BitMoD quantization, bit-serial decoding and accelerator simulation.
#[derive(Parser)]
#[command(name = "bitmod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize tensors with each data type and report the error.
    QuantEval(QuantEvalArgs),
    /// Check bit-serial reconstruction of every code exhaustively.
    BitserialCheck(BitserialArgs),
    /// Simulate a workload on the bit-serial accelerator and the FP16 baseline.
    Simulate(SimulateArgs),
    /// Quantize an NPY tensor and write a packed .bmod file.
    Pack(PackArgs),
    /// Read a packed .bmod file and write the dequantized tensor as NPY.
    Unpack(UnpackArgs),
    /// Write a synthetic weight tensor as NPY.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with default options (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (stdout if omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct QuantEvalArgs {
    /// NPY tensors (2-D, float32 or float16).
    files: Vec<PathBuf>,
    /// Comma-separated data types (default: all).
    #[arg(long, value_delimiter = ',')]
    dtype: Option<Vec<DataType>>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add a synthetic tensor: gaussian, laplacian or outlier-mixture.
    #[arg(long)]
    synth: Vec<WeightDistribution>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BitserialArgs {
    /// Comma-separated data types (default: INT8_SYM,INT6_SYM,FP4_BITMOD,FP3_BITMOD).
    #[arg(long, value_delimiter = ',')]
    dtype: Option<Vec<String>>,
    /// Four comma-separated values to program into the special-value
    /// register of BitMoD types.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    sv_reg: Option<Vec<f64>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Shape file path or bundled name (toy, opt-1.3b, llama-2-7b).
    shapes: String,
    /// Comma-separated data types (default: INT8_SYM,INT6_SYM,FP4_BITMOD,FP3_BITMOD).
    #[arg(long, value_delimiter = ',')]
    dtype: Option<Vec<DataType>>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    prefill_tokens: Option<u64>,
    #[arg(long)]
    decode_tokens: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PackArgs {
    input: PathBuf,
    #[arg(long)]
    dtype: Option<DataType>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct UnpackArgs {
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "gaussian")]
    dist: WeightDistribution,
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 1024)]
    cols: usize,
    #[arg(long, default_value_t = synth::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

const DEFAULT_GROUP_SIZE: usize = 128;
const DEFAULT_ROWS: usize = 256;
const DEFAULT_COLS: usize = 1024;
const CORE_TYPES: [DataType; 4] = [
    DataType::Int8Sym,
    DataType::Int6Sym,
    DataType::Fp4BitMod,
    DataType::Fp3BitMod,
];

/// Bad invocation detected after argument parsing; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::QuantEval(a) => quant_eval(a),
        Command::BitserialCheck(a) => bitserial_check(a),
        Command::Simulate(a) => simulate(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Unpack(a) => cmd_unpack(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn resolve_dtypes(
    flag: Option<Vec<DataType>>,
    file: Option<Vec<DataType>>,
    default: &[DataType],
) -> Result<Vec<DataType>> {
    let d = flag.or(file).unwrap_or_else(|| default.to_vec());
    if d.is_empty() {
        return Err(usage("empty data type list"));
    }
    Ok(d)
}

fn check_group_size(g: usize) -> Result<usize> {
    if g == 0 {
        return Err(usage("group size must be positive"));
    }
    Ok(g)
}

fn ratio_f64(r: num_rational::Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Serialize)]
struct EvalRow {
    tensor: String,
    dtype: DataType,
    rows: usize,
    cols: usize,
    group_size: usize,
    mse: f64,
    normalized_error: f64,
    max_abs_error: f64,
    bits_per_weight: f64,
    sv_hist0: u64,
    sv_hist1: u64,
    sv_hist2: u64,
    sv_hist3: u64,
}

#[derive(Serialize)]
struct InputError {
    input: String,
    error: String,
}

fn eval_tensor(name: &str, t: &FloatTensor, dtypes: &[DataType], g: usize) -> Result<Vec<EvalRow>> {
    dtypes
        .iter()
        .map(|&dtype| {
            let spec = DataTypeSpec::new(dtype);
            let q = quantize_tensor(t, &spec, g)?;
            let dq = q.dequantize()?;
            let e = tensor_error(t, &dq, g)?;
            let [h0, h1, h2, h3] = if dtype.is_bitmod() { q.sv_histogram() } else { [0; 4] };
            Ok(EvalRow {
                tensor: name.to_string(),
                dtype,
                rows: t.rows(),
                cols: t.cols(),
                group_size: g,
                mse: e.mse,
                normalized_error: e.normalized_error,
                max_abs_error: e.max_abs_error,
                bits_per_weight: ratio_f64(memory_footprint_bits(&spec, &q.grouping)),
                sv_hist0: h0,
                sv_hist1: h1,
                sv_hist2: h2,
                sv_hist3: h3,
            })
        })
        .collect()
}

fn quant_eval(a: QuantEvalArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let dtypes = resolve_dtypes(a.dtype, file.dtype, &DataType::ALL)?;
    let g = check_group_size(a.group_size.or(file.group_size).unwrap_or(DEFAULT_GROUP_SIZE))?;
    let seed = a.seed.or(file.seed).unwrap_or(synth::DEFAULT_SEED);
    let format = a.common.format.or(file.format).unwrap_or(Format::Csv);
    let mut dists = a.synth;
    if dists.is_empty() {
        if let Some(d) = &file.dist {
            dists.push(d.parse().map_err(usage)?);
        }
    }
    if a.files.is_empty() && dists.is_empty() {
        return Err(usage("no input tensors: give NPY files or --synth"));
    }
    let rows = a.rows.or(file.rows).unwrap_or(DEFAULT_ROWS);
    let cols = a.cols.or(file.cols).unwrap_or(DEFAULT_COLS);
    if rows == 0 || cols == 0 {
        return Err(usage("synthetic tensor dimensions must be positive"));
    }

    let mut cfg = RunConfig::new("quant-eval", format);
    cfg.inputs = a.files.iter().map(|p| p.display().to_string()).collect();
    cfg.dtypes = dtypes.clone();
    cfg.group_size = Some(g);
    cfg.seed = Some(seed);
    if !dists.is_empty() {
        cfg.synth = Some(SynthConfig {
            dists: dists.iter().map(|d| d.name().to_string()).collect(),
            rows,
            cols,
        });
    }

    let mut out_rows = Vec::new();
    let mut errors = Vec::new();
    let mut inputs = 0;
    for path in &a.files {
        inputs += 1;
        let name = path.display().to_string();
        match read_npy_file(path)
            .map_err(anyhow::Error::from)
            .and_then(|t| eval_tensor(&name, &t, &dtypes, g))
        {
            Ok(r) => out_rows.extend(r),
            Err(e) => errors.push(InputError {
                input: name,
                error: format!("{e:#}"),
            }),
        }
    }
    for d in &dists {
        inputs += 1;
        let name = format!("synth:{}", d.name());
        let t = synth::tensor(rows, cols, d, seed);
        match eval_tensor(&name, &t, &dtypes, g) {
            Ok(r) => out_rows.extend(r),
            Err(e) => errors.push(InputError {
                input: name,
                error: format!("{e:#}"),
            }),
        }
    }
    for e in &errors {
        eprintln!("error: {}: {}", e.input, e.error);
    }

    let mut w = open_out(a.common.out.as_ref())?;
    match format {
        Format::Csv => {
            write_csv(&mut *w, &cfg, &out_rows)?;
            for e in &errors {
                writeln!(w, "# error {}: {}", e.input, e.error)?;
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                rows: &'a [EvalRow],
                errors: &'a [InputError],
            }
            write_json(
                &mut *w,
                &cfg,
                Body {
                    rows: &out_rows,
                    errors: &errors,
                },
            )?;
        }
    }
    w.flush()?;
    if errors.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} of {inputs} input(s) failed", errors.len());
        Ok(ExitCode::FAILURE)
    }
}

#[derive(Serialize)]
struct CheckRow {
    dtype: DataType,
    codes: u64,
    exact: u64,
}

#[derive(Serialize)]
struct CheckFailure {
    dtype: DataType,
    sv_index: u8,
    zero_point: Option<i32>,
    code: i32,
    error: String,
}

fn check_dtype(dtype: DataType, svreg: Option<&[GridValue]>, failures: &mut Vec<CheckFailure>) -> Result<CheckRow> {
    let spec = DataTypeSpec::new(dtype);
    let enc = match svreg {
        Some(v) if dtype.is_bitmod() => WeightEncoder::with_register(&spec, SpecialValueRegister::program(v)?),
        _ => WeightEncoder::new(&spec)?,
    };
    let bits = spec.bits_per_code();
    let mut cases: Vec<(i32, u8, Option<i32>, i64)> = Vec::new();
    match dtype.family() {
        Family::IntSym => {
            let half = 1i32 << (bits - 1);
            cases.extend((-half..half).map(|c| (c, 0, None, 2 * c as i64)));
        }
        Family::IntAsym => {
            let top = (1i32 << bits) - 1;
            for z in 0..=top {
                cases.extend((0..=top).map(|c| (c, 0, Some(z), 2 * (c - z) as i64)));
            }
        }
        Family::FpBasic | Family::FpBitMod => {
            for sv in 0..spec.sv_choices() as u8 {
                let grid = effective_grid(&spec, sv)?;
                cases.extend(
                    grid.iter()
                        .enumerate()
                        .map(|(c, v)| (c as i32, sv, None, v.halves() as i64)),
                );
            }
        }
    }
    let mut exact = 0;
    for &(code, sv_index, zero_point, want) in &cases {
        // the most negative symmetric code is never emitted by the quantizer,
        // so it is checked at the Booth level
        let terms = if dtype.family() == Family::IntSym && code == -(1 << (bits - 1)) {
            booth_encode(code, bits)
        } else {
            let g = QuantizedGroup {
                codes: vec![],
                sv_index,
                scale_q: 1,
                zero_point,
            };
            enc.encode(code, &g)
        };
        let error = match terms {
            Ok(t) if terms_value_halves(&t) == want => {
                exact += 1;
                continue;
            }
            Ok(t) => format!(
                "decoded {} instead of {}",
                terms_value_halves(&t) as f64 / 2.0,
                want as f64 / 2.0
            ),
            Err(e) => format!("{e:?}: {e}"),
        };
        failures.push(CheckFailure {
            dtype,
            sv_index,
            zero_point,
            code,
            error,
        });
    }
    Ok(CheckRow {
        dtype,
        codes: cases.len() as u64,
        exact,
    })
}

fn bitserial_check(a: BitserialArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let flag = match a.dtype {
        Some(names) => Some(
            names
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<DataType>().map_err(|e| usage(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let dtypes = resolve_dtypes(flag, file.dtype, &CORE_TYPES)?;
    let sv_reg = a.sv_reg.or(file.sv_reg);
    let svreg = match &sv_reg {
        Some(v) if v.len() != 4 => return Err(usage(format!("--sv-reg needs 4 values, got {}", v.len()))),
        Some(v) => Some(
            v.iter()
                .map(|&x| {
                    GridValue::from_f64(x).ok_or_else(|| usage(format!("special value {x} is not a multiple of 0.5")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let format = a.common.format.or(file.format);
    let mut cfg = RunConfig::new("bitserial-check", format.unwrap_or(Format::Csv));
    cfg.dtypes = dtypes.clone();
    cfg.sv_reg = sv_reg;

    let mut failures = Vec::new();
    let rows = dtypes
        .iter()
        .map(|&d| check_dtype(d, svreg.as_deref(), &mut failures))
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = rows.iter().map(|r| r.codes).sum();
    let exact: u64 = rows.iter().map(|r| r.exact).sum();

    let mut w = open_out(a.common.out.as_ref())?;
    match format {
        None => {
            for r in &rows {
                writeln!(w, "{}: {}/{} codes exact", r.dtype, r.exact, r.codes)?;
            }
            for f in &failures {
                let z = f.zero_point.map_or(String::new(), |z| format!(" zero-point {z}"));
                writeln!(
                    w,
                    "MISMATCH {} sv {}{z} code {}: {}",
                    f.dtype, f.sv_index, f.code, f.error
                )?;
            }
            writeln!(w, "{exact}/{total} codes exact")?;
        }
        Some(Format::Csv) => {
            write_csv(&mut *w, &cfg, &rows)?;
            for f in &failures {
                writeln!(
                    w,
                    "# mismatch {} sv {} code {}: {}",
                    f.dtype, f.sv_index, f.code, f.error
                )?;
            }
        }
        Some(Format::Json) => {
            #[derive(Serialize)]
            struct Body<'a> {
                rows: &'a [CheckRow],
                failures: &'a [CheckFailure],
                codes: u64,
                exact: u64,
            }
            write_json(
                &mut *w,
                &cfg,
                Body {
                    rows: &rows,
                    failures: &failures,
                    codes: total,
                    exact,
                },
            )?;
        }
    }
    w.flush()?;
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn load_workload(shapes: &str) -> Result<WorkloadSpec> {
    let path = Path::new(shapes);
    if !path.exists() {
        if let Some(text) = bundled(shapes) {
            return Ok(profile_shapes(text)?);
        }
    }
    Ok(load_shape_file(path)?)
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let dtypes = resolve_dtypes(a.dtype, file.dtype, &CORE_TYPES)?;
    let g = check_group_size(a.group_size.or(file.group_size).unwrap_or(DEFAULT_GROUP_SIZE))?;
    let format = a.common.format.or(file.format).unwrap_or(Format::Csv);
    let arch = file.arch.unwrap_or_default();
    arch.validate().map_err(|e| usage(e.to_string()))?;

    let mut w = load_workload(&a.shapes)?;
    let prefill = a.prefill_tokens.or(file.prefill_tokens).unwrap_or(w.prefill_tokens);
    let decode = a.decode_tokens.or(file.decode_tokens).unwrap_or(w.decode_tokens);
    w = w.with_tokens(prefill, decode);

    let mut cfg = RunConfig::new("simulate", format);
    cfg.inputs = vec![a.shapes.clone()];
    cfg.dtypes = dtypes.clone();
    cfg.group_size = Some(g);
    cfg.tokens = Some(TokenConfig { prefill, decode });
    cfg.arch = Some(arch.clone());

    let (reports, traffic) = run_simulation(&w, &dtypes, g, &arch)?;

    let mut out = open_out(a.common.out.as_ref())?;
    match format {
        Format::Csv => {
            writeln!(out, "# bitmod {}", config::VERSION)?;
            writeln!(out, "# config {}", serde_json::to_string(&cfg)?)?;
            {
                let mut c = csv::Writer::from_writer(&mut out);
                c.write_record(CSV_COLUMNS)?;
                for r in &reports {
                    c.write_record(r.csv_row())?;
                }
                c.flush()?;
            }
            writeln!(out, "# traffic")?;
            write_csv_rows(&mut *out, &traffic)?;
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                reports: &'a [SimReport],
                traffic: &'a [TrafficRow],
            }
            write_json(
                &mut *out,
                &cfg,
                Body {
                    reports: &reports,
                    traffic: &traffic,
                },
            )?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn run_simulation(
    w: &WorkloadSpec,
    dtypes: &[DataType],
    g: usize,
    arch: &ArchConfig,
) -> Result<(Vec<SimReport>, Vec<TrafficRow>)> {
    let base = simulate_phases(w, &Engine::Fp16, arch)?;
    let base_total = base.total();
    let mut reports = vec![base_total.clone().with_speedup(&base_total)];
    let mut traffic = traffic_table(&base);
    for &d in dtypes {
        let spec = DataTypeSpec::new(d);
        if let Some(warn) = check_no_stall(&spec, g, arch) {
            eprintln!("warning: {warn}");
        }
        let p = simulate_phases(
            w,
            &Engine::BitSerial {
                spec: &spec,
                group_size: g,
            },
            arch,
        )
        .with_context(|| format!("simulating {d}"))?;
        reports.push(p.total().with_speedup(&base_total));
        traffic.extend(traffic_table(&p));
    }
    Ok((reports, traffic))
}

fn cmd_pack(a: PackArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let dtype = match (a.dtype, file.dtype.as_deref()) {
        (Some(d), _) => d,
        (None, Some([d])) => *d,
        (None, Some(_)) => return Err(usage("pack needs exactly one data type")),
        (None, None) => DataType::Fp3BitMod,
    };
    let g = check_group_size(a.group_size.or(file.group_size).unwrap_or(DEFAULT_GROUP_SIZE))?;
    let t = read_npy_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let q = quantize_tensor(&t, &DataTypeSpec::new(dtype), g)?;
    let bytes = pack(&q)?;
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}: {}x{} {dtype} G={g}, {} bytes, {:.4} bits/weight",
        a.out.display(),
        t.rows(),
        t.cols(),
        bytes.len(),
        ratio_f64(memory_footprint_bits(&q.spec, &q.grouping))
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_unpack(a: UnpackArgs) -> Result<ExitCode> {
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let q = unpack(&bytes).with_context(|| a.input.display().to_string())?;
    let t = q.dequantize()?;
    write_npy_file(&a.out, &t).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}: {}x{} {} G={}",
        a.out.display(),
        t.rows(),
        t.cols(),
        q.spec.dtype,
        q.grouping.group_size
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    if a.rows == 0 || a.cols == 0 {
        return Err(usage("tensor dimensions must be positive"));
    }
    let t = synth::tensor(a.rows, a.cols, &a.dist, a.seed);
    write_npy_file(&a.out, &t).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}: {}x{} {} seed {}",
        a.out.display(),
        a.rows,
        a.cols,
        a.dist.name(),
        a.seed
    );
    Ok(ExitCode::SUCCESS)
}
