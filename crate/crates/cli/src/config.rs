use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bitmod::archsim::ArchConfig;
use bitmod::dtype::DataType;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Options read from `--config <json>`. Flags override these; unset keys
/// fall back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dtype: Option<Vec<DataType>>,
    pub group_size: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub dist: Option<String>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub prefill_tokens: Option<u64>,
    pub decode_tokens: Option<u64>,
    pub sv_reg: Option<Vec<f64>>,
    pub arch: Option<ArchConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved options of one run, written next to every result.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dtypes: Vec<DataType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sv_reg: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    pub format: Format,
}

impl RunConfig {
    pub fn new(command: &'static str, format: Format) -> Self {
        RunConfig {
            command,
            inputs: vec![],
            dtypes: vec![],
            group_size: None,
            seed: None,
            synth: None,
            sv_reg: None,
            tokens: None,
            arch: None,
            format,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    pub dists: Vec<String>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TokenConfig {
    pub prefill: u64,
    pub decode: u64,
}

pub fn open_out(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Writes `rows` as CSV preceded by `#` lines carrying the version and the
/// resolved config.
pub fn write_csv<T: Serialize>(w: &mut dyn Write, cfg: &RunConfig, rows: &[T]) -> Result<()> {
    writeln!(w, "# bitmod {VERSION}")?;
    writeln!(w, "# config {}", serde_json::to_string(cfg)?)?;
    write_csv_rows(w, rows)
}

pub fn write_csv_rows<T: Serialize>(w: &mut dyn Write, rows: &[T]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    for r in rows {
        c.serialize(r)?;
    }
    c.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct JsonReport<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: &'a RunConfig,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(w: &mut dyn Write, cfg: &RunConfig, body: T) -> Result<()> {
    let report = JsonReport {
        tool: "bitmod",
        version: VERSION,
        config: cfg,
        body,
    };
    serde_json::to_writer_pretty(&mut *w, &report)?;
    writeln!(w)?;
    Ok(())
}
