//! Workload description and the layer-shape file parser.
//!
//! Shape files hold one `key = value` entry per line; `#` starts a comment.
//!
//! | key              | meaning                                   | default  |
//! |------------------|-------------------------------------------|----------|
//! | `name`           | model name                                | `model`  |
//! | `hidden`         | hidden size                               | required |
//! | `ffn`            | FFN intermediate size                     | required |
//! | `heads`          | attention heads                           | required |
//! | `kv_heads`       | key/value heads                           | `heads`  |
//! | `blocks`         | transformer blocks                        | required |
//! | `vocab`          | vocabulary size (LM head), 0 for none     | `0`      |
//! | `gated_ffn`      | gated FFN with up, gate and down matrices | `false`  |
//! | `prefill_tokens` | prompt length                             | `256`    |
//! | `decode_tokens`  | generated tokens                          | `256`    |

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// A weight GEMM `(M x K) * (K x N)`, `repeat` times per forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Layer {
    pub name: String,
    pub k: u64,
    pub n: u64,
    pub repeat: u64,
}

/// Attention score and context GEMMs of every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionShape {
    pub heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub blocks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub layers: Vec<Layer>,
    pub attention: Option<AttentionShape>,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub batch: u64,
}

impl WorkloadSpec {
    pub fn with_tokens(mut self, prefill: u64, decode: u64) -> Self {
        self.prefill_tokens = prefill;
        self.decode_tokens = decode;
        self
    }

    /// Number of weights touched by one forward pass.
    pub fn weight_count(&self) -> u64 {
        self.layers.iter().map(|l| l.k * l.n * l.repeat).sum()
    }
}

const KEYS: [&str; 10] = [
    "name",
    "hidden",
    "ffn",
    "heads",
    "kv_heads",
    "blocks",
    "vocab",
    "gated_ffn",
    "prefill_tokens",
    "decode_tokens",
];

/// Parses a shape file and expands it into per-block GEMMs.
pub fn profile_shapes(text: &str) -> Result<WorkloadSpec, ParseError> {
    let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
    let lines = text.lines().count().max(1);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ParseError {
            line,
            message: format!("expected `key = value`, found {content:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
            return Err(ParseError {
                line,
                message: format!("unknown key {key:?}"),
            });
        };
        if value.is_empty() {
            return Err(ParseError {
                line,
                message: format!("missing value for {key}"),
            });
        }
        if entries.insert(known, (line, value)).is_some() {
            return Err(ParseError {
                line,
                message: format!("duplicate key {key}"),
            });
        }
    }
    if entries.is_empty() {
        return Err(ParseError {
            line: lines,
            message: "empty shape file".into(),
        });
    }

    let int = |key: &str, default: Option<u64>| -> Result<u64, ParseError> {
        match entries.get(key) {
            Some(&(line, v)) => v.replace('_', "").parse().map_err(|_| ParseError {
                line,
                message: format!("{key}: expected a nonnegative integer, found {v:?}"),
            }),
            None => default.ok_or_else(|| ParseError {
                line: lines,
                message: format!("missing required key {key}"),
            }),
        }
    };
    let positive = |key: &str, default: Option<u64>| -> Result<u64, ParseError> {
        let v = int(key, default)?;
        if v == 0 {
            return Err(ParseError {
                line: entries.get(key).map_or(lines, |e| e.0),
                message: format!("{key} must be positive"),
            });
        }
        Ok(v)
    };

    let name = entries
        .get("name")
        .map_or("model", |e| e.1)
        .trim_matches(|c| c == '"' || c == '\'')
        .to_string();
    let hidden = positive("hidden", None)?;
    let ffn = positive("ffn", None)?;
    let heads = positive("heads", None)?;
    let kv_heads = positive("kv_heads", Some(heads))?;
    let blocks = positive("blocks", None)?;
    let vocab = int("vocab", Some(0))?;
    let prefill_tokens = positive("prefill_tokens", Some(256))?;
    let decode_tokens = int("decode_tokens", Some(256))?;
    let gated = match entries.get("gated_ffn") {
        None => false,
        Some(&(line, v)) => match v {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            _ => {
                return Err(ParseError {
                    line,
                    message: format!("gated_ffn: expected true or false, found {v:?}"),
                })
            }
        },
    };
    if hidden % heads != 0 {
        return Err(ParseError {
            line: entries["heads"].0,
            message: format!("hidden {hidden} is not divisible by heads {heads}"),
        });
    }
    if heads % kv_heads != 0 {
        return Err(ParseError {
            line: entries.get("kv_heads").map_or(lines, |e| e.0),
            message: format!("heads {heads} is not divisible by kv_heads {kv_heads}"),
        });
    }
    let head_dim = hidden / heads;
    let kv_dim = kv_heads * head_dim;
    let layer = |name: &str, k, n, repeat| Layer {
        name: name.into(),
        k,
        n,
        repeat,
    };
    let mut layers = vec![
        layer("q_proj", hidden, hidden, blocks),
        layer("k_proj", hidden, kv_dim, blocks),
        layer("v_proj", hidden, kv_dim, blocks),
        layer("o_proj", hidden, hidden, blocks),
        layer("up_proj", hidden, ffn, blocks),
    ];
    if gated {
        layers.push(layer("gate_proj", hidden, ffn, blocks));
    }
    layers.push(layer("down_proj", ffn, hidden, blocks));
    if vocab > 0 {
        layers.push(layer("lm_head", hidden, vocab, 1));
    }
    Ok(WorkloadSpec {
        name,
        layers,
        attention: Some(AttentionShape {
            heads,
            kv_heads,
            head_dim,
            blocks,
        }),
        prefill_tokens,
        decode_tokens,
        batch: 1,
    })
}

#[derive(Debug, Error)]
pub enum ShapeFileError {
    #[error("{path}: {error}")]
    Io { path: String, error: std::io::Error },
    #[error("{path}: {error}")]
    Parse { path: String, error: ParseError },
}

pub fn load_shape_file(path: &Path) -> Result<WorkloadSpec, ShapeFileError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|error| ShapeFileError::Io { path: p.clone(), error })?;
    profile_shapes(&text).map_err(|error| ShapeFileError::Parse { path: p, error })
}

pub const TOY_SHAPES: &str = include_str!("../../shapes/toy.shapes");
pub const OPT_1_3B_SHAPES: &str = include_str!("../../shapes/opt-1.3b.shapes");
pub const LLAMA_2_7B_SHAPES: &str = include_str!("../../shapes/llama-2-7b.shapes");

/// Shape files shipped with the crate, by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "toy" => Some(TOY_SHAPES),
        "opt-1.3b" => Some(OPT_1_3B_SHAPES),
        "llama-2-7b" => Some(LLAMA_2_7B_SHAPES),
        _ => None,
    }
}
