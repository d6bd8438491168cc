//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! adamct-checkpoint
//! format_version=1
//! <ModelConfig field>=<value>     one line per field
//! payload_bytes=<n>
//! end_header
//! <n bytes: every parameter tensor as little-endian f32, declaration order>
//! ```
//!
//! Declaration order is: item table, position table, then for each layer the
//! global branch (encoder, attention, SEAtt), the local branch (encoder,
//! convolution, SEAtt) and the mixture, and finally the prediction head.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{declare_model, Model, ModelConfig};
use crate::rng::RngState;

pub const MAGIC: &str = "adamct-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header";

fn config_lines(config: &ModelConfig) -> Vec<String> {
    let Value::Object(map) = serde_json::to_value(config).expect("config serializes") else {
        unreachable!("config is a struct");
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect()
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let payload = model.params.total_numel() * 4;
    let mut header = vec![MAGIC.to_string(), format!("format_version={FORMAT_VERSION}")];
    header.extend(config_lines(&model.config));
    header.push(format!("payload_bytes={payload}"));
    header.push(END.to_string());
    let mut out = (header.join("\n") + "\n").into_bytes();
    out.reserve(payload);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let mut pos = 0;
    let mut next_line = || -> Option<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    };
    if next_line() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = next_line()
        .and_then(|l| l.strip_prefix("format_version="))
        .ok_or_else(|| header_err("missing format_version"))?;
    let found: u32 = version
        .parse()
        .map_err(|_| header_err(format!("bad format_version `{version}`")))?;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let mut fields = Map::new();
    let mut declared: Option<usize> = None;
    loop {
        let line = next_line().ok_or_else(|| header_err("header ends before end_header"))?;
        if line == END {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| header_err(format!("line `{line}` is not key=value")))?;
        if k == "payload_bytes" {
            declared = Some(v.parse().map_err(|_| header_err(format!("bad payload_bytes `{v}`")))?);
            continue;
        }
        let value = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()));
        fields.insert(k.to_string(), value);
    }
    let declared = declared.ok_or_else(|| header_err("missing payload_bytes"))?;
    let config: ModelConfig =
        serde_json::from_value(Value::Object(fields)).map_err(|e| header_err(format!("config: {e}")))?;
    let (mut params, layout) = declare_model::<f32>(&config, &mut RngState::new(0))?;
    let expected = params.total_numel() * 4;
    if declared != expected {
        return Err(CheckpointError::SizeMismatch {
            expected,
            found: declared,
        }
        .into());
    }
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(CheckpointError::SizeMismatch {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let values = params
        .tensors()
        .iter()
        .map(|t| floats.by_ref().take(t.numel()).collect())
        .collect();
    params.load_values(values)?;
    Ok(Model { config, params, layout })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Lists every architecture field that differs between two configs.
pub fn compare_architecture(checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    let a = config_lines(checkpoint);
    let b = config_lines(requested);
    let diffs: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .filter(|(x, _)| !x.starts_with("hidden_dropout=") && !x.starts_with("attn_dropout="))
        .map(|(x, y)| {
            let (k, va) = x.split_once('=').expect("key=value");
            let vb = y.split_once('=').map_or("", |p| p.1);
            format!("{k}: checkpoint {va}, config {vb}")
        })
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::ArchitectureMismatch(diffs.join("; ")).into())
    }
}
