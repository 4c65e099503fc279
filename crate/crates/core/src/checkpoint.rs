//! Textual named-tensor checkpoints and parameter digests.
//!
//! The dump format is line-oriented and exact: a `tensor <name> <len>` header
//! followed by one value per line at 17 significant digits, which round-trips
//! `f64` bit-for-bit. The digest is SHA-256 over the canonical dump and backs
//! the freezing contract: frozen models must digest identically before and
//! after any training run.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Parameterized;

/// Canonical textual serialization of all named parameters.
pub fn dump_params(model: &impl Parameterized) -> String {
    let mut out = String::new();
    model.visit_params(&mut |name, values| {
        out.push_str(&format!("tensor {name} {}\n", values.len()));
        for v in values {
            out.push_str(&format!("{v:.16e}\n"));
        }
    });
    out
}

/// SHA-256 of the canonical dump, hex-encoded.
pub fn digest_params(model: &impl Parameterized) -> String {
    let mut hasher = Sha256::new();
    hasher.update(dump_params(model).as_bytes());
    hex::encode(hasher.finalize())
}

pub fn write_checkpoint(path: &Path, model: &impl Parameterized) -> Result<()> {
    std::fs::write(path, dump_params(model))?;
    Ok(())
}

/// Parse a dump back into name-keyed vectors.
pub fn parse_checkpoint(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Checkpoint {
                line: idx + 1,
                message: format!("expected tensor header, got `{line}`"),
            });
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint {
                line: idx + 1,
                message: "missing tensor name".into(),
            })?
            .to_string();
        let len: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint {
                line: idx + 1,
                message: "missing tensor length".into(),
            })?;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let (vidx, vline) = lines.next().ok_or_else(|| Error::Checkpoint {
                line: idx + 1,
                message: format!("tensor {name} truncated"),
            })?;
            values.push(vline.trim().parse::<f64>().map_err(|_| Error::Checkpoint {
                line: vidx + 1,
                message: format!("bad value `{vline}`"),
            })?);
        }
        out.insert(name, values);
    }
    Ok(out)
}

/// Load a checkpoint into an existing model of the same shape.
pub fn load_checkpoint(path: &Path, model: &mut impl Parameterized) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let loaded = parse_checkpoint(&text)?;
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    model.visit_params_mut(&mut |name, values| match loaded.get(name) {
        Some(saved) if saved.len() == values.len() => values.copy_from_slice(saved),
        Some(saved) => mismatch.push(format!("{name} ({} vs {})", values.len(), saved.len())),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !mismatch.is_empty() {
        return Err(Error::Checkpoint {
            line: 0,
            message: format!("missing tensors: {missing:?}; shape mismatches: {mismatch:?}"),
        });
    }
    Ok(())
}
