//! Checkpoint file: a UTF-8 manifest terminated by a `data` line, followed by
//! every array as little-endian f64 in manifest order.
//!
//! ```text
//! gla-checkpoint
//! version 1
//! seed 7
//! config_hash 9f3c...
//! arch {"input_dim":2,...}
//! param encoder.0.weight 56 2
//! ...
//! buffer encoder.norm.running_mean 1 256
//! data
//! <bytes>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::{Architecture, ModelBundle};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "gla-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
}

struct Entry {
    kind: &'static str,
    name: String,
    rows: usize,
    cols: usize,
}

fn buffers(model: &ModelBundle) -> [(&'static str, &Vec<f64>); 4] {
    [
        ("encoder.norm.running_mean", &model.encoder.norm.running_mean),
        ("encoder.norm.running_var", &model.encoder.norm.running_var),
        ("decoder.norm.running_mean", &model.decoder.norm.running_mean),
        ("decoder.norm.running_var", &model.decoder.norm.running_var),
    ]
}

fn entries(model: &ModelBundle) -> Vec<Entry> {
    let mut out: Vec<Entry> = model
        .params
        .iter()
        .map(|(_, p)| Entry {
            kind: "param",
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    out.extend(buffers(model).iter().map(|(name, v)| Entry {
        kind: "buffer",
        name: name.to_string(),
        rows: 1,
        cols: v.len(),
    }));
    out
}

pub fn save_checkpoint(path: &Path, model: &ModelBundle, meta: &CheckpointMeta) -> Result<()> {
    let mut manifest = format!(
        "{MAGIC}\nversion {CHECKPOINT_VERSION}\nseed {}\nconfig_hash {}\narch {}\n",
        meta.seed,
        meta.config_hash,
        serde_json::to_string(&model.arch)?
    );
    for e in entries(model) {
        manifest.push_str(&format!("{} {} {} {}\n", e.kind, e.name, e.rows, e.cols));
    }
    manifest.push_str("data\n");

    let mut bytes = manifest.into_bytes();
    let mut push = |vals: &[f64]| vals.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    for (_, p) in model.params.iter() {
        push(p.value.data());
    }
    for (_, v) in buffers(model) {
        push(v);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

/// Reads a checkpoint, rebuilding the model from its recorded architecture.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("truncated manifest"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("manifest is not utf-8"))
    };

    if next_line()? != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected `{key}` line")))
    };
    let version = field(next_line()?, "version")?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let seed = field(next_line()?, "seed")?
        .parse::<u64>()
        .map_err(|_| corrupt("bad seed"))?;
    let config_hash = field(next_line()?, "config_hash")?;
    let arch: Architecture =
        serde_json::from_str(&field(next_line()?, "arch")?).map_err(|e| corrupt(format!("bad arch: {e}")))?;

    let mut listed = Vec::new();
    loop {
        let line = next_line()?;
        if line == "data" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [kind, name, rows, cols] = parts[..] else {
            return Err(corrupt(format!("bad manifest line `{line}`")));
        };
        let dim = |s: &str| s.parse::<usize>().map_err(|_| corrupt(format!("bad dimension in `{line}`")));
        listed.push((kind.to_string(), name.to_string(), dim(rows)?, dim(cols)?));
    }

    let mut model = ModelBundle::new(arch, seed)?;
    let expected = entries(&model);
    if expected.len() != listed.len() {
        return Err(shape_err(format!(
            "checkpoint lists {} arrays, architecture has {}",
            listed.len(),
            expected.len()
        )));
    }
    for (e, (kind, name, rows, cols)) in expected.iter().zip(&listed) {
        if e.kind != kind || &e.name != name {
            return Err(corrupt(format!("unexpected array `{kind} {name}`, wanted `{} {}`", e.kind, e.name)));
        }
        if (e.rows, e.cols) != (*rows, *cols) {
            return Err(shape_err(format!(
                "{name}: checkpoint {rows}x{cols}, model {}x{}",
                e.rows, e.cols
            )));
        }
    }

    let payload = &bytes[pos..];
    let total: usize = expected.iter().map(|e| e.rows * e.cols).sum();
    if payload.len() != total * 8 {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let t = model.params.get_mut(id);
        let data: Vec<f64> = values.by_ref().take(t.len()).collect();
        *t = Tensor::new(t.rows(), t.cols(), data)?;
    }
    for buf in [
        &mut model.encoder.norm.running_mean,
        &mut model.encoder.norm.running_var,
        &mut model.decoder.norm.running_mean,
        &mut model.decoder.norm.running_var,
    ] {
        let n = buf.len();
        *buf = values.by_ref().take(n).collect();
    }
    Ok((model, CheckpointMeta { seed, config_hash }))
}

/// Like [`load_checkpoint`] but rejects a checkpoint whose architecture
/// differs from `arch`.
pub fn load_checkpoint_expecting(path: &Path, arch: &Architecture) -> Result<(ModelBundle, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if &model.arch != arch {
        return Err(shape_err(format!(
            "checkpoint architecture {:?} does not match {:?}",
            model.arch, arch
        )));
    }
    Ok((model, meta))
}
