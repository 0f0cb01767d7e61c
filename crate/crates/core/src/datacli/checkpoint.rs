//! Plain-text model checkpoints.
//!
//! ```text
//! graphite-checkpoint 1
//! kind stage1
//! config {"input_dim":32,...}
//! param classifier.weight 128x1
//! 0.013 -0.2 ...
//! ```
//!
//! Values use shortest round-trip formatting, so save then load is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::ParamStore;
use crate::gatsan::{Stage2Config, Stage2Model};
use crate::milnet::{MilDims, MilModel};

const MAGIC: &str = "graphite-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Header {
    pub in_dim: usize,
    pub num_levels: usize,
    pub config: Stage2Config,
}

fn encode<C: Serialize>(kind: &str, config: &C, params: &ParamStore) -> Result<String, DataError> {
    let cfg = serde_json::to_string(config).map_err(|e| DataError::Checkpoint(e.to_string()))?;
    let mut out = format!("{MAGIC}\nkind {kind}\nconfig {cfg}\n");
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {name} {}", shape.join("x"));
        let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    Ok(out)
}

struct Decoded<C> {
    config: C,
    params: Vec<(String, Vec<f64>)>,
}

fn decode<C: DeserializeOwned>(text: &str, kind: &str) -> Result<Decoded<C>, DataError> {
    let bad = |line: usize, msg: String| DataError::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(bad(1, format!("expected header {MAGIC:?}"))),
    }
    match lines.next() {
        Some((_, l)) if l.strip_prefix("kind ") == Some(kind) => {}
        Some((n, l)) => return Err(bad(n, format!("expected kind {kind}, found {l:?}"))),
        None => return Err(bad(2, "truncated".into())),
    }
    let config = match lines.next() {
        Some((n, l)) => {
            let json = l.strip_prefix("config ").ok_or_else(|| bad(n, "expected config line".into()))?;
            serde_json::from_str(json).map_err(|e| bad(n, e.to_string()))?
        }
        None => return Err(bad(3, "truncated".into())),
    };
    let mut params = Vec::new();
    while let Some((n, l)) = lines.next() {
        if l.is_empty() {
            continue;
        }
        let rest = l.strip_prefix("param ").ok_or_else(|| bad(n, format!("expected param line, found {l:?}")))?;
        let (name, shape) = rest.split_once(' ').ok_or_else(|| bad(n, "missing shape".into()))?;
        let numel = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .product::<Result<usize, _>>()
            .map_err(|e| bad(n, format!("shape {shape:?}: {e}")))?;
        let (vn, vl) = lines.next().ok_or_else(|| bad(n + 1, format!("missing values for {name}")))?;
        let vals = vl
            .split_ascii_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(vn, e.to_string()))?;
        if vals.len() != numel {
            return Err(bad(vn, format!("{name} has {} values, shape {shape} needs {numel}", vals.len())));
        }
        params.push((name.to_string(), vals));
    }
    Ok(Decoded { config, params })
}

fn check_complete(store: &ParamStore, loaded: &[(String, Vec<f64>)]) -> Result<(), DataError> {
    for (name, _) in store.iter() {
        if !loaded.iter().any(|(n, _)| n == name) {
            return Err(DataError::Checkpoint(format!("parameter {name} missing")));
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<String, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingCheckpoint(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn stage1_to_string(model: &MilModel) -> Result<String, DataError> {
    encode("stage1", model.dims(), model.params())
}

pub fn stage1_from_str(text: &str) -> Result<MilModel, DataError> {
    let d: Decoded<MilDims> = decode(text, "stage1")?;
    let mut model = MilModel::zeros(d.config);
    check_complete(model.params(), &d.params)?;
    for (name, vals) in &d.params {
        model
            .set_param(name, vals)
            .map_err(|e| DataError::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok(model)
}

pub fn save_stage1(model: &MilModel, path: &Path) -> Result<(), DataError> {
    write(path, &stage1_to_string(model)?)
}

pub fn load_stage1(path: &Path) -> Result<MilModel, DataError> {
    stage1_from_str(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn stage2_to_string(model: &Stage2Model) -> Result<String, DataError> {
    let header = Stage2Header {
        in_dim: model.gat().in_dim(),
        num_levels: model.san().num_levels(),
        config: *model.config(),
    };
    encode("stage2", &header, model.params())
}

pub fn stage2_from_str(text: &str) -> Result<Stage2Model, DataError> {
    let d: Decoded<Stage2Header> = decode(text, "stage2")?;
    let h = d.config;
    let mut model = Stage2Model::new(h.in_dim, h.num_levels, h.config, 0);
    check_complete(model.params(), &d.params)?;
    for (name, vals) in &d.params {
        model
            .set_param(name, vals)
            .map_err(|e| DataError::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok(model)
}

pub fn save_stage2(model: &Stage2Model, path: &Path) -> Result<(), DataError> {
    write(path, &stage2_to_string(model)?)
}

pub fn load_stage2(path: &Path) -> Result<Stage2Model, DataError> {
    stage2_from_str(&read(path)?).map_err(|e| e.in_file(path))
}
