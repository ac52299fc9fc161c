//! Checkpoints: a parameter container holding weights and batch-norm
//! statistics, next to a `*.spec.json` copy of the network spec.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{NetworkSpec, ParameterSet};
use crate::autodiff::{read_container, write_container, NamedArray};
use crate::error::{Error, Result};
use crate::fsio;

pub const CHECKPOINT_FORMAT: &str = "glacio-checkpoint";

/// `runs/best.ckpt` -> `runs/best.spec.json`.
pub fn spec_sidecar(path: &Path) -> PathBuf {
    path.with_extension("spec.json")
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet<f32>,
    extra: BTreeMap<String, Value>,
) -> Result<()> {
    let mut metadata = extra;
    metadata.insert("format".into(), json!(CHECKPOINT_FORMAT));
    metadata.insert("spec_hash".into(), json!(params.spec().hash()));
    metadata.insert("step".into(), json!(params.step));
    let initialized: Vec<&str> = params
        .running_stats()
        .iter()
        .filter(|(_, s)| s.initialized)
        .map(|(n, _)| n.as_str())
        .collect();
    metadata.insert("initialized_stats".into(), json!(initialized));

    let mut arrays: Vec<NamedArray> = params
        .params()
        .iter()
        .map(|p| NamedArray {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    for (name, s) in params.running_stats() {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            arrays.push(NamedArray {
                name: format!("{name}.{suffix}"),
                shape: vec![values.len()],
                data: values.iter().map(|&v| v as f32).collect(),
            });
        }
    }
    let mut bytes = Vec::new();
    write_container(&mut bytes, metadata, &arrays)?;
    fsio::write_json(&spec_sidecar(path), params.spec())?;
    fsio::write_atomic(path, &bytes)
}

/// Loads a checkpoint; the sidecar spec must hash to the value recorded in
/// the container and every array must match the spec's shapes.
pub fn load_checkpoint(path: &Path) -> Result<ParameterSet<f32>> {
    let bytes = fsio::read(path)?;
    let sidecar = spec_sidecar(path);
    let spec: NetworkSpec = serde_json::from_str(&fsio::read_to_string(&sidecar)?)
        .map_err(|e| Error::format(&sidecar, e.to_string()))?;
    let (header, arrays) = read_container(bytes.as_slice()).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let recorded = header.metadata.get("spec_hash").and_then(Value::as_str);
    if recorded != Some(spec.hash().as_str()) {
        return Err(bad(format!(
            "spec hash mismatch: container has {}, sidecar spec hashes to {}",
            recorded.unwrap_or("<none>"),
            spec.hash()
        )));
    }
    let mut params = ParameterSet::<f32>::build(&spec, 0)?;
    let by_name: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    for p in params.params_mut() {
        let a = by_name
            .get(p.name.as_str())
            .ok_or_else(|| bad(format!("missing array `{}`", p.name)))?;
        if a.shape != p.value.shape() {
            return Err(bad(format!(
                "array `{}` has shape {:?}, expected {:?}",
                p.name,
                a.shape,
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(&a.data);
    }
    let initialized: Vec<String> = header
        .metadata
        .get("initialized_stats")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    for (name, s) in params.stats_mut() {
        for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
            let key = format!("{name}.{suffix}");
            let a = by_name
                .get(key.as_str())
                .ok_or_else(|| bad(format!("missing array `{key}`")))?;
            if a.data.len() != dst.len() {
                return Err(bad(format!("array `{key}` has {} values, expected {}", a.data.len(), dst.len())));
            }
            *dst = a.data.iter().map(|&v| v as f64).collect();
        }
        s.initialized = initialized.iter().any(|n| n == name);
    }
    params.step = header.metadata.get("step").and_then(Value::as_u64).unwrap_or(0);
    Ok(params)
}
