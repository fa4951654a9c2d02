//! Model checkpoints: `manifest.json` describing the configuration and the
//! parameter layout, and `weights.bin` holding little-endian f32 values in
//! manifest order. Training checkpoints add `optimizer.bin` with the AdamW
//! moments in the same order.

use crate::model::{ModelConfig, ModelError, PlacementModel, Result};
use bootplace_autograd::Float;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Optimizer state and bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: u64,
    /// Training configuration echo, opaque to this module.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub parameters: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

/// First and second AdamW moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn incompatible(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Incompatible {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

fn sorted_indices<T: Float>(model: &PlacementModel<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..model.params.len()).collect();
    let names: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
    idx.sort_by(|&a, &b| names[a].cmp(names[b]));
    idx
}

fn encode(buffers: impl Iterator<Item = Vec<f32>>) -> Vec<u8> {
    buffers
        .flat_map(|b| b.into_iter().flat_map(f32::to_le_bytes))
        .collect()
}

/// Saves weights (as f32) and, when given, the training state.
pub fn save_checkpoint<T: Float>(
    dir: &Path,
    model: &PlacementModel<T>,
    training: Option<(&TrainingState, &Moments)>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let order = sorted_indices(model);
    let params: Vec<_> = model.params.iter().collect();
    let weights = encode(order.iter().map(|&i| {
        params[i]
            .tensor
            .data()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect()
    }));
    write_atomic(&dir.join("weights.bin"), &weights)?;
    if let Some((_, moments)) = training {
        let bufs = order
            .iter()
            .map(|&i| moments.first[i].clone())
            .chain(order.iter().map(|&i| moments.second[i].clone()));
        write_atomic(&dir.join("optimizer.bin"), &encode(bufs))?;
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        parameters: order
            .iter()
            .map(|&i| ParamEntry {
                name: params[i].name.clone(),
                shape: params[i].tensor.shape().to_vec(),
            })
            .collect(),
        training: training.map(|(s, _)| s.clone()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| incompatible(&path, format!("not valid JSON: {e}")))?;
    match value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(incompatible(
                &path,
                format!("format_version {v}, expected {CHECKPOINT_VERSION}"),
            ))
        }
        None => return Err(incompatible(&path, "missing format_version")),
    }
    serde_path_to_error::deserialize(value)
        .map_err(|e| incompatible(&path, format!("field `{}`: {}", e.path(), e.inner())))
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    if bytes.len() != expected * 4 {
        return Err(incompatible(
            path,
            format!("{} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads a checkpoint into an f32 model. The parameter names and shapes in
/// the manifest must match the architecture built from its configuration.
pub fn load_checkpoint(
    dir: &Path,
) -> Result<(PlacementModel<f32>, Option<(TrainingState, Moments)>)> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join("manifest.json");
    let mut model = PlacementModel::<f32>::new(manifest.model.clone())
        .map_err(|e| incompatible(&mpath, e.to_string()))?;
    let order = sorted_indices(&model);
    if order.len() != manifest.parameters.len() {
        return Err(incompatible(
            &mpath,
            format!(
                "{} parameters listed, architecture has {}",
                manifest.parameters.len(),
                order.len()
            ),
        ));
    }
    let sizes: Vec<usize> = {
        let params: Vec<_> = model.params.iter().collect();
        for (&i, entry) in order.iter().zip(&manifest.parameters) {
            let p = params[i];
            if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
                return Err(incompatible(
                    &mpath,
                    format!(
                        "parameter {} {:?} does not match {} {:?}",
                        entry.name,
                        entry.shape,
                        p.name,
                        p.tensor.shape()
                    ),
                ));
            }
        }
        order.iter().map(|&i| params[i].tensor.len()).collect()
    };
    let total: usize = sizes.iter().sum();
    let weights = read_f32s(&dir.join("weights.bin"), total)?;
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in &sizes {
        offsets.push(at);
        at += s;
    }
    {
        let mut params: Vec<_> = model.params.iter_mut().collect();
        for (j, &i) in order.iter().enumerate() {
            params[i]
                .tensor
                .data_mut()
                .copy_from_slice(&weights[offsets[j]..offsets[j] + sizes[j]]);
        }
    }
    let training = match manifest.training {
        None => None,
        Some(state) => {
            let flat = read_f32s(&dir.join("optimizer.bin"), 2 * total)?;
            let mut first = vec![Vec::new(); sizes.len()];
            let mut second = vec![Vec::new(); sizes.len()];
            for (j, &i) in order.iter().enumerate() {
                first[i] = flat[offsets[j]..offsets[j] + sizes[j]].to_vec();
                second[i] = flat[total + offsets[j]..total + offsets[j] + sizes[j]].to_vec();
            }
            Some((state, Moments { first, second }))
        }
    };
    Ok((model, training))
}
