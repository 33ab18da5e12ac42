//! Model checkpoints: a JSON manifest plus a weights file.
//!
//! The weights file is `"ITMW" | version u16 | value count u32` followed by
//! every parameter as a little-endian `f32`, visual MLP first. Within an MLP
//! each layer stores its `out x in` row-major weight, then its bias.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use itm_core::enhance::{Activation, MlpParams};
use itm_core::trainer::{Model, PipelineConfig};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"ITMW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weight: [usize; 2],
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpManifest {
    pub activation: Activation,
    pub layers: Vec<LayerShape>,
}

impl MlpManifest {
    fn of(mlp: &MlpParams) -> Self {
        let layers = mlp.widths().windows(2).map(|w| LayerShape { weight: [w[1], w[0]], bias: w[1] }).collect();
        MlpManifest { activation: mlp.activation(), layers }
    }

    fn widths(&self) -> Result<Vec<usize>> {
        let first = self.layers.first().ok_or_else(|| CliError::Format("manifest lists no layers".into()))?;
        let mut widths = vec![first.weight[1]];
        for l in &self.layers {
            if l.weight[1] != *widths.last().unwrap() || l.bias != l.weight[0] {
                return Err(CliError::Format("manifest layer shapes do not chain".into()));
            }
            widths.push(l.weight[0]);
        }
        Ok(widths)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u16,
    /// Weights file, relative to the manifest.
    pub weights: String,
    pub visual: MlpManifest,
    pub textual: MlpManifest,
    pub pipeline: PipelineConfig,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_rsum: f64,
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let values: Vec<f64> = model.visual.values().iter().chain(model.textual.values()).copied().collect();
    let mut out = Vec::with_capacity(10 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(CliError::Format("not an ITMW weights file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CliError::Format(format!("unsupported weights version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() != count.saturating_mul(4) {
        return Err(CliError::Format(format!("weights file holds {} bytes of values, header says {count} values", body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(itm_core::Error::Validation("checkpoint has non-finite parameters".into()).into());
    }
    Ok(values)
}

fn weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("itmw")
}

pub fn save_checkpoint(model: &Model, seed: u64, epoch: usize, best_val_rsum: f64, path: &Path) -> Result<()> {
    let weights = weights_path(path);
    let manifest = Manifest {
        version: VERSION,
        weights: weights.file_name().and_then(|n| n.to_str()).unwrap_or("model.itmw").to_string(),
        visual: MlpManifest::of(&model.visual),
        textual: MlpManifest::of(&model.textual),
        pipeline: model.pipeline,
        seed,
        epoch,
        best_val_rsum,
    };
    fs::write(&weights, encode_weights(model)).map_err(CliError::io(&weights))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(CliError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Manifest)> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })?;
    if manifest.version != VERSION {
        return Err(CliError::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let weights = path.parent().unwrap_or(Path::new(".")).join(&manifest.weights);
    let values = decode_weights(&fs::read(&weights).map_err(CliError::io(&weights))?)?;
    let (vw, tw) = (manifest.visual.widths()?, manifest.textual.widths()?);
    let visual = MlpParams::zeros(&vw, manifest.visual.activation)?;
    if values.len() != visual.len() + MlpParams::zeros(&tw, manifest.textual.activation)?.len() {
        return Err(CliError::Format("weights do not match the manifest's layer shapes".into()));
    }
    let (v, t) = values.split_at(visual.len());
    let model = Model {
        visual: MlpParams::from_values(&vw, manifest.visual.activation, v.to_vec())?,
        textual: MlpParams::from_values(&tw, manifest.textual.activation, t.to_vec())?,
        pipeline: manifest.pipeline,
    };
    Ok((model, manifest))
}
