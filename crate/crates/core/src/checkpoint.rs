//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (format version and
//! layer table), `metadata.json` (network configuration, lineage, threshold
//! and stain reference) and one `<layer>.bin` per layer with the kernel
//! followed by the biases as little-endian `f32`.
//! Writes go to a sibling temporary directory that is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerSpec, ModelMeta, ModelParams, NetworkConfig};

const MANIFEST: &str = "manifest.json";
const METADATA: &str = "metadata.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: NetworkConfig,
    #[serde(flatten)]
    meta: ModelMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    spec: LayerSpec,
    file: String,
}

fn layer_file(name: &str) -> String {
    format!("{name}.bin")
}

fn temp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Write `params` to `dir`, replacing any previous checkpoint there.
pub fn save(params: &ModelParams, dir: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let dir = dir.as_ref();
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let file = layer_file(&layer.spec.name);
        let mut bytes = Vec::with_capacity(4 * (layer.weight.len() + layer.bias.len()));
        for v in layer.weight.iter().chain(&layer.bias) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(tmp.join(&file), bytes)?;
        layers.push(LayerEntry { spec: layer.spec.clone(), file });
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, layers };
    fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    let metadata = Metadata { config: params.config, meta: params.meta.clone() };
    fs::write(tmp.join(METADATA), serde_json::to_vec_pretty(&metadata)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Read only the metadata of a checkpoint.
pub fn load_meta(dir: impl AsRef<Path>) -> Result<(NetworkConfig, ModelMeta)> {
    let metadata: Metadata = serde_json::from_slice(&fs::read(dir.as_ref().join(METADATA))?)?;
    Ok((metadata.config, metadata.meta))
}

/// Read a checkpoint written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let metadata: Metadata = serde_json::from_slice(&fs::read(dir.join(METADATA))?)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let bytes = fs::read(dir.join(&entry.file))?;
        let (nw, nb) = (entry.spec.weight_len(), entry.spec.out_channels);
        if bytes.len() != 4 * (nw + nb) {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                4 * (nw + nb)
            )));
        }
        let mut values: Vec<f32> =
            bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let bias = values.split_off(nw);
        layers.push(Layer { spec: entry.spec, weight: values, bias });
    }
    let params = ModelParams { config: metadata.config, layers, meta: metadata.meta };
    params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}
