//! Model registry: a JSON manifest listing every checkpoint, its lineage and
//! calibrated threshold, and which model is active.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

const MANIFEST: &str = "registry.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStatus {
    Training,
    Ready,
    Finetuning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub parent_id: Option<String>,
    /// Checkpoint directory.
    pub checkpoint: PathBuf,
    pub threshold: f32,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub status: ModelStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub active: Option<String>,
    pub entries: Vec<ModelRegistryEntry>,
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    manifest: RegistryManifest,
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Registry {
    /// Open the registry in `dir`, creating an empty one if needed.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?
        } else {
            RegistryManifest::default()
        };
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RegistryManifest {
        &self.manifest
    }

    /// Write the manifest via a temporary file and rename, so readers never
    /// see a partial file.
    pub fn save(&self) -> anyhow::Result<()> {
        let tmp = self.dir.join(format!(".{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelRegistryEntry> {
        self.manifest.entries.iter().find(|e| e.model_id == model_id)
    }

    pub fn active(&self) -> Option<&ModelRegistryEntry> {
        self.manifest.active.as_deref().and_then(|id| self.get(id))
    }

    /// Next free id of the form `model-0001`.
    pub fn next_id(&self) -> String {
        (self.manifest.entries.len() + 1..)
            .map(|n| format!("model-{n:04}"))
            .find(|id| self.get(id).is_none())
            .expect("unbounded range")
    }

    /// Default checkpoint location for a model id.
    pub fn checkpoint_dir(&self, model_id: &str) -> PathBuf {
        self.dir.join(model_id)
    }

    /// Add an entry. Parents must already be registered, which keeps the
    /// lineage acyclic.
    pub fn register(&mut self, entry: ModelRegistryEntry) -> anyhow::Result<()> {
        if self.get(&entry.model_id).is_some() {
            bail!("model {} already registered", entry.model_id);
        }
        if let Some(parent) = &entry.parent_id {
            if self.get(parent).is_none() {
                bail!("unknown parent model {parent}");
            }
        }
        self.manifest.entries.push(entry);
        Ok(())
    }

    pub fn update(&mut self, model_id: &str, f: impl FnOnce(&mut ModelRegistryEntry)) -> anyhow::Result<()> {
        let entry = self
            .manifest
            .entries
            .iter_mut()
            .find(|e| e.model_id == model_id)
            .with_context(|| format!("unknown model {model_id}"))?;
        f(entry);
        Ok(())
    }

    pub fn remove(&mut self, model_id: &str) {
        self.manifest.entries.retain(|e| e.model_id != model_id);
        if self.manifest.active.as_deref() == Some(model_id) {
            self.manifest.active = None;
        }
    }

    pub fn activate(&mut self, model_id: &str) -> anyhow::Result<()> {
        match self.get(model_id) {
            Some(e) if e.status == ModelStatus::Ready => {
                self.manifest.active = Some(model_id.to_string());
                Ok(())
            }
            Some(e) => bail!("model {model_id} is {:?}, not ready", e.status),
            None => bail!("unknown model {model_id}"),
        }
    }
}
