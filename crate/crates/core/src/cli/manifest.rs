use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            role: role.into(),
            path: path.into(),
            bytes: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        })
    }
}

/// What `prism train` read and wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    /// Relative to the output directory, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, out: &Path) -> Result<Self> {
        let d = &config.data;
        let inputs = vec![
            InputDigest::of("interactions", &d.interactions)?,
            InputDigest::of("image_embeddings", &d.image_embeddings)?,
            InputDigest::of("text_embeddings", &d.text_embeddings)?,
        ];
        let mut outputs = Vec::new();
        list_files(out, out, &mut outputs)?;
        outputs.retain(|p| p != "manifest.json");
        outputs.sort();
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seeds: config.train.seeds.clone(),
            inputs,
            outputs,
        })
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}
