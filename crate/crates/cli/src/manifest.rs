use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "implicit-align";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    /// Fails if the file changed since the manifest was written.
    pub fn verify(&self) -> Result<()> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            bail!(
                "{} changed since the manifest was written (sha256 {} != {})",
                self.path.display(),
                now,
                self.sha256
            );
        }
        Ok(())
    }
}

/// Everything needed to re-run a command. Written before any work starts and
/// rewritten with `complete: true` once all outputs exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub complete: bool,
    pub error: Option<String>,
    pub seed: u64,
    pub num_classes: usize,
    /// Resolved config as flat dotted keys.
    pub config: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Command-specific extras, e.g. the generator manifest or grid spec.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, num_classes: usize) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            complete: false,
            error: None,
            seed,
            num_classes,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: Value::Null,
        }
    }

    pub fn input(&self, role: &str) -> Option<&InputFile> {
        self.inputs.get(role)
    }
}

/// A manifest on disk that tracks the run's completion state.
pub struct Run {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates `out_dir` and writes the incomplete manifest into it.
    pub fn start(out_dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let run = Self {
            path: out_dir.join("manifest.json"),
            manifest,
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text + "\n").with_context(|| format!("writing {}", self.path.display()))
    }

    /// Runs `body`, then records success or the error in the manifest.
    pub fn finish(mut self, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
        match body(&mut self.manifest) {
            Ok(()) => {
                self.manifest.complete = true;
                self.write()
            }
            Err(e) => {
                self.manifest.error = Some(format!("{e:#}"));
                // the original error matters more than a failed rewrite
                let _ = self.write();
                Err(e)
            }
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
