//! Run configuration files and the manifest written next to every output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use abfr_core::extract::ExtractionSpec;
use abfr_core::model::ModelConfig;
use abfr_core::synthetic::SyntheticParams;
use abfr_core::train::TrainSpec;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";
const RUN_FORMAT: &str = "abfr-run-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsSettings {
    pub metric: String,
    pub alpha: f64,
}

impl Default for StatsSettings {
    fn default() -> Self {
        Self {
            metric: "acc".into(),
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    /// Concurrent cells; 0 lets the thread pool decide.
    pub jobs: usize,
    /// Cell ids such as `random-iterative-vit-kan-kan`; empty means every
    /// cell whose features are available.
    pub cells: Vec<String>,
}

/// Everything a command can be configured with. Each section is optional in
/// the file; command-line flags override whatever the file says.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticParams,
    pub extraction: ExtractionSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub grid: GridSettings,
    pub stats: StatsSettings,
}

impl RunConfig {
    /// Reads a config file, or the resolved parameters of an earlier run's manifest.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let config = if value.get("format").and_then(|f| f.as_str()) == Some(RUN_FORMAT) {
            serde_json::from_value(value["parameters"].clone())
        } else {
            serde_json::from_value(value)
        };
        config.with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config_file: Option<PathBuf>,
    /// Fully resolved; can be passed back as `--config-file` to replay the run.
    pub parameters: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_file: Option<&Path>, parameters: RunConfig) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            config_file: config_file.map(Path::to_path_buf),
            parameters,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(digest_tree(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let own = |d: &FileDigest| d.path.file_name().is_some_and(|n| n == RUN_MANIFEST);
        self.outputs.extend(digest_tree(path)?.into_iter().filter(|d| !own(d)));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digests a file, or every file below a directory in sorted order.
pub fn digest_tree(path: &Path) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            out.extend(digest_tree(&e)?);
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        out.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(out)
}
