//! CSV and manifest output.
//!
//! Floats are written with 17 significant digits so equal bits give equal
//! bytes. Every file a command creates is registered with an [`ArtifactDir`];
//! if the command fails before [`ArtifactDir::commit`], the files are removed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// 17-significant-digit scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A row of already formatted CSV fields.
pub type Row = Vec<String>;

/// Output directory of one command run.
pub struct ArtifactDir {
    dir: PathBuf,
    created: Vec<PathBuf>,
    committed: bool,
}

impl ArtifactDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.created.push(path.clone());
        path
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Row>) -> Result<PathBuf> {
        let path = self.file(name);
        let mut writer = csv::Writer::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(path)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.file(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Names of the registered files, in creation order.
    pub fn names(&self) -> Vec<String> {
        self.created
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for ArtifactDir {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.created {
                let _ = fs::remove_file(path);
            }
        }
    }
}

/// Summary written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub headline: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    pub config: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text).context("parsing manifest")?;
        if manifest.command.is_empty() {
            bail!("manifest has an empty command");
        }
        if manifest.config_hash.len() != 64 || !manifest.config_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            bail!("manifest config hash `{}` is not a SHA-256 hex digest", manifest.config_hash);
        }
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn headline(&self, key: &str) -> Result<f64> {
        self.headline
            .get(key)
            .copied()
            .with_context(|| format!("manifest of `{}` lacks headline `{key}`", self.command))
    }
}
