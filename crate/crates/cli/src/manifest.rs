//! Run manifests and output-directory bookkeeping.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub status: Status,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub output_dir: String,
    /// Output file (relative to `output_dir`) to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// An output directory held exclusively for one subcommand.
pub struct Run {
    dir: PathBuf,
    manifest_path: PathBuf,
    lock_path: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates `dir`, takes its lock and writes the initial manifest.
    pub fn begin(
        dir: &Path,
        manifest_name: &str,
        subcommand: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: &[&Path],
    ) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock_path = dir.join(format!("{manifest_name}.lock"));
        if let Err(e) = OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            bail!("output directory {} is in use ({}): {e}", dir.display(), lock_path.display());
        }
        let run = Self {
            dir: dir.to_path_buf(),
            manifest_path: dir.join(manifest_name),
            lock_path,
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                status: Status::Running,
                config,
                seed,
                inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
                output_dir: dir.display().to_string(),
                artifacts: BTreeMap::new(),
                error: None,
            },
        };
        run.save()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save(&self) -> Result<()> {
        write_atomic(&self.manifest_path, &serde_json::to_vec_pretty(&self.manifest)?)
    }

    /// Runs `body`, then records checksums of the files it reports, or marks
    /// the run failed.
    pub fn execute<F>(mut self, body: F) -> Result<()>
    where
        F: FnOnce(&Run) -> Result<Vec<String>>,
    {
        match body(&self) {
            Ok(outputs) => {
                for name in outputs {
                    let sum = sha256_file(&self.path(&name))?;
                    self.manifest.artifacts.insert(name, sum);
                }
                self.manifest.status = Status::Complete;
                self.save()
            }
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(format!("{e:#}"));
                self.save()?;
                Err(e)
            }
        }
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

/// `--out` if given, else `$CONVCAP_OUT_ROOT/<subcommand>`.
pub fn resolve_out(out: Option<PathBuf>, subcommand: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os(crate::OUT_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(subcommand)),
        None => bail!("no --out given and {} is not set", crate::OUT_ROOT_ENV),
    }
}
