//! Run directory layout, manifest and advisory locking.
//!
//! One directory per experiment run. Artifacts are written to a temp file
//! and renamed into place; a `lock` file created exclusively per subcommand
//! keeps concurrent writers out of the same directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::TrainLogRow;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
}

pub struct RunDir {
    root: PathBuf,
}

/// Advisory lock; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        fs::create_dir_all(root.join("plots"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<RunLock> {
        let path = self.root.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::RunDirLocked(self.root.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.root.join("denoiser.dga")
    }

    pub fn pruner_path(&self) -> PathBuf {
        self.root.join("pruner.dga")
    }

    pub fn scores_path(&self) -> PathBuf {
        self.root.join("scores.json")
    }

    pub fn gate_path(&self) -> PathBuf {
        self.root.join("gate.json")
    }

    pub fn prune_record_path(&self) -> PathBuf {
        self.root.join("prune_record.json")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn search_log_path(&self) -> PathBuf {
        self.root.join("search_log.csv")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn plot_path(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.{ext}"))
    }

    /// Writes bytes atomically (temp file + rename).
    pub fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Writes the manifest once; later commands verify the config matches.
    pub fn ensure_manifest(&self, config_bytes: &[u8], master_seed: u64) -> Result<RunManifest> {
        let config_hash = hex_sha256(config_bytes);
        let path = self.manifest_path();
        if path.exists() {
            let existing: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if existing.config_hash != config_hash {
                return Err(Error::Config(format!(
                    "run directory {} was created with a different config",
                    self.root.display()
                )));
            }
            return Ok(existing);
        }
        let manifest = RunManifest {
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed,
        };
        self.write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    pub fn require(&self, path: &Path, needed_by: &str, hint: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: path
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                needed_by: needed_by.into(),
                hint: hint.into(),
            });
        }
        Ok(())
    }

    pub fn write_train_log(&self, rows: &[TrainLogRow]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "consistency_loss", "sparse_loss_value", "keep_ratio_flops", "phase", "lr"])
            .map_err(csv_err)?;
        for r in rows {
            w.write_record([
                r.step.to_string(),
                r.consistency_loss.to_string(),
                r.sparse_loss_value.to_string(),
                r.keep_ratio_flops.to_string(),
                r.phase.clone(),
                r.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        self.write_atomic(&self.train_log_path(), &bytes)
    }

    pub fn write_search_log(&self, entries: &[crate::baselines::SearchLogEntry]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["evaluation_index", "gate_hash", "fitness", "ratio"])
            .map_err(csv_err)?;
        for e in entries {
            w.write_record([
                e.index.to_string(),
                e.gate_hash.clone(),
                e.fitness.to_string(),
                e.ratio.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        self.write_atomic(&self.search_log_path(), &bytes)
    }

    pub fn write_eval_csv(&self, rows: &[(u64, f64)], metric: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", metric]).map_err(csv_err)?;
        for (seed, v) in rows {
            w.write_record([seed.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        self.write_atomic(&self.eval_path(), &bytes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
