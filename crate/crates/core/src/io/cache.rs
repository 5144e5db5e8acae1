use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::sufficiency::{JobCache, JobKey};
use crate::training::TrainRecord;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheEntry {
    job_id: String,
    fingerprint: String,
    /// SHA-256 of the checkpoint bytes.
    model_sha256: String,
    record: TrainRecord,
}

/// Checkpoint directory. Each job is stored as `<fingerprint>.flsf` plus a
/// `<fingerprint>.json` sidecar written last, so an interrupted store leaves
/// no loadable entry. Entries whose checkpoint hash does not match are
/// ignored and retrained.
#[derive(Debug, Clone)]
pub struct DirCache {
    dir: PathBuf,
}

impl DirCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, key: &JobKey) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{}.flsf", key.fingerprint)),
            self.dir.join(format!("{}.json", key.fingerprint)),
        )
    }

    fn try_load(&self, key: &JobKey) -> Result<Option<(FlowModel, TrainRecord)>> {
        let (model_path, entry_path) = self.paths(key);
        let entry_bytes = match fs::read(&entry_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&entry_path, e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&entry_bytes)?;
        if entry.job_id != key.job_id || entry.fingerprint != key.fingerprint {
            return Ok(None);
        }
        let bytes = fs::read(&model_path).map_err(|e| Error::io(&model_path, e))?;
        if hex(&Sha256::digest(&bytes)) != entry.model_sha256 {
            return Ok(None);
        }
        Ok(Some((FlowModel::from_bytes(&bytes, &model_path)?, entry.record)))
    }
}

impl JobCache for DirCache {
    fn load(&self, key: &JobKey) -> Option<(FlowModel, TrainRecord)> {
        self.try_load(key).ok().flatten()
    }

    fn store(&self, key: &JobKey, model: &FlowModel, record: &TrainRecord) -> Result<()> {
        let (model_path, entry_path) = self.paths(key);
        let bytes = model.to_bytes();
        write_atomic(&model_path, &bytes)?;
        let entry = CacheEntry {
            job_id: key.job_id.clone(),
            fingerprint: key.fingerprint.clone(),
            model_sha256: hex(&Sha256::digest(&bytes)),
            record: record.clone(),
        };
        write_atomic(&entry_path, &serde_json::to_vec_pretty(&entry)?)
    }
}
