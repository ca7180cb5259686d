//! Per-workdir record of completed stages, their input and output digests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{fsutil, Error, Result};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Input path (relative to its workdir) or `config` mapped to a sha256 digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
    pub status: StageStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub stages: Vec<StageRecord>,
}

impl Ledger {
    /// Loads `root/ledger.json`; a missing file is an empty ledger.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(LEDGER_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fsutil::write_atomic(&root.join(LEDGER_FILE), &bytes)
    }

    pub fn get(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.name == name)
    }

    /// Replaces the stage's record, keeping `order` (the pipeline's stage
    /// names) as the sort order.
    pub fn upsert(&mut self, record: StageRecord, order: &[String]) {
        self.stages.retain(|r| r.name != record.name);
        self.stages.push(record);
        let rank = |n: &str| order.iter().position(|o| o == n).unwrap_or(usize::MAX);
        self.stages.sort_by_key(|r| rank(&r.name));
    }

    /// Drops records for the named stages.
    pub fn invalidate(&mut self, names: &[String]) {
        self.stages.retain(|r| !names.contains(&r.name));
    }

    /// The ledger with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.stages {
            r.duration_ms = 0;
        }
        out
    }
}

/// Digests of files under `root`, keyed by their relative paths.
pub fn digest_files(root: &Path, rel_paths: &[String]) -> Result<BTreeMap<String, String>> {
    rel_paths
        .iter()
        .map(|p| Ok((p.clone(), fsutil::file_digest(&root.join(p))?)))
        .collect()
}

/// True when every recorded output still exists with the recorded digest.
pub fn outputs_intact(root: &Path, record: &StageRecord) -> bool {
    record
        .outputs
        .iter()
        .all(|(p, d)| fsutil::file_digest(&root.join(p)).is_ok_and(|x| &x == d))
}
