//! Agreement-based filtering of the self-training pool.
//!
//! Each candidate's quality score is the Dice overlap between the network's
//! prediction and the promptable segmenter's re-segmentation of it. Entries
//! scoring strictly above the beta-th percentile of all scores are kept.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::Mask3D;
use crate::{fsutil, metrics, percentile, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolStage {
    D1,
    D2,
    D3,
    D4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub volume_id: String,
    /// Where the entry's pseudo-label lives, relative to the workdir.
    pub label_ref: String,
    pub score: Option<f64>,
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPool {
    pub stage: PoolStage,
    pub entries: Vec<PoolEntry>,
    /// Cut-off applied by the last filtering, if any.
    pub threshold: Option<f64>,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub volume_id: String,
    #[serde(rename = "F")]
    pub score: Option<f64>,
    pub retained: bool,
    pub stage: PoolStage,
}

/// Dice between the prediction and its re-segmentation; two empty masks
/// agree perfectly.
pub fn score(s: &Mask3D, s_hat: &Mask3D) -> Result<f64> {
    metrics::dsc(s, s_hat)
}

impl TrainingPool {
    pub fn new(stage: PoolStage, entries: Vec<PoolEntry>) -> Self {
        Self {
            stage,
            entries,
            threshold: None,
        }
    }

    pub fn retained(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(|e| e.retained)
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.entries
            .iter()
            .map(|e| ManifestRecord {
                volume_id: e.volume_id.clone(),
                score: e.score,
                retained: e.retained,
                stage: self.stage,
            })
            .collect()
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in self.manifest() {
            serde_json::to_writer(&mut out, &rec).expect("record serializes");
            out.write_all(b"\n").expect("vec write");
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.manifest_bytes())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Keeps entries with `F > T_beta`, `T_beta` being the nearest-rank
/// beta-th percentile over all scores. `beta == 0` and pools whose scores
/// are all equal keep everything. Scores are left untouched.
pub fn filter_pool(pool: &TrainingPool, beta: f64) -> Result<TrainingPool> {
    if !(0.0..100.0).contains(&beta) {
        return Err(Error::Contract(format!("beta {beta} outside [0, 100)")));
    }
    if pool.entries.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scores = pool
        .entries
        .iter()
        .map(|e| {
            e.score
                .ok_or_else(|| Error::Contract(format!("entry `{}` is not scored", e.volume_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let t = percentile::percentile(&scores, beta).expect("pool is nonempty");
    let tied = scores.iter().all(|&s| s == scores[0]);
    let keep_all = beta == 0.0 || tied;
    let entries = pool
        .entries
        .iter()
        .zip(&scores)
        .map(|(e, &f)| PoolEntry {
            retained: keep_all || f > t,
            ..e.clone()
        })
        .collect();
    Ok(TrainingPool {
        stage: PoolStage::D4,
        entries,
        threshold: Some(t),
    })
}
