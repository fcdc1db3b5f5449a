//! Content-addressed memo of held-out scores per training.
//!
//! A training is identified by the workbench (data + splits), learner,
//! training protocol, xi and the sorted labeled set. Since the labeled set
//! of prefix `k` only depends on the first `k` batches, proposals that touch
//! late batches reuse every earlier prefix. Entries live in memory and,
//! optionally, as one JSON file each under a directory shared between
//! processes. Files are written to a temporary name and renamed into place.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Workbench;
use crate::error::Result;
use crate::learner::{LearnerSpec, Metric, TrainConfig};
use crate::rng::{rng_for, Stream};

/// Everything a cached score depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingKey {
    /// Hash of dataset contents and splits (fixes D^M, D^V and D^T).
    pub workbench: String,
    pub learner: LearnerSpec,
    pub train: TrainConfig,
    pub metric: Metric,
    pub xi: u64,
    /// Sorted labeled indices.
    pub labeled: Vec<usize>,
}

impl TrainingKey {
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("key serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One persisted score pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: TrainingKey,
    /// Bit patterns of the validation and test scores.
    pub score_bits: [u64; 2],
    pub checksum: String,
}

impl CacheEntry {
    fn new(key: TrainingKey, scores: [f64; 2]) -> Self {
        let score_bits = scores.map(f64::to_bits);
        let checksum = entry_checksum(&key.digest(), score_bits);
        Self { key, score_bits, checksum }
    }

    pub fn scores(&self) -> [f64; 2] {
        self.score_bits.map(f64::from_bits)
    }

    fn is_intact(&self, digest: &str) -> bool {
        self.key.digest() == digest && entry_checksum(digest, self.score_bits) == self.checksum
    }
}

fn entry_checksum(digest: &str, bits: [u64; 2]) -> String {
    let mut h = Sha256::new();
    h.update(digest.as_bytes());
    h.update(bits[0].to_le_bytes());
    h.update(bits[1].to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub evicted: u64,
}

/// Result of re-deriving a sample of persisted entries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub total: usize,
    pub checked: usize,
    pub mismatches: Vec<String>,
    pub corrupt: Vec<String>,
    /// Entries belonging to a different workbench, not recomputable here.
    pub skipped: usize,
}

#[derive(Debug, Default)]
pub struct ScoreCache {
    memory: RwLock<HashMap<String, [u64; 2]>>,
    dir: Option<PathBuf>,
    hits: AtomicU64,
    misses: AtomicU64,
    evicted: AtomicU64,
    tmp_counter: AtomicU64,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// A cache backed by `dir` (created if missing).
    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, digest: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&digest[..2]).join(format!("{digest}.json")))
    }

    fn read_disk(&self, digest: &str) -> Option<[u64; 2]> {
        let path = self.entry_path(digest)?;
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.is_intact(digest) => Some(entry.score_bits),
            _ => {
                let _ = fs::remove_file(&path);
                self.evicted.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn write_disk(&self, entry: &CacheEntry, digest: &str) -> Result<()> {
        let Some(path) = self.entry_path(digest) else { return Ok(()) };
        let parent = path.parent().expect("entry has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{digest}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, serde_json::to_vec(entry)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Returns the cached scores for `key`, computing and storing them on a
    /// miss. Concurrent misses on one key compute identical values; the last
    /// write wins.
    pub fn get_or_compute(&self, key: &TrainingKey, compute: impl FnOnce() -> Result<[f64; 2]>) -> Result<[f64; 2]> {
        let digest = key.digest();
        if let Some(bits) = self.memory.read().get(&digest) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(bits.map(f64::from_bits));
        }
        if let Some(bits) = self.read_disk(&digest) {
            self.memory.write().insert(digest, bits);
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(bits.map(f64::from_bits));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let scores = compute()?;
        let entry = CacheEntry::new(key.clone(), scores);
        self.write_disk(&entry, &digest)?;
        self.memory.write().insert(digest, entry.score_bits);
        Ok(scores)
    }

    fn disk_files(&self) -> Result<Vec<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(Vec::new()) };
        let mut files = Vec::new();
        for shard in fs::read_dir(dir)? {
            let shard = shard?.path();
            if !shard.is_dir() {
                continue;
            }
            for f in fs::read_dir(&shard)? {
                let p = f?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    files.push(p);
                }
            }
        }
        files.sort();
        Ok(files)
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let entries = if self.dir.is_some() { self.disk_files()?.len() } else { self.memory.read().len() };
        Ok(CacheStats {
            entries,
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evicted: self.evicted.load(Ordering::Relaxed),
        })
    }

    pub fn reset_counters(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.evicted.store(0, Ordering::Relaxed);
    }

    /// Drops every entry, in memory and on disk.
    pub fn clear(&self) -> Result<()> {
        self.memory.write().clear();
        for f in self.disk_files()? {
            fs::remove_file(f)?;
        }
        Ok(())
    }

    /// Re-trains a seeded sample of `fraction` of the persisted entries
    /// (at least one when any exist) and compares scores bit for bit.
    /// Corrupt files are evicted and reported.
    pub fn verify(&self, bench: &Workbench, fraction: f64, seed: u64) -> Result<VerifyReport> {
        let files = self.disk_files()?;
        let mut report = VerifyReport { total: files.len(), ..VerifyReport::default() };
        let mut candidates = Vec::new();
        for path in &files {
            let digest = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let parsed = fs::read_to_string(path).ok().and_then(|t| serde_json::from_str::<CacheEntry>(&t).ok());
            match parsed {
                Some(entry) if entry.is_intact(&digest) => {
                    if entry.key.workbench == bench.id() {
                        candidates.push(entry);
                    } else {
                        report.skipped += 1;
                    }
                }
                _ => {
                    let _ = fs::remove_file(path);
                    self.memory.write().remove(&digest);
                    self.evicted.fetch_add(1, Ordering::Relaxed);
                    report.corrupt.push(digest);
                }
            }
        }
        if candidates.is_empty() {
            return Ok(report);
        }
        let n = ((candidates.len() as f64 * fraction).ceil() as usize).clamp(1, candidates.len());
        let sample: Vec<&CacheEntry> = candidates.choose_multiple(&mut rng_for(seed, Stream::Search), n).collect();
        for entry in sample {
            let key = &entry.key;
            let b = Workbench { learner: key.learner.clone(), train: key.train.clone(), metric: key.metric, ..bench.clone() };
            let fresh = b.train_and_score(&key.labeled, key.xi)?.map(f64::to_bits);
            report.checked += 1;
            if fresh != entry.score_bits {
                report.mismatches.push(key.digest());
            }
        }
        Ok(report)
    }
}
