//! Run directories and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_sha256: String,
    /// Input artifacts from other runs, by content hash.
    pub inputs: BTreeMap<String, String>,
    /// Every file of the run directory except the manifest.
    pub files: BTreeMap<String, String>,
}

/// A run directory being written.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub subcommand: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates `<parent>/<timestamp>-<subcommand>-<hash>`, adding a numeric
    /// suffix if that name is taken.
    pub fn create(parent: &Path, subcommand: &str, snapshot: &str) -> CliResult<RunDir> {
        fs::create_dir_all(parent)?;
        let hash = sha256_hex(snapshot.as_bytes());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{subcommand}-{}", &hash[..12]);
        let mut path = parent.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = parent.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let run = RunDir { path, subcommand: subcommand.into(), config_hash: hash, inputs: BTreeMap::new() };
        run.write(CONFIG_SNAPSHOT, snapshot.as_bytes())?;
        Ok(run)
    }

    /// Reopens an unfinished run for resumption.
    pub fn reopen(path: &Path, subcommand: &str) -> CliResult<RunDir> {
        if !path.join(CONFIG_SNAPSHOT).is_file() {
            return Err(CliError::Missing(format!("{} is not a run directory", path.display())));
        }
        if path.join(MANIFEST).exists() {
            return Err(CliError::Config(format!("{} is complete and cannot be modified", path.display())));
        }
        let snapshot = fs::read(path.join(CONFIG_SNAPSHOT))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            subcommand: subcommand.into(),
            config_hash: sha256_hex(&snapshot),
            inputs: BTreeMap::new(),
        })
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.file(rel), bytes)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Records an input artifact by hash.
    pub fn add_input(&mut self, label: &str, path: &Path) -> CliResult<()> {
        let bytes = read_input(path)?;
        self.inputs.insert(label.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Hashes every file and writes the manifest; the run is then complete.
    pub fn finish(self) -> CliResult<PathBuf> {
        let mut files = BTreeMap::new();
        collect_files(&self.path, &self.path, &mut files)?;
        let manifest = Manifest {
            tool: "oracle-al".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.clone(),
            config_sha256: self.config_hash.clone(),
            inputs: self.inputs.clone(),
            files,
        };
        self.write_json(MANIFEST, &manifest)?;
        Ok(self.path)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.insert(rel, sha256_hex(&fs::read(&p)?));
            }
        }
    }
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a prerequisite artifact; absence is exit code 3.
pub fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
