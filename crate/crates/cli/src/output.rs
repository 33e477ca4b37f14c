//! Artifact writing: CSV tables tagged with the config hash, SVG files and
//! run manifests. Every file goes through an atomic rename.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Result;
use bacl_core::io::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the compact JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 of a file's bytes, so inputs are identified by content rather
/// than location.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// A tidy table; `config_hash` is appended as the last column on write.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self::with_header(header.iter().map(|s| s.to_string()).collect())
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self, hash: &str) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = self.header.clone();
        head.push("config_hash".into());
        w.write_record(&head)?;
        for r in &self.rows {
            let mut rec = r.clone();
            rec.push(hash.to_string());
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
    }
}

/// Shortest round-trip form of a float.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Collects the paths written by one command.
pub struct Artifacts {
    pub dir: PathBuf,
    pub hash: String,
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, hash: String) -> Self {
        Self {
            dir: dir.to_path_buf(),
            hash,
            written: Vec::new(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<PathBuf> {
        let bytes = table.to_csv(&self.hash)?;
        self.bytes(name, &bytes)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.bytes(name, &bytes)
    }

    pub fn svg(&mut self, name: &str, svg: &str) -> Result<PathBuf> {
        self.bytes(name, svg.as_bytes())
    }

    /// Records a file some other writer produced.
    pub fn note(&mut self, path: PathBuf) {
        self.written.push(path);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Full invocation, enough to replay the run.
    pub argv: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub duration_secs: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], hash: &str, seed: u64, artifacts: &[PathBuf], elapsed: Duration) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_hash: hash.to_string(),
            seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            duration_secs: elapsed.as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&p, &bytes)?;
        Ok(p)
    }
}
