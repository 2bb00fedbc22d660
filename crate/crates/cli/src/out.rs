//! Artifact writer. Every file goes through [`Output::write`], which records
//! its SHA-256 in `MANIFEST.json`.

use std::path::{Path, PathBuf};

use fhspec::grid::RGrid;
use fhspec::io;
use fhspec::tf::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: Status,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Paths listed in the manifest whose current content no longer matches.
pub fn verify(dir: &Path, m: &Manifest) -> Vec<String> {
    m.artifacts
        .iter()
        .filter(|a| match std::fs::read(dir.join(&a.path)) {
            Ok(b) => sha256_hex(&b) != a.sha256,
            Err(_) => true,
        })
        .map(|a| a.path.clone())
        .collect()
}

pub fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

pub struct Output {
    dir: PathBuf,
    manifest: Manifest,
    /// The manifest found in `dir` before this run, with its stale entries.
    pub previous: Option<(Manifest, Vec<String>)>,
}

impl Output {
    /// Open `dir`, verify any earlier manifest, delete the artifacts it
    /// listed (except `keep`) and mark the run as started.
    pub fn open(dir: PathBuf, command: &str, config_sha256: String, keep: &[&str]) -> Result<Self, Failure> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::validation(format!("cannot create {}: {e}", dir.display())))?;
        let previous = read_manifest(&dir).map(|m| {
            let stale = verify(&dir, &m);
            for p in &stale {
                eprintln!("warning: {} does not match its recorded digest", dir.join(p).display());
            }
            for a in m.artifacts.iter().filter(|a| !keep.contains(&a.path.as_str())) {
                let _ = std::fs::remove_file(dir.join(&a.path));
            }
            (m, stale)
        });
        let out = Self {
            dir,
            manifest: Manifest {
                command: command.to_string(),
                status: Status::Running,
                config_sha256,
                failed_stage: None,
                error: None,
                artifacts: Vec::new(),
            },
            previous,
        };
        out.save_manifest()?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| Failure::stage("output", format!("cannot write {}: {e}", path.display())))?;
        self.record(name, bytes);
        Ok(())
    }

    /// Add a file that was written elsewhere (e.g. an append-only journal).
    pub fn register(&mut self, name: &str) -> Result<(), Failure> {
        let bytes = std::fs::read(self.dir.join(name)).map_err(|e| Failure::stage("output", e.to_string()))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        let entry = Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        match self.manifest.artifacts.iter_mut().find(|a| a.path == name) {
            Some(a) => *a = entry,
            None => self.manifest.artifacts.push(entry),
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::stage("output", e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// `<stem>.csv`, `<stem>.pgm` and `<stem>.axes.json` for one matrix.
    pub fn matrix(&mut self, stem: &str, m: &RGrid, rows: &Axis, cols: &Axis) -> Result<(), Failure> {
        let csv = io::matrix_csv(m, rows, cols).map_err(Failure::from_core)?;
        self.write(&format!("{stem}.csv"), csv.as_bytes())?;
        self.write(&format!("{stem}.pgm"), &io::pgm(m))?;
        self.write(&format!("{stem}.axes.json"), io::axis_sidecar(rows, cols).as_bytes())
    }

    fn save_manifest(&self) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(self.dir.join(MANIFEST), text)
            .map_err(|e| Failure::stage("output", format!("cannot write manifest: {e}")))
    }

    pub fn finish(mut self) -> Result<PathBuf, Failure> {
        self.manifest.status = Status::Complete;
        self.save_manifest()?;
        Ok(self.dir)
    }

    /// Keep what was written so far and note the failed stage.
    pub fn fail(mut self, f: &Failure) -> Failure {
        self.manifest.status = Status::Failed;
        self.manifest.failed_stage = f.stage.clone();
        self.manifest.error = Some(f.message.clone());
        if let Err(e) = self.save_manifest() {
            eprintln!("warning: {}", e.message);
        }
        f.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_tracks_and_verifies_digests() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::open(dir.path().to_path_buf(), "test", "x".into(), &[]).unwrap();
        out.write("a.csv", b"1,2\n").unwrap();
        out.write("a.csv", b"1,3\n").unwrap();
        out.finish().unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.status, Status::Complete);
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"1,3\n"));
        assert!(verify(dir.path(), &m).is_empty());
        std::fs::write(dir.path().join("a.csv"), b"tampered").unwrap();
        assert_eq!(verify(dir.path(), &m), vec!["a.csv".to_string()]);
        let again = Output::open(dir.path().to_path_buf(), "test", "x".into(), &[]).unwrap();
        assert_eq!(again.previous.unwrap().1, vec!["a.csv".to_string()]);
        assert!(!dir.path().join("a.csv").exists());
    }

    #[test]
    fn failure_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::open(dir.path().to_path_buf(), "test", "x".into(), &[]).unwrap();
        out.write("signal.csv", b"n\n").unwrap();
        let f = out.fail(&Failure::stage("kernels", "boom".into()));
        assert_eq!(f.code, 3);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.status, Status::Failed);
        assert_eq!(m.failed_stage.as_deref(), Some("kernels"));
        assert_eq!(m.artifacts.len(), 1);
    }
}
