//! Content-addressed directory store.
//!
//! Layout: `objects/<sha256>` holds immutable blobs, `index.json` lists
//! sessions, training runs and named scenarios.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sketchlift_client::{ApiError, RunStatus};
use sketchlift_core::digest::sha256_hex;

/// One pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub scene_ref: String,
    pub instruction_ref: String,
    #[serde(default)]
    pub plan_ref: Option<String>,
    #[serde(default)]
    pub trace_ref: Option<String>,
    #[serde(default)]
    pub overlay_ref: Option<String>,
    pub config_ref: String,
    pub backend: String,
    /// Digest of (scene, instruction, config, backend); at most one running
    /// session per key.
    pub request_key: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<ApiError>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub id: String,
    pub status: RunStatus,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub error: Option<ApiError>,
    pub created_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub sessions: Vec<Session>,
    #[serde(default)]
    pub trainings: Vec<TrainRecord>,
    /// Scenario name to object digest.
    #[serde(default)]
    pub scenarios: BTreeMap<String, String>,
}

pub struct Store {
    root: PathBuf,
    index: Mutex<Index>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

impl Store {
    /// Opens or creates a store. Runs left `running` by a previous process
    /// are marked failed.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("objects"))?;
        let mut index: Index = match std::fs::read(root.join("index.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(e),
        };
        let interrupted = || ApiError {
            code: "internal".into(),
            message: "interrupted by service restart".into(),
            stage: None,
            fields: Vec::new(),
        };
        for s in index.sessions.iter_mut().filter(|s| s.status == RunStatus::Running) {
            s.status = RunStatus::Failed;
            s.error = Some(interrupted());
        }
        for t in index.trainings.iter_mut().filter(|t| t.status == RunStatus::Running) {
            t.status = RunStatus::Failed;
            t.error = Some(interrupted());
        }
        let store = Store { root, index: Mutex::new(index) };
        store.flush(&store.index.lock().unwrap())?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn flush(&self, index: &Index) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(index).expect("index serializes");
        bytes.push(b'\n');
        write_atomic(&self.root.join("index.json"), &bytes)
    }

    fn object_path(&self, digest: &str) -> Option<PathBuf> {
        let ok = digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase());
        ok.then(|| self.root.join("objects").join(digest))
    }

    /// Stores a blob and returns its SHA-256 digest.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let digest = sha256_hex(bytes);
        let path = self.object_path(&digest).expect("sha256 hex");
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> io::Result<Option<Vec<u8>>> {
        let Some(path) = self.object_path(digest) else { return Ok(None) };
        match std::fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn snapshot(&self) -> Index {
        self.index.lock().unwrap().clone()
    }

    /// Applies `f` to the index under the store lock and persists the result.
    pub fn update<T>(&self, f: impl FnOnce(&mut Index) -> T) -> io::Result<T> {
        let mut index = self.index.lock().unwrap();
        let out = f(&mut index);
        self.flush(&index)?;
        Ok(out)
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        self.index.lock().unwrap().sessions.iter().find(|s| s.id == id).cloned()
    }

    pub fn training(&self, id: &str) -> Option<TrainRecord> {
        self.index.lock().unwrap().trainings.iter().find(|t| t.id == id).cloned()
    }

    pub fn scenario_ref(&self, name: &str) -> Option<String> {
        self.index.lock().unwrap().scenarios.get(name).cloned()
    }
}
