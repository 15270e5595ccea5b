//! On-disk project: `project.json` plus the files it references.

use std::fs::{self, File, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use poselab_core::io::load_model;
use poselab_core::labelgen::ProjectManifest;
use poselab_core::ObjectModel;
use sha2::{Digest, Sha256};

use crate::error::{Class, CliError, CliResult};

pub const MANIFEST_FILE: &str = "project.json";
const LOCK_FILE: &str = ".poselab.lock";

/// A manifest as read from disk with the revision of those exact bytes.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub manifest: ProjectManifest,
    pub revision: String,
}

/// Project directory. Readers never block; writers take an exclusive lock on
/// `.poselab.lock`, re-read the manifest, validate the result and replace the
/// file atomically.
#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

/// Canonical manifest bytes: pretty JSON with a trailing newline.
pub fn encode(m: &ProjectManifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

pub fn revision_of(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    poselab_core::Error::io(path, e).into()
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

#[derive(Debug)]
struct WriteLock(File);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

impl ProjectStore {
    /// Opens an existing project.
    pub fn open(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(CliError::new(
                Class::NotFound,
                "NotFound",
                format!("no {MANIFEST_FILE} in {}", root.display()),
            ));
        }
        Ok(Self { root })
    }

    /// Writes the first manifest of a new project. An existing manifest is
    /// left alone when it is identical and rejected otherwise.
    pub fn create(root: impl Into<PathBuf>, manifest: &ProjectManifest) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let store = Self { root };
        let _lock = store.lock()?;
        let path = store.manifest_path();
        let bytes = encode(manifest);
        if path.exists() {
            let current = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let existing: ProjectManifest =
                serde_json::from_slice(&current).map_err(|e| poselab_core::Error::parse(&path, e.to_string()))?;
            let same_setup = existing.project_id == manifest.project_id
                && existing.intrinsics == manifest.intrinsics
                && existing.model == manifest.model
                && existing.board == manifest.board;
            if !same_setup {
                return Err(CliError::conflict(format!("{} already holds a different project", store.root.display())));
            }
            return Ok(store);
        }
        let model = store.model(manifest)?;
        manifest.validate(Some(&model))?;
        write_atomic(&path, &bytes)?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Resolves a manifest path against the project root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load(&self) -> CliResult<Snapshot> {
        let path = self.manifest_path();
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let manifest: ProjectManifest =
            serde_json::from_slice(&bytes).map_err(|e| poselab_core::Error::parse(&path, e.to_string()))?;
        Ok(Snapshot { manifest, revision: revision_of(&bytes) })
    }

    pub fn model(&self, m: &ProjectManifest) -> CliResult<ObjectModel> {
        Ok(load_model(&self.resolve(&m.model.mesh), &self.resolve(&m.model.keypoints))?)
    }

    fn lock(&self) -> CliResult<WriteLock> {
        let path = self.root.join(LOCK_FILE);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        match f.try_lock() {
            Ok(()) => Ok(WriteLock(f)),
            Err(TryLockError::WouldBlock) => Err(CliError::conflict("another writer holds the project lock")),
            Err(TryLockError::Error(e)) => Err(io_err(&path, e)),
        }
    }

    /// Applies `f` to the current manifest under the writer lock.
    ///
    /// With `expected`, the update is refused unless the manifest on disk is
    /// still at that revision. The result is validated before it replaces
    /// the file; a manifest that does not change is not rewritten.
    pub fn update<T>(
        &self,
        expected: Option<&str>,
        f: impl FnOnce(&mut ProjectManifest, &ObjectModel) -> CliResult<T>,
    ) -> CliResult<(T, String)> {
        let _lock = self.lock()?;
        let snap = self.load()?;
        if let Some(rev) = expected {
            if rev != snap.revision {
                return Err(CliError::conflict(format!(
                    "project changed: expected revision {rev}, found {}",
                    snap.revision
                )));
            }
        }
        let mut manifest = snap.manifest;
        let model = self.model(&manifest)?;
        let out = f(&mut manifest, &model)?;
        manifest.validate(Some(&model))?;
        let bytes = encode(&manifest);
        let rev = revision_of(&bytes);
        if rev != snap.revision {
            write_atomic(&self.manifest_path(), &bytes)?;
        }
        Ok((out, rev))
    }
}
