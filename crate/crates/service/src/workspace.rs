//! Project storage with optimistic concurrency.
//!
//! `<root>/<id>` is a symlink to `<root>/.revisions/<id>/<n>`, a complete
//! project directory. A put writes revision `n + 1` beside it and swaps the
//! link with a rename, so readers see either the old or the new project and
//! never a mix. Projects created by other tools as plain directories are
//! revision 0 until their first put.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use protoml_core::document::{project_from_documents, read_project_documents, write_documents, DocumentSet, LoadError, PROJECT_MANIFEST};

const REVISIONS: &str = ".revisions";
/// Revisions kept per project, including the current one.
const KEEP: u64 = 4;

#[derive(Debug)]
pub enum StoreError {
    InvalidId(String),
    NotFound(String),
    Stale { current: u64 },
    Invalid(LoadError),
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectSummary {
    pub id: String,
    pub name: String,
    pub revision: u64,
}

pub fn is_project_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

#[derive(Debug, Default)]
pub struct Workspace {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), locks: Mutex::default() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_id(id: &str) -> Result<(), StoreError> {
        if is_project_id(id) {
            Ok(())
        } else {
            Err(StoreError::InvalidId(id.to_string()))
        }
    }

    /// Current revision, or `None` when the project does not exist.
    fn revision(&self, id: &str) -> Result<Option<u64>, StoreError> {
        let link = self.root.join(id);
        match fs::symlink_metadata(&link) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
            Ok(meta) if meta.file_type().is_symlink() => {
                let target = fs::read_link(&link)?;
                let rev = target.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok());
                rev.map(Some).ok_or_else(|| io::Error::other(format!("{} points at {}", link.display(), target.display())).into())
            }
            Ok(meta) if meta.is_dir() && link.join(PROJECT_MANIFEST).is_file() => Ok(Some(0)),
            Ok(_) => Ok(None),
        }
    }

    pub fn get(&self, id: &str) -> Result<(u64, DocumentSet), StoreError> {
        Self::check_id(id)?;
        // resolve the link once so the revision and the documents agree
        let link = self.root.join(id);
        let rev = self.revision(id)?.ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let dir = if rev == 0 { link } else { self.root.join(REVISIONS).join(id).join(rev.to_string()) };
        match read_project_documents(&dir) {
            Ok(docs) => Ok((rev, docs)),
            Err(LoadError::Io { source, .. }) => Err(source.into()),
            Err(LoadError::MissingManifest(_)) => Err(StoreError::NotFound(id.to_string())),
            Err(e) => Err(StoreError::Invalid(e)),
        }
    }

    pub fn list(&self) -> Result<Vec<ProjectSummary>, StoreError> {
        let mut out = Vec::new();
        if !self.root.is_dir() {
            return Ok(out);
        }
        let mut names: Vec<String> = fs::read_dir(&self.root)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for id in names.into_iter().filter(|n| is_project_id(n)) {
            let Ok((revision, docs)) = self.get(&id) else { continue };
            let name = docs.get(PROJECT_MANIFEST).and_then(|m| m.get("name")).and_then(|n| n.as_str()).unwrap_or_default().to_string();
            out.push(ProjectSummary { id, name, revision });
        }
        Ok(out)
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Stores `docs` as the next revision. `base` must name the current
    /// revision; `None` is accepted only for a project that does not exist.
    pub fn put(&self, id: &str, base: Option<u64>, docs: &DocumentSet) -> Result<u64, StoreError> {
        Self::check_id(id)?;
        project_from_documents(docs).map_err(StoreError::Invalid)?;
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let current = self.revision(id)?;
        if current != base {
            return Err(StoreError::Stale { current: current.unwrap_or(0) });
        }
        let history = self.root.join(REVISIONS).join(id);
        fs::create_dir_all(&history)?;
        let next = current.unwrap_or(0).max(latest_revision(&history)?) + 1;

        let staging = tempfile::Builder::new().prefix(".tmp-").tempdir_in(&history)?;
        write_documents(staging.path(), docs).map_err(|e| match e {
            LoadError::Io { source, .. } => StoreError::Io(source),
            other => StoreError::Invalid(other),
        })?;
        let rev_dir = history.join(next.to_string());
        fs::rename(staging.path(), &rev_dir)?;
        let _ = staging.keep();

        let link = self.root.join(id);
        if current == Some(0) {
            // adopt a plain directory as revision 0 before linking over it
            fs::rename(&link, history.join("0"))?;
        }
        let tmp_link = self.root.join(format!(".tmp-link-{id}-{next}"));
        let _ = fs::remove_file(&tmp_link);
        std::os::unix::fs::symlink(Path::new(REVISIONS).join(id).join(next.to_string()), &tmp_link)?;
        fs::rename(&tmp_link, &link)?;

        prune(&history, next);
        Ok(next)
    }
}

fn latest_revision(history: &Path) -> io::Result<u64> {
    let mut max = 0;
    for entry in fs::read_dir(history)? {
        if let Ok(n) = entry?.file_name().to_string_lossy().parse::<u64>() {
            max = max.max(n);
        }
    }
    Ok(max)
}

fn prune(history: &Path, current: u64) {
    let Ok(entries) = fs::read_dir(history) else { return };
    for entry in entries.flatten() {
        if let Ok(n) = entry.file_name().to_string_lossy().parse::<u64>() {
            if n + KEEP <= current {
                let _ = fs::remove_dir_all(entry.path());
            }
        }
    }
}
