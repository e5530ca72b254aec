//! File-based package registry: publish, resolve and vendor.
//!
//! Layout: `<root>/<name>/<version>/manifest.json` plus the package's
//! component documents. Published versions are immutable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use semver::{Version, VersionReq};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::document::{document_bytes, list_files, package_from_documents, package_to_documents, parse_document, DocumentSet, LoadError};
use crate::model::{LockEntry, Lockfile, PackageManifest, Project, VendoredPackage};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{name} {version} is already published")]
    VersionExists { name: String, version: Version },
    #[error("no published version of `{name}` matches {requirement}")]
    NotFound { name: String, requirement: String },
    #[error("no version of `{name}` satisfies {}", describe_constraints(.constraints))]
    Conflict { name: String, constraints: Vec<Constraint> },
    #[error("dependency cycle: {}", .cycle.join(" -> "))]
    DependencyCycle { cycle: Vec<String> },
    #[error("{name} {version} hashes to {actual}, the lockfile records {locked}")]
    HashMismatch { name: String, version: Version, locked: String, actual: String },
    #[error("namespace `{0}` is used by local components")]
    NamespaceTaken(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::Load(e) => e.code(),
            RegistryError::VersionExists { .. } => "VERSION_EXISTS",
            RegistryError::NotFound { .. } => "PACKAGE_NOT_FOUND",
            RegistryError::Conflict { .. } => "VERSION_CONFLICT",
            RegistryError::DependencyCycle { .. } => "DEPENDENCY_CYCLE",
            RegistryError::HashMismatch { .. } => "HASH_MISMATCH",
            RegistryError::NamespaceTaken(_) => "NAMESPACE_TAKEN",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, RegistryError::Load(e) if e.is_io())
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        RegistryError::Load(LoadError::io(path, e))
    }
}

/// One requirement on a package name and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    /// `"<root>"` for the project's own requirements, otherwise `name version`.
    pub from: String,
    pub requirement: VersionReq,
}

fn describe_constraints(cs: &[Constraint]) -> String {
    cs.iter().map(|c| format!("{} (from {})", c.requirement, c.from)).collect::<Vec<_>>().join(", ")
}

pub const ROOT_REQUIREMENT: &str = "<root>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishRecord {
    pub name: String,
    pub version: Version,
    pub hash: String,
    pub path: PathBuf,
}

/// `sha256:<hex>` over `(path, bytes)` pairs in path order. Each field is
/// length-prefixed so no two file sets share an encoding.
pub fn content_hash<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut sorted: Vec<(&str, &[u8])> = files.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (path, bytes) in sorted {
        h.update((path.len() as u64).to_le_bytes());
        h.update(path.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    format!("sha256:{}", hex::encode(h.finalize()))
}

/// Hash of a document set in its canonical serialization.
pub fn documents_hash(docs: &DocumentSet) -> String {
    let bytes: Vec<(String, Vec<u8>)> = docs.iter().map(|(p, d)| (p.clone(), document_bytes(p, d))).collect();
    content_hash(bytes.iter().map(|(p, b)| (p.as_str(), b.as_slice())))
}

/// Relative path and raw bytes of each file in a package.
pub type RawFiles = Vec<(String, Vec<u8>)>;

/// Reads a package directory: every file except hidden ones.
pub fn read_package_dir(dir: &Path) -> Result<(DocumentSet, RawFiles), LoadError> {
    let mut docs = DocumentSet::new();
    let mut raw = Vec::new();
    for rel in list_files(dir)? {
        if rel.split('/').any(|c| c.starts_with('.')) {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| LoadError::io(&path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| LoadError::Parse { file: rel.clone(), message: "not UTF-8".into() })?;
        docs.insert(rel.clone(), parse_document(&rel, &text)?);
        raw.push((rel, bytes));
    }
    Ok((docs, raw))
}

/// Checks that every node of every block refers to a component of the
/// package itself or of a declared dependency.
fn check_package_references(pkg: &VendoredPackage, label: &str) -> Result<(), LoadError> {
    for b in pkg.blocks.values() {
        for r in b.referenced_components() {
            let ns = &r.id.namespace;
            let ok = if *ns == pkg.manifest.name {
                pkg.mutators.contains_key(&r.id) || pkg.blocks.contains_key(&r.id)
            } else {
                pkg.manifest.dependencies.contains_key(ns)
            };
            if !ok {
                return Err(LoadError::Unresolved {
                    file: format!("{label}/blocks/{}", crate::document::component_file_name(&b.id)),
                    path: "nodes".into(),
                    reference: r.to_string(),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn package_dir(&self, name: &str, version: &Version) -> PathBuf {
        self.root.join(name).join(version.to_string())
    }

    /// Validates the package in `dir` and copies it into the registry in
    /// canonical form. The copy is staged in a temporary directory and
    /// renamed into place, so a concurrent publish of the same version
    /// either wins or gets [`RegistryError::VersionExists`].
    pub fn publish(&self, dir: &Path) -> Result<PublishRecord, RegistryError> {
        let (docs, _) = read_package_dir(dir)?;
        let label = dir.display().to_string();
        let pkg = package_from_documents(&docs, &label)?;
        check_package_references(&pkg, &label)?;
        let name = pkg.manifest.name.clone();
        let version = pkg.manifest.version.clone();
        let dest = self.package_dir(&name, &version);
        if dest.exists() {
            return Err(RegistryError::VersionExists { name, version });
        }
        let parent = self.root.join(&name);
        fs::create_dir_all(&parent).map_err(|e| RegistryError::io(&parent, e))?;

        // stored in the same normal form projects vendor, so lock hashes agree
        let normal = package_to_documents(&pkg);
        let staging = tempfile::Builder::new().prefix(".tmp-").tempdir_in(&parent).map_err(|e| RegistryError::io(&parent, e))?;
        for (rel, doc) in &normal {
            let path = staging.path().join(rel);
            if let Some(p) = path.parent() {
                fs::create_dir_all(p).map_err(|e| RegistryError::io(p, e))?;
            }
            fs::write(&path, document_bytes(rel, doc)).map_err(|e| RegistryError::io(&path, e))?;
        }
        match fs::rename(staging.path(), &dest) {
            Ok(()) => {
                // the directory now lives at `dest`; nothing left to clean up
                let _ = staging.keep();
            }
            Err(e) if dest.exists() || matches!(e.kind(), ErrorKind::AlreadyExists | ErrorKind::DirectoryNotEmpty) => {
                return Err(RegistryError::VersionExists { name, version });
            }
            Err(e) => return Err(RegistryError::io(&dest, e)),
        }
        let hash = documents_hash(&normal);
        Ok(PublishRecord { name, version, hash, path: dest })
    }

    /// Published package names, sorted.
    pub fn package_names(&self) -> Result<Vec<String>, RegistryError> {
        if !self.root.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| RegistryError::io(&self.root, e))? {
            let entry = entry.map_err(|e| RegistryError::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.path().is_dir() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Published versions of `name`, ascending.
    pub fn versions(&self, name: &str) -> Result<Vec<Version>, RegistryError> {
        let dir = self.root.join(name);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| RegistryError::io(&dir, e))? {
            let entry = entry.map_err(|e| RegistryError::io(&dir, e))?;
            if let Ok(v) = Version::parse(&entry.file_name().to_string_lossy()) {
                if entry.path().join(crate::document::PACKAGE_MANIFEST).is_file() {
                    out.push(v);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// The documents of a published version plus the hash of its bytes on disk.
    pub fn package_documents(&self, name: &str, version: &Version) -> Result<(DocumentSet, String), RegistryError> {
        let dir = self.package_dir(name, version);
        if !dir.is_dir() {
            return Err(RegistryError::NotFound { name: name.into(), requirement: format!("={version}") });
        }
        let (docs, raw) = read_package_dir(&dir)?;
        let hash = content_hash(raw.iter().map(|(p, b)| (p.as_str(), b.as_slice())));
        Ok((docs, hash))
    }

    pub fn load_package(&self, name: &str, version: &Version) -> Result<VendoredPackage, RegistryError> {
        let (docs, _) = self.package_documents(name, version)?;
        Ok(package_from_documents(&docs, &format!("{name}/{version}"))?)
    }

    pub fn manifest(&self, name: &str, version: &Version) -> Result<PackageManifest, RegistryError> {
        Ok(self.load_package(name, version)?.manifest)
    }

    /// Highest versions satisfying `requirements` and every transitive
    /// dependency constraint. See [`resolve_with`].
    pub fn resolve(&self, requirements: &BTreeMap<String, VersionReq>) -> Result<BTreeMap<String, Version>, RegistryError> {
        let mut index: BTreeMap<String, Candidates> = BTreeMap::new();
        let mut pending: Vec<String> = requirements.keys().cloned().collect();
        let mut seen: BTreeSet<String> = pending.iter().cloned().collect();
        while let Some(name) = pending.pop() {
            let mut list = Vec::new();
            for v in self.versions(&name)? {
                let deps = self.manifest(&name, &v)?.dependencies;
                for d in deps.keys() {
                    if seen.insert(d.clone()) {
                        pending.push(d.clone());
                    }
                }
                list.push((v, deps));
            }
            index.insert(name, list);
        }
        resolve_with(requirements, &|name| index.get(name).cloned().unwrap_or_default())
    }

    /// Copies the resolved packages into `project` and records them in its
    /// lockfile. The vendored set becomes exactly `resolution`. A version
    /// already locked with a different hash is rejected.
    pub fn vendor(&self, project: &mut Project, resolution: &BTreeMap<String, Version>) -> Result<(), RegistryError> {
        for name in resolution.keys() {
            if project.mutators.keys().chain(project.blocks.keys()).any(|id| &id.namespace == name) {
                return Err(RegistryError::NamespaceTaken(name.clone()));
            }
        }
        let mut packages = Vec::new();
        let mut entries = Vec::new();
        for (name, version) in resolution {
            let (docs, hash) = self.package_documents(name, version)?;
            if let Some(locked) = project.lock.get(name) {
                if &locked.version == version && locked.hash != hash {
                    return Err(RegistryError::HashMismatch { name: name.clone(), version: version.clone(), locked: locked.hash.clone(), actual: hash });
                }
            }
            packages.push(package_from_documents(&docs, &format!("{name}/{version}"))?);
            entries.push(LockEntry { name: name.clone(), version: version.clone(), hash });
        }
        entries.sort();
        project.packages = packages;
        project.lock = Lockfile { entries };
        Ok(())
    }
}

/// Versions of one package name with their dependency requirements.
pub type Candidates = Vec<(Version, BTreeMap<String, VersionReq>)>;

/// Backtracking resolution over an abstract package index.
///
/// Names are decided smallest first among those currently constrained;
/// candidates are tried newest first, so the first complete assignment found
/// is maximal: no package can move to a newer version while the packages
/// decided before it keep theirs. Failures report the conflict reached at
/// the greatest search depth.
pub fn resolve_with(
    requirements: &BTreeMap<String, VersionReq>,
    index: &dyn Fn(&str) -> Candidates,
) -> Result<BTreeMap<String, Version>, RegistryError> {
    let mut constraints: BTreeMap<String, Vec<Constraint>> = BTreeMap::new();
    for (name, req) in requirements {
        constraints.entry(name.clone()).or_default().push(Constraint { from: ROOT_REQUIREMENT.into(), requirement: req.clone() });
    }
    let mut cache: BTreeMap<String, Candidates> = BTreeMap::new();
    let mut state = Search { index, cache: &mut cache, deepest: None };
    let decided = BTreeMap::new();
    match state.search(&decided, &constraints, 0) {
        Some(result) => {
            let deps: BTreeMap<String, Vec<String>> = result
                .iter()
                .map(|(n, v)| {
                    let c = state.candidates(n);
                    let d = c.iter().find(|(cv, _)| cv == v).map(|(_, d)| d.keys().cloned().collect()).unwrap_or_default();
                    (n.clone(), d)
                })
                .collect();
            if let Some(cycle) = find_dependency_cycle(&deps) {
                return Err(RegistryError::DependencyCycle { cycle });
            }
            Ok(result)
        }
        None => Err(state.deepest.map(|(_, e)| e).unwrap_or_else(|| RegistryError::Conflict { name: String::new(), constraints: Vec::new() })),
    }
}

struct Search<'a> {
    index: &'a dyn Fn(&str) -> Candidates,
    cache: &'a mut BTreeMap<String, Candidates>,
    deepest: Option<(usize, RegistryError)>,
}

impl Search<'_> {
    fn candidates(&mut self, name: &str) -> Candidates {
        if !self.cache.contains_key(name) {
            let mut c = (self.index)(name);
            c.sort_by(|a, b| b.0.cmp(&a.0));
            self.cache.insert(name.to_string(), c);
        }
        self.cache[name].clone()
    }

    fn fail(&mut self, depth: usize, e: RegistryError) {
        if self.deepest.as_ref().is_none_or(|(d, _)| depth > *d) {
            self.deepest = Some((depth, e));
        }
    }

    fn search(
        &mut self,
        decided: &BTreeMap<String, Version>,
        constraints: &BTreeMap<String, Vec<Constraint>>,
        depth: usize,
    ) -> Option<BTreeMap<String, Version>> {
        let Some((name, cs)) = constraints.iter().find(|(n, _)| !decided.contains_key(*n)) else {
            return Some(decided.clone());
        };
        let candidates = self.candidates(name);
        let matching: Vec<&(Version, BTreeMap<String, VersionReq>)> =
            candidates.iter().filter(|(v, _)| cs.iter().all(|c| c.requirement.matches(v))).collect();
        if matching.is_empty() {
            let e = if candidates.is_empty() {
                RegistryError::NotFound { name: name.clone(), requirement: cs.iter().map(|c| c.requirement.to_string()).collect::<Vec<_>>().join(", ") }
            } else {
                RegistryError::Conflict { name: name.clone(), constraints: cs.clone() }
            };
            self.fail(depth, e);
            return None;
        }
        'candidate: for (version, deps) in matching {
            let mut next_constraints = constraints.clone();
            let from = format!("{name} {version}");
            for (dep, req) in deps {
                if let Some(v) = decided.get(dep) {
                    if !req.matches(v) {
                        let mut cs = constraints.get(dep).cloned().unwrap_or_default();
                        cs.push(Constraint { from: from.clone(), requirement: req.clone() });
                        self.fail(depth + 1, RegistryError::Conflict { name: dep.clone(), constraints: cs });
                        continue 'candidate;
                    }
                }
                next_constraints.entry(dep.clone()).or_default().push(Constraint { from: from.clone(), requirement: req.clone() });
            }
            let mut next = decided.clone();
            next.insert(name.clone(), version.clone());
            if let Some(found) = self.search(&next, &next_constraints, depth + 1) {
                return Some(found);
            }
        }
        None
    }
}

fn find_dependency_cycle(deps: &BTreeMap<String, Vec<String>>) -> Option<Vec<String>> {
    fn visit(n: &str, deps: &BTreeMap<String, Vec<String>>, stack: &mut Vec<String>, done: &mut BTreeSet<String>) -> Option<Vec<String>> {
        if let Some(pos) = stack.iter().position(|s| s == n) {
            let mut cycle = stack[pos..].to_vec();
            cycle.push(n.to_string());
            return Some(cycle);
        }
        if done.contains(n) {
            return None;
        }
        stack.push(n.to_string());
        for d in deps.get(n).into_iter().flatten() {
            if let Some(c) = visit(d, deps, stack, done) {
                return Some(c);
            }
        }
        stack.pop();
        done.insert(n.to_string());
        None
    }
    let mut done = BTreeSet::new();
    for n in deps.keys() {
        if let Some(c) = visit(n, deps, &mut Vec::new(), &mut done) {
            return Some(c);
        }
    }
    None
}
