//! Directory-backed, content-addressed source store.
//!
//! ```text
//! <root>/objects/ab/cdef...          blobs and commit manifests, by sha256
//! <root>/tags/<name>                 commit id
//! <root>/refs/<ref>                  latest commit pushed to a ref ('/' as %2F)
//! <root>/results/<commit>/<run_id>/  artifact.json, debug.log, files/...
//! ```
//!
//! A commit id is the sha256 of its manifest:
//!
//! ```text
//! coins-commit 1
//! parent <commit id or ->
//! file <blob sha256> <path>     one line per file, sorted by path
//! ```
//!
//! Every write goes to a temporary file first and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::prelude::{Engine, BASE64_STANDARD};
use coins_core::config::is_valid_path;
use coins_core::digest::sha256_hex;
use coins_core::testkit::Verdict;
use serde::{Deserialize, Serialize};

/// Parent and (path, object id) entries of a commit.
type Manifest = (Option<CommitId>, Vec<(String, String)>);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommitId(pub String);

impl CommitId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 12 hex digits, for messages.
    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(12)]
    }
}

impl std::fmt::Display for CommitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("empty worktree")]
    EmptyTree,
    #[error("unknown commit {0}")]
    UnknownCommit(String),
    #[error("invalid tag name {0:?}")]
    InvalidTag(String),
    #[error("tag {0} already exists")]
    TagExists(String),
    #[error("run {run} already recorded under {commit}")]
    DuplicateRun { commit: String, run: String },
    #[error("no result for run {run} under {commit}")]
    UnknownResult { commit: String, run: String },
    #[error("store corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Files of one commit, keyed by normalized relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkTree {
    files: BTreeMap<String, Vec<u8>>,
}

impl WorkTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        path: impl Into<String>,
        bytes: impl Into<Vec<u8>>,
    ) -> Result<(), RepoError> {
        let path = path.into();
        if !is_valid_path(&path) {
            return Err(RepoError::InvalidPath(path));
        }
        self.files.insert(path, bytes.into());
        Ok(())
    }

    pub fn from_files(files: BTreeMap<String, Vec<u8>>) -> Result<Self, RepoError> {
        let mut t = Self::new();
        for (p, b) in files {
            t.insert(p, b)?;
        }
        Ok(t)
    }

    /// Reads every regular file below `dir`, skipping `.git`.
    pub fn from_dir(dir: &Path) -> Result<Self, RepoError> {
        fn walk(base: &Path, dir: &Path, out: &mut WorkTree) -> Result<(), RepoError> {
            let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let p = e.path();
                let ty = e.file_type()?;
                if e.file_name() == ".git" {
                    continue;
                }
                if ty.is_dir() {
                    walk(base, &p, out)?;
                } else if ty.is_file() {
                    let rel = p.strip_prefix(base).expect("below base");
                    let rel: Vec<String> = rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect();
                    out.insert(rel.join("/"), fs::read(&p)?)?;
                }
            }
            Ok(())
        }
        let mut t = Self::new();
        walk(dir, dir, &mut t)?;
        Ok(t)
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn files(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.files
    }

    pub fn into_files(self) -> BTreeMap<String, Vec<u8>> {
        self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Serde helpers storing bytes as standard base64.
pub mod base64_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64_STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        BASE64_STANDARD.decode(s).map_err(serde::de::Error::custom)
    }

    pub mod map {
        use super::*;

        pub fn serialize<S: Serializer>(
            m: &BTreeMap<String, Vec<u8>>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            let enc: BTreeMap<&String, String> = m
                .iter()
                .map(|(k, v)| (k, BASE64_STANDARD.encode(v)))
                .collect();
            enc.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<BTreeMap<String, Vec<u8>>, D::Error> {
            BTreeMap::<String, String>::deserialize(d)?
                .into_iter()
                .map(|(k, v)| {
                    BASE64_STANDARD
                        .decode(v)
                        .map(|b| (k, b))
                        .map_err(serde::de::Error::custom)
                })
                .collect()
        }
    }
}

use base64_serde as b64;
pub use base64_serde::map as base64_map;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultArtifact {
    pub run_id: String,
    pub verdict: Verdict,
    #[serde(with = "b64::map")]
    pub result_files: BTreeMap<String, Vec<u8>>,
    #[serde(with = "b64")]
    pub debug_log: Vec<u8>,
}

fn is_valid_tag(t: &str) -> bool {
    !t.is_empty()
        && t.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && t != "."
        && t != ".."
}

fn is_valid_ref(r: &str) -> bool {
    !r.is_empty() && r.split('/').all(is_valid_tag)
}

/// Writes `bytes` to `path` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("path has a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().expect("file name").to_string_lossy()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug)]
pub struct RepoStore {
    root: PathBuf,
    writer: Mutex<()>,
}

impl RepoStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RepoError> {
        let root = root.into();
        for d in ["objects", "tags", "refs", "results"] {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(&hash[..2]).join(&hash[2..])
    }

    fn put_object(&self, bytes: &[u8]) -> Result<String, RepoError> {
        let hash = sha256_hex(bytes);
        let p = self.object_path(&hash);
        if !p.exists() {
            write_atomic(&p, bytes)?;
        }
        Ok(hash)
    }

    fn get_object(&self, hash: &str) -> Result<Vec<u8>, RepoError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(RepoError::UnknownCommit(hash.into()));
        }
        let bytes = fs::read(self.object_path(hash)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => RepoError::UnknownCommit(hash.into()),
            _ => RepoError::Io(e),
        })?;
        if sha256_hex(&bytes) != hash {
            return Err(RepoError::Corrupt(format!(
                "object {hash} fails its digest"
            )));
        }
        Ok(bytes)
    }

    fn manifest(tree: &WorkTree, parent: Option<&CommitId>) -> String {
        let mut m = String::from("coins-commit 1\n");
        m.push_str(&format!("parent {}\n", parent.map_or("-", |p| p.as_str())));
        for (path, bytes) in tree.files() {
            m.push_str(&format!("file {} {}\n", sha256_hex(bytes), path));
        }
        m
    }

    /// Pure digest of the commit `ingest` would create.
    pub fn commit_id(tree: &WorkTree, parent: Option<&CommitId>) -> CommitId {
        CommitId(sha256_hex(Self::manifest(tree, parent).as_bytes()))
    }

    pub fn ingest(
        &self,
        tree: &WorkTree,
        parent: Option<&CommitId>,
    ) -> Result<CommitId, RepoError> {
        if tree.is_empty() {
            return Err(RepoError::EmptyTree);
        }
        if let Some(p) = tree.files().keys().find(|p| !is_valid_path(p)) {
            return Err(RepoError::InvalidPath(p.clone()));
        }
        let _w = self.writer.lock().expect("writer lock");
        if let Some(p) = parent {
            self.read_manifest(p)?;
        }
        for bytes in tree.files().values() {
            self.put_object(bytes)?;
        }
        let id = self.put_object(Self::manifest(tree, parent).as_bytes())?;
        Ok(CommitId(id))
    }

    fn read_manifest(&self, id: &CommitId) -> Result<Manifest, RepoError> {
        let bytes = self.get_object(id.as_str())?;
        let text = String::from_utf8(bytes).map_err(|_| RepoError::UnknownCommit(id.0.clone()))?;
        let mut lines = text.lines();
        if lines.next() != Some("coins-commit 1") {
            return Err(RepoError::UnknownCommit(id.0.clone()));
        }
        let parent = match lines.next().and_then(|l| l.strip_prefix("parent ")) {
            Some("-") => None,
            Some(p) => Some(CommitId(p.into())),
            None => {
                return Err(RepoError::Corrupt(format!(
                    "commit {id} has no parent line"
                )))
            }
        };
        let mut files = Vec::new();
        for l in lines {
            let rest = l
                .strip_prefix("file ")
                .ok_or_else(|| RepoError::Corrupt(format!("commit {id}: bad line {l:?}")))?;
            let (hash, path) = rest
                .split_once(' ')
                .ok_or_else(|| RepoError::Corrupt(format!("commit {id}: bad line {l:?}")))?;
            files.push((hash.to_string(), path.to_string()));
        }
        Ok((parent, files))
    }

    pub fn contains(&self, id: &CommitId) -> bool {
        self.read_manifest(id).is_ok()
    }

    pub fn parent(&self, id: &CommitId) -> Result<Option<CommitId>, RepoError> {
        Ok(self.read_manifest(id)?.0)
    }

    pub fn worktree(&self, id: &CommitId) -> Result<WorkTree, RepoError> {
        let (_, files) = self.read_manifest(id)?;
        let mut t = WorkTree::new();
        for (hash, path) in files {
            let bytes = self.get_object(&hash).map_err(|e| match e {
                RepoError::UnknownCommit(h) => RepoError::Corrupt(format!("missing blob {h}")),
                e => e,
            })?;
            t.insert(path, bytes)?;
        }
        Ok(t)
    }

    pub fn tag(&self, id: &CommitId, tag: &str) -> Result<(), RepoError> {
        if !is_valid_tag(tag) {
            return Err(RepoError::InvalidTag(tag.into()));
        }
        self.read_manifest(id)?;
        let _w = self.writer.lock().expect("writer lock");
        let target = self.root.join("tags").join(tag);
        let tmp = self.root.join("tags").join(format!(".tmp-{tag}"));
        fs::write(&tmp, format!("{id}\n"))?;
        // hard_link refuses to replace an existing tag.
        let linked = fs::hard_link(&tmp, &target);
        fs::remove_file(&tmp)?;
        match linked {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                if self.resolve_tag(tag)? == *id {
                    Ok(())
                } else {
                    Err(RepoError::TagExists(tag.into()))
                }
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn resolve_tag(&self, tag: &str) -> Result<CommitId, RepoError> {
        if !is_valid_tag(tag) {
            return Err(RepoError::InvalidTag(tag.into()));
        }
        match fs::read_to_string(self.root.join("tags").join(tag)) {
            Ok(s) => Ok(CommitId(s.trim().into())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(RepoError::UnknownCommit(tag.into()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// A commit id, a tag, or a ref name.
    pub fn resolve(&self, name: &str) -> Result<CommitId, RepoError> {
        let id = CommitId(name.into());
        if self.contains(&id) {
            return Ok(id);
        }
        if is_valid_tag(name) {
            if let Ok(id) = self.resolve_tag(name) {
                return Ok(id);
            }
        }
        self.ref_head(name)?
            .ok_or_else(|| RepoError::UnknownCommit(name.into()))
    }

    fn ref_path(&self, r: &str) -> PathBuf {
        self.root.join("refs").join(r.replace('/', "%2F"))
    }

    pub fn ref_head(&self, r: &str) -> Result<Option<CommitId>, RepoError> {
        if !is_valid_ref(r) {
            return Ok(None);
        }
        match fs::read_to_string(self.ref_path(r)) {
            Ok(s) => Ok(Some(CommitId(s.trim().into()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn set_ref(&self, r: &str, id: &CommitId) -> Result<(), RepoError> {
        if !is_valid_ref(r) {
            return Err(RepoError::InvalidTag(r.into()));
        }
        self.read_manifest(id)?;
        let _w = self.writer.lock().expect("writer lock");
        write_atomic(&self.ref_path(r), format!("{id}\n").as_bytes())?;
        Ok(())
    }

    fn result_dir(&self, commit: &CommitId, run: &str) -> PathBuf {
        self.root.join("results").join(commit.as_str()).join(run)
    }

    pub fn write_results(
        &self,
        commit: &CommitId,
        artifact: &ResultArtifact,
    ) -> Result<(), RepoError> {
        self.read_manifest(commit)?;
        if !is_valid_tag(&artifact.run_id) {
            return Err(RepoError::InvalidPath(artifact.run_id.clone()));
        }
        if let Some(p) = artifact.result_files.keys().find(|p| !is_valid_path(p)) {
            return Err(RepoError::InvalidPath(p.clone()));
        }
        let _w = self.writer.lock().expect("writer lock");
        let dir = self.result_dir(commit, &artifact.run_id);
        if dir.exists() {
            return Err(RepoError::DuplicateRun {
                commit: commit.0.clone(),
                run: artifact.run_id.clone(),
            });
        }
        // Assemble in a staging directory, then rename the whole directory.
        let parent = dir.parent().expect("has parent");
        fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".tmp-{}", artifact.run_id));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        fs::write(
            staging.join("artifact.json"),
            serde_json::to_vec_pretty(artifact).expect("serializable"),
        )?;
        fs::write(staging.join("debug.log"), &artifact.debug_log)?;
        for (p, b) in &artifact.result_files {
            let f = staging.join("files").join(p);
            fs::create_dir_all(f.parent().expect("has parent"))?;
            fs::write(f, b)?;
        }
        fs::rename(&staging, &dir)?;
        Ok(())
    }

    pub fn read_result(&self, commit: &CommitId, run: &str) -> Result<ResultArtifact, RepoError> {
        if !is_valid_tag(run) {
            return Err(RepoError::UnknownResult {
                commit: commit.0.clone(),
                run: run.into(),
            });
        }
        match fs::read(self.result_dir(commit, run).join("artifact.json")) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| RepoError::Corrupt(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(RepoError::UnknownResult {
                commit: commit.0.clone(),
                run: run.into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Run ids with results under `commit`, sorted.
    pub fn list_results(&self, commit: &CommitId) -> Result<Vec<String>, RepoError> {
        self.read_manifest(commit)?;
        let dir = self.root.join("results").join(commit.as_str());
        let mut runs = Vec::new();
        match fs::read_dir(&dir) {
            Ok(rd) => {
                for e in rd {
                    let name = e?.file_name().to_string_lossy().into_owned();
                    if !name.starts_with('.') {
                        runs.push(name);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        runs.sort();
        Ok(runs)
    }
}
