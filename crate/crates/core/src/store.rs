//! Benchmark-layout ingestion, run manifests and the on-disk run store.
//!
//! Layout of a run directory:
//!
//! ```text
//! <store>/<run_id>/manifest.json
//! <store>/<run_id>/index.json
//! <store>/<run_id>/traces/<agent_kind>/<question_id>.jsonl
//! <store>/<run_id>/candidates/<agent_kind>/<question_id>.jsonl
//! <store>/<run_id>/eval.jsonl, eval_summary.json, scaling.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{attach_database, AttachError, Database, DbCatalog};
use crate::config::Config;
use crate::evaluation::{DatabaseResolver, EvalRecord};
use crate::model::{parse_question_record, AgentKind, Difficulty, ExplorationTrace, Question, SqlCandidate};

pub const FORMAT_VERSION: u32 = 1;

const QUESTION_FILES: [&str; 2] = ["dev.json", "questions.json"];
const DATABASE_DIRS: [&str; 2] = ["dev_databases", "databases"];
const DESCRIPTION_DIR: &str = "database_description";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{root}: no questions file ({}); found: {}", QUESTION_FILES.join(" or "), list_or_none(.found))]
    MissingQuestions { root: PathBuf, found: Vec<String> },
    #[error("{root}: no databases directory ({}); found: {}", DATABASE_DIRS.join(" or "), list_or_none(.found))]
    MissingDatabases { root: PathBuf, found: Vec<String> },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "nothing".into()
    } else {
        items.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseEntry {
    pub path: PathBuf,
    pub docs_dir: Option<PathBuf>,
}

/// Questions plus the database files they refer to. Catalogs are attached
/// lazily and shared between connections.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub questions: Vec<Question>,
    pub databases: BTreeMap<String, DatabaseEntry>,
    catalogs: Mutex<HashMap<String, Arc<DbCatalog>>>,
}

impl Dataset {
    pub fn new(root: PathBuf, questions: Vec<Question>, databases: BTreeMap<String, DatabaseEntry>) -> Self {
        Self {
            root,
            questions,
            databases,
            catalogs: Mutex::new(HashMap::new()),
        }
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn fingerprint(&self) -> Result<DatasetFingerprint, IngestError> {
        let mut strata = BTreeMap::new();
        for q in &self.questions {
            *strata.entry(q.difficulty.as_str().to_string()).or_insert(0) += 1;
        }
        let mut databases = BTreeMap::new();
        for (db_id, entry) in &self.databases {
            databases.insert(db_id.clone(), file_sha256(&entry.path)?);
        }
        Ok(DatasetFingerprint {
            root: self.root.clone(),
            question_count: self.questions.len(),
            strata,
            databases,
        })
    }
}

impl DatabaseResolver for Dataset {
    fn open(&self, db_id: &str) -> Result<Database, AttachError> {
        let cached = self.catalogs.lock().expect("catalog cache").get(db_id).cloned();
        if let Some(catalog) = cached {
            return catalog.connect();
        }
        let entry = self.databases.get(db_id).ok_or_else(|| AttachError::Io {
            path: self.root.join(db_id),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "database not in dataset"),
        })?;
        let db = attach_database(db_id, &entry.path, entry.docs_dir.as_deref())?;
        for w in &db.catalog().warnings {
            warn!("{db_id}: {w}");
        }
        self.catalogs
            .lock()
            .expect("catalog cache")
            .insert(db_id.to_string(), Arc::clone(db.catalog()));
        Ok(db)
    }
}

fn dir_listing(root: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

/// Reads the benchmark's public layout: a questions file and
/// `<databases>/<db_id>/<db_id>.sqlite` with an optional sibling
/// `database_description/` directory.
pub fn ingest_bird_layout(root: &Path) -> Result<Dataset, IngestError> {
    let found = dir_listing(root);
    let questions_path = QUESTION_FILES
        .iter()
        .map(|f| root.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| IngestError::MissingQuestions {
            root: root.to_path_buf(),
            found: found.clone(),
        })?;
    let db_root = DATABASE_DIRS
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.is_dir())
        .ok_or_else(|| IngestError::MissingDatabases {
            root: root.to_path_buf(),
            found,
        })?;

    let text = std::fs::read_to_string(&questions_path).map_err(|source| IngestError::Io {
        path: questions_path.clone(),
        source,
    })?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| IngestError::Parse {
        path: questions_path.clone(),
        message: e.to_string(),
    })?;
    let mut questions = Vec::with_capacity(raw.len());
    for (i, record) in raw.iter().enumerate() {
        match parse_question_record(record, i) {
            Ok(q) => questions.push(q),
            Err(e) => warn!("{}: record {i} skipped: {e}", questions_path.display()),
        }
    }

    let mut databases = BTreeMap::new();
    for db_id in dir_listing(&db_root) {
        let dir = db_root.join(&db_id);
        let path = dir.join(format!("{db_id}.sqlite"));
        if !path.is_file() {
            continue;
        }
        let docs = dir.join(DESCRIPTION_DIR);
        let docs_dir = if docs.is_dir() {
            Some(docs)
        } else {
            warn!("{db_id}: no {DESCRIPTION_DIR} directory, documentation will be empty");
            None
        };
        databases.insert(db_id, DatabaseEntry { path, docs_dir });
    }
    for q in &questions {
        if !databases.contains_key(&q.db_id) {
            warn!("question {} refers to missing database {}", q.id, q.db_id);
        }
    }
    Ok(Dataset::new(root.to_path_buf(), questions, databases))
}

pub fn file_sha256(path: &Path) -> Result<String, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub root: PathBuf,
    pub question_count: usize,
    pub strata: BTreeMap<String, usize>,
    /// SHA-256 of each database file.
    pub databases: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config: Config,
    pub dataset: DatasetFingerprint,
    /// Sampled question ids in dataset order.
    pub sample: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn new(run_id: &str, config: Config, dataset: DatasetFingerprint, sample: Vec<String>) -> Self {
        let now = Utc::now();
        Self {
            format_version: FORMAT_VERSION,
            run_id: run_id.to_string(),
            config,
            dataset,
            sample,
            created_at: now,
            updated_at: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub format_version: u32,
    pub run_id: String,
    #[serde(flatten)]
    pub trace: ExplorationTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub format_version: u32,
    pub run_id: String,
    pub question_id: String,
    pub agent_kind: AgentKind,
    pub k: usize,
    pub rounds: u32,
    pub candidates: Vec<SqlCandidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalLine {
    pub format_version: u32,
    pub run_id: String,
    pub agent_kind: AgentKind,
    #[serde(flatten)]
    pub record: EvalRecord,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} has no manifest")]
    NoManifest(String),
    #[error("{0} already exists (use --force to overwrite)")]
    Exists(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: unsupported format_version {found}")]
    Version { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference to a stored record, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRef {
    pub run_id: String,
    pub path: PathBuf,
}

type IndexKey = (String, String, AgentKind);

/// Directory of runs. Each record is written whole to a temporary file and
/// renamed into place, so readers never observe partial records.
#[derive(Debug)]
pub struct TraceStore {
    root: PathBuf,
    index: Mutex<BTreeMap<IndexKey, PathBuf>>,
}

/// Maps an id to a file name; bytes outside `[A-Za-z0-9._-]` are escaped.
pub fn file_stem(id: &str) -> String {
    let mut out = String::new();
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && !out.is_empty()) {
            out.push(b as char);
        } else {
            out.push_str(&format!("~{b:02x}"));
        }
    }
    if out.is_empty() {
        out.push('~');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    question_id: String,
    agent_kind: AgentKind,
    path: PathBuf,
}

impl TraceStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            index: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(file_stem(run_id))
    }

    fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("manifest.json")
    }

    pub fn has_manifest(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_file()
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
        write_atomic(&self.manifest_path(&manifest.run_id), text.as_bytes(), true)
    }

    pub fn read_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path(run_id);
        if !path.is_file() {
            return Err(StoreError::NoManifest(run_id.to_string()));
        }
        read_manifest_file(&path)
    }

    /// Refreshes `updated_at` on disk.
    pub fn touch_manifest(&self, manifest: &mut RunManifest) -> Result<(), StoreError> {
        manifest.updated_at = Utc::now();
        self.write_manifest(manifest)
    }

    fn record_path(&self, run_id: &str, section: &str, kind: AgentKind, question_id: &str) -> PathBuf {
        self.run_dir(run_id)
            .join(section)
            .join(kind.as_str())
            .join(format!("{}.jsonl", file_stem(question_id)))
    }

    pub fn trace_path(&self, run_id: &str, kind: AgentKind, question_id: &str) -> PathBuf {
        self.record_path(run_id, "traces", kind, question_id)
    }

    pub fn has_trace(&self, run_id: &str, kind: AgentKind, question_id: &str) -> bool {
        self.trace_path(run_id, kind, question_id).is_file()
    }

    pub fn write_trace(
        &self,
        manifest: &RunManifest,
        trace: &ExplorationTrace,
        force: bool,
    ) -> Result<StoredRef, StoreError> {
        let run_id = &manifest.run_id;
        if !self.has_manifest(run_id) {
            return Err(StoreError::NoManifest(run_id.clone()));
        }
        let path = self.trace_path(run_id, trace.agent_kind, &trace.question_id);
        let record = TraceRecord {
            format_version: FORMAT_VERSION,
            run_id: run_id.clone(),
            trace: trace.clone(),
        };
        write_atomic(&path, &json_line(&record), force)?;
        self.update_index(run_id, &trace.question_id, trace.agent_kind, &path)?;
        Ok(StoredRef {
            run_id: run_id.clone(),
            path: path.strip_prefix(self.run_dir(run_id)).unwrap_or(&path).to_path_buf(),
        })
    }

    pub fn read_trace(&self, run_id: &str, kind: AgentKind, question_id: &str) -> Result<Option<ExplorationTrace>, StoreError> {
        let path = self.trace_path(run_id, kind, question_id);
        if !path.is_file() {
            return Ok(None);
        }
        let record: TraceRecord = read_record(&path)?;
        Ok(Some(record.trace))
    }

    pub fn candidates_path(&self, run_id: &str, kind: AgentKind, question_id: &str) -> PathBuf {
        self.record_path(run_id, "candidates", kind, question_id)
    }

    pub fn write_candidates(&self, record: &CandidateRecord, force: bool) -> Result<StoredRef, StoreError> {
        if !self.has_manifest(&record.run_id) {
            return Err(StoreError::NoManifest(record.run_id.clone()));
        }
        let path = self.candidates_path(&record.run_id, record.agent_kind, &record.question_id);
        write_atomic(&path, &json_line(record), force)?;
        Ok(StoredRef {
            run_id: record.run_id.clone(),
            path,
        })
    }

    pub fn read_candidates(
        &self,
        run_id: &str,
        kind: AgentKind,
        question_id: &str,
    ) -> Result<Option<CandidateRecord>, StoreError> {
        let path = self.candidates_path(run_id, kind, question_id);
        if !path.is_file() {
            return Ok(None);
        }
        read_record(&path).map(Some)
    }

    /// Writes a derived artifact (evaluation report, scaling table), replacing
    /// any previous version.
    pub fn write_artifact(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.run_dir(run_id).join(name);
        write_atomic(&path, bytes, true)?;
        Ok(path)
    }

    fn update_index(&self, run_id: &str, question_id: &str, kind: AgentKind, path: &Path) -> Result<(), StoreError> {
        let mut index = self.index.lock().expect("index lock");
        let index_path = self.run_dir(run_id).join("index.json");
        if !index.keys().any(|(r, _, _)| r == run_id) && index_path.is_file() {
            let text = std::fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
            let entries: Vec<IndexEntry> = serde_json::from_str(&text).map_err(|e| StoreError::Format {
                path: index_path.clone(),
                message: e.to_string(),
            })?;
            for e in entries {
                index.insert((run_id.to_string(), e.question_id, e.agent_kind), e.path);
            }
        }
        let rel = path.strip_prefix(self.run_dir(run_id)).unwrap_or(path).to_path_buf();
        index.insert((run_id.to_string(), question_id.to_string(), kind), rel);
        let entries: Vec<IndexEntry> = index
            .iter()
            .filter(|((r, _, _), _)| r == run_id)
            .map(|((_, q, k), p)| IndexEntry {
                question_id: q.clone(),
                agent_kind: *k,
                path: p.clone(),
            })
            .collect();
        let text = serde_json::to_string_pretty(&entries).expect("index serializes") + "\n";
        write_atomic(&index_path, text.as_bytes(), true)
    }
}

pub fn read_manifest_file(path: &Path) -> Result<RunManifest, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::Version {
            path: path.to_path_buf(),
            found: manifest.format_version,
        });
    }
    Ok(manifest)
}

pub fn json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut line = serde_json::to_vec(value).expect("record serializes");
    line.push(b'\n');
    line
}

fn read_record<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let line = text.lines().next().unwrap_or("");
    let version: serde_json::Value = serde_json::from_str(line).map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(StoreError::Version {
            path: path.to_path_buf(),
            found,
        });
    }
    serde_json::from_value(version).map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Temp file in the target directory, fsync, then rename. Without
/// `overwrite` an existing target is an error.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if !overwrite && path.exists() {
        return Err(StoreError::Exists(path.to_path_buf()));
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    if overwrite {
        tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    } else {
        tmp.persist_noclobber(path).map_err(|e| {
            if e.error.kind() == std::io::ErrorKind::AlreadyExists {
                StoreError::Exists(path.to_path_buf())
            } else {
                io_err(path)(e.error)
            }
        })?;
    }
    Ok(())
}

/// Stratum counts for a set of questions, in difficulty order.
pub fn stratum_counts(questions: &[Question]) -> Vec<(Difficulty, usize)> {
    Difficulty::ALL
        .iter()
        .map(|d| (*d, questions.iter().filter(|q| q.difficulty == *d).count()))
        .filter(|(_, n)| *n > 0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Termination;

    fn trace(qid: &str) -> ExplorationTrace {
        ExplorationTrace {
            question_id: qid.into(),
            agent_kind: AgentKind::Interaction,
            operations: Vec::new(),
            raw_transcript: "text with \"quotes\"\nand lines".into(),
            tokens_generated: 12,
            termination: Termination::Natural,
            backend_error: None,
        }
    }

    fn manifest(store: &TraceStore, run: &str) -> RunManifest {
        let m = RunManifest::new(
            run,
            Config::default(),
            DatasetFingerprint {
                root: PathBuf::new(),
                question_count: 0,
                strata: BTreeMap::new(),
                databases: BTreeMap::new(),
            },
            Vec::new(),
        );
        store.write_manifest(&m).unwrap();
        m
    }

    #[test]
    fn trace_round_trip_and_no_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let m = manifest(&store, "R1");
        let t = trace("q/1");
        store.write_trace(&m, &t, false).unwrap();
        assert_eq!(store.read_trace("R1", AgentKind::Interaction, "q/1").unwrap(), Some(t.clone()));
        assert!(matches!(store.write_trace(&m, &t, false), Err(StoreError::Exists(_))));
        store.write_trace(&m, &t, true).unwrap();
        let index = std::fs::read_to_string(store.run_dir("R1").join("index.json")).unwrap();
        assert!(index.contains("q/1"));
    }

    #[test]
    fn trace_requires_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let m = RunManifest::new(
            "nope",
            Config::default(),
            DatasetFingerprint {
                root: PathBuf::new(),
                question_count: 0,
                strata: BTreeMap::new(),
                databases: BTreeMap::new(),
            },
            Vec::new(),
        );
        assert!(matches!(store.write_trace(&m, &trace("a"), false), Err(StoreError::NoManifest(_))));
    }

    #[test]
    fn file_stems_are_distinct() {
        assert_eq!(file_stem("123"), "123");
        assert_ne!(file_stem("a/b"), file_stem("a_b"));
        assert_eq!(file_stem(".."), "~2e.");
        assert_eq!(file_stem(""), "~");
    }

    #[test]
    fn ingest_errors_list_contents() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_bird_layout(dir.path()).unwrap_err();
        assert!(err.to_string().contains("found: nothing"), "{err}");
        std::fs::write(dir.path().join("dev.json"), "[]").unwrap();
        let err = ingest_bird_layout(dir.path()).unwrap_err();
        assert!(matches!(err, IngestError::MissingDatabases { .. }));
        assert!(err.to_string().contains("dev.json"));
    }
}
