//! Problem corpus: ingestion from a directory tree, validation and JSON persistence.
//!
//! A corpus is an immutable snapshot. Mutations (`add_entry`, description
//! generation) return a new snapshot with a strictly larger `version`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::write_atomic;

/// Schema version of the persisted corpus document.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Extension of model source files picked up by [`ingest_directory`].
pub const MODEL_EXTENSION: &str = "mzn";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: not found")]
    NotFound { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed corpus document: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported corpus schema_version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("invalid entry: {0}")]
    Validation(String),
    #[error("entry `{0}` already exists")]
    Conflict(String),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CorpusError::NotFound { path: path.to_path_buf() }
        } else {
            CorpusError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Expertise level of a generated description. Ordered Novice < Intermediate < Expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertiseLevel {
    #[serde(rename = "D1")]
    Novice,
    #[serde(rename = "D2")]
    Intermediate,
    #[serde(rename = "D3")]
    Expert,
}

impl ExpertiseLevel {
    pub const ALL: [ExpertiseLevel; 3] = [
        ExpertiseLevel::Novice,
        ExpertiseLevel::Intermediate,
        ExpertiseLevel::Expert,
    ];

    /// Short code: `D1`, `D2` or `D3`.
    pub fn code(self) -> &'static str {
        match self {
            ExpertiseLevel::Novice => "D1",
            ExpertiseLevel::Intermediate => "D2",
            ExpertiseLevel::Expert => "D3",
        }
    }

    /// The digit used in combined config names (`SC+D1&3`).
    pub fn digit(self) -> char {
        match self {
            ExpertiseLevel::Novice => '1',
            ExpertiseLevel::Intermediate => '2',
            ExpertiseLevel::Expert => '3',
        }
    }

    pub fn from_digit(c: char) -> Option<Self> {
        match c {
            '1' => Some(ExpertiseLevel::Novice),
            '2' => Some(ExpertiseLevel::Intermediate),
            '3' => Some(ExpertiseLevel::Expert),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertiseLevel::Novice => "Novice",
            ExpertiseLevel::Intermediate => "Intermediate",
            ExpertiseLevel::Expert => "Expert",
        }
    }
}

impl fmt::Display for ExpertiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ExpertiseLevel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "d1" | "1" | "novice" => Ok(ExpertiseLevel::Novice),
            "d2" | "2" | "intermediate" => Ok(ExpertiseLevel::Intermediate),
            "d3" | "3" | "expert" => Ok(ExpertiseLevel::Expert),
            other => Err(CorpusError::Validation(format!(
                "unknown expertise level `{other}` (expected D1, D2 or D3)"
            ))),
        }
    }
}

/// Parse a comma separated level list such as `D1,D3`.
pub fn parse_levels(s: &str) -> Result<Vec<ExpertiseLevel>, CorpusError> {
    let mut levels = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<ExpertiseLevel>, _>>()?;
    levels.sort();
    levels.dedup();
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub filename: String,
    pub content: String,
}

impl SourceFile {
    pub fn new(filename: impl Into<String>, content: impl Into<String>) -> Self {
        Self { filename: filename.into(), content: content.into() }
    }
}

/// One combinatorial problem: its model files and generated descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub name: String,
    #[serde(default = "unknown_provenance")]
    pub provenance: String,
    pub source_files: Vec<SourceFile>,
    #[serde(default)]
    pub descriptions: BTreeMap<ExpertiseLevel, String>,
}

fn unknown_provenance() -> String {
    "unknown".to_string()
}

/// Whether `id` is a valid entry id (`[a-z0-9_-]+`).
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

impl ModelEntry {
    pub fn new(id: impl Into<String>, source_files: Vec<SourceFile>) -> Self {
        let id = id.into();
        Self {
            name: id.clone(),
            id,
            provenance: unknown_provenance(),
            source_files,
            descriptions: BTreeMap::new(),
        }
    }

    pub fn with_description(mut self, level: ExpertiseLevel, text: impl Into<String>) -> Self {
        self.descriptions.insert(level, text.into());
        self
    }

    pub fn description(&self, level: ExpertiseLevel) -> Option<&str> {
        self.descriptions.get(&level).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !is_valid_id(&self.id) {
            return Err(CorpusError::Validation(format!(
                "id `{}` must be non-empty and match [a-z0-9_-]+",
                self.id
            )));
        }
        if self.source_files.is_empty() {
            return Err(CorpusError::Validation(format!("`{}` has no source files", self.id)));
        }
        for file in &self.source_files {
            if file.filename.trim().is_empty() {
                return Err(CorpusError::Validation(format!(
                    "`{}` has a source file without a name",
                    self.id
                )));
            }
            if file.content.trim().is_empty() {
                return Err(CorpusError::Validation(format!(
                    "`{}`: source file `{}` is empty",
                    self.id, file.filename
                )));
            }
        }
        for (level, text) in &self.descriptions {
            if text.trim().is_empty() {
                return Err(CorpusError::Validation(format!(
                    "`{}`: {} description is empty",
                    self.id, level
                )));
            }
        }
        Ok(())
    }

    /// All source files in canonical order, each preceded by a `% file: <name>` line.
    pub fn concatenated_source(&self) -> String {
        self.source_files
            .iter()
            .map(|f| format!("% file: {}\n{}", f.filename, f.content.trim_end_matches(['\n', '\r'])))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// An immutable snapshot of the model corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    version: u64,
    entries: Vec<ModelEntry>,
}

impl Default for Corpus {
    fn default() -> Self {
        Self { version: 1, entries: Vec::new() }
    }
}

impl Corpus {
    /// Build a corpus from entries, validating each and sorting by id.
    pub fn from_entries(version: u64, mut entries: Vec<ModelEntry>) -> Result<Self, CorpusError> {
        for e in &entries {
            e.validate()?;
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::Conflict(w[0].id.clone()));
        }
        Ok(Self { version, entries })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ModelEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    /// Return a new snapshot containing `entry`. Existing entries are untouched.
    pub fn add_entry(&self, entry: ModelEntry) -> Result<Corpus, CorpusError> {
        entry.validate()?;
        let pos = match self.entries.binary_search_by(|e| e.id.cmp(&entry.id)) {
            Ok(_) => return Err(CorpusError::Conflict(entry.id)),
            Err(pos) => pos,
        };
        let mut entries = self.entries.clone();
        entries.insert(pos, entry);
        Ok(Corpus { version: self.version + 1, entries })
    }

    /// Return a new snapshot with descriptions merged in (one version bump).
    pub fn with_descriptions(
        &self,
        updates: impl IntoIterator<Item = (String, ExpertiseLevel, String)>,
    ) -> Result<Corpus, CorpusError> {
        let mut entries = self.entries.clone();
        for (id, level, text) in updates {
            let idx = entries
                .binary_search_by(|e| e.id.cmp(&id))
                .map_err(|_| CorpusError::Validation(format!("unknown entry `{id}`")))?;
            if text.trim().is_empty() {
                return Err(CorpusError::Validation(format!("`{id}`: {level} description is empty")));
            }
            entries[idx].descriptions.insert(level, text);
        }
        Ok(Corpus { version: self.version + 1, entries })
    }
}

#[derive(Debug, Default, Deserialize)]
struct Meta {
    name: Option<String>,
    provenance: Option<String>,
}

/// Read a corpus tree: one subdirectory per problem, holding `*.mzn` files and
/// an optional `meta.json`.
pub fn ingest_directory(root: &Path) -> Result<Corpus, CorpusError> {
    let mut dirs = Vec::new();
    for dent in fs::read_dir(root).map_err(|e| CorpusError::io(root, e))? {
        let dent = dent.map_err(|e| CorpusError::io(root, e))?;
        let ty = dent.file_type().map_err(|e| CorpusError::io(&dent.path(), e))?;
        if ty.is_dir() {
            dirs.push(dent.path());
        }
    }
    dirs.sort();

    let mut entries = Vec::with_capacity(dirs.len());
    for dir in dirs {
        entries.push(ingest_problem(&dir)?);
    }
    Corpus::from_entries(1, entries)
}

fn ingest_problem(dir: &Path) -> Result<ModelEntry, CorpusError> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CorpusError::Validation(format!("{}: directory name is not UTF-8", dir.display())))?
        .to_string();
    if !is_valid_id(&id) {
        return Err(CorpusError::Validation(format!(
            "{}: directory name `{id}` is not a valid id ([a-z0-9_-]+)",
            dir.display()
        )));
    }

    let mut files = Vec::new();
    for dent in fs::read_dir(dir).map_err(|e| CorpusError::io(dir, e))? {
        let path = dent.map_err(|e| CorpusError::io(dir, e))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(MODEL_EXTENSION) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(CorpusError::Validation(format!(
            "{}: no .{MODEL_EXTENSION} model files",
            dir.display()
        )));
    }

    let mut source_files = Vec::with_capacity(files.len());
    for path in files {
        let bytes = fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
        let content = String::from_utf8(bytes)
            .map_err(|_| CorpusError::Validation(format!("{}: not valid UTF-8", path.display())))?;
        let filename = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CorpusError::Validation(format!("{}: file name is not UTF-8", path.display())))?
            .to_string();
        source_files.push(SourceFile { filename, content });
    }
    source_files.sort_by(|a, b| a.filename.cmp(&b.filename));

    let meta_path = dir.join("meta.json");
    let meta = match fs::read_to_string(&meta_path) {
        Ok(text) => serde_json::from_str::<Meta>(&text)
            .map_err(|source| CorpusError::Json { path: meta_path.clone(), source })?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Meta::default(),
        Err(e) => return Err(CorpusError::io(&meta_path, e)),
    };

    let entry = ModelEntry {
        name: meta.name.unwrap_or_else(|| id.clone()),
        provenance: meta.provenance.unwrap_or_else(unknown_provenance),
        id,
        source_files,
        descriptions: BTreeMap::new(),
    };
    entry.validate()?;
    Ok(entry)
}

#[derive(Serialize)]
struct CorpusDocRef<'a> {
    schema_version: u32,
    version: u64,
    entries: &'a [ModelEntry],
}

#[derive(Deserialize)]
struct CorpusDoc {
    schema_version: u64,
    version: u64,
    entries: Vec<ModelEntry>,
}

/// Serialize a corpus to its canonical JSON text.
pub fn corpus_to_json(corpus: &Corpus) -> String {
    let doc = CorpusDocRef {
        schema_version: CORPUS_SCHEMA_VERSION,
        version: corpus.version,
        entries: &corpus.entries,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("corpus serializes");
    text.push('\n');
    text
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_atomic(path, corpus_to_json(corpus).as_bytes()).map_err(|e| CorpusError::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    corpus_from_json(&text).map_err(|e| match e {
        CorpusError::Json { source, .. } => CorpusError::Json { path: path.to_path_buf(), source },
        other => other,
    })
}

pub fn corpus_from_json(text: &str) -> Result<Corpus, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|source| CorpusError::Json { path: PathBuf::new(), source })?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != u64::from(CORPUS_SCHEMA_VERSION) {
        return Err(CorpusError::SchemaVersion { found, expected: CORPUS_SCHEMA_VERSION });
    }
    let doc: CorpusDoc = serde_json::from_value(value)
        .map_err(|source| CorpusError::Json { path: PathBuf::new(), source })?;
    debug_assert_eq!(doc.schema_version, u64::from(CORPUS_SCHEMA_VERSION));
    Corpus::from_entries(doc.version, doc.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn knapsack() -> ModelEntry {
        ModelEntry::new("knapsack", vec![SourceFile::new("knapsack.mzn", "var int: x;\nsolve satisfy;\n")])
    }

    fn write(root: &Path, rel: &str, content: &[u8]) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, content).unwrap();
    }

    #[test]
    fn ingest_two_problems() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "queens/queens.mzn", b"int: n;");
        write(tmp.path(), "knapsack/k.mzn", b"int: capacity;");
        let c = ingest_directory(tmp.path()).unwrap();
        let ids: Vec<_> = c.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["knapsack", "queens"]);
        assert_eq!(c.get("queens").unwrap().name, "queens");
        assert_eq!(c.get("queens").unwrap().provenance, "unknown");
        assert!(c.get("queens").unwrap().descriptions.is_empty());
    }

    #[test]
    fn ingest_empty_root() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ingest_directory(tmp.path()).unwrap();
        assert_eq!(c.len(), 0);
        assert_eq!(c.version(), 1);
    }

    #[test]
    fn ingest_sorts_files_and_reads_meta() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "steel_mill/b.mzn", b"% b");
        write(tmp.path(), "steel_mill/a.mzn", b"% a");
        write(tmp.path(), "steel_mill/data.dzn", b"n = 3;");
        write(
            tmp.path(),
            "steel_mill/meta.json",
            br#"{"name": "Steel Mill Slab", "provenance": "CSPLib 38"}"#,
        );
        let c = ingest_directory(tmp.path()).unwrap();
        let e = c.get("steel_mill").unwrap();
        let names: Vec<_> = e.source_files.iter().map(|f| f.filename.as_str()).collect();
        assert_eq!(names, ["a.mzn", "b.mzn"]);
        assert_eq!(e.name, "Steel Mill Slab");
        assert_eq!(e.provenance, "CSPLib 38");
    }

    #[test]
    fn ingest_rejects_dir_without_models() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "empty_problem/readme.txt", b"nothing");
        let err = ingest_directory(tmp.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Validation(ref m) if m.contains("empty_problem")), "{err}");
    }

    #[test]
    fn ingest_rejects_non_utf8() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "bad/model.mzn", &[0xff, 0xfe, 0x00]);
        let err = ingest_directory(tmp.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Validation(ref m) if m.contains("UTF-8")), "{err}");
    }

    #[test]
    fn ingest_missing_root() {
        let err = ingest_directory(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, CorpusError::NotFound { .. }));
    }

    #[test]
    fn add_entry_grows_and_bumps_version() {
        let c = Corpus::from_entries(3, vec![knapsack()]).unwrap();
        let n = c
            .add_entry(ModelEntry::new("nurse_rostering", vec![SourceFile::new("n.mzn", "int: days;")]))
            .unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n.version(), 4);
        assert_eq!(n.get("knapsack"), c.get("knapsack"));
        // the original snapshot is unchanged
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn add_duplicate_is_conflict() {
        let c = Corpus::from_entries(1, vec![knapsack()]).unwrap();
        assert!(matches!(c.add_entry(knapsack()), Err(CorpusError::Conflict(id)) if id == "knapsack"));
    }

    #[test]
    fn add_without_sources_is_invalid() {
        let c = Corpus::default();
        let err = c.add_entry(ModelEntry::new("x", vec![])).unwrap_err();
        assert!(matches!(err, CorpusError::Validation(_)));
    }

    #[test]
    fn entry_invariants() {
        assert!(ModelEntry::new("Bad Id", vec![SourceFile::new("a.mzn", "x")]).validate().is_err());
        assert!(ModelEntry::new("ok", vec![SourceFile::new("a.mzn", "  \n")]).validate().is_err());
        assert!(knapsack().with_description(ExpertiseLevel::Novice, " ").validate().is_err());
        assert!(knapsack().with_description(ExpertiseLevel::Novice, "bag").validate().is_ok());
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("corpus.json");
        let c = Corpus::from_entries(
            7,
            vec![
                knapsack().with_description(ExpertiseLevel::Intermediate, "0/1 knapsack"),
                ModelEntry::new("queens", vec![SourceFile::new("q.mzn", "int: n;")]),
            ],
        )
        .unwrap();
        save_corpus(&c, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert!(text.contains("\"D2\": \"0/1 knapsack\""));
    }

    #[test]
    fn load_unknown_schema() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.json");
        fs::write(&path, r#"{"schema_version": 99, "version": 1, "entries": []}"#).unwrap();
        assert!(matches!(
            load_corpus(&path),
            Err(CorpusError::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn load_missing_file() {
        assert!(matches!(
            load_corpus(Path::new("/nope/corpus.json")),
            Err(CorpusError::NotFound { .. })
        ));
    }

    #[test]
    fn level_codes() {
        assert_eq!(parse_levels("D3,d1, D1").unwrap(), [ExpertiseLevel::Novice, ExpertiseLevel::Expert]);
        assert!(parse_levels("D4").is_err());
        assert!(ExpertiseLevel::Novice < ExpertiseLevel::Intermediate);
        assert!(ExpertiseLevel::Intermediate < ExpertiseLevel::Expert);
    }

    #[test]
    fn concatenated_source_has_headers() {
        let e = ModelEntry::new(
            "two",
            vec![SourceFile::new("a.mzn", "A\n"), SourceFile::new("b.mzn", "B")],
        );
        assert_eq!(e.concatenated_source(), "% file: a.mzn\nA\n% file: b.mzn\nB");
    }
}
