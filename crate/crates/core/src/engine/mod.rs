//! In-memory document database and deterministic aggregation executor.

mod expr;
mod matcher;
mod probe;
mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::mql::{parse_pipeline, Document, FieldPath, Literal, Pipeline};

pub use expr::eval_expr;
pub use matcher::{matches_filter, resolve_query_path};
pub use probe::{probe_match, ProbeEvidence};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("collection {0:?} already loaded")]
    DuplicateCollection(String),
    #[error("unknown collection {0:?}")]
    UnknownCollection(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Named collections of documents, immutable once built.
#[derive(Debug, Clone, Default)]
pub struct Database {
    collections: BTreeMap<String, Arc<Vec<Document>>>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a new database with `name` added; `self` is left untouched.
    pub fn load_collection(&self, name: &str, rows: Vec<Document>) -> Result<Database, EngineError> {
        if self.collections.contains_key(name) {
            return Err(EngineError::DuplicateCollection(name.to_string()));
        }
        let mut next = self.clone();
        next.collections.insert(name.to_string(), Arc::new(rows));
        Ok(next)
    }

    pub fn collection(&self, name: &str) -> Option<&[Document]> {
        self.collections.get(name).map(|rows| rows.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[Document], EngineError> {
        self.collection(name)
            .ok_or_else(|| EngineError::UnknownCollection(name.to_string()))
    }

    pub fn collection_names(&self) -> impl Iterator<Item = &str> {
        self.collections.keys().map(String::as_str)
    }

    /// Loads every `<collection>.jsonl` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Database, EngineError> {
        let io = |source| EngineError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        files.sort();
        let mut db = Database::new();
        for file in files {
            let name = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            db = db.load_collection(&name, load_jsonl(&file)?)?;
        }
        Ok(db)
    }
}

/// Reads one document per non-blank line; extended-JSON wrappers are honored.
pub fn load_jsonl(path: &Path) -> Result<Vec<Document>, EngineError> {
    let text = fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EngineError::BadRow {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        match Literal::from_json(&value) {
            Literal::Document(d) => rows.push(d),
            other => return Err(bad(format!("expected a document, found {}", other.kind()))),
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    SyntaxError,
    RuntimeError,
    Ok,
}

/// Outcome of running a candidate query. Rows exist only on success.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecOutcome {
    Ok(Vec<Document>),
    SyntaxError(String),
    RuntimeError(String),
}

impl ExecOutcome {
    pub fn status(&self) -> ExecStatus {
        match self {
            ExecOutcome::Ok(_) => ExecStatus::Ok,
            ExecOutcome::SyntaxError(_) => ExecStatus::SyntaxError,
            ExecOutcome::RuntimeError(_) => ExecStatus::RuntimeError,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, ExecOutcome::Ok(_))
    }

    pub fn rows(&self) -> Option<&[Document]> {
        match self {
            ExecOutcome::Ok(rows) => Some(rows),
            _ => None,
        }
    }

    pub fn error_message(&self) -> Option<&str> {
        match self {
            ExecOutcome::Ok(_) => None,
            ExecOutcome::SyntaxError(m) | ExecOutcome::RuntimeError(m) => Some(m),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "status": self.status(),
            "rows": self.rows().map(|rows| rows
                .iter()
                .map(|d| Literal::Document(d.clone()).to_json())
                .collect::<Vec<_>>()),
            "error_message": self.error_message(),
        })
    }
}

/// Runs `p` against `db`. Never panics; failures become `RuntimeError`.
pub fn execute(p: &Pipeline, db: &Database) -> ExecOutcome {
    let Some(rows) = db.collection(&p.collection) else {
        return ExecOutcome::RuntimeError(format!("unknown collection {:?}", p.collection));
    };
    match stages::run_stages(rows.to_vec(), &p.stages, db) {
        Ok(rows) => ExecOutcome::Ok(rows),
        Err(message) => ExecOutcome::RuntimeError(message),
    }
}

/// Parses then executes; parse failures surface as `SyntaxError`.
pub fn execute_text(text: &str, db: &Database) -> ExecOutcome {
    match parse_pipeline(text) {
        Ok(p) => execute(&p, db),
        Err(e) => ExecOutcome::SyntaxError(e.to_string()),
    }
}

/// Union of leaf field paths across rows; array elements contribute their
/// paths without indices.
pub fn returned_field_set(rows: &[Document]) -> BTreeSet<FieldPath> {
    fn walk(value: &Literal, path: &FieldPath, out: &mut BTreeSet<FieldPath>) {
        match value {
            Literal::Document(d) if !d.is_empty() => walk_doc(d, Some(path), out),
            Literal::Array(items) if !items.is_empty() => {
                for item in items {
                    walk(item, path, out);
                }
            }
            _ => {
                out.insert(path.clone());
            }
        }
    }
    fn walk_doc(doc: &Document, prefix: Option<&FieldPath>, out: &mut BTreeSet<FieldPath>) {
        for (k, v) in doc {
            let seg = FieldPath::from_segments([k.as_str()]);
            let Some(seg) = seg else { continue };
            let path = match prefix {
                Some(p) => p.join(&seg),
                None => seg,
            };
            walk(v, &path, out);
        }
    }
    let mut out = BTreeSet::new();
    for row in rows {
        walk_doc(row, None, &mut out);
    }
    out
}

#[cfg(test)]
pub(crate) mod test_util {
    use crate::mql::{parse_literal, Document, Literal};

    pub fn docs(text: &str) -> Vec<Document> {
        match parse_literal(text).expect("test literal") {
            Literal::Array(items) => items
                .into_iter()
                .map(|d| match d {
                    Literal::Document(d) => d,
                    _ => panic!("not a document"),
                })
                .collect(),
            _ => panic!("not an array"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::docs;
    use super::*;
    use crate::mql::parse_pipeline;

    fn run(coll: &str, query: &str) -> ExecOutcome {
        let db = Database::new().load_collection("c", docs(coll)).unwrap();
        execute(&parse_pipeline(query).unwrap(), &db)
    }

    #[test]
    fn load_semantics() {
        let db = Database::new();
        let one = db.load_collection("users", vec![]).unwrap();
        assert!(db.collection("users").is_none());
        assert_eq!(one.collection("users").unwrap().len(), 0);
        assert!(matches!(
            one.load_collection("users", vec![]),
            Err(EngineError::DuplicateCollection(_))
        ));
        let rows = docs("[{a:1},{a:2},{a:3}]");
        let two = one.load_collection("c", rows.clone()).unwrap();
        assert_eq!(two.collection("c").unwrap(), rows.as_slice());
    }

    #[test]
    fn match_then_count() {
        let out = run(
            "[{a:1},{a:2},{a:3}]",
            r#"db.c.aggregate([{$match:{a:{$gte:2}}},{$count:"n"}])"#,
        );
        assert_eq!(out, ExecOutcome::Ok(docs("[{n:2}]")));
    }

    #[test]
    fn unwind_scalar_array() {
        let out = run(r#"[{t:["x","y"]}]"#, r#"db.c.aggregate([{$unwind:"$t"}])"#);
        assert_eq!(out, ExecOutcome::Ok(docs(r#"[{t:"x"},{t:"y"}]"#)));
    }

    #[test]
    fn unknown_collection_is_runtime_error() {
        let out = run("[]", "db.ghost.aggregate([])");
        assert_eq!(out.status(), ExecStatus::RuntimeError);
        assert!(out.rows().is_none());
    }

    #[test]
    fn syntax_errors_surface_from_text() {
        let db = Database::new();
        assert_eq!(execute_text("db.c.aggregate([", &db).status(), ExecStatus::SyntaxError);
    }

    #[test]
    fn field_sets() {
        assert!(returned_field_set(&[]).is_empty());
        let names =
            |rows: &str| -> Vec<String> { returned_field_set(&docs(rows)).iter().map(|p| p.to_string()).collect() };
        assert_eq!(names("[{a:1,b:{c:2}}]"), ["a", "b.c"]);
        assert_eq!(names("[{a:1},{d:4}]"), ["a", "d"]);
        assert_eq!(names("[{xs:[{p:1},{q:2}], t:[1,2]}]"), ["t", "xs.p", "xs.q"]);
    }

    #[test]
    fn load_jsonl_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("users.jsonl"), "{\"a\":1}\n\n{\"a\":2.5}\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let db = Database::load_dir(dir.path()).unwrap();
        assert_eq!(db.collection_names().collect::<Vec<_>>(), ["users"]);
        assert_eq!(db.collection("users").unwrap()[1]["a"], Literal::Float(2.5));
        fs::write(dir.path().join("bad.jsonl"), "[1]\n").unwrap();
        assert!(matches!(
            Database::load_dir(dir.path()),
            Err(EngineError::BadRow { line: 1, .. })
        ));
    }
}
