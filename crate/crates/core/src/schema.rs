//! Schema inference over loaded collections, the two textual renderings,
//! and pruning onto a linked field set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Deserialize;

use crate::engine::{Database, EngineError};
use crate::mql::{Document, FieldPath, Literal};

pub const DEFAULT_MAX_EXAMPLES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid annotations: {source}")]
    Annotations {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaField {
    pub name: String,
    /// Observed kind labels, sorted; arrays appear as `"<elem>[]"`.
    pub kinds: Vec<String>,
    /// Absent from at least one enclosing document.
    pub optional: bool,
    pub description: Option<String>,
    pub examples: Vec<Literal>,
    pub children: Vec<SchemaField>,
    pub indexed: bool,
}

impl SchemaField {
    pub fn type_label(&self) -> String {
        self.kinds.join("|")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaTree {
    pub collection: String,
    pub description: Option<String>,
    pub fields: Vec<SchemaField>,
}

impl SchemaTree {
    /// Every path in the tree (containers and leaves), pre-order.
    pub fn flatten(&self) -> Vec<FieldPath> {
        let mut out = Vec::new();
        self.walk(|path, _| out.push(path.clone()));
        out
    }

    /// Visits every field with its full path, pre-order.
    pub fn walk<'a>(&'a self, mut visit: impl FnMut(&FieldPath, &'a SchemaField)) {
        fn go<'a>(
            fields: &'a [SchemaField],
            prefix: Option<&FieldPath>,
            visit: &mut dyn FnMut(&FieldPath, &'a SchemaField),
        ) {
            for f in fields {
                let Some(seg) = FieldPath::from_segments([f.name.as_str()]) else {
                    continue;
                };
                let path = match prefix {
                    Some(p) => p.join(&seg),
                    None => seg,
                };
                visit(&path, f);
                go(&f.children, Some(&path), visit);
            }
        }
        go(&self.fields, None, &mut visit);
    }

    pub fn get(&self, path: &FieldPath) -> Option<&SchemaField> {
        let mut fields = &self.fields;
        let mut found = None;
        for seg in path.segments() {
            let f = fields.iter().find(|f| &f.name == seg)?;
            fields = &f.children;
            found = Some(f);
        }
        found
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Default)]
struct FieldAcc {
    kinds: BTreeSet<String>,
    seen: usize,
    examples: Vec<Literal>,
    children: IndexMap<String, FieldAcc>,
    /// Number of documents (or array elements) that fed `children`.
    child_docs: usize,
}

fn kind_label(v: &Literal) -> String {
    match v {
        Literal::Array(items) => {
            let elems: BTreeSet<&str> = items.iter().map(|i| i.kind().label()).collect();
            if elems.is_empty() {
                "array".to_string()
            } else {
                elems
                    .into_iter()
                    .map(|e| format!("{e}[]"))
                    .collect::<Vec<_>>()
                    .join("|")
            }
        }
        other => other.kind().label().to_string(),
    }
}

fn absorb_doc(accs: &mut IndexMap<String, FieldAcc>, doc: &Document, max_examples: usize) {
    for (key, value) in doc {
        let acc = accs.entry(key.clone()).or_default();
        acc.seen += 1;
        for label in kind_label(value).split('|') {
            acc.kinds.insert(label.to_string());
        }
        let scalars: Vec<&Literal> = match value {
            Literal::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        for s in scalars {
            match s {
                Literal::Document(d) => {
                    acc.child_docs += 1;
                    absorb_doc(&mut acc.children, d, max_examples);
                }
                Literal::Array(_) | Literal::Null => {}
                scalar => {
                    if acc.examples.len() < max_examples && !acc.examples.iter().any(|e| e == scalar) {
                        acc.examples.push(scalar.clone());
                    }
                }
            }
        }
    }
}

fn finish(accs: IndexMap<String, FieldAcc>, parent_count: usize) -> Vec<SchemaField> {
    accs.into_iter()
        .map(|(name, acc)| SchemaField {
            name,
            kinds: acc.kinds.into_iter().collect(),
            optional: acc.seen < parent_count,
            description: None,
            examples: acc.examples,
            children: finish(acc.children, acc.child_docs),
            indexed: false,
        })
        .collect()
}

/// Infers the union of document shapes in `collection`.
pub fn infer_schema(db: &Database, collection: &str, max_examples: usize) -> Result<SchemaTree, EngineError> {
    let rows = db.require(collection)?;
    let mut accs = IndexMap::new();
    for row in rows {
        absorb_doc(&mut accs, row, max_examples);
    }
    Ok(SchemaTree {
        collection: collection.to_string(),
        description: None,
        fields: finish(accs, rows.len()),
    })
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct Annotation {
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub indexed: bool,
}

/// Sidecar metadata keyed by `"collection.path"`; a bare `"collection"` key
/// describes the collection itself.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct Annotations(pub BTreeMap<String, Annotation>);

impl Annotations {
    pub fn load(path: &Path) -> Result<Annotations, SchemaError> {
        let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SchemaError::Annotations {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn apply(&self, tree: &mut SchemaTree) {
        if let Some(a) = self.0.get(&tree.collection) {
            tree.description = a.description.clone();
        }
        fn go(fields: &mut [SchemaField], prefix: &str, ann: &Annotations) {
            for f in fields {
                let key = format!("{prefix}.{}", f.name);
                if let Some(a) = ann.0.get(&key) {
                    f.description = a.description.clone();
                    f.indexed = a.indexed;
                }
                go(&mut f.children, &key, ann);
            }
        }
        let prefix = tree.collection.clone();
        go(&mut tree.fields, &prefix, self);
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn example_list(examples: &[Literal]) -> String {
    examples
        .iter()
        .map(Literal::to_json_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn ts_scalar(label: &str) -> &str {
    match label {
        "int" | "float" => "number",
        "bool" => "boolean",
        "date" => "Date",
        "objectid" => "ObjectId",
        "document" => "object",
        "array" => "unknown[]",
        other => other,
    }
}

fn ts_type(f: &SchemaField) -> Vec<String> {
    let mut parts: Vec<String> = Vec::new();
    for k in &f.kinds {
        let t = match k.strip_suffix("[]") {
            Some("document") if !f.children.is_empty() => continue,
            Some(elem) => format!("{}[]", ts_scalar(elem)),
            None if k == "document" && !f.children.is_empty() => continue,
            None => ts_scalar(k).to_string(),
        };
        if !parts.contains(&t) {
            parts.push(t);
        }
    }
    parts
}

fn interface_name(collection: &str) -> String {
    let mut out = String::new();
    for part in collection
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|p| !p.is_empty())
    {
        let mut chars = part.chars();
        if let Some(first) = chars.next() {
            out.push(first.to_ascii_uppercase());
            out.extend(chars);
        }
    }
    if out.is_empty() || out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert(0, 'C');
    }
    out
}

/// TypeScript-style interface text.
pub fn render_ts(s: &SchemaTree) -> String {
    let mut out = format!("// Collection: {}\n", s.collection);
    if let Some(d) = &s.description {
        let _ = writeln!(out, "// {d}");
    }
    let _ = writeln!(out, "interface {} {{", interface_name(&s.collection));
    render_ts_fields(&s.fields, 1, &mut out);
    out.push_str("}\n");
    out
}

fn render_ts_fields(fields: &[SchemaField], depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    for f in fields {
        let name = if crate::mql::is_identifier(&f.name) {
            f.name.clone()
        } else {
            serde_json::to_string(&f.name).expect("string")
        };
        let opt = if f.optional { "?" } else { "" };
        let mut comment = Vec::new();
        if f.indexed {
            comment.push("indexed".to_string());
        }
        if let Some(d) = &f.description {
            comment.push(d.clone());
        }
        if !f.examples.is_empty() {
            comment.push(format!("e.g. {}", example_list(&f.examples)));
        }
        let comment = if comment.is_empty() {
            String::new()
        } else {
            format!(" // {}", comment.join(" | "))
        };
        let scalars = ts_type(f);
        if f.children.is_empty() {
            let _ = writeln!(out, "{pad}{name}{opt}: {};{comment}", scalars.join(" | "));
            continue;
        }
        let _ = writeln!(out, "{pad}{name}{opt}: {{{comment}");
        render_ts_fields(&f.children, depth + 1, out);
        let array = f.kinds.iter().any(|k| k == "document[]");
        let single = f.kinds.iter().any(|k| k == "document");
        let mut closing = String::from("}");
        if array && !single {
            closing.push_str("[]");
        } else if array {
            closing.push_str(" | {...}[]");
        }
        for t in scalars {
            let _ = write!(closing, " | {t}");
        }
        let _ = writeln!(out, "{pad}{closing};");
    }
}

/// Compact one-line-per-path format.
pub fn render_mschema(s: &SchemaTree) -> String {
    let mut out = format!("# Collection: {}\n", s.collection);
    if let Some(d) = &s.description {
        let _ = writeln!(out, "# Description: {d}");
    }
    s.walk(|path, f| {
        let _ = write!(out, "{path} ({})", f.type_label());
        if f.indexed {
            out.push_str(" [IDX]");
        }
        out.push(':');
        let mut parts = Vec::new();
        if let Some(d) = &f.description {
            parts.push(d.clone());
        }
        if !f.examples.is_empty() {
            let list: Vec<String> = f.examples.iter().map(Literal::to_json_string).collect();
            parts.push(format!("examples=[{}]", list.join(", ")));
        }
        if !parts.is_empty() {
            out.push(' ');
            out.push_str(&parts.join("; "));
        }
        out.push('\n');
    });
    out
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Keeps the fields named in `keep` that exist in `s`, plus their ancestors.
pub fn prune(s: &SchemaTree, keep: &BTreeSet<FieldPath>) -> SchemaTree {
    let mut wanted: BTreeSet<FieldPath> = BTreeSet::new();
    for p in keep {
        if s.get(p).is_some() {
            wanted.extend(p.ancestors());
            wanted.insert(p.clone());
        }
    }
    fn go(fields: &[SchemaField], prefix: Option<&FieldPath>, wanted: &BTreeSet<FieldPath>) -> Vec<SchemaField> {
        let mut out = Vec::new();
        for f in fields {
            let Some(seg) = FieldPath::from_segments([f.name.as_str()]) else {
                continue;
            };
            let path = match prefix {
                Some(p) => p.join(&seg),
                None => seg,
            };
            if wanted.contains(&path) {
                let mut kept = f.clone();
                kept.children = go(&f.children, Some(&path), wanted);
                out.push(kept);
            }
        }
        out
    }
    SchemaTree {
        collection: s.collection.clone(),
        description: s.description.clone(),
        fields: go(&s.fields, None, &wanted),
    }
}

/// Builds and annotates trees for every collection in `db`.
pub fn infer_all(db: &Database, annotations: &Annotations, max_examples: usize) -> HashMap<String, SchemaTree> {
    db.collection_names()
        .map(|name| {
            let mut tree = infer_schema(db, name, max_examples).expect("listed collection exists");
            annotations.apply(&mut tree);
            (name.to_string(), tree)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::test_util::docs;

    fn tree(rows: &str) -> SchemaTree {
        let db = Database::new().load_collection("c", docs(rows)).unwrap();
        infer_schema(&db, "c", 3).unwrap()
    }

    fn paths(t: &SchemaTree) -> Vec<String> {
        t.flatten().iter().map(|p| p.to_string()).collect()
    }

    #[test]
    fn infers_union_of_shapes() {
        let t = tree("[{a:1},{a:2,b:'x'}]");
        assert_eq!(t.fields.len(), 2);
        assert_eq!(t.fields[0].kinds, ["int"]);
        assert_eq!(t.fields[0].examples, [Literal::Int(1), Literal::Int(2)]);
        assert!(!t.fields[0].optional);
        assert!(t.fields[1].optional);
        assert_eq!(t.fields[1].examples, [Literal::str("x")]);
        assert!(tree("[]").fields.is_empty());
        let nested = tree("[{u:{n:'A'}}]");
        assert_eq!(nested.fields[0].kinds, ["document"]);
        assert_eq!(nested.fields[0].children[0].name, "n");
    }

    #[test]
    fn arrays_and_examples_cap() {
        let t = tree("[{t:['a','b'],it:[{q:1},{q:2,r:true}]},{t:['c','d'],it:[]}]");
        assert_eq!(t.fields[0].kinds, ["string[]"]);
        assert_eq!(t.fields[0].examples.len(), 3);
        assert_eq!(t.fields[1].kinds, ["array", "document[]"]);
        assert_eq!(paths(&t), ["t", "it", "it.q", "it.r"]);
        assert!(t.fields[1].children[1].optional);
    }

    #[test]
    fn renders_both_formats() {
        let mut t = tree("[{u:{n:'A'},age:3}]");
        let ann: Annotations =
            serde_json::from_str(r#"{"c":{"description":"people"},"c.age":{"description":"years","indexed":true}}"#)
                .unwrap();
        ann.apply(&mut t);
        assert_eq!(
            render_ts(&t),
            "// Collection: c\n// people\ninterface C {\n  u: {\n    n: string; // e.g. \"A\"\n  };\n  age: number; // indexed | years | e.g. 3\n}\n"
        );
        assert_eq!(
            render_mschema(&t),
            "# Collection: c\n# Description: people\nu (document):\nu.n (string): examples=[\"A\"]\nage (int) [IDX]: years; examples=[3]\n"
        );
        let empty = tree("[]");
        assert_eq!(render_ts(&empty), "// Collection: c\ninterface C {\n}\n");
        assert_eq!(render_mschema(&empty), "# Collection: c\n");
    }

    #[test]
    fn prune_keeps_ancestors() {
        let t = tree("[{u:{n:'A',m:1},z:2}]");
        let keep = |ps: &[&str]| ps.iter().map(|p| FieldPath::parse(p).unwrap()).collect::<BTreeSet<_>>();
        assert_eq!(paths(&prune(&t, &keep(&["u.n"]))), ["u", "u.n"]);
        assert_eq!(prune(&t, &t.flatten().into_iter().collect()), t);
        assert!(prune(&t, &keep(&["ghost"])).fields.is_empty());
        let once = prune(&t, &keep(&["u.m", "z"]));
        assert_eq!(prune(&once, &keep(&["u.m", "z"])), once);
    }
}
