//! Lightweight existence probes used by value grounding.

use serde::Serialize;

use super::matcher::resolve_query_path;
use super::{Database, EngineError};
use crate::mql::{values_equal, Document, FieldPath, Literal};

const SAMPLE_LIMIT: usize = 3;

/// Result of testing whether `value` occurs under `field`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEvidence {
    pub field: FieldPath,
    #[serde(serialize_with = "serialize_literal")]
    pub value: Literal,
    pub matched: bool,
    /// Set when only the case-insensitive fallback pass found matches.
    pub case_insensitive: bool,
    #[serde(serialize_with = "serialize_docs")]
    pub sample: Vec<Document>,
}

fn serialize_literal<S: serde::Serializer>(v: &Literal, s: S) -> Result<S::Ok, S::Error> {
    v.to_json().serialize(s)
}

fn serialize_docs<S: serde::Serializer>(docs: &[Document], s: S) -> Result<S::Ok, S::Error> {
    docs.iter()
        .map(|d| Literal::Document(d.clone()).to_json())
        .collect::<Vec<_>>()
        .serialize(s)
}

pub fn probe_match(db: &Database, collection: &str, g: &FieldPath, v: &Literal) -> Result<ProbeEvidence, EngineError> {
    let rows = db.require(collection)?;
    let exact = |c: &Literal| values_equal(c, v);
    let mut sample = collect(rows, g, exact);
    let mut case_insensitive = false;
    if sample.is_empty() {
        if let Literal::String(s) = v {
            let wanted = s.to_lowercase();
            sample = collect(
                rows,
                g,
                |c| matches!(c, Literal::String(x) if x.to_lowercase() == wanted),
            );
            case_insensitive = !sample.is_empty();
        }
    }
    Ok(ProbeEvidence {
        field: g.clone(),
        value: v.clone(),
        matched: !sample.is_empty(),
        case_insensitive,
        sample,
    })
}

fn collect(rows: &[Document], g: &FieldPath, hit: impl Fn(&Literal) -> bool) -> Vec<Document> {
    let mut out = Vec::new();
    for row in rows {
        let cands = resolve_query_path(row, g);
        let found = cands
            .iter()
            .any(|c| hit(c) || matches!(c, Literal::Array(items) if items.iter().any(&hit)));
        if found {
            out.push(project_probe(row, g));
            if out.len() == SAMPLE_LIMIT {
                break;
            }
        }
    }
    out
}

fn project_probe(row: &Document, g: &FieldPath) -> Document {
    fn keep(value: &Literal, segs: &[String]) -> Option<Literal> {
        if segs.is_empty() {
            return Some(value.clone());
        }
        match value {
            Literal::Document(d) => {
                let inner = keep(d.get(&segs[0])?, &segs[1..])?;
                let mut out = Document::new();
                out.insert(segs[0].clone(), inner);
                Some(Literal::Document(out))
            }
            Literal::Array(items) => Some(Literal::Array(
                items.iter().filter_map(|item| keep(item, segs)).collect(),
            )),
            _ => None,
        }
    }
    let mut out = Document::new();
    if let Some(id) = row.get("_id") {
        out.insert("_id".into(), id.clone());
    }
    if let Some(Literal::Document(projected)) = keep(&Literal::Document(row.clone()), g.segments()) {
        for (k, v) in projected {
            out.insert(k, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::test_util::docs;

    fn probe(rows: &str, path: &str, v: Literal) -> ProbeEvidence {
        let db = Database::new().load_collection("c", docs(rows)).unwrap();
        probe_match(&db, "c", &FieldPath::parse(path).unwrap(), &v).unwrap()
    }

    #[test]
    fn nested_and_absent_paths() {
        let ev = probe(
            "[{_id:7,address:{city:'Tokyo',zip:1}}]",
            "address.city",
            Literal::str("Tokyo"),
        );
        assert!(ev.matched && !ev.case_insensitive);
        assert_eq!(ev.sample, docs("[{_id:7,address:{city:'Tokyo'}}]"));
        assert!(!probe("[{address:{city:'Tokyo'}}]", "city", Literal::str("Tokyo")).matched);
    }

    #[test]
    fn arrays_and_case_fallback() {
        assert!(probe("[{tags:['a','b']}]", "tags", Literal::str("b")).matched);
        let ev = probe("[{c:'TOKYO'}]", "c", Literal::str("tokyo"));
        assert!(ev.matched && ev.case_insensitive);
        let ev = probe("[{n:1},{n:1},{n:1},{n:1}]", "n", Literal::Float(1.0));
        assert_eq!(ev.sample.len(), 3);
    }

    #[test]
    fn unknown_collection() {
        let err = probe_match(&Database::new(), "x", &FieldPath::parse("a").unwrap(), &Literal::Null);
        assert!(matches!(err, Err(EngineError::UnknownCollection(_))));
    }
}
