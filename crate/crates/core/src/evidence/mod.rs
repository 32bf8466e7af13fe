//! Refinement: embedding-based field expansion, draft-conditioned schema
//! linking, probe-verified value grounding and prompt-context assembly.

mod embed;

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{probe_match, Database, EngineError, ProbeEvidence};
use crate::mql::{FieldPath, FieldScan, Literal, LiteralKind, Pipeline, PredicateOp};
use crate::schema::{prune, render_mschema, render_ts, SchemaTree};

pub use embed::{Embedder, RemoteEmbedder, TrigramEmbedder, Vector, TRIGRAM_DIM};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("the field index is empty")]
    EmptyIndex,
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("remote embedder: {0}")]
    Remote(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

// ---------------------------------------------------------------------------
// Field index
// ---------------------------------------------------------------------------

/// Embeddings of every schema path, built once and then read-only.
#[derive(Clone)]
pub struct FieldIndex {
    /// Each path with the embeddings of its bare name and its described text.
    entries: Vec<(FieldPath, Vec<Vector>)>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for FieldIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldIndex")
            .field("entries", &self.entries.len())
            .finish()
    }
}

/// Text embedded for a schema field: the dot-path, plus its description.
pub fn field_text(path: &FieldPath, description: Option<&str>) -> String {
    match description {
        Some(d) if !d.is_empty() => format!("{path}: {d}"),
        _ => path.to_string(),
    }
}

impl FieldIndex {
    pub fn build(schema: &SchemaTree, embedder: Arc<dyn Embedder>) -> Result<FieldIndex, EvidenceError> {
        let mut items = Vec::new();
        schema.walk(|path, field| items.push((path.clone(), field_text(path, field.description.as_deref()))));
        let mut entries = Vec::with_capacity(items.len());
        for (path, text) in items {
            let bare = path.to_string();
            let texts = if text == bare { vec![text] } else { vec![bare, text] };
            let mut vectors = Vec::with_capacity(texts.len());
            for t in &texts {
                let v = embedder.embed(t)?;
                if v.dim() != embedder.dim() {
                    return Err(EvidenceError::DimensionMismatch {
                        expected: embedder.dim(),
                        found: v.dim(),
                    });
                }
                vectors.push(v);
            }
            entries.push((path, vectors));
        }
        Ok(FieldIndex { entries, embedder })
    }

    /// Index over the default trigram embedder.
    pub fn trigram(schema: &SchemaTree) -> FieldIndex {
        FieldIndex::build(schema, Arc::new(TrigramEmbedder)).expect("trigram embedding is infallible")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &FieldPath> {
        self.entries.iter().map(|(p, _)| p)
    }

    /// Top-`k` paths by cosine similarity to `query`; ties broken by path
    /// text. A verbatim match always ranks first with similarity 1.0.
    pub fn topk(&self, query: &FieldPath, k: usize) -> Result<Vec<(FieldPath, f64)>, EvidenceError> {
        if k == 0 {
            return Err(EvidenceError::InvalidK(k));
        }
        if self.entries.is_empty() {
            return Err(EvidenceError::EmptyIndex);
        }
        let q = self.embedder.embed(&query.to_string())?;
        let mut scored: Vec<(FieldPath, f64, String)> = self
            .entries
            .iter()
            .map(|(p, vs)| {
                let sim = if p == query {
                    1.0
                } else {
                    vs.iter().map(|v| q.cosine(v)).fold(f64::NEG_INFINITY, f64::max)
                };
                (p.clone(), sim, p.to_string())
            })
            .collect();
        scored.sort_by(|a, b| {
            let exact = |p: &FieldPath| p == query;
            exact(&b.0)
                .cmp(&exact(&a.0))
                .then(b.1.total_cmp(&a.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        scored.truncate(k);
        Ok(scored.into_iter().map(|(p, s, _)| (p, s)).collect())
    }
}

// ---------------------------------------------------------------------------
// Schema linking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinkResult {
    /// Paths read directly off the draft.
    pub extracted: BTreeSet<FieldPath>,
    /// `extracted` plus the semantic neighbours of each extracted path.
    pub fields: BTreeSet<FieldPath>,
    pub pruned: SchemaTree,
}

pub fn link_schema(draft: &Pipeline, s: &SchemaTree, idx: &FieldIndex, k: usize) -> Result<LinkResult, EvidenceError> {
    if k == 0 {
        return Err(EvidenceError::InvalidK(k));
    }
    let extracted = FieldScan::of(draft).fields;
    let mut fields = extracted.clone();
    if !idx.is_empty() {
        for f in &extracted {
            fields.extend(idx.topk(f, k)?.into_iter().map(|(p, _)| p));
        }
    }
    let pruned = prune(s, &fields);
    Ok(LinkResult {
        extracted,
        fields,
        pruned,
    })
}

// ---------------------------------------------------------------------------
// Value grounding
// ---------------------------------------------------------------------------

/// A value mentioned in the draft and the probes that witnessed it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEvidence {
    pub field: FieldPath,
    #[serde(serialize_with = "serialize_literal")]
    pub value: Literal,
    /// Only probes with `matched = true`.
    pub verified: Vec<ProbeEvidence>,
}

fn serialize_literal<S: serde::Serializer>(v: &Literal, s: S) -> Result<S::Ok, S::Error> {
    v.to_json().serialize(s)
}

impl ValueEvidence {
    pub fn is_verified(&self) -> bool {
        !self.verified.is_empty()
    }
}

fn probeable(v: &Literal) -> bool {
    !matches!(v.kind(), LiteralKind::Null | LiteralKind::Array | LiteralKind::Document)
}

/// Equality and membership values of the draft, in first-mention order,
/// with `$in` lists split into their elements.
pub fn value_mentions(draft: &Pipeline) -> Vec<(FieldPath, Literal)> {
    let mut out: Vec<(FieldPath, Literal)> = Vec::new();
    for pred in FieldScan::of(draft).predicates {
        let values = match (pred.op, &pred.value) {
            (PredicateOp::Eq, v) => vec![v.clone()],
            (PredicateOp::In, Literal::Array(items)) => items.clone(),
            _ => continue,
        };
        for v in values.into_iter().filter(probeable) {
            if !out.iter().any(|(p, seen)| p == &pred.path && seen == &v) {
                out.push((pred.path.clone(), v));
            }
        }
    }
    out
}

pub fn ground_values(
    draft: &Pipeline,
    db: &Database,
    collection: &str,
    idx: &FieldIndex,
    k: usize,
) -> Result<Vec<ValueEvidence>, EvidenceError> {
    if k == 0 {
        return Err(EvidenceError::InvalidK(k));
    }
    db.require(collection)?;
    let mut out = Vec::new();
    for (field, value) in value_mentions(draft) {
        let mut candidates = vec![field.clone()];
        if !idx.is_empty() {
            for (p, _) in idx.topk(&field, k)? {
                if !candidates.contains(&p) {
                    candidates.push(p);
                }
            }
        }
        let probes: Vec<ProbeEvidence> = candidates
            .par_iter()
            .map(|g| probe_match(db, collection, g, &value))
            .collect::<Result<_, _>>()?;
        out.push(ValueEvidence {
            field,
            value,
            verified: probes.into_iter().filter(|p| p.matched).collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Context assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub struct ContextFlags {
    pub use_mschema: bool,
    pub use_link: bool,
    pub use_ground: bool,
}

impl ContextFlags {
    pub const DRAFT: ContextFlags = ContextFlags {
        use_mschema: false,
        use_link: false,
        use_ground: false,
    };
    pub const FULL: ContextFlags = ContextFlags {
        use_mschema: true,
        use_link: true,
        use_ground: true,
    };

    /// All eight flag combinations, ordered by their bit tag.
    pub fn all() -> [ContextFlags; 8] {
        std::array::from_fn(|i| ContextFlags {
            use_mschema: i & 4 != 0,
            use_link: i & 2 != 0,
            use_ground: i & 1 != 0,
        })
    }

    /// Three-character tag such as `"101"` (mschema, link, ground).
    pub fn tag(self) -> String {
        [self.use_mschema, self.use_link, self.use_ground]
            .iter()
            .map(|b| if *b { '1' } else { '0' })
            .collect()
    }

    pub fn from_tag(tag: &str) -> Option<ContextFlags> {
        let bits: Vec<bool> = tag
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<_>>()?;
        match bits.as_slice() {
            [m, l, g] => Some(ContextFlags {
                use_mschema: *m,
                use_link: *l,
                use_ground: *g,
            }),
            _ => None,
        }
    }
}

/// One prompt-context variant for a question.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceContext {
    pub question: String,
    pub collection: String,
    pub schema_text: String,
    pub flags: ContextFlags,
    /// True when linking was requested but produced no fields, so the full
    /// schema was used instead.
    pub link_fallback: bool,
    pub linked_fields: Option<BTreeSet<FieldPath>>,
    pub value_evidence: Vec<ValueEvidence>,
    pub draft: Option<Pipeline>,
}

impl EvidenceContext {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "question": self.question,
            "collection": self.collection,
            "flags": self.flags,
            "schema_text": self.schema_text,
            "link_fallback": self.link_fallback,
            "linked_fields": self.linked_fields.as_ref().map(|f| f.iter().map(|p| p.to_string()).collect::<Vec<_>>()),
            "value_evidence": self.value_evidence,
            "draft": self.draft.as_ref().map(Pipeline::render),
        })
    }
}

pub struct ContextInputs<'a> {
    pub schema: &'a SchemaTree,
    pub db: &'a Database,
    pub index: &'a FieldIndex,
    pub k: usize,
}

pub fn assemble_context(
    question: &str,
    draft: Option<&Pipeline>,
    flags: ContextFlags,
    inputs: &ContextInputs<'_>,
) -> Result<EvidenceContext, EvidenceError> {
    let s = inputs.schema;
    let mut tree = s.clone();
    let mut link_fallback = false;
    let mut linked_fields = None;
    if flags.use_link {
        let linked = match draft {
            Some(d) => Some(link_schema(d, s, inputs.index, inputs.k)?),
            None => None,
        };
        match linked {
            Some(l) if !l.pruned.fields.is_empty() => {
                tree = l.pruned;
                linked_fields = Some(l.fields);
            }
            other => {
                link_fallback = true;
                linked_fields = Some(other.map(|l| l.fields).unwrap_or_default());
            }
        }
    }
    let schema_text = if flags.use_mschema {
        render_mschema(&tree)
    } else {
        render_ts(&tree)
    };
    let value_evidence = match (flags.use_ground, draft) {
        (true, Some(d)) => ground_values(d, inputs.db, &s.collection, inputs.index, inputs.k)?,
        _ => Vec::new(),
    };
    Ok(EvidenceContext {
        question: question.to_string(),
        collection: s.collection.clone(),
        schema_text,
        flags,
        link_fallback,
        linked_fields,
        value_evidence,
        draft: draft.cloned(),
    })
}
