//! Aggregation-pipeline AST: parsing, canonical rendering, and extraction of
//! the field paths and value predicates a draft query references.

mod extract;
mod fence;
mod literal;
mod parser;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use extract::{extract_fields, extract_value_predicates, FieldScan};
pub use fence::{extract_code_block, strip_think, think_content};
pub use literal::{
    compare_same_class, is_object_id, parse_iso_date, total_cmp, values_equal, Document, Literal, LiteralKind,
};
pub use parser::{parse_literal, parse_pipeline, parse_pipeline_with_collection, SyntaxError};

/// Stage operators the engine can execute.
pub const SUPPORTED_STAGES: &[&str] = &[
    "$match",
    "$project",
    "$group",
    "$unwind",
    "$sort",
    "$limit",
    "$skip",
    "$lookup",
    "$count",
    "$addFields",
];

pub fn is_supported_stage(op: &str) -> bool {
    SUPPORTED_STAGES.contains(&op)
}

// ---------------------------------------------------------------------------
// FieldPath
// ---------------------------------------------------------------------------

/// A dot-separated document path. Array traversal is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldPath(Vec<String>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid field path {0:?}")]
pub struct InvalidFieldPath(pub String);

impl FieldPath {
    /// Builds a path from segments; `None` if empty or any segment is empty or dotted.
    pub fn from_segments<I, S>(segments: I) -> Option<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segs: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segs.is_empty() || segs.iter().any(|s| s.is_empty() || s.contains('.')) {
            return None;
        }
        Some(FieldPath(segs))
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::from_segments(text.split('.'))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn first(&self) -> &str {
        &self.0[0]
    }

    pub fn last(&self) -> &str {
        &self.0[self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn child(&self, segment: &str) -> Option<FieldPath> {
        Some(self.join(&FieldPath::parse(segment)?))
    }

    pub fn join(&self, other: &FieldPath) -> FieldPath {
        let mut segs = self.0.clone();
        segs.extend(other.0.iter().cloned());
        FieldPath(segs)
    }

    pub fn parent(&self) -> Option<FieldPath> {
        (self.0.len() > 1).then(|| FieldPath(self.0[..self.0.len() - 1].to_vec()))
    }

    /// All proper ancestors, outermost first.
    pub fn ancestors(&self) -> impl Iterator<Item = FieldPath> + '_ {
        (1..self.0.len()).map(|n| FieldPath(self.0[..n].to_vec()))
    }

    pub fn starts_with(&self, prefix: &FieldPath) -> bool {
        self.0.starts_with(&prefix.0)
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

impl FromStr for FieldPath {
    type Err = InvalidFieldPath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldPath::parse(s).ok_or_else(|| InvalidFieldPath(s.to_string()))
    }
}

impl Serialize for FieldPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Stage / Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub operator: String,
    pub body: Literal,
}

impl Stage {
    pub fn new(operator: impl Into<String>, body: Literal) -> Self {
        Stage {
            operator: operator.into(),
            body,
        }
    }

    /// Stages outside the engine's set still parse so extraction keeps working.
    pub fn is_supported(&self) -> bool {
        is_supported_stage(&self.operator)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert(self.operator.clone(), self.body.to_json());
        serde_json::Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub collection: String,
    pub stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(collection: impl Into<String>, stages: Vec<Stage>) -> Self {
        Pipeline {
            collection: collection.into(),
            stages,
        }
    }

    /// Canonical strict-JSON text, `db.<collection>.aggregate([...])`.
    pub fn render(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_json().to_string()).collect();
        let target = if is_identifier(&self.collection) {
            format!("db.{}", self.collection)
        } else {
            format!(
                "db.getCollection({})",
                serde_json::Value::String(self.collection.clone())
            )
        };
        format!("{target}.aggregate([{}])", stages.join(","))
    }

    /// True when the last row-order-determining stage is `$sort`, i.e.
    /// result comparison must respect order.
    pub fn is_ordered(&self) -> bool {
        for stage in self.stages.iter().rev() {
            match stage.operator.as_str() {
                "$limit" | "$skip" | "$project" | "$addFields" => continue,
                "$sort" => return true,
                _ => return false,
            }
        }
        false
    }

    /// Machine-readable AST form used by the CLI.
    pub fn to_ast_json(&self) -> serde_json::Value {
        serde_json::json!({
            "collection": self.collection,
            "stages": self.stages.iter().map(|s| serde_json::json!({
                "operator": s.operator,
                "supported": s.is_supported(),
                "body": s.body.to_json(),
            })).collect::<Vec<_>>(),
            "canonical": self.render(),
        })
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn render_pipeline(p: &Pipeline) -> String {
    p.render()
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

// ---------------------------------------------------------------------------
// Value predicates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PredicateOp {
    Eq,
    Ne,
    Gt,
    Gte,
    Lt,
    Lte,
    In,
    Nin,
    Regex,
    Exists,
    ElemMatch,
}

impl PredicateOp {
    pub fn from_operator(op: &str) -> Option<Self> {
        Some(match op {
            "$eq" => PredicateOp::Eq,
            "$ne" => PredicateOp::Ne,
            "$gt" => PredicateOp::Gt,
            "$gte" => PredicateOp::Gte,
            "$lt" => PredicateOp::Lt,
            "$lte" => PredicateOp::Lte,
            "$in" => PredicateOp::In,
            "$nin" => PredicateOp::Nin,
            "$regex" => PredicateOp::Regex,
            "$exists" => PredicateOp::Exists,
            "$elemMatch" => PredicateOp::ElemMatch,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PredicateOp::Eq => "eq",
            PredicateOp::Ne => "ne",
            PredicateOp::Gt => "gt",
            PredicateOp::Gte => "gte",
            PredicateOp::Lt => "lt",
            PredicateOp::Lte => "lte",
            PredicateOp::In => "in",
            PredicateOp::Nin => "nin",
            PredicateOp::Regex => "regex",
            PredicateOp::Exists => "exists",
            PredicateOp::ElemMatch => "elemMatch",
        }
    }
}

/// A `(path, op, value)` triple from a `$match` filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePredicate {
    pub path: FieldPath,
    pub op: PredicateOp,
    pub value: Literal,
}

impl ValuePredicate {
    pub fn new(path: FieldPath, op: PredicateOp, value: Literal) -> Self {
        ValuePredicate { path, op, value }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "path": self.path.to_string(),
            "op": self.op.name(),
            "value": self.value.to_json(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_path_rules() {
        assert_eq!(FieldPath::parse("a.b").unwrap().to_string(), "a.b");
        assert!(FieldPath::parse("").is_none());
        assert!(FieldPath::parse("a..b").is_none());
        assert!(FieldPath::from_segments(["a.b"]).is_none());
        let p: FieldPath = "a.b.c".parse().unwrap();
        let anc: Vec<String> = p.ancestors().map(|a| a.to_string()).collect();
        assert_eq!(anc, ["a", "a.b"]);
        assert_eq!(p.parent().unwrap().to_string(), "a.b");
    }

    #[test]
    fn ordered_detection() {
        let p = parse_pipeline("db.c.aggregate([{$sort:{a:1}},{$limit:3},{$project:{a:1}}])").unwrap();
        assert!(p.is_ordered());
        let p = parse_pipeline("db.c.aggregate([{$sort:{a:1}},{$group:{_id:'$a'}}])").unwrap();
        assert!(!p.is_ordered());
    }

    #[test]
    fn odd_collection_names_render_through_get_collection() {
        let p = Pipeline::new("my-coll", vec![]);
        assert_eq!(p.render(), r#"db.getCollection("my-coll").aggregate([])"#);
        assert_eq!(parse_pipeline(&p.render()).unwrap(), p);
    }
}
