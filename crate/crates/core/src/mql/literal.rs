//! Document values shared by the parser, the engine and the schema model.

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexMap;
use serde_json::{Map, Number, Value};

/// An ordered document. Key order is the order in which fields were parsed or loaded.
pub type Document = IndexMap<String, Literal>;

/// A materialized value inside a pipeline or a stored document.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    Array(Vec<Literal>),
    Document(Document),
    /// Milliseconds since the Unix epoch.
    Date(i64),
    /// Lowercase 24-hex-digit object id.
    ObjectId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LiteralKind {
    Null,
    Bool,
    Int,
    Float,
    String,
    Array,
    Document,
    Date,
    ObjectId,
}

impl LiteralKind {
    pub fn label(self) -> &'static str {
        match self {
            LiteralKind::Null => "null",
            LiteralKind::Bool => "bool",
            LiteralKind::Int => "int",
            LiteralKind::Float => "float",
            LiteralKind::String => "string",
            LiteralKind::Array => "array",
            LiteralKind::Document => "document",
            LiteralKind::Date => "date",
            LiteralKind::ObjectId => "objectid",
        }
    }
}

impl fmt::Display for LiteralKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Literal {
    pub fn kind(&self) -> LiteralKind {
        match self {
            Literal::Null => LiteralKind::Null,
            Literal::Bool(_) => LiteralKind::Bool,
            Literal::Int(_) => LiteralKind::Int,
            Literal::Float(_) => LiteralKind::Float,
            Literal::String(_) => LiteralKind::String,
            Literal::Array(_) => LiteralKind::Array,
            Literal::Document(_) => LiteralKind::Document,
            Literal::Date(_) => LiteralKind::Date,
            Literal::ObjectId(_) => LiteralKind::ObjectId,
        }
    }

    pub fn str(s: impl Into<String>) -> Self {
        Literal::String(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_document(&self) -> Option<&Document> {
        match self {
            Literal::Document(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Literal]> {
        match self {
            Literal::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Literal::Int(i) => Some(i as f64),
            Literal::Float(f) => Some(f),
            _ => None,
        }
    }

    /// Integral value of an int or an integral float.
    pub fn as_integer(&self) -> Option<i64> {
        match *self {
            Literal::Int(i) => Some(i),
            Literal::Float(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Some(f as i64),
            _ => None,
        }
    }

    pub fn is_number(&self) -> bool {
        matches!(self, Literal::Int(_) | Literal::Float(_))
    }

    /// Truthiness as used by `$exists`, `$cond` and projection flags.
    pub fn is_truthy(&self) -> bool {
        match self {
            Literal::Null => false,
            Literal::Bool(b) => *b,
            Literal::Int(i) => *i != 0,
            Literal::Float(f) => *f != 0.0,
            _ => true,
        }
    }

    /// True for a document whose first key is an operator (`{"$gt": 1}`).
    pub fn is_operator_document(&self) -> bool {
        match self {
            Literal::Document(d) => d.keys().next().is_some_and(|k| k.starts_with('$')),
            _ => false,
        }
    }

    /// Extended-JSON form: `{"$date": ms}` and `{"$oid": "hex"}` wrap the extended kinds.
    pub fn to_json(&self) -> Value {
        match self {
            Literal::Null => Value::Null,
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Int(i) => Value::Number((*i).into()),
            Literal::Float(f) => Number::from_f64(*f).map(Value::Number).unwrap_or(Value::Null),
            Literal::String(s) => Value::String(s.clone()),
            Literal::Array(items) => Value::Array(items.iter().map(Literal::to_json).collect()),
            Literal::Document(d) => {
                Value::Object(d.iter().map(|(k, v)| (k.clone(), v.to_json())).collect::<Map<_, _>>())
            }
            Literal::Date(ms) => {
                let mut m = Map::new();
                m.insert("$date".into(), Value::Number((*ms).into()));
                Value::Object(m)
            }
            Literal::ObjectId(h) => {
                let mut m = Map::new();
                m.insert("$oid".into(), Value::String(h.clone()));
                Value::Object(m)
            }
        }
    }

    /// Inverse of [`Literal::to_json`]. Integer-valued JSON numbers become `Int`.
    pub fn from_json(value: &Value) -> Literal {
        match value {
            Value::Null => Literal::Null,
            Value::Bool(b) => Literal::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => Literal::Int(i),
                None => Literal::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            Value::String(s) => Literal::String(s.clone()),
            Value::Array(items) => Literal::Array(items.iter().map(Literal::from_json).collect()),
            Value::Object(m) => {
                let doc: Document = m.iter().map(|(k, v)| (k.clone(), Literal::from_json(v))).collect();
                unwrap_extended(doc)
            }
        }
    }

    /// Compact strict-JSON text.
    pub fn to_json_string(&self) -> String {
        self.to_json().to_string()
    }
}

/// Collapse `{"$date": ..}` / `{"$oid": ..}` wrappers into their extended kinds.
pub(crate) fn unwrap_extended(doc: Document) -> Literal {
    if doc.len() == 1 {
        if let Some(v) = doc.get("$date") {
            match v {
                Literal::Int(ms) => return Literal::Date(*ms),
                Literal::String(s) => {
                    if let Some(ms) = parse_iso_date(s) {
                        return Literal::Date(ms);
                    }
                }
                _ => {}
            }
        }
        if let Some(Literal::String(h)) = doc.get("$oid") {
            if is_object_id(h) {
                return Literal::ObjectId(h.to_ascii_lowercase());
            }
        }
    }
    Literal::Document(doc)
}

pub fn is_object_id(s: &str) -> bool {
    s.len() == 24 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Parses `YYYY-MM-DD`, RFC 3339 timestamps and naive `YYYY-MM-DDTHH:MM:SS[.fff]` (UTC).
pub fn parse_iso_date(s: &str) -> Option<i64> {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp_millis());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp_millis())
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json_string())
    }
}

// ---------------------------------------------------------------------------
// Equality and ordering
// ---------------------------------------------------------------------------

/// Value equality used by matching and grouping: numbers compare numerically
/// across int/float, documents compare key-by-key in order.
pub fn values_equal(a: &Literal, b: &Literal) -> bool {
    match (a, b) {
        (Literal::Int(x), Literal::Int(y)) => x == y,
        (x, y) if x.is_number() && y.is_number() => x.as_f64() == y.as_f64(),
        (Literal::Array(x), Literal::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| values_equal(p, q))
        }
        (Literal::Document(x), Literal::Document(y)) => {
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|((ka, va), (kb, vb))| ka == kb && values_equal(va, vb))
        }
        _ => a == b,
    }
}

/// Ordering between values of the same comparable class (numbers, strings,
/// booleans, dates, object ids, nulls). `None` for cross-kind pairs.
pub fn compare_same_class(a: &Literal, b: &Literal) -> Option<Ordering> {
    match (a, b) {
        (Literal::Int(x), Literal::Int(y)) => Some(x.cmp(y)),
        (x, y) if x.is_number() && y.is_number() => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Literal::String(x), Literal::String(y)) => Some(x.cmp(y)),
        (Literal::Bool(x), Literal::Bool(y)) => Some(x.cmp(y)),
        (Literal::Date(x), Literal::Date(y)) => Some(x.cmp(y)),
        (Literal::ObjectId(x), Literal::ObjectId(y)) => Some(x.cmp(y)),
        (Literal::Null, Literal::Null) => Some(Ordering::Equal),
        _ => None,
    }
}

fn type_rank(v: &Literal) -> u8 {
    match v {
        Literal::Null => 1,
        Literal::Int(_) | Literal::Float(_) => 2,
        Literal::String(_) => 3,
        Literal::Document(_) => 4,
        Literal::Array(_) => 5,
        Literal::ObjectId(_) => 7,
        Literal::Bool(_) => 8,
        Literal::Date(_) => 9,
    }
}

/// Total order across all kinds (null < numbers < strings < documents <
/// arrays < object ids < booleans < dates), used by `$min`/`$max` and
/// expression comparisons.
pub fn total_cmp(a: &Literal, b: &Literal) -> Ordering {
    let (ra, rb) = (type_rank(a), type_rank(b));
    if ra != rb {
        return ra.cmp(&rb);
    }
    match (a, b) {
        (Literal::Int(x), Literal::Int(y)) => x.cmp(y),
        (x, y) if x.is_number() && y.is_number() => {
            let (p, q) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            p.total_cmp(&q)
        }
        (Literal::Document(x), Literal::Document(y)) => {
            for ((ka, va), (kb, vb)) in x.iter().zip(y) {
                let o = total_cmp(va, vb).then_with(|| ka.cmp(kb));
                if o != Ordering::Equal {
                    return o;
                }
            }
            x.len().cmp(&y.len())
        }
        (Literal::Array(x), Literal::Array(y)) => {
            for (p, q) in x.iter().zip(y) {
                let o = total_cmp(p, q);
                if o != Ordering::Equal {
                    return o;
                }
            }
            x.len().cmp(&y.len())
        }
        _ => compare_same_class(a, b).unwrap_or(Ordering::Equal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_int_float_distinction() {
        let v: Value =
            serde_json::from_str(r#"{"a":1,"b":1.0,"d":{"$date":86400000},"o":{"$oid":"0123456789abcdef01234567"}}"#)
                .unwrap();
        let lit = Literal::from_json(&v);
        let doc = lit.as_document().unwrap();
        assert_eq!(doc["a"], Literal::Int(1));
        assert_eq!(doc["b"], Literal::Float(1.0));
        assert_eq!(doc["d"], Literal::Date(86_400_000));
        assert_eq!(doc["o"], Literal::ObjectId("0123456789abcdef01234567".into()));
        assert_eq!(Literal::from_json(&lit.to_json()), lit);
    }

    #[test]
    fn numeric_equality_crosses_kinds() {
        assert!(values_equal(&Literal::Int(1), &Literal::Float(1.0)));
        assert!(!values_equal(&Literal::Int(1), &Literal::str("1")));
        assert_eq!(compare_same_class(&Literal::Int(1), &Literal::str("1")), None);
    }

    #[test]
    fn iso_dates() {
        assert_eq!(parse_iso_date("1970-01-02"), Some(86_400_000));
        assert_eq!(parse_iso_date("1970-01-01T00:00:01Z"), Some(1000));
        assert_eq!(parse_iso_date("not a date"), None);
    }
}
