//! Recursive-descent parser for shell-style aggregation queries.
//!
//! Accepts strict JSON plus the relaxations LLM outputs commonly use:
//! unquoted keys, single-quoted strings, trailing commas, comments,
//! `ISODate(..)` / `new Date(..)` / `ObjectId(..)` / `NumberInt(..)` /
//! `NumberLong(..)` / `NumberDecimal(..)` wrappers and `/regex/flags` literals.

use std::fmt;

use super::literal::{is_object_id, parse_iso_date, unwrap_extended};
use super::{Document, Literal, Pipeline, Stage};

const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct SyntaxError {
    /// Byte offset into the input.
    pub position: usize,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at byte {}: {}", self.position, self.message)
    }
}

/// Parses `db.<collection>.aggregate([...])` (or `db.getCollection("x")...`).
pub fn parse_pipeline(text: &str) -> Result<Pipeline, SyntaxError> {
    Parser::new(text).query(None)
}

/// Like [`parse_pipeline`], but also accepts a bare stage array, which is
/// attributed to `collection`.
pub fn parse_pipeline_with_collection(text: &str, collection: &str) -> Result<Pipeline, SyntaxError> {
    Parser::new(text).query(Some(collection))
}

/// Parses a single relaxed-JSON value (used for documents and JSONL rows).
pub fn parse_literal(text: &str) -> Result<Literal, SyntaxError> {
    let mut p = Parser::new(text);
    p.skip_ws()?;
    let v = p.value(0)?;
    p.skip_ws()?;
    if !p.at_end() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(v)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            position: self.pos,
            message: message.into(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) -> Result<(), SyntaxError> {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') if self.rest().starts_with("//") => {
                    while let Some(c) = self.bump() {
                        if c == '\n' {
                            break;
                        }
                    }
                }
                Some('/') if self.rest().starts_with("/*") => {
                    let start = self.pos;
                    match self.rest()[2..].find("*/") {
                        Some(end) => self.pos += end + 4,
                        None => {
                            self.pos = start;
                            return Err(self.err("unterminated block comment"));
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn expect(&mut self, c: char) -> Result<(), SyntaxError> {
        self.skip_ws()?;
        match self.peek() {
            Some(got) if got == c => {
                self.bump();
                Ok(())
            }
            Some(got) => Err(self.err(format!("expected '{c}', found '{got}'"))),
            None => Err(self.err(format!("expected '{c}', found end of input"))),
        }
    }

    fn eat(&mut self, c: char) -> Result<bool, SyntaxError> {
        self.skip_ws()?;
        if self.peek() == Some(c) {
            self.bump();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn ident(&mut self) -> Option<&'a str> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '$' {
                self.bump();
            } else {
                break;
            }
        }
        (self.pos > start).then(|| &self.src[start..self.pos])
    }

    // -----------------------------------------------------------------------
    // Query shell
    // -----------------------------------------------------------------------

    fn query(&mut self, default_collection: Option<&str>) -> Result<Pipeline, SyntaxError> {
        self.skip_ws()?;
        let pipeline = if self.peek() == Some('[') {
            let Some(collection) = default_collection else {
                return Err(self.err("bare stage array needs a collection name"));
            };
            let stages = self.stage_array()?;
            Pipeline::new(collection, stages)
        } else {
            let start = self.pos;
            if self.ident() != Some("db") {
                self.pos = start;
                return Err(self.err("expected 'db.<collection>.aggregate(' or a stage array"));
            }
            self.expect('.')?;
            self.skip_ws()?;
            let name_pos = self.pos;
            let collection = match self.ident() {
                Some("getCollection") => {
                    self.expect('(')?;
                    self.skip_ws()?;
                    let name = self.string()?;
                    self.expect(')')?;
                    name
                }
                Some(name) => name.to_string(),
                None => {
                    self.pos = name_pos;
                    return Err(self.err("expected collection name"));
                }
            };
            self.expect('.')?;
            self.skip_ws()?;
            let method_pos = self.pos;
            match self.ident() {
                Some("aggregate") => {}
                Some(other) => {
                    self.pos = method_pos;
                    return Err(self.err(format!("unsupported method '{other}', expected aggregate")));
                }
                None => return Err(self.err("expected 'aggregate'")),
            }
            self.expect('(')?;
            self.skip_ws()?;
            let stages = self.stage_array()?;
            if self.eat(',')? {
                self.skip_ws()?;
                if self.peek() != Some(')') {
                    // aggregate options are accepted and ignored
                    self.value(0)?;
                    self.eat(',')?;
                }
            }
            self.expect(')')?;
            Pipeline::new(collection, stages)
        };
        self.eat(';')?;
        self.skip_ws()?;
        if !self.at_end() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(pipeline)
    }

    fn stage_array(&mut self) -> Result<Vec<Stage>, SyntaxError> {
        self.skip_ws()?;
        let start = self.pos;
        let Literal::Array(items) = self.value(0)? else {
            self.pos = start;
            return Err(self.err("expected '[' starting the stage list"));
        };
        items
            .into_iter()
            .map(|item| match item {
                Literal::Document(mut d) if d.len() == 1 => {
                    let (op, body) = d.pop().expect("len 1");
                    if op.starts_with('$') && op.len() > 1 {
                        Ok(Stage::new(op, body))
                    } else {
                        Err(SyntaxError {
                            position: start,
                            message: format!("stage key '{op}' is not an operator"),
                        })
                    }
                }
                _ => Err(SyntaxError {
                    position: start,
                    message: "each stage must be a document with exactly one operator key".into(),
                }),
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Values
    // -----------------------------------------------------------------------

    fn value(&mut self, depth: usize) -> Result<Literal, SyntaxError> {
        if depth > MAX_DEPTH {
            return Err(self.err("nesting too deep"));
        }
        self.skip_ws()?;
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some('{') => self.object(depth),
            Some('[') => self.array(depth),
            Some('"') | Some('\'') => Ok(Literal::String(self.string()?)),
            Some('/') => self.regex_literal(),
            Some(c) if c == '-' || c == '+' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$' => self.word(depth),
            Some(c) => Err(self.err(format!("unexpected character '{c}'"))),
        }
    }

    fn object(&mut self, depth: usize) -> Result<Literal, SyntaxError> {
        self.expect('{')?;
        let mut doc = Document::new();
        loop {
            self.skip_ws()?;
            if self.eat('}')? {
                break;
            }
            let key_pos = self.pos;
            let key = match self.peek() {
                Some('"') | Some('\'') => self.string()?,
                Some(c) if c.is_ascii_alphanumeric() || c == '_' || c == '$' => {
                    let start = self.pos;
                    while let Some(c) = self.peek() {
                        if c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '.' {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    self.src[start..self.pos].to_string()
                }
                Some(c) => return Err(self.err(format!("expected a key, found '{c}'"))),
                None => return Err(self.err("unterminated object")),
            };
            self.expect(':')?;
            let v = self.value(depth + 1)?;
            if doc.contains_key(&key) {
                return Err(SyntaxError {
                    position: key_pos,
                    message: format!("duplicate key '{key}'"),
                });
            }
            doc.insert(key, v);
            if !self.eat(',')? {
                self.expect('}')?;
                break;
            }
        }
        Ok(unwrap_extended(doc))
    }

    fn array(&mut self, depth: usize) -> Result<Literal, SyntaxError> {
        self.expect('[')?;
        let mut items = Vec::new();
        loop {
            if self.eat(']')? {
                break;
            }
            items.push(self.value(depth + 1)?);
            if !self.eat(',')? {
                self.expect(']')?;
                break;
            }
        }
        Ok(Literal::Array(items))
    }

    fn string(&mut self) -> Result<String, SyntaxError> {
        let start = self.pos;
        let quote = match self.bump() {
            Some(q @ ('"' | '\'')) => q,
            _ => {
                self.pos = start;
                return Err(self.err("expected a string"));
            }
        };
        let mut out = String::new();
        loop {
            let Some(c) = self.bump() else {
                self.pos = start;
                return Err(self.err("unterminated string"));
            };
            match c {
                c if c == quote => return Ok(out),
                '\\' => {
                    let esc_pos = self.pos;
                    match self.bump() {
                        Some('n') => out.push('\n'),
                        Some('t') => out.push('\t'),
                        Some('r') => out.push('\r'),
                        Some('b') => out.push('\u{8}'),
                        Some('f') => out.push('\u{c}'),
                        Some('0') => out.push('\0'),
                        Some('u') => out.push(self.unicode_escape()?),
                        Some(c @ ('"' | '\'' | '\\' | '/')) => out.push(c),
                        Some('\n') => {}
                        _ => {
                            self.pos = esc_pos;
                            return Err(self.err("invalid escape sequence"));
                        }
                    }
                }
                c => out.push(c),
            }
        }
    }

    fn hex4(&mut self) -> Result<u32, SyntaxError> {
        let digits = self
            .rest()
            .get(..4)
            .filter(|d| d.bytes().all(|b| b.is_ascii_hexdigit()));
        match digits {
            Some(d) => {
                self.pos += 4;
                Ok(u32::from_str_radix(d, 16).expect("checked hex"))
            }
            None => Err(self.err("invalid \\u escape")),
        }
    }

    fn unicode_escape(&mut self) -> Result<char, SyntaxError> {
        let hi = self.hex4()?;
        if (0xD800..0xDC00).contains(&hi) && self.rest().starts_with("\\u") {
            let save = self.pos;
            self.pos += 2;
            let lo = self.hex4()?;
            if (0xDC00..0xE000).contains(&lo) {
                let code = 0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00);
                return char::from_u32(code).ok_or_else(|| self.err("invalid surrogate pair"));
            }
            self.pos = save;
        }
        char::from_u32(hi).ok_or_else(|| self.err("invalid unicode escape"))
    }

    fn number(&mut self) -> Result<Literal, SyntaxError> {
        let start = self.pos;
        if matches!(self.peek(), Some('-') | Some('+')) {
            self.bump();
        }
        let mut is_float = false;
        let mut digits = 0;
        while let Some(c) = self.peek() {
            match c {
                '0'..='9' => digits += 1,
                '.' | 'e' | 'E' => is_float = true,
                '+' | '-' if is_float && matches!(self.src[..self.pos].chars().last(), Some('e' | 'E')) => {}
                _ => break,
            }
            self.bump();
        }
        let text = &self.src[start..self.pos];
        if digits == 0 {
            self.pos = start;
            return Err(self.err("malformed number"));
        }
        let text = text.strip_prefix('+').unwrap_or(text);
        if !is_float {
            if let Ok(i) = text.parse::<i64>() {
                return Ok(Literal::Int(i));
            }
        }
        match text.parse::<f64>() {
            Ok(f) if f.is_finite() => Ok(Literal::Float(f)),
            Ok(_) => {
                self.pos = start;
                Err(self.err("number out of range"))
            }
            Err(_) => {
                self.pos = start;
                Err(self.err(format!("malformed number '{text}'")))
            }
        }
    }

    fn regex_literal(&mut self) -> Result<Literal, SyntaxError> {
        let start = self.pos;
        self.bump();
        let mut pattern = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => {
                    self.pos = start;
                    return Err(self.err("unterminated regex literal"));
                }
                Some('\\') => {
                    pattern.push('\\');
                    match self.bump() {
                        Some(c) => pattern.push(c),
                        None => {
                            self.pos = start;
                            return Err(self.err("unterminated regex literal"));
                        }
                    }
                }
                Some('/') => break,
                Some(c) => pattern.push(c),
            }
        }
        let mut flags = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphabetic() {
                flags.push(c);
                self.bump();
            } else {
                break;
            }
        }
        let mut doc = Document::new();
        doc.insert("$regex".into(), Literal::String(pattern));
        if !flags.is_empty() {
            doc.insert("$options".into(), Literal::String(flags));
        }
        Ok(Literal::Document(doc))
    }

    /// Keywords and shell constructor calls.
    fn word(&mut self, depth: usize) -> Result<Literal, SyntaxError> {
        let start = self.pos;
        let word = self.ident().unwrap_or_default();
        match word {
            "true" => return Ok(Literal::Bool(true)),
            "false" => return Ok(Literal::Bool(false)),
            "null" | "undefined" => return Ok(Literal::Null),
            _ => {}
        }
        let ctor = if word == "new" {
            self.skip_ws()?;
            self.ident().unwrap_or_default()
        } else {
            word
        };
        let known = matches!(
            ctor,
            "ISODate" | "Date" | "ObjectId" | "NumberInt" | "NumberLong" | "NumberDecimal"
        );
        if !known {
            self.pos = start;
            return Err(self.err(format!("unknown identifier '{word}'")));
        }
        self.expect('(')?;
        let arg_pos = self.pos;
        let arg = if self.eat(')')? {
            None
        } else {
            let v = self.value(depth + 1)?;
            self.expect(')')?;
            Some(v)
        };
        let bad = |p: &Self, msg: &str| SyntaxError {
            position: arg_pos,
            message: format!("{ctor}: {msg} (at {})", p.pos),
        };
        match (ctor, arg) {
            ("ISODate" | "Date", Some(Literal::String(s))) => parse_iso_date(&s)
                .map(Literal::Date)
                .ok_or_else(|| bad(self, "unparseable date string")),
            ("ISODate" | "Date", Some(v)) if v.as_integer().is_some() => {
                Ok(Literal::Date(v.as_integer().expect("checked")))
            }
            ("ObjectId", Some(Literal::String(s))) if is_object_id(&s) => Ok(Literal::ObjectId(s.to_ascii_lowercase())),
            ("NumberInt" | "NumberLong", Some(v)) => match v {
                Literal::Int(i) => Ok(Literal::Int(i)),
                Literal::String(s) => s
                    .trim()
                    .parse::<i64>()
                    .map(Literal::Int)
                    .map_err(|_| bad(self, "expected an integer")),
                _ => Err(bad(self, "expected an integer")),
            },
            ("NumberDecimal", Some(v)) => match v {
                Literal::Int(i) => Ok(Literal::Float(i as f64)),
                Literal::Float(f) => Ok(Literal::Float(f)),
                Literal::String(s) => match s.trim().parse::<f64>() {
                    Ok(f) if f.is_finite() => Ok(Literal::Float(f)),
                    _ => Err(bad(self, "expected a decimal")),
                },
                _ => Err(bad(self, "expected a decimal")),
            },
            _ => Err(bad(self, "invalid argument")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(pairs: Vec<(&str, Literal)>) -> Literal {
        Literal::Document(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    #[test]
    fn parses_shell_query() {
        let p = parse_pipeline("db.users.aggregate([{$match:{age:{$gte:30}}}])").unwrap();
        assert_eq!(p.collection, "users");
        assert_eq!(
            p.stages,
            vec![Stage::new(
                "$match",
                doc(vec![("age", doc(vec![("$gte", Literal::Int(30))]))])
            )]
        );
    }

    #[test]
    fn empty_pipeline() {
        let p = parse_pipeline("db.c.aggregate([])").unwrap();
        assert_eq!(p, Pipeline::new("c", vec![]));
    }

    #[test]
    fn missing_colon_is_a_syntax_error() {
        let text = "db.users.aggregate([{$match:{age {$gte:30}}}])";
        let err = parse_pipeline(text).unwrap_err();
        assert_eq!(&text[err.position..err.position + 1], "{");
        assert!(err.message.contains("expected ':'"), "{err}");
    }

    #[test]
    fn relaxed_syntax() {
        let text = r#"
            // comment
            db.getCollection('orders').aggregate([
              { $match: { 'status': 'A', created: ISODate("1970-01-02"), _id: ObjectId('0123456789ABCDEF01234567'), }, },
              { $limit: NumberInt(5) },
              { $match: { name: /^jo/i } },
            ], { allowDiskUse: true });
        "#;
        let p = parse_pipeline(text).unwrap();
        assert_eq!(p.collection, "orders");
        assert_eq!(p.stages.len(), 3);
        let m = p.stages[0].body.as_document().unwrap();
        assert_eq!(m["created"], Literal::Date(86_400_000));
        assert_eq!(m["_id"], Literal::ObjectId("0123456789abcdef01234567".into()));
        assert_eq!(p.stages[1].body, Literal::Int(5));
        let re = p.stages[2].body.as_document().unwrap()["name"]
            .as_document()
            .unwrap()
            .clone();
        assert_eq!(re["$regex"], Literal::str("^jo"));
        assert_eq!(re["$options"], Literal::str("i"));
    }

    #[test]
    fn single_quotes_render_canonically() {
        let p = parse_pipeline("db.users.aggregate([{$match:{'name':'Ann'}}])").unwrap();
        assert_eq!(p.render(), r#"db.users.aggregate([{"$match":{"name":"Ann"}}])"#);
    }

    #[test]
    fn bare_array_needs_collection() {
        assert!(parse_pipeline("[{$limit:1}]").is_err());
        let p = parse_pipeline_with_collection("[{$limit:1}]", "c").unwrap();
        assert_eq!(p.collection, "c");
    }

    #[test]
    fn unsupported_stage_is_kept() {
        let p = parse_pipeline("db.c.aggregate([{$facet:{}}])").unwrap();
        assert!(!p.stages[0].is_supported());
    }

    #[test]
    fn malformed_stages() {
        assert!(parse_pipeline("db.c.aggregate([{a:1}])").is_err());
        assert!(parse_pipeline("db.c.aggregate([{$match:{},$limit:1}])").is_err());
        assert!(parse_pipeline("db.c.aggregate([1])").is_err());
        assert!(parse_pipeline("db.c.find({})").is_err());
        assert!(parse_pipeline("db.c.aggregate([{$match:{a:1, a:2}}])").is_err());
        assert!(parse_pipeline("db.c.aggregate([{$limit:1e999}])").is_err());
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_literal("-3").unwrap(), Literal::Int(-3));
        assert_eq!(parse_literal("2.50").unwrap(), Literal::Float(2.5));
        assert_eq!(parse_literal("1e3").unwrap(), Literal::Float(1000.0));
        assert_eq!(parse_literal("1.5E-2").unwrap(), Literal::Float(0.015));
        assert_eq!(parse_literal("99999999999999999999").unwrap(), Literal::Float(1e20));
        assert!(parse_literal("-").is_err());
        assert!(parse_literal("1.2.3").is_err());
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let text = "[".repeat(10_000);
        assert!(parse_literal(&text).is_err());
    }
}
