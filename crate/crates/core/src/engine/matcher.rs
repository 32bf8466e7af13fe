//! `$match` filter evaluation with array-descending path semantics.

use std::cmp::Ordering;

use regex::RegexBuilder;

use crate::mql::{compare_same_class, values_equal, Document, FieldPath, Literal};

type Result<T> = std::result::Result<T, String>;

/// Values reachable at `path`, descending element-wise through arrays of
/// documents. Missing paths yield an empty list.
pub fn resolve_query_path<'a>(doc: &'a Document, path: &FieldPath) -> Vec<&'a Literal> {
    let mut out = Vec::new();
    resolve_in_doc(doc, path.segments(), &mut out);
    out
}

fn resolve_in_doc<'a>(doc: &'a Document, segs: &[String], out: &mut Vec<&'a Literal>) {
    if let Some(v) = doc.get(&segs[0]) {
        resolve_value(v, &segs[1..], out);
    }
}

fn resolve_value<'a>(value: &'a Literal, segs: &[String], out: &mut Vec<&'a Literal>) {
    if segs.is_empty() {
        out.push(value);
        return;
    }
    match value {
        Literal::Document(d) => resolve_in_doc(d, segs, out),
        Literal::Array(items) => {
            for item in items {
                if let Literal::Document(d) = item {
                    resolve_in_doc(d, segs, out);
                }
            }
        }
        _ => {}
    }
}

/// Candidates plus the elements of any array candidate.
fn expand<'a>(cands: &[&'a Literal]) -> Vec<&'a Literal> {
    let mut out = Vec::with_capacity(cands.len());
    for c in cands {
        out.push(*c);
        if let Literal::Array(items) = c {
            out.extend(items.iter());
        }
    }
    out
}

pub fn matches_filter(doc: &Document, filter: &Document) -> Result<bool> {
    for (key, value) in filter {
        let ok = match key.as_str() {
            "$and" | "$or" | "$nor" => {
                let clauses = match value {
                    Literal::Array(c) if !c.is_empty() => c,
                    _ => return Err(format!("{key} needs a non-empty array")),
                };
                let mut results = Vec::with_capacity(clauses.len());
                for clause in clauses {
                    let Literal::Document(d) = clause else {
                        return Err(format!("{key} entries must be documents"));
                    };
                    results.push(matches_filter(doc, d)?);
                }
                match key.as_str() {
                    "$and" => results.iter().all(|r| *r),
                    "$or" => results.iter().any(|r| *r),
                    _ => !results.iter().any(|r| *r),
                }
            }
            k if k.starts_with('$') => return Err(format!("unsupported query operator {k}")),
            k => {
                let path = FieldPath::parse(k).ok_or_else(|| format!("invalid field path {k:?}"))?;
                let cands = resolve_query_path(doc, &path);
                field_condition(&cands, value)?
            }
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

fn field_condition(cands: &[&Literal], cond: &Literal) -> Result<bool> {
    match cond {
        Literal::Document(ops) if cond.is_operator_document() => operator_conditions(cands, ops),
        _ => Ok(eq_holds(cands, cond)),
    }
}

fn eq_holds(cands: &[&Literal], value: &Literal) -> bool {
    if matches!(value, Literal::Null) && cands.is_empty() {
        return true;
    }
    expand(cands).iter().any(|c| values_equal(c, value))
}

fn operator_conditions(cands: &[&Literal], ops: &Document) -> Result<bool> {
    for (op, arg) in ops {
        let ok = match op.as_str() {
            "$eq" => eq_holds(cands, arg),
            "$ne" => !eq_holds(cands, arg),
            "$gt" | "$gte" | "$lt" | "$lte" => compare_holds(cands, op, arg),
            "$in" => in_holds(cands, arg, op)?,
            "$nin" => !in_holds(cands, arg, op)?,
            "$exists" => arg.is_truthy() != cands.is_empty(),
            "$regex" => {
                let options = match ops.get("$options") {
                    None => "",
                    Some(Literal::String(s)) => s.as_str(),
                    Some(_) => return Err("$options must be a string".into()),
                };
                regex_holds(cands, arg, options)?
            }
            "$options" => {
                if !ops.contains_key("$regex") {
                    return Err("$options without $regex".into());
                }
                true
            }
            "$not" => match arg {
                Literal::Document(inner) if arg.is_operator_document() => !operator_conditions(cands, inner)?,
                _ => return Err("$not needs an operator document".into()),
            },
            "$elemMatch" => {
                let Literal::Document(inner) = arg else {
                    return Err("$elemMatch needs a document".into());
                };
                elem_match_holds(cands, inner, arg.is_operator_document())?
            }
            other => return Err(format!("unsupported query operator {other}")),
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

fn compare_holds(cands: &[&Literal], op: &str, arg: &Literal) -> bool {
    if matches!(arg, Literal::Null) {
        // only equality-flavoured comparisons can hold against null
        return matches!(op, "$gte" | "$lte") && eq_holds(cands, arg);
    }
    expand(cands).iter().any(|c| match compare_same_class(c, arg) {
        Some(ord) => match op {
            "$gt" => ord == Ordering::Greater,
            "$gte" => ord != Ordering::Less,
            "$lt" => ord == Ordering::Less,
            _ => ord != Ordering::Greater,
        },
        None => false,
    })
}

fn in_holds(cands: &[&Literal], arg: &Literal, op: &str) -> Result<bool> {
    let Literal::Array(options) = arg else {
        return Err(format!("{op} needs an array"));
    };
    Ok(options.iter().any(|o| eq_holds(cands, o)))
}

fn regex_holds(cands: &[&Literal], pattern: &Literal, options: &str) -> Result<bool> {
    let Literal::String(pattern) = pattern else {
        return Err("$regex needs a string pattern".into());
    };
    let mut builder = RegexBuilder::new(pattern);
    for flag in options.chars() {
        match flag {
            'i' => builder.case_insensitive(true),
            'm' => builder.multi_line(true),
            's' => builder.dot_matches_new_line(true),
            'x' => builder.ignore_whitespace(true),
            other => return Err(format!("unsupported regex option {other:?}")),
        };
    }
    let re = builder.build().map_err(|e| format!("invalid regex: {e}"))?;
    Ok(expand(cands)
        .iter()
        .any(|c| matches!(c, Literal::String(s) if re.is_match(s))))
}

fn elem_match_holds(cands: &[&Literal], inner: &Document, scalar: bool) -> Result<bool> {
    for c in cands {
        let Literal::Array(items) = c else { continue };
        for item in items {
            let ok = if scalar {
                operator_conditions(&[item], inner)?
            } else {
                match item {
                    Literal::Document(d) => matches_filter(d, inner)?,
                    _ => false,
                }
            };
            if ok {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::test_util::docs;
    use crate::mql::parse_literal;

    fn check(doc: &str, filter: &str) -> Result<bool> {
        let d = docs(&format!("[{doc}]")).remove(0);
        let Literal::Document(f) = parse_literal(filter).unwrap() else {
            panic!()
        };
        matches_filter(&d, &f)
    }

    #[test]
    fn array_descent() {
        assert!(check("{tags:['a','b']}", "{tags:'b'}").unwrap());
        assert!(check("{tags:['a','b']}", "{tags:['a','b']}").unwrap());
        assert!(check("{xs:[{k:1},{k:5}]}", "{'xs.k':{$gt:3}}").unwrap());
        assert!(!check("{xs:[{k:1},{k:2}]}", "{'xs.k':{$gt:3}}").unwrap());
    }

    #[test]
    fn numeric_kinds_and_cross_kind() {
        assert!(check("{a:1}", "{a:1.0}").unwrap());
        assert!(!check("{a:1}", "{a:{$gt:'0'}}").unwrap());
        assert!(!check("{a:'x'}", "{a:{$lt:5}}").unwrap());
    }

    #[test]
    fn null_and_missing() {
        assert!(check("{b:1}", "{a:null}").unwrap());
        assert!(check("{a:null}", "{a:null}").unwrap());
        assert!(check("{b:1}", "{a:{$ne:1}}").unwrap());
        assert!(check("{b:1}", "{a:{$exists:false}}").unwrap());
        assert!(!check("{b:1}", "{a:{$exists:true}}").unwrap());
        assert!(check("{b:1}", "{a:{$nin:[1,2]}}").unwrap());
    }

    #[test]
    fn logical_and_elem_match() {
        assert!(check("{a:1,b:2}", "{$or:[{a:2},{b:2}]}").unwrap());
        assert!(!check("{a:1,b:2}", "{$nor:[{a:2},{b:2}]}").unwrap());
        assert!(check("{a:5}", "{a:{$not:{$gt:6}}}").unwrap());
        assert!(check("{s:[70,85]}", "{s:{$elemMatch:{$gt:80,$lt:90}}}").unwrap());
        assert!(!check("{s:[70,95]}", "{s:{$elemMatch:{$gt:80,$lt:90}}}").unwrap());
        assert!(check("{it:[{q:1,k:'a'},{q:3,k:'b'}]}", "{it:{$elemMatch:{q:3,k:'b'}}}").unwrap());
        assert!(!check("{it:[{q:1,k:'b'},{q:3,k:'a'}]}", "{it:{$elemMatch:{q:3,k:'b'}}}").unwrap());
    }

    #[test]
    fn regex() {
        assert!(check("{n:'Johnny'}", "{n:/^jo/i}").unwrap());
        assert!(!check("{n:'Johnny'}", "{n:{$regex:'^jo'}}").unwrap());
        assert!(check("{n:'x'}", "{n:{$regex:'('}}").is_err());
    }

    #[test]
    fn unsupported_operators_error() {
        assert!(check("{a:1}", "{$expr:{$gt:['$a',0]}}").is_err());
        assert!(check("{a:1}", "{a:{$size:1}}").is_err());
        assert!(check("{a:1}", "{a:{$in:1}}").is_err());
    }
}
