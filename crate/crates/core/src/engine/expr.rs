//! Aggregation expression evaluation.

use std::cmp::Ordering;

use crate::mql::{total_cmp, Document, Literal};

type Result<T> = std::result::Result<T, String>;

/// Evaluates `expr` against `root`. `Ok(None)` means the value is missing
/// (as opposed to `null`).
pub fn eval_expr(expr: &Literal, root: &Document) -> Result<Option<Literal>> {
    match expr {
        Literal::String(s) if s.starts_with("$$") => match s.as_str() {
            "$$ROOT" | "$$CURRENT" => Ok(Some(Literal::Document(root.clone()))),
            other => Err(format!("unsupported variable {other}")),
        },
        Literal::String(s) if s.starts_with('$') => Ok(field_value(root, &s[1..])),
        Literal::Document(d) if expr.is_operator_document() => {
            if d.len() != 1 {
                return Err("an expression object must hold exactly one operator".into());
            }
            let (op, arg) = d.iter().next().expect("len 1");
            apply_operator(op, arg, root)
        }
        Literal::Document(d) => {
            let mut out = Document::new();
            for (k, v) in d {
                if let Some(val) = eval_expr(v, root)? {
                    out.insert(k.clone(), val);
                }
            }
            Ok(Some(Literal::Document(out)))
        }
        Literal::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                out.push(eval_expr(item, root)?.unwrap_or(Literal::Null));
            }
            Ok(Some(Literal::Array(out)))
        }
        other => Ok(Some(other.clone())),
    }
}

/// Expression-style path lookup: arrays along the path map to arrays of
/// the values found inside their document elements.
pub(crate) fn field_value(root: &Document, dotted: &str) -> Option<Literal> {
    let segs: Vec<&str> = dotted.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return None;
    }
    let first = root.get(segs[0])?;
    descend(first, &segs[1..])
}

fn descend(value: &Literal, segs: &[&str]) -> Option<Literal> {
    if segs.is_empty() {
        return Some(value.clone());
    }
    match value {
        Literal::Document(d) => descend(d.get(segs[0])?, &segs[1..]),
        Literal::Array(items) => Some(Literal::Array(
            items
                .iter()
                .filter_map(|item| match item {
                    Literal::Document(_) => descend(item, segs),
                    _ => None,
                })
                .collect(),
        )),
        _ => None,
    }
}

fn args(arg: &Literal, root: &Document) -> Result<Vec<Option<Literal>>> {
    match arg {
        Literal::Array(items) => items.iter().map(|e| eval_expr(e, root)).collect(),
        single => Ok(vec![eval_expr(single, root)?]),
    }
}

fn fixed_args<const N: usize>(op: &str, arg: &Literal, root: &Document) -> Result<[Option<Literal>; N]> {
    let values = args(arg, root)?;
    values
        .try_into()
        .map_err(|v: Vec<_>| format!("{op} takes exactly {N} arguments, got {}", v.len()))
}

fn is_nullish(v: &Option<Literal>) -> bool {
    matches!(v, None | Some(Literal::Null))
}

fn apply_operator(op: &str, arg: &Literal, root: &Document) -> Result<Option<Literal>> {
    match op {
        "$literal" => Ok(Some(arg.clone())),
        "$add" => add(&args(arg, root)?),
        "$multiply" => {
            let values = args(arg, root)?;
            if values.iter().any(is_nullish) {
                return Ok(Some(Literal::Null));
            }
            let mut acc = Literal::Int(1);
            for v in values.into_iter().flatten() {
                acc = arith(&acc, &v, op, i64::checked_mul, |a, b| a * b)?;
            }
            Ok(Some(acc))
        }
        "$subtract" => {
            let [a, b] = fixed_args::<2>(op, arg, root)?;
            if is_nullish(&a) || is_nullish(&b) {
                return Ok(Some(Literal::Null));
            }
            let (a, b) = (a.expect("checked"), b.expect("checked"));
            match (&a, &b) {
                (Literal::Date(x), Literal::Date(y)) => Ok(Some(Literal::Int(x - y))),
                (Literal::Date(x), n) if n.is_number() => {
                    Ok(Some(Literal::Date(x - n.as_f64().expect("number").round() as i64)))
                }
                _ => arith(&a, &b, op, i64::checked_sub, |x, y| x - y).map(Some),
            }
        }
        "$divide" => {
            let [a, b] = fixed_args::<2>(op, arg, root)?;
            if is_nullish(&a) || is_nullish(&b) {
                return Ok(Some(Literal::Null));
            }
            let (x, y) = match (
                a.as_ref().and_then(Literal::as_f64),
                b.as_ref().and_then(Literal::as_f64),
            ) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err("$divide only supports numeric types".into()),
            };
            if y == 0.0 {
                return Err("$divide by zero".into());
            }
            Ok(Some(Literal::Float(x / y)))
        }
        "$concat" => {
            let values = args(arg, root)?;
            let mut out = String::new();
            for v in values {
                match v {
                    None | Some(Literal::Null) => return Ok(Some(Literal::Null)),
                    Some(Literal::String(s)) => out.push_str(&s),
                    Some(other) => return Err(format!("$concat only supports strings, not {}", other.kind())),
                }
            }
            Ok(Some(Literal::String(out)))
        }
        "$size" => {
            let [v] = fixed_args::<1>(op, arg, root)?;
            match v {
                Some(Literal::Array(items)) => Ok(Some(Literal::Int(items.len() as i64))),
                _ => Err("$size requires an array".into()),
            }
        }
        "$cond" => {
            let (cond, then, otherwise) = match arg {
                Literal::Array(items) if items.len() == 3 => (&items[0], &items[1], &items[2]),
                Literal::Document(d) => match (d.get("if"), d.get("then"), d.get("else")) {
                    (Some(c), Some(t), Some(e)) if d.len() == 3 => (c, t, e),
                    _ => return Err("$cond needs if, then and else".into()),
                },
                _ => return Err("$cond needs three arguments".into()),
            };
            let truthy = eval_expr(cond, root)?.is_some_and(|v| v.is_truthy());
            eval_expr(if truthy { then } else { otherwise }, root)
        }
        "$eq" | "$ne" | "$gt" | "$gte" | "$lt" | "$lte" => {
            let [a, b] = fixed_args::<2>(op, arg, root)?;
            let ord = total_cmp(&a.unwrap_or(Literal::Null), &b.unwrap_or(Literal::Null));
            let holds = match op {
                "$eq" => ord == Ordering::Equal,
                "$ne" => ord != Ordering::Equal,
                "$gt" => ord == Ordering::Greater,
                "$gte" => ord != Ordering::Less,
                "$lt" => ord == Ordering::Less,
                _ => ord != Ordering::Greater,
            };
            Ok(Some(Literal::Bool(holds)))
        }
        other => Err(format!("unsupported expression operator {other}")),
    }
}

fn add(values: &[Option<Literal>]) -> Result<Option<Literal>> {
    if values.iter().any(is_nullish) {
        return Ok(Some(Literal::Null));
    }
    let mut date: Option<i64> = None;
    let mut acc = Literal::Int(0);
    for v in values.iter().flatten() {
        match v {
            Literal::Date(ms) => {
                if date.replace(*ms).is_some() {
                    return Err("$add only supports one date".into());
                }
            }
            n => acc = arith(&acc, n, "$add", i64::checked_add, |a, b| a + b)?,
        }
    }
    Ok(Some(match date {
        Some(ms) => Literal::Date(ms + acc.as_f64().expect("number").round() as i64),
        None => acc,
    }))
}

fn arith(
    a: &Literal,
    b: &Literal,
    op: &str,
    int_op: fn(i64, i64) -> Option<i64>,
    float_op: fn(f64, f64) -> f64,
) -> Result<Literal> {
    match (a, b) {
        (Literal::Int(x), Literal::Int(y)) => Ok(match int_op(*x, *y) {
            Some(v) => Literal::Int(v),
            None => Literal::Float(float_op(*x as f64, *y as f64)),
        }),
        (x, y) if x.is_number() && y.is_number() => Ok(Literal::Float(float_op(
            x.as_f64().expect("number"),
            y.as_f64().expect("number"),
        ))),
        (x, y) => Err(format!(
            "{op} only supports numeric types, not {} and {}",
            x.kind(),
            y.kind()
        )),
    }
}
