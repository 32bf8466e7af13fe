//! Stage-by-stage pipeline execution.

use std::cmp::Ordering;
use std::collections::HashMap;

use indexmap::IndexMap;

use super::expr::{eval_expr, field_value};
use super::matcher::{matches_filter, resolve_query_path};
use super::Database;
use crate::mql::{compare_same_class, total_cmp, values_equal, Document, FieldPath, Literal, LiteralKind, Stage};

type Result<T> = std::result::Result<T, String>;

pub(crate) fn run_stages(mut rows: Vec<Document>, stages: &[Stage], db: &Database) -> Result<Vec<Document>> {
    for stage in stages {
        rows = run_stage(rows, stage, db)?;
    }
    Ok(rows)
}

fn run_stage(rows: Vec<Document>, stage: &Stage, db: &Database) -> Result<Vec<Document>> {
    let body = &stage.body;
    match stage.operator.as_str() {
        "$match" => {
            let filter = body_document(stage)?;
            let mut out = Vec::with_capacity(rows.len());
            for row in rows {
                if matches_filter(&row, filter)? {
                    out.push(row);
                }
            }
            Ok(out)
        }
        "$project" => {
            let spec = Projection::parse(body_document(stage)?)?;
            rows.iter().map(|row| spec.apply(row)).collect()
        }
        "$addFields" => add_fields(rows, body_document(stage)?),
        "$group" => group(rows, body_document(stage)?),
        "$unwind" => unwind(rows, body),
        "$sort" => sort(rows, body_document(stage)?),
        "$limit" => {
            let n = count_arg(body, "$limit")?;
            if n < 1 {
                return Err("$limit must be positive".into());
            }
            Ok(rows.into_iter().take(n as usize).collect())
        }
        "$skip" => {
            let n = count_arg(body, "$skip")?;
            if n < 0 {
                return Err("$skip must be non-negative".into());
            }
            Ok(rows.into_iter().skip(n as usize).collect())
        }
        "$count" => {
            let name = match body {
                Literal::String(s) if valid_output_name(s) => s,
                _ => return Err("$count needs a non-empty field name without '$' or '.'".into()),
            };
            if rows.is_empty() {
                return Ok(Vec::new());
            }
            let mut doc = Document::new();
            doc.insert(name.clone(), Literal::Int(rows.len() as i64));
            Ok(vec![doc])
        }
        "$lookup" => lookup(rows, body_document(stage)?, db),
        other => Err(format!("unsupported stage {other}")),
    }
}

fn body_document(stage: &Stage) -> Result<&Document> {
    stage
        .body
        .as_document()
        .ok_or_else(|| format!("{} needs a document", stage.operator))
}

fn count_arg(body: &Literal, op: &str) -> Result<i64> {
    body.as_integer().ok_or_else(|| format!("{op} needs an integer"))
}

fn valid_output_name(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('$') && !s.contains('.')
}

fn field_ref(lit: &Literal, what: &str) -> Result<FieldPath> {
    match lit {
        Literal::String(s) if s.starts_with('$') && !s.starts_with("$$") => {
            FieldPath::parse(&s[1..]).ok_or_else(|| format!("{what}: invalid field path {s:?}"))
        }
        _ => Err(format!("{what} must be a \"$field\" reference")),
    }
}

/// Sets `path` in `doc`, creating (or replacing non-document) intermediates.
pub(crate) fn set_path(doc: &mut Document, segs: &[String], value: Literal) {
    if segs.len() == 1 {
        doc.insert(segs[0].clone(), value);
        return;
    }
    let slot = doc
        .entry(segs[0].clone())
        .or_insert_with(|| Literal::Document(Document::new()));
    if !matches!(slot, Literal::Document(_)) {
        *slot = Literal::Document(Document::new());
    }
    if let Literal::Document(inner) = slot {
        set_path(inner, &segs[1..], value);
    }
}

// ---------------------------------------------------------------------------
// $project
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum ProjNode {
    Include,
    Exclude,
    Compute(Literal),
    Nested(IndexMap<String, ProjNode>),
}

#[derive(Debug)]
struct Projection {
    tree: IndexMap<String, ProjNode>,
    inclusion: bool,
}

impl Projection {
    fn parse(spec: &Document) -> Result<Projection> {
        if spec.is_empty() {
            return Err("$project needs at least one field".into());
        }
        let mut tree = IndexMap::new();
        build_tree(&mut tree, spec)?;
        let (mut inc, mut exc) = (false, false);
        scan_modes(&tree, true, &mut inc, &mut exc);
        if inc && exc {
            return Err("$project cannot mix inclusion and exclusion".into());
        }
        // a lone `_id: 0` is an exclusion projection
        let inclusion = inc;
        Ok(Projection { tree, inclusion })
    }

    fn apply(&self, row: &Document) -> Result<Document> {
        if self.inclusion {
            include(row, &self.tree, row, true)
        } else {
            Ok(exclude(row, &self.tree))
        }
    }
}

fn build_tree(tree: &mut IndexMap<String, ProjNode>, spec: &Document) -> Result<()> {
    for (key, value) in spec {
        if key.starts_with('$') {
            return Err(format!("$project: invalid field name {key:?}"));
        }
        let path = FieldPath::parse(key).ok_or_else(|| format!("$project: invalid field path {key:?}"))?;
        let node = match value {
            Literal::Bool(_) | Literal::Int(_) | Literal::Float(_) => {
                if value.is_truthy() {
                    ProjNode::Include
                } else {
                    ProjNode::Exclude
                }
            }
            Literal::Document(d) if !value.is_operator_document() => {
                if d.is_empty() {
                    return Err("$project: an empty nested specification".into());
                }
                let mut sub = IndexMap::new();
                build_tree(&mut sub, d)?;
                ProjNode::Nested(sub)
            }
            other => ProjNode::Compute(other.clone()),
        };
        insert_node(tree, path.segments(), node, key)?;
    }
    Ok(())
}

fn insert_node(tree: &mut IndexMap<String, ProjNode>, segs: &[String], node: ProjNode, key: &str) -> Result<()> {
    let collision = || format!("$project: path collision at {key:?}");
    if segs.len() == 1 {
        match (tree.get_mut(&segs[0]), node) {
            (None, node) => {
                tree.insert(segs[0].clone(), node);
            }
            (Some(ProjNode::Nested(existing)), ProjNode::Nested(incoming)) => {
                for (k, v) in incoming {
                    insert_node(existing, std::slice::from_ref(&k), v, key)?;
                }
            }
            _ => return Err(collision()),
        }
        return Ok(());
    }
    let entry = tree
        .entry(segs[0].clone())
        .or_insert_with(|| ProjNode::Nested(IndexMap::new()));
    match entry {
        ProjNode::Nested(sub) => insert_node(sub, &segs[1..], node, key),
        _ => Err(collision()),
    }
}

fn scan_modes(tree: &IndexMap<String, ProjNode>, top: bool, inc: &mut bool, exc: &mut bool) {
    for (key, node) in tree {
        match node {
            ProjNode::Include | ProjNode::Compute(_) => *inc = true,
            ProjNode::Exclude if top && key == "_id" => {}
            ProjNode::Exclude => *exc = true,
            ProjNode::Nested(sub) => scan_modes(sub, false, inc, exc),
        }
    }
}

fn has_compute(tree: &IndexMap<String, ProjNode>) -> bool {
    tree.values().any(|n| match n {
        ProjNode::Compute(_) => true,
        ProjNode::Nested(sub) => has_compute(sub),
        _ => false,
    })
}

fn include(doc: &Document, tree: &IndexMap<String, ProjNode>, root: &Document, top: bool) -> Result<Document> {
    let mut out = Document::new();
    if top {
        match tree.get("_id") {
            Some(ProjNode::Exclude) => {}
            Some(ProjNode::Include) | None => {
                if let Some(id) = doc.get("_id") {
                    out.insert("_id".into(), id.clone());
                }
            }
            Some(node) => project_node(doc, "_id", node, root, &mut out)?,
        }
    }
    for (key, node) in tree {
        if top && key == "_id" {
            continue;
        }
        project_node(doc, key, node, root, &mut out)?;
    }
    Ok(out)
}

fn project_node(doc: &Document, key: &str, node: &ProjNode, root: &Document, out: &mut Document) -> Result<()> {
    match node {
        ProjNode::Include => {
            if let Some(v) = doc.get(key) {
                out.insert(key.to_string(), v.clone());
            }
        }
        ProjNode::Exclude => {}
        ProjNode::Compute(e) => {
            if let Some(v) = eval_expr(e, root)? {
                out.insert(key.to_string(), v);
            }
        }
        ProjNode::Nested(sub) => {
            let projected = match doc.get(key) {
                Some(Literal::Document(d)) => Some(Literal::Document(include(d, sub, root, false)?)),
                Some(Literal::Array(items)) => {
                    let mut mapped = Vec::new();
                    for item in items {
                        if let Literal::Document(d) = item {
                            mapped.push(Literal::Document(include(d, sub, root, false)?));
                        }
                    }
                    Some(Literal::Array(mapped))
                }
                _ if has_compute(sub) => Some(Literal::Document(include(&Document::new(), sub, root, false)?)),
                _ => None,
            };
            if let Some(v) = projected {
                out.insert(key.to_string(), v);
            }
        }
    }
    Ok(())
}

fn exclude(doc: &Document, tree: &IndexMap<String, ProjNode>) -> Document {
    let mut out = Document::new();
    for (key, value) in doc {
        match tree.get(key) {
            Some(ProjNode::Exclude) => {}
            Some(ProjNode::Nested(sub)) => {
                let v = match value {
                    Literal::Document(d) => Literal::Document(exclude(d, sub)),
                    Literal::Array(items) => Literal::Array(
                        items
                            .iter()
                            .map(|item| match item {
                                Literal::Document(d) => Literal::Document(exclude(d, sub)),
                                other => other.clone(),
                            })
                            .collect(),
                    ),
                    other => other.clone(),
                };
                out.insert(key.clone(), v);
            }
            _ => {
                out.insert(key.clone(), value.clone());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// $addFields
// ---------------------------------------------------------------------------

fn add_fields(rows: Vec<Document>, spec: &Document) -> Result<Vec<Document>> {
    let mut targets = Vec::with_capacity(spec.len());
    for (key, expr) in spec {
        let path = FieldPath::parse(key)
            .filter(|_| !key.starts_with('$'))
            .ok_or_else(|| format!("$addFields: invalid field path {key:?}"))?;
        targets.push((path, expr));
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut values = Vec::with_capacity(targets.len());
        for (path, expr) in &targets {
            values.push((path, eval_expr(expr, &row)?));
        }
        let mut next = row;
        for (path, value) in values {
            if let Some(v) = value {
                set_path(&mut next, path.segments(), v);
            }
        }
        out.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// $group
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum AccKind {
    Sum,
    Avg,
    Min,
    Max,
    Count,
    Push,
    AddToSet,
    First,
    Last,
}

impl AccKind {
    fn from_operator(op: &str) -> Option<AccKind> {
        Some(match op {
            "$sum" => AccKind::Sum,
            "$avg" => AccKind::Avg,
            "$min" => AccKind::Min,
            "$max" => AccKind::Max,
            "$count" => AccKind::Count,
            "$push" => AccKind::Push,
            "$addToSet" => AccKind::AddToSet,
            "$first" => AccKind::First,
            "$last" => AccKind::Last,
            _ => return None,
        })
    }
}

/// Canonical grouping key: integral floats collapse onto ints so that
/// numerically equal keys share a group.
fn group_key(value: &Literal) -> String {
    fn normalize(v: &Literal) -> Literal {
        match v {
            Literal::Float(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Literal::Int(*f as i64),
            Literal::Array(items) => Literal::Array(items.iter().map(normalize).collect()),
            Literal::Document(d) => Literal::Document(d.iter().map(|(k, v)| (k.clone(), normalize(v))).collect()),
            other => other.clone(),
        }
    }
    normalize(value).to_json_string()
}

fn group(rows: Vec<Document>, spec: &Document) -> Result<Vec<Document>> {
    let id_expr = spec.get("_id").ok_or("$group needs an _id")?;
    let mut accs = Vec::new();
    for (name, acc) in spec {
        if name == "_id" {
            continue;
        }
        if !valid_output_name(name) {
            return Err(format!("$group: invalid output field {name:?}"));
        }
        let (op, arg) = match acc {
            Literal::Document(d) if d.len() == 1 => d.iter().next().expect("len 1"),
            _ => return Err(format!("$group: {name:?} must be a single accumulator")),
        };
        let kind = AccKind::from_operator(op).ok_or_else(|| format!("unsupported accumulator {op}"))?;
        if matches!(kind, AccKind::Count) && !matches!(arg, Literal::Document(d) if d.is_empty()) {
            return Err("$count accumulator takes {}".into());
        }
        accs.push((name.clone(), kind, arg));
    }

    let mut order: Vec<(Literal, Vec<Vec<Option<Literal>>>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in &rows {
        let key = eval_expr(id_expr, row)?.unwrap_or(Literal::Null);
        let slot = *index.entry(group_key(&key)).or_insert_with(|| {
            order.push((key, vec![Vec::new(); accs.len()]));
            order.len() - 1
        });
        for (i, (_, kind, arg)) in accs.iter().enumerate() {
            let v = match kind {
                AccKind::Count => Some(Literal::Int(1)),
                _ => eval_expr(arg, row)?,
            };
            order[slot].1[i].push(v);
        }
    }

    let mut out = Vec::with_capacity(order.len());
    for (key, inputs) in order {
        let mut doc = Document::new();
        doc.insert("_id".into(), key);
        for ((name, kind, _), values) in accs.iter().zip(inputs) {
            doc.insert(name.clone(), accumulate(*kind, values));
        }
        out.push(doc);
    }
    Ok(out)
}

fn accumulate(kind: AccKind, values: Vec<Option<Literal>>) -> Literal {
    let present = || values.iter().flatten().filter(|v| !matches!(v, Literal::Null));
    match kind {
        AccKind::Sum | AccKind::Count => numeric_sum(present().filter(|v| v.is_number())),
        AccKind::Avg => {
            let nums: Vec<f64> = present().filter_map(Literal::as_f64).collect();
            if nums.is_empty() {
                Literal::Null
            } else {
                Literal::Float(nums.iter().sum::<f64>() / nums.len() as f64)
            }
        }
        AccKind::Min => present()
            .min_by(|a, b| total_cmp(a, b))
            .cloned()
            .unwrap_or(Literal::Null),
        AccKind::Max => present()
            .fold(None::<&Literal>, |best, v| match best {
                Some(b) if total_cmp(v, b) != Ordering::Greater => Some(b),
                _ => Some(v),
            })
            .cloned()
            .unwrap_or(Literal::Null),
        AccKind::Push => Literal::Array(values.into_iter().flatten().collect()),
        AccKind::AddToSet => {
            let mut set: Vec<Literal> = Vec::new();
            for v in values.into_iter().flatten() {
                if !set.iter().any(|s| values_equal(s, &v)) {
                    set.push(v);
                }
            }
            Literal::Array(set)
        }
        AccKind::First => values.into_iter().next().flatten().unwrap_or(Literal::Null),
        AccKind::Last => values.into_iter().last().flatten().unwrap_or(Literal::Null),
    }
}

fn numeric_sum<'a>(values: impl Iterator<Item = &'a Literal>) -> Literal {
    let mut int_acc: Option<i64> = Some(0);
    let mut float_acc = 0.0;
    for v in values {
        float_acc += v.as_f64().expect("numeric");
        int_acc = match (int_acc, v) {
            (Some(acc), Literal::Int(i)) => acc.checked_add(*i),
            _ => None,
        };
    }
    match int_acc {
        Some(i) => Literal::Int(i),
        None => Literal::Float(float_acc),
    }
}

// ---------------------------------------------------------------------------
// $unwind
// ---------------------------------------------------------------------------

fn unwind(rows: Vec<Document>, body: &Literal) -> Result<Vec<Document>> {
    let (path, preserve, index_field) = match body {
        Literal::String(_) => (field_ref(body, "$unwind")?, false, None),
        Literal::Document(d) => {
            for key in d.keys() {
                if !matches!(
                    key.as_str(),
                    "path" | "preserveNullAndEmptyArrays" | "includeArrayIndex"
                ) {
                    return Err(format!("$unwind: unknown option {key:?}"));
                }
            }
            let path = field_ref(d.get("path").ok_or("$unwind needs a path")?, "$unwind path")?;
            let preserve = match d.get("preserveNullAndEmptyArrays") {
                None => false,
                Some(Literal::Bool(b)) => *b,
                Some(_) => return Err("preserveNullAndEmptyArrays must be a bool".into()),
            };
            let index_field = match d.get("includeArrayIndex") {
                None => None,
                Some(Literal::String(s)) if valid_output_name(s) => Some(s.clone()),
                Some(_) => return Err("includeArrayIndex must be a plain field name".into()),
            };
            (path, preserve, index_field)
        }
        _ => return Err("$unwind needs a path string or document".into()),
    };

    let mut out = Vec::new();
    for row in rows {
        let value = lookup_plain(&row, path.segments()).cloned();
        let with_index = |mut doc: Document, idx: Literal| {
            if let Some(name) = &index_field {
                doc.insert(name.clone(), idx);
            }
            doc
        };
        match value {
            Some(Literal::Array(items)) if !items.is_empty() => {
                for (i, item) in items.into_iter().enumerate() {
                    let mut doc = row.clone();
                    set_path(&mut doc, path.segments(), item);
                    out.push(with_index(doc, Literal::Int(i as i64)));
                }
            }
            Some(Literal::Array(_)) | Some(Literal::Null) | None => {
                if preserve {
                    let mut doc = row.clone();
                    if matches!(value, Some(Literal::Array(_))) {
                        remove_path(&mut doc, path.segments());
                    }
                    out.push(with_index(doc, Literal::Null));
                }
            }
            Some(_) => out.push(with_index(row, Literal::Null)),
        }
    }
    Ok(out)
}

/// Path lookup through nested documents only (no array descent).
fn lookup_plain<'a>(doc: &'a Document, segs: &[String]) -> Option<&'a Literal> {
    let v = doc.get(&segs[0])?;
    if segs.len() == 1 {
        return Some(v);
    }
    match v {
        Literal::Document(d) => lookup_plain(d, &segs[1..]),
        _ => None,
    }
}

fn remove_path(doc: &mut Document, segs: &[String]) {
    if segs.len() == 1 {
        doc.shift_remove(&segs[0]);
    } else if let Some(Literal::Document(inner)) = doc.get_mut(&segs[0]) {
        remove_path(inner, &segs[1..]);
    }
}

// ---------------------------------------------------------------------------
// $sort
// ---------------------------------------------------------------------------

fn sort(rows: Vec<Document>, spec: &Document) -> Result<Vec<Document>> {
    if spec.is_empty() {
        return Err("$sort needs at least one key".into());
    }
    let mut keys = Vec::with_capacity(spec.len());
    for (key, dir) in spec {
        let path = FieldPath::parse(key)
            .filter(|_| !key.starts_with('$'))
            .ok_or_else(|| format!("$sort: invalid field path {key:?}"))?;
        let ascending = match dir.as_f64() {
            Some(1.0) => true,
            Some(-1.0) => false,
            _ => return Err(format!("$sort direction for {key:?} must be 1 or -1")),
        };
        keys.push((path, ascending));
    }

    let mut table: Vec<(Vec<Option<Literal>>, Document)> = Vec::with_capacity(rows.len());
    for row in rows {
        let mut values = Vec::with_capacity(keys.len());
        for (path, _) in &keys {
            let v = field_value(&row, &path.to_string()).filter(|v| !matches!(v, Literal::Null));
            if let Some(v @ (Literal::Array(_) | Literal::Document(_))) = &v {
                return Err(format!("$sort on {path}: cannot order {} values", v.kind()));
            }
            values.push(v);
        }
        table.push((values, row));
    }
    for (i, (path, _)) in keys.iter().enumerate() {
        let mut seen: Option<LiteralKind> = None;
        for (values, _) in &table {
            let Some(v) = &values[i] else { continue };
            let class = sort_class(v);
            match seen {
                None => seen = Some(class),
                Some(c) if c == class => {}
                Some(c) => {
                    return Err(format!(
                        "$sort on {path}: cannot order mixed kinds {} and {}",
                        c.label(),
                        class.label()
                    ))
                }
            }
        }
    }

    table.sort_by(|(a, _), (b, _)| {
        for (i, (_, ascending)) in keys.iter().enumerate() {
            let ord = match (&a[i], &b[i]) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(x), Some(y)) => compare_same_class(x, y).unwrap_or(Ordering::Equal),
            };
            let ord = if *ascending { ord } else { ord.reverse() };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    });
    Ok(table.into_iter().map(|(_, row)| row).collect())
}

fn sort_class(v: &Literal) -> LiteralKind {
    match v.kind() {
        LiteralKind::Float => LiteralKind::Int,
        other => other,
    }
}

// ---------------------------------------------------------------------------
// $lookup
// ---------------------------------------------------------------------------

fn lookup(rows: Vec<Document>, spec: &Document, db: &Database) -> Result<Vec<Document>> {
    for key in spec.keys() {
        if !matches!(
            key.as_str(),
            "from" | "localField" | "foreignField" | "as" | "pipeline" | "let"
        ) {
            return Err(format!("$lookup: unknown option {key:?}"));
        }
    }
    let from = match spec.get("from") {
        Some(Literal::String(s)) => s,
        _ => return Err("$lookup needs a string 'from'".into()),
    };
    let foreign = db
        .collection(from)
        .ok_or_else(|| format!("$lookup: unknown collection {from:?}"))?;
    let as_path = match spec.get("as") {
        Some(Literal::String(s)) => FieldPath::parse(s)
            .filter(|_| !s.starts_with('$'))
            .ok_or_else(|| format!("$lookup: invalid 'as' path {s:?}"))?,
        _ => return Err("$lookup needs a string 'as'".into()),
    };
    if let Some(l) = spec.get("let") {
        if !matches!(l, Literal::Document(d) if d.is_empty()) {
            return Err("$lookup: 'let' variables are not supported".into());
        }
    }
    let plain_path = |key: &str| -> Result<Option<FieldPath>> {
        match spec.get(key) {
            None => Ok(None),
            Some(Literal::String(s)) => FieldPath::parse(s)
                .map(Some)
                .ok_or_else(|| format!("$lookup: invalid {key} {s:?}")),
            Some(_) => Err(format!("$lookup: {key} must be a string")),
        }
    };
    let local = plain_path("localField")?;
    let foreign_field = plain_path("foreignField")?;

    match (local, foreign_field, spec.get("pipeline")) {
        (Some(local), Some(foreign_field), None) => {
            let mut out = Vec::with_capacity(rows.len());
            for mut row in rows {
                let mut wanted: Vec<Literal> = expand_values(&resolve_query_path(&row, &local));
                if wanted.is_empty() {
                    wanted.push(Literal::Null);
                }
                let joined: Vec<Literal> = foreign
                    .iter()
                    .filter(|f| {
                        let have = expand_values(&resolve_query_path(f, &foreign_field));
                        wanted.iter().any(|w| {
                            (matches!(w, Literal::Null) && have.is_empty()) || have.iter().any(|h| values_equal(h, w))
                        })
                    })
                    .map(|f| Literal::Document(f.clone()))
                    .collect();
                set_path(&mut row, as_path.segments(), Literal::Array(joined));
                out.push(row);
            }
            Ok(out)
        }
        (None, None, Some(Literal::Array(sub))) => {
            let mut stages = Vec::with_capacity(sub.len());
            for s in sub {
                let d = s
                    .as_document()
                    .filter(|d| d.len() == 1)
                    .ok_or("$lookup pipeline entries must be single-stage documents")?;
                let (op, body) = d.iter().next().expect("len 1");
                stages.push(Stage::new(op, body.clone()));
            }
            let joined: Vec<Literal> = run_stages(foreign.to_vec(), &stages, db)?
                .into_iter()
                .map(Literal::Document)
                .collect();
            Ok(rows
                .into_iter()
                .map(|mut row| {
                    set_path(&mut row, as_path.segments(), Literal::Array(joined.clone()));
                    row
                })
                .collect())
        }
        _ => Err("$lookup needs either localField/foreignField or a pipeline".into()),
    }
}

fn expand_values(cands: &[&Literal]) -> Vec<Literal> {
    let mut out = Vec::new();
    for c in cands {
        match c {
            Literal::Array(items) => out.extend(items.iter().cloned()),
            other => out.push((*other).clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::test_util::docs;
    use crate::engine::{execute, ExecOutcome};
    use crate::mql::parse_pipeline;

    fn db() -> Database {
        Database::new()
            .load_collection(
                "emp",
                docs(
                    "[{_id:1,name:'ann',dept:'eng',pay:100,tags:['a','b'],addr:{city:'Tokyo',zip:1}},\
                      {_id:2,name:'bob',dept:'ops',pay:80.5,tags:[],addr:{city:'Oslo',zip:2}},\
                      {_id:3,name:'cid',dept:'eng',pay:120,addr:{city:'Tokyo',zip:3}}]",
                ),
            )
            .unwrap()
            .load_collection("dept", docs("[{code:'eng',floor:3},{code:'ops',floor:1}]"))
            .unwrap()
    }

    fn run(q: &str) -> std::result::Result<Vec<Document>, String> {
        match execute(&parse_pipeline(q).unwrap(), &db()) {
            ExecOutcome::Ok(rows) => Ok(rows),
            other => Err(other.error_message().unwrap().to_string()),
        }
    }

    fn ok(q: &str, expected: &str) {
        assert_eq!(run(q).unwrap(), docs(expected), "{q}");
    }

    #[test]
    fn project_modes() {
        ok(
            "db.emp.aggregate([{$limit:1},{$project:{name:1,'addr.city':1}}])",
            "[{_id:1,name:'ann',addr:{city:'Tokyo'}}]",
        );
        ok(
            "db.emp.aggregate([{$limit:1},{$project:{_id:0,n:'$name',z:{$add:['$addr.zip',1]}}}])",
            "[{n:'ann',z:2}]",
        );
        ok(
            "db.emp.aggregate([{$limit:1},{$project:{tags:0,addr:0,pay:0}}])",
            "[{_id:1,name:'ann',dept:'eng'}]",
        );
        ok(
            "db.emp.aggregate([{$limit:1},{$project:{_id:0}},{$project:{name:1}}])",
            "[{name:'ann'}]",
        );
        assert!(run("db.emp.aggregate([{$project:{name:1,pay:0}}])").is_err());
        assert!(run("db.emp.aggregate([{$project:{}}])").is_err());
    }

    #[test]
    fn group_accumulators() {
        ok(
            "db.emp.aggregate([{$group:{_id:'$dept',n:{$sum:1},tot:{$sum:'$pay'},avg:{$avg:'$pay'},hi:{$max:'$pay'},who:{$push:'$name'},c:{$count:{}}}}])",
            "[{_id:'eng',n:2,tot:220,avg:110.0,hi:120,who:['ann','cid'],c:2},{_id:'ops',n:1,tot:80.5,avg:80.5,hi:80.5,who:['bob'],c:1}]",
        );
        ok(
            "db.emp.aggregate([{$group:{_id:'$addr.city',f:{$first:'$name'},l:{$last:'$name'},s:{$addToSet:'$dept'},lo:{$min:'$pay'}}}])",
            "[{_id:'Tokyo',f:'ann',l:'cid',s:['eng'],lo:100},{_id:'Oslo',f:'bob',l:'bob',s:['ops'],lo:80.5}]",
        );
        ok(
            "db.emp.aggregate([{$group:{_id:null,m:{$max:'$nope'}}}])",
            "[{_id:null,m:null}]",
        );
        assert!(run("db.emp.aggregate([{$group:{n:{$sum:1}}}])").is_err());
        assert!(run("db.emp.aggregate([{$group:{_id:1,n:{$median:1}}}])").is_err());
    }

    #[test]
    fn unwind_options() {
        ok(
            "db.emp.aggregate([{$unwind:'$tags'},{$project:{_id:1,tags:1}}])",
            "[{_id:1,tags:'a'},{_id:1,tags:'b'}]",
        );
        ok(
            "db.emp.aggregate([{$unwind:{path:'$tags',preserveNullAndEmptyArrays:true,includeArrayIndex:'i'}},{$project:{_id:1,i:1}}])",
            "[{_id:1,i:0},{_id:1,i:1},{_id:2,i:null},{_id:3,i:null}]",
        );
    }

    #[test]
    fn sort_is_stable_and_typed() {
        ok(
            "db.emp.aggregate([{$sort:{dept:1}},{$project:{_id:1}}])",
            "[{_id:1},{_id:3},{_id:2}]",
        );
        ok(
            "db.emp.aggregate([{$sort:{pay:-1}},{$project:{_id:1}}])",
            "[{_id:3},{_id:1},{_id:2}]",
        );
        ok(
            "db.emp.aggregate([{$sort:{'addr.zip':-1,nope:1}},{$limit:1},{$project:{_id:1}}])",
            "[{_id:3}]",
        );
    }

    #[test]
    fn sort_rejects_arrays_and_mixed_kinds() {
        let mixed = Database::new().load_collection("m", docs("[{v:1},{v:'x'}]")).unwrap();
        let out = execute(&parse_pipeline("db.m.aggregate([{$sort:{v:1}}])").unwrap(), &mixed);
        assert!(!out.is_ok());
        let arrays = Database::new().load_collection("m", docs("[{v:[1]},{v:2}]")).unwrap();
        let out = execute(&parse_pipeline("db.m.aggregate([{$sort:{v:1}}])").unwrap(), &arrays);
        assert!(!out.is_ok());
    }

    #[test]
    fn lookup_and_add_fields() {
        ok(
            "db.emp.aggregate([{$match:{_id:2}},{$lookup:{from:'dept',localField:'dept',foreignField:'code',as:'d'}},{$project:{_id:0,'d.floor':1}}])",
            "[{d:[{floor:1}]}]",
        );
        ok(
            "db.emp.aggregate([{$match:{_id:1}},{$addFields:{'addr.zip':{$multiply:['$pay',2]},k:'$name'}},{$project:{_id:0,addr:1,k:1}}])",
            "[{addr:{city:'Tokyo',zip:200},k:'ann'}]",
        );
        assert!(run("db.emp.aggregate([{$lookup:{from:'ghost',localField:'a',foreignField:'b',as:'x'}}])").is_err());
    }

    #[test]
    fn row_controls_and_errors() {
        ok("db.emp.aggregate([{$skip:2},{$project:{_id:1}}])", "[{_id:3}]");
        ok("db.emp.aggregate([{$match:{pay:{$gt:1000}}},{$count:'n'}])", "[]");
        assert!(run("db.emp.aggregate([{$limit:0}])").is_err());
        assert!(run("db.emp.aggregate([{$facet:{}}])").is_err());
        assert!(run("db.emp.aggregate([{$count:'a.b'}])").is_err());
        assert!(run("db.emp.aggregate([{$project:{r:{$divide:['$pay',0]}}}])").is_err());
    }
}
