//! Rule-based extraction of referenced field paths and `$match` value
//! predicates from a parsed pipeline.
//!
//! Names a stage synthesizes (`$group` keys, computed `$project`/`$addFields`
//! outputs, `$count` and `$lookup.as` names) are tracked per pipeline scope and
//! references to them in later stages are not reported as schema fields.

use std::collections::{BTreeSet, HashSet};

use super::{Document, FieldPath, Literal, Pipeline, PredicateOp, Stage, ValuePredicate};

/// Result of a single walk over a pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldScan {
    pub fields: BTreeSet<FieldPath>,
    pub predicates: Vec<ValuePredicate>,
}

impl FieldScan {
    pub fn of(p: &Pipeline) -> Self {
        let mut scan = FieldScan::default();
        scan.walk_pipeline(&p.stages);
        scan
    }

    fn walk_pipeline(&mut self, stages: &[Stage]) {
        let mut scope = Scope::default();
        for stage in stages {
            self.walk_stage(stage, &mut scope);
        }
    }

    fn record(&mut self, scope: &Scope, path: FieldPath) -> bool {
        if scope.is_synthetic(&path) {
            return false;
        }
        self.fields.insert(path);
        true
    }

    fn predicate(&mut self, scope: &Scope, path: FieldPath, op: PredicateOp, value: Literal) {
        if scope.is_synthetic(&path) {
            return;
        }
        let pred = ValuePredicate::new(path, op, value);
        if !self.predicates.contains(&pred) {
            self.predicates.push(pred);
        }
    }

    fn walk_stage(&mut self, stage: &Stage, scope: &mut Scope) {
        let body = &stage.body;
        match stage.operator.as_str() {
            "$match" => {
                if let Literal::Document(filter) = body {
                    self.walk_filter(filter, None, scope);
                }
            }
            "$project" => {
                if let Literal::Document(spec) = body {
                    self.walk_projection(spec, None, scope);
                }
            }
            "$addFields" | "$set" => {
                if let Literal::Document(spec) = body {
                    let mut outputs = Vec::new();
                    for (k, v) in spec {
                        self.walk_expr(v, scope);
                        if let Some(path) = FieldPath::parse(k) {
                            outputs.push(path.first().to_string());
                        }
                    }
                    scope.synthetic.extend(outputs);
                }
            }
            "$group" => {
                if let Literal::Document(spec) = body {
                    let mut outputs = Vec::new();
                    for (k, v) in spec {
                        self.walk_expr(v, scope);
                        outputs.push(k.clone());
                    }
                    scope.synthetic.extend(outputs);
                }
            }
            "$sort" => {
                if let Literal::Document(spec) = body {
                    for k in spec.keys() {
                        if let Some(path) = FieldPath::parse(k) {
                            self.record(scope, path);
                        }
                    }
                }
            }
            "$unwind" => match body {
                Literal::String(s) => {
                    if let Some(path) = field_ref(s) {
                        self.record(scope, path);
                    }
                }
                Literal::Document(spec) => {
                    if let Some(path) = spec.get("path").and_then(Literal::as_str).and_then(field_ref) {
                        self.record(scope, path);
                    }
                    if let Some(name) = spec.get("includeArrayIndex").and_then(Literal::as_str) {
                        scope.synthetic.insert(name.to_string());
                    }
                }
                _ => {}
            },
            "$count" => {
                if let Literal::String(name) = body {
                    scope.synthetic.insert(name.clone());
                }
            }
            "$lookup" => {
                if let Literal::Document(spec) = body {
                    self.walk_lookup(spec, scope);
                }
            }
            "$limit" | "$skip" => {}
            _ => self.walk_expr(body, scope),
        }
    }

    fn walk_lookup(&mut self, spec: &Document, scope: &mut Scope) {
        if let Some(path) = spec
            .get("localField")
            .and_then(Literal::as_str)
            .and_then(FieldPath::parse)
        {
            self.record(scope, path);
        }
        // foreign paths live in the joined collection's own namespace
        if let Some(path) = spec
            .get("foreignField")
            .and_then(Literal::as_str)
            .and_then(FieldPath::parse)
        {
            self.fields.insert(path);
        }
        if let Some(Literal::Document(vars)) = spec.get("let") {
            for v in vars.values() {
                self.walk_expr(v, scope);
            }
        }
        if let Some(Literal::Array(stages)) = spec.get("pipeline") {
            let sub: Vec<Stage> = stages
                .iter()
                .filter_map(|s| match s {
                    Literal::Document(d) if d.len() == 1 => {
                        let (op, body) = d.iter().next().expect("len 1");
                        Some(Stage::new(op.clone(), body.clone()))
                    }
                    _ => None,
                })
                .collect();
            self.walk_pipeline(&sub);
        }
        if let Some(name) = spec.get("as").and_then(Literal::as_str).and_then(FieldPath::parse) {
            scope.synthetic.insert(name.first().to_string());
        }
    }

    // -----------------------------------------------------------------------
    // $match filters
    // -----------------------------------------------------------------------

    fn walk_filter(&mut self, filter: &Document, prefix: Option<&FieldPath>, scope: &Scope) {
        for (key, value) in filter {
            if key.starts_with('$') {
                if matches!(key.as_str(), "$and" | "$or" | "$nor") {
                    if let Literal::Array(clauses) = value {
                        for clause in clauses {
                            if let Literal::Document(d) = clause {
                                self.walk_filter(d, prefix, scope);
                            }
                        }
                    }
                }
                // $expr, $text, $where are outside the extraction rule set
                continue;
            }
            let Some(rel) = FieldPath::parse(key) else { continue };
            let path = match prefix {
                Some(p) => p.join(&rel),
                None => rel,
            };
            self.walk_condition(path, value, scope);
        }
    }

    fn walk_condition(&mut self, path: FieldPath, value: &Literal, scope: &Scope) {
        match value {
            Literal::Document(ops) if value.is_operator_document() => {
                if !self.record(scope, path.clone()) {
                    return;
                }
                for (op, arg) in ops {
                    match op.as_str() {
                        "$eq" | "$ne" | "$gt" | "$gte" | "$lt" | "$lte" => {
                            let kind = PredicateOp::from_operator(op).expect("comparison op");
                            self.predicate(scope, path.clone(), kind, arg.clone());
                        }
                        "$in" | "$nin" => {
                            if matches!(arg, Literal::Array(_)) {
                                let kind = PredicateOp::from_operator(op).expect("membership op");
                                self.predicate(scope, path.clone(), kind, arg.clone());
                            }
                        }
                        "$regex" => {
                            self.predicate(scope, path.clone(), PredicateOp::Regex, arg.clone());
                        }
                        "$exists" => {
                            self.predicate(scope, path.clone(), PredicateOp::Exists, Literal::Bool(arg.is_truthy()));
                        }
                        "$not" => {
                            if arg.is_operator_document() {
                                self.walk_condition(path.clone(), arg, scope);
                            }
                        }
                        "$elemMatch" => match arg {
                            Literal::Document(d) if d.is_empty() => {
                                self.predicate(scope, path.clone(), PredicateOp::ElemMatch, arg.clone());
                            }
                            Literal::Document(_) if arg.is_operator_document() => {
                                self.walk_condition(path.clone(), arg, scope);
                            }
                            Literal::Document(d) => self.walk_filter(d, Some(&path), scope),
                            _ => {}
                        },
                        _ => {}
                    }
                }
            }
            // nested documents normalize to dotted paths
            Literal::Document(d) if !d.is_empty() => self.walk_filter(d, Some(&path), scope),
            _ => {
                if self.record(scope, path.clone()) {
                    self.predicate(scope, path, PredicateOp::Eq, value.clone());
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // $project and expressions
    // -----------------------------------------------------------------------

    fn walk_projection(&mut self, spec: &Document, prefix: Option<&FieldPath>, scope: &mut Scope) {
        let mut outputs = Vec::new();
        for (key, value) in spec {
            let Some(rel) = FieldPath::parse(key) else { continue };
            let path = match prefix {
                Some(p) => p.join(&rel),
                None => rel,
            };
            match value {
                Literal::Bool(_) | Literal::Int(_) | Literal::Float(_) => {
                    if !(key == "_id" && prefix.is_none() && !value.is_truthy()) {
                        self.record(scope, path);
                    }
                }
                Literal::Document(d) if !value.is_operator_document() && !d.is_empty() => {
                    self.walk_projection(d, Some(&path), scope);
                }
                _ => {
                    self.walk_expr(value, scope);
                    if prefix.is_none() {
                        outputs.push(path.first().to_string());
                    }
                }
            }
        }
        scope.synthetic.extend(outputs);
    }

    fn walk_expr(&mut self, expr: &Literal, scope: &Scope) {
        match expr {
            Literal::String(s) => {
                if let Some(path) = field_ref(s) {
                    self.record(scope, path);
                }
            }
            Literal::Array(items) => items.iter().for_each(|e| self.walk_expr(e, scope)),
            Literal::Document(d) => {
                for (k, v) in d {
                    if k == "$literal" {
                        continue;
                    }
                    self.walk_expr(v, scope);
                }
            }
            _ => {}
        }
    }
}

/// `"$a.b"` → `a.b`; variables (`"$$x"`) and plain strings are not references.
fn field_ref(s: &str) -> Option<FieldPath> {
    let rest = s.strip_prefix('$')?;
    if rest.starts_with('$') {
        return None;
    }
    FieldPath::parse(rest)
}

#[derive(Default)]
struct Scope {
    synthetic: HashSet<String>,
}

impl Scope {
    fn is_synthetic(&self, path: &FieldPath) -> bool {
        self.synthetic.contains(path.first())
    }
}

/// Every field path referenced by any stage.
pub fn extract_fields(p: &Pipeline) -> BTreeSet<FieldPath> {
    FieldScan::of(p).fields
}

/// All `(path, op, value)` triples from `$match` stages, first-occurrence order, no duplicates.
pub fn extract_value_predicates(p: &Pipeline) -> Vec<ValuePredicate> {
    FieldScan::of(p).predicates
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mql::parse_pipeline_with_collection;

    fn fields(stages: &str) -> Vec<String> {
        let p = parse_pipeline_with_collection(stages, "c").unwrap();
        extract_fields(&p).into_iter().map(|f| f.to_string()).collect()
    }

    fn preds(stages: &str) -> Vec<(String, &'static str, String)> {
        let p = parse_pipeline_with_collection(stages, "c").unwrap();
        extract_value_predicates(&p)
            .into_iter()
            .map(|v| (v.path.to_string(), v.op.name(), v.value.to_string()))
            .collect()
    }

    #[test]
    fn group_aliases_are_excluded() {
        assert_eq!(
            fields(r#"[{$group:{_id:"$dept", n:{$sum:"$salary"}}}]"#),
            ["dept", "salary"]
        );
        assert_eq!(
            fields(r#"[{$group:{_id:"$dept", n:{$sum:1}}},{$sort:{n:-1}},{$match:{n:{$gt:2}}}]"#),
            ["dept"]
        );
        assert!(preds(r#"[{$group:{_id:"$dept", n:{$sum:1}}},{$match:{n:{$gt:2}}}]"#).is_empty());
    }

    #[test]
    fn match_and_sort() {
        assert_eq!(fields(r#"[{$match:{"a.b":1}},{$sort:{c:-1}}]"#), ["a.b", "c"]);
        assert!(fields("[]").is_empty());
    }

    #[test]
    fn nested_documents_normalize_to_dotted_paths() {
        assert_eq!(preds(r#"[{$match:{a:{b:1}}}]"#), preds(r#"[{$match:{"a.b":1}}]"#));
        assert_eq!(fields(r#"[{$match:{a:{b:1}}}]"#), ["a.b"]);
    }

    #[test]
    fn logical_operators() {
        assert_eq!(
            preds(r#"[{$match:{$or:[{a:{$gt:5}},{b:{$in:[1,2]}}]}}]"#),
            [
                ("a".to_string(), "gt", "5".to_string()),
                ("b".to_string(), "in", "[1,2]".to_string())
            ]
        );
        assert_eq!(
            preds(r#"[{$match:{$nor:[{a:{$not:{$lt:1}}}], b:{$exists:1}}}]"#),
            [
                ("a".to_string(), "lt", "1".to_string()),
                ("b".to_string(), "exists", "true".to_string())
            ]
        );
    }

    #[test]
    fn elem_match_descends() {
        assert_eq!(
            preds(r#"[{$match:{items:{$elemMatch:{sku:"x", qty:{$gte:2}}}}}]"#),
            [
                ("items.sku".to_string(), "eq", "\"x\"".to_string()),
                ("items.qty".to_string(), "gte", "2".to_string())
            ]
        );
        assert_eq!(preds(r#"[{$match:{s:{$elemMatch:{$gt:80}}}}]"#)[0].1, "gt");
    }

    #[test]
    fn project_and_expressions() {
        assert_eq!(
            fields(r#"[{$project:{_id:0, name:1, total:{$add:["$a","$b.c"]}, who:"$user.name", x:"$$ROOT"}}]"#),
            ["a", "b.c", "name", "user.name"]
        );
        assert_eq!(fields(r#"[{$project:{address:{city:1}}}]"#), ["address.city"]);
        assert!(preds(r#"[{$project:{a:1}}]"#).is_empty());
    }

    #[test]
    fn lookup_and_subpipeline() {
        let text = r#"[{$lookup:{from:"o", localField:"uid", foreignField:"user_id", as:"orders"}},
                       {$unwind:"$orders"},
                       {$lookup:{from:"p", pipeline:[{$match:{kind:"book"}}], as:"p"}}]"#;
        assert_eq!(fields(text), ["kind", "uid", "user_id"]);
        assert_eq!(preds(text), [("kind".to_string(), "eq", "\"book\"".to_string())]);
    }

    #[test]
    fn unsupported_operators_are_skipped() {
        assert!(fields(r#"[{$match:{$expr:{$gt:["$a","$b"]}}}]"#).is_empty());
        assert_eq!(fields(r#"[{$facet:{x:[{$match:{a:1}}], y:"$b"}}]"#), ["b"]);
    }
}
