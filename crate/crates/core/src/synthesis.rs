//! Execution-guided data synthesis: mixed value sampling, complexity-balanced
//! generation, quality scoring and rejection sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{execute, Database, ExecOutcome};
use crate::generator::{fill_template, parse_response, GenError, GenRequest, Generator, SamplingParams};
use crate::mql::{
    extract_value_predicates, strip_think, think_content, Document, Literal, Pipeline, PredicateOp, SyntaxError,
};
use crate::schema::{infer_schema, render_mschema, Annotations, DEFAULT_MAX_EXAMPLES};
use crate::verdict::score_instance;

const SYNTH_SYSTEM: &str = include_str!("../templates/synth_system.v1.txt");
const SYNTH_USER: &str = include_str!("../templates/synth.v1.txt");

/// Minimum question length, in words, for the consistency indicator.
pub const MIN_QUESTION_WORDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("collection {0:?} is empty")]
    EmptyCollection(String),
    #[error("unknown collection {0:?}")]
    UnknownCollection(String),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("generator unavailable: {0}")]
    Generator(#[from] GenError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingMix {
    pub random_frac: f64,
    pub stratified_frac: f64,
    pub rare_frac: f64,
}

impl Default for SamplingMix {
    fn default() -> Self {
        SamplingMix {
            random_frac: 0.5,
            stratified_frac: 0.3,
            rare_frac: 0.2,
        }
    }
}

impl SamplingMix {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fracs = [self.random_frac, self.stratified_frac, self.rare_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidConfig(format!(
                "sampling fractions {fracs:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(random, stratified, rare)` counts for `budget`; random absorbs the
    /// rounding remainder.
    pub fn split(&self, budget: usize) -> (usize, usize, usize) {
        let floor = |f: f64| (f * budget as f64 + 1e-9).floor() as usize;
        let strat = floor(self.stratified_frac);
        let rare = floor(self.rare_frac).min(budget - strat);
        (budget - strat - rare, strat, rare)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityLevel {
    Simple,
    Moderate,
    Complex,
}

impl ComplexityLevel {
    pub const ALL: [ComplexityLevel; 3] = [
        ComplexityLevel::Simple,
        ComplexityLevel::Moderate,
        ComplexityLevel::Complex,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ComplexityLevel::Simple => "simple",
            ComplexityLevel::Moderate => "moderate",
            ComplexityLevel::Complex => "complex",
        }
    }

    fn hint(self) -> &'static str {
        match self {
            ComplexityLevel::Simple => {
                "Use a single-field lookup: one $match condition, optionally followed by $project."
            }
            ComplexityLevel::Moderate => {
                "Use a $match that combines several conditions with logical or comparison operators."
            }
            ComplexityLevel::Complex => {
                "Use a multi-stage pipeline that processes data with stages such as $unwind, $group, $lookup or $sort."
            }
        }
    }
}

/// Level with the largest deficit `target * (total + 1) - produced`; ties go
/// to the earlier level in Simple < Moderate < Complex.
pub fn pick_complexity(counts: &[usize; 3], targets: &[f64; 3]) -> ComplexityLevel {
    let total: usize = counts.iter().sum();
    let deficit = |l: ComplexityLevel| targets[l.index()] * (total + 1) as f64 - counts[l.index()] as f64;
    let mut best = ComplexityLevel::Simple;
    for level in &ComplexityLevel::ALL[1..] {
        if deficit(*level) > deficit(best) + 1e-12 {
            best = *level;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Weights of the syntax, execution, validity and consistency indicators.
    pub weights: [f64; 4],
    pub threshold: f64,
    pub candidates_min: usize,
    pub candidates_max: usize,
    pub target_count: usize,
    pub complexity_targets: [f64; 3],
    pub mix: SamplingMix,
    pub sample_budget: usize,
    /// Consecutive intents without a kept sample before giving up.
    pub max_stall: usize,
    /// Collections to synthesize for, round-robin. Empty means all.
    pub collections: Vec<String>,
    pub params: SamplingParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            weights: [0.3, 0.3, 0.2, 0.2],
            threshold: 0.8,
            candidates_min: 5,
            candidates_max: 8,
            target_count: 20,
            complexity_targets: [0.3, 0.4, 0.3],
            mix: SamplingMix::default(),
            sample_budget: 10,
            max_stall: 50,
            collections: Vec::new(),
            params: SamplingParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.weights.iter().any(|w| *w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("weights {:?} must be non-negative and sum to 1", self.weights));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold {} outside (0, 1]", self.threshold));
        }
        if self.candidates_min == 0 || self.candidates_min > self.candidates_max {
            return bad(format!(
                "candidate range {}..={}",
                self.candidates_min, self.candidates_max
            ));
        }
        if self.complexity_targets.iter().any(|t| *t < 0.0)
            || (self.complexity_targets.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "complexity targets {:?} must sum to 1",
                self.complexity_targets
            ));
        }
        if self.sample_budget == 0 || self.max_stall == 0 {
            return bad("sample_budget and max_stall must be at least 1".into());
        }
        self.mix.validate()?;
        self.params.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Representative sampling
// ---------------------------------------------------------------------------

fn distinct_indices<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    }
}

fn top_level_keys(docs: &[Document]) -> BTreeSet<&str> {
    docs.iter().flat_map(|d| d.keys().map(String::as_str)).collect()
}

/// Distinct values of the lowest-cardinality string field, with the indices
/// of the documents holding each value.
fn strata(docs: &[Document]) -> Option<Vec<Vec<usize>>> {
    let mut best: Option<BTreeMap<&str, Vec<usize>>> = None;
    for key in top_level_keys(docs) {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if let Some(Literal::String(s)) = d.get(key) {
                groups.entry(s.as_str()).or_default().push(i);
            }
        }
        if !groups.is_empty() && best.as_ref().is_none_or(|b| groups.len() < b.len()) {
            best = Some(groups);
        }
    }
    best.map(|g| g.into_values().collect())
}

/// Holders of the minimum and maximum of each numeric field, in field order.
fn extremes(docs: &[Document]) -> Vec<usize> {
    let mut out = Vec::new();
    for key in top_level_keys(docs) {
        let values: Vec<(usize, f64)> = docs
            .iter()
            .enumerate()
            .filter_map(|(i, d)| match d.get(key) {
                Some(v @ (Literal::Int(_) | Literal::Float(_))) => v.as_f64().map(|x| (i, x)),
                _ => None,
            })
            .collect();
        let Some(&first) = values.first() else { continue };
        let (mut lo, mut hi) = (first, first);
        for &(i, x) in &values[1..] {
            if x < lo.1 {
                lo = (i, x);
            }
            if x > hi.1 {
                hi = (i, x);
            }
        }
        out.push(lo.0);
        out.push(hi.0);
    }
    out
}

/// `budget` documents drawn as uniform, stratified and rare-value samples.
pub fn sample_representative<R: Rng>(
    db: &Database,
    collection: &str,
    budget: usize,
    mix: &SamplingMix,
    rng: &mut R,
) -> Result<Vec<Document>, SynthError> {
    mix.validate()?;
    if budget == 0 {
        return Err(SynthError::InvalidConfig("sample budget must be at least 1".into()));
    }
    let docs = db
        .collection(collection)
        .ok_or_else(|| SynthError::UnknownCollection(collection.to_string()))?;
    if docs.is_empty() {
        return Err(SynthError::EmptyCollection(collection.to_string()));
    }
    let (n_random, n_strat, n_rare) = mix.split(budget);
    let mut picked = distinct_indices(docs.len(), n_random, rng);
    match strata(docs) {
        Some(groups) => {
            for i in 0..n_strat {
                let holders = &groups[i % groups.len()];
                picked.push(holders[rng.gen_range(0..holders.len())]);
            }
        }
        None => picked.extend(distinct_indices(docs.len(), n_strat, rng)),
    }
    let rare = extremes(docs);
    if rare.is_empty() {
        picked.extend(distinct_indices(docs.len(), n_rare, rng));
    } else {
        picked.extend((0..n_rare).map(|i| rare[i % rare.len()]));
    }
    Ok(picked.into_iter().map(|i| docs[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Candidates and scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicators {
    pub syn: bool,
    pub exec: bool,
    pub valid: bool,
    pub consist: bool,
}

impl Indicators {
    pub fn weighted(&self, w: &[f64; 4]) -> f64 {
        [self.syn, self.exec, self.valid, self.consist]
            .iter()
            .zip(w)
            .map(|(on, w)| if *on { *w } else { 0.0 })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCandidate {
    pub reasoning: Option<String>,
    pub nl: String,
    pub mql: Result<Pipeline, SyntaxError>,
    pub indicators: Indicators,
    pub score: f64,
}

/// Splits a raw response into reasoning, question and pipeline. Indicators
/// and score are left unset.
pub fn parse_candidate(raw: &str) -> SynthCandidate {
    let body = strip_think(raw);
    let nl = body
        .lines()
        .map(str::trim)
        .find_map(|l| {
            let head = l.get(..9)?;
            head.eq_ignore_ascii_case("question:")
                .then(|| l[9..].trim().to_string())
        })
        .unwrap_or_default();
    SynthCandidate {
        reasoning: think_content(raw).filter(|r| !r.is_empty()).map(str::to_string),
        nl,
        mql: parse_response(raw),
        indicators: Indicators::default(),
        score: 0.0,
    }
}

/// Text forms under which a literal counts as mentioned.
fn mention_forms(v: &Literal) -> Vec<String> {
    match v {
        Literal::String(s) | Literal::ObjectId(s) => vec![s.clone()],
        Literal::Int(i) => vec![i.to_string()],
        Literal::Float(f) if f.fract() == 0.0 && f.abs() < 1e15 => vec![format!("{}", *f as i64)],
        Literal::Float(f) => vec![f.to_string()],
        Literal::Date(ms) => chrono::DateTime::from_timestamp_millis(*ms)
            .map(|d| vec![d.format("%Y-%m-%d").to_string()])
            .unwrap_or_default(),
        Literal::Array(items) => items.iter().flat_map(mention_forms).collect(),
        Literal::Null | Literal::Bool(_) | Literal::Document(_) => Vec::new(),
    }
}

/// Literal values a consistent question must mention.
pub fn required_mentions(p: &Pipeline) -> Vec<String> {
    let mut out: Vec<String> = extract_value_predicates(p)
        .iter()
        .filter(|vp| !matches!(vp.op, PredicateOp::Regex | PredicateOp::Exists | PredicateOp::ElemMatch))
        .flat_map(|vp| mention_forms(&vp.value))
        .collect();
    out.dedup();
    out
}

pub fn is_consistent(nl: &str, p: &Pipeline) -> bool {
    if nl.split_whitespace().count() < MIN_QUESTION_WORDS {
        return false;
    }
    let lower = nl.to_lowercase();
    required_mentions(p).iter().all(|m| lower.contains(&m.to_lowercase()))
}

pub fn quality_indicators(c: &SynthCandidate, exec: &ExecOutcome) -> Indicators {
    let Ok(p) = &c.mql else {
        return Indicators::default();
    };
    Indicators {
        syn: true,
        exec: exec.is_ok(),
        valid: score_instance(exec, &[], false).ro,
        consist: is_consistent(&c.nl, p),
    }
}

pub fn quality_score(c: &SynthCandidate, exec: &ExecOutcome, cfg: &SynthConfig) -> f64 {
    quality_indicators(c, exec).weighted(&cfg.weights)
}

/// Parses, executes and scores one raw response.
pub fn evaluate_candidate(raw: &str, db: &Database, cfg: &SynthConfig) -> SynthCandidate {
    let mut c = parse_candidate(raw);
    let exec = match &c.mql {
        Ok(p) => execute(p, db),
        Err(e) => ExecOutcome::SyntaxError(e.to_string()),
    };
    c.indicators = quality_indicators(&c, &exec);
    c.score = c.indicators.weighted(&cfg.weights);
    c
}

// ---------------------------------------------------------------------------
// Rejection sampling loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub question: String,
    pub mql_text: String,
    pub collection: String,
    pub complexity: ComplexityLevel,
    pub score: f64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthReport {
    pub records: Vec<SynthRecord>,
    pub intents: usize,
    pub candidates: usize,
    pub kept_before_dedupe: usize,
    pub complexity_counts: [usize; 3],
    /// True when the stall guard stopped the loop before the target.
    pub aborted: bool,
}

fn render_samples(docs: &[Document]) -> String {
    docs.iter()
        .map(|d| Literal::Document(d.clone()).to_json_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// System and user prompt for one intent.
pub fn synth_prompt(schema_text: &str, samples: &str, collection: &str, level: ComplexityLevel) -> (String, String) {
    let user = fill_template(SYNTH_USER.trim_end(), |name| match name {
        "schema" => Some(schema_text.trim_end().to_string()),
        "samples" => Some(samples.to_string()),
        "collection" => Some(collection.to_string()),
        "complexity" => Some(level.label().to_string()),
        "complexity_hint" => Some(level.hint().to_string()),
        _ => None,
    });
    (SYNTH_SYSTEM.trim_end().to_string(), user)
}

struct CollectionContext {
    name: String,
    schema: String,
    samples: String,
}

/// Runs the closed synthesis loop until `target_count` samples are kept or
/// the stall guard trips, then cleans and deduplicates.
pub fn synthesize<R: Rng>(
    db: &Database,
    annotations: &Annotations,
    generator: &dyn Generator,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<SynthReport, SynthError> {
    cfg.validate()?;
    let names: Vec<String> = if cfg.collections.is_empty() {
        db.collection_names().map(str::to_string).collect()
    } else {
        cfg.collections.clone()
    };
    if names.is_empty() {
        return Err(SynthError::InvalidConfig("database has no collections".into()));
    }
    let mut contexts = Vec::new();
    for name in &names {
        let mut tree =
            infer_schema(db, name, DEFAULT_MAX_EXAMPLES).map_err(|_| SynthError::UnknownCollection(name.clone()))?;
        annotations.apply(&mut tree);
        let samples = sample_representative(db, name, cfg.sample_budget, &cfg.mix, rng)?;
        contexts.push(CollectionContext {
            name: name.clone(),
            schema: render_mschema(&tree),
            samples: render_samples(&samples),
        });
    }

    let mut kept = Vec::new();
    let mut counts = [0usize; 3];
    let (mut intents, mut candidates, mut stall) = (0, 0, 0);
    while kept.len() < cfg.target_count && stall < cfg.max_stall {
        let ctx = &contexts[intents % contexts.len()];
        intents += 1;
        let level = pick_complexity(&counts, &cfg.complexity_targets);
        let (system, user) = synth_prompt(&ctx.schema, &ctx.samples, &ctx.name, level);
        let req = GenRequest {
            system,
            user,
            params: cfg.params,
            seed: None,
        };
        let n = rng.gen_range(cfg.candidates_min..=cfg.candidates_max);
        let mut best: Option<SynthCandidate> = None;
        for _ in 0..n {
            let raw = generator.generate(&req.clone().with_seed(rng.gen()))?.text;
            candidates += 1;
            let c = evaluate_candidate(&raw, db, cfg);
            if best.as_ref().is_none_or(|b| c.score > b.score) {
                best = Some(c);
            }
        }
        match best {
            Some(SynthCandidate {
                mql: Ok(p),
                nl,
                reasoning,
                score,
                ..
            }) if score >= cfg.threshold => {
                counts[level.index()] += 1;
                stall = 0;
                kept.push(SynthRecord {
                    id: String::new(),
                    question: nl,
                    mql_text: p.render(),
                    collection: p.collection.clone(),
                    complexity: level,
                    score,
                    source: "synth".into(),
                    reasoning,
                });
            }
            _ => stall += 1,
        }
    }
    let kept_before_dedupe = kept.len();
    let aborted = kept.len() < cfg.target_count;
    Ok(SynthReport {
        records: dedupe_clean(kept),
        intents,
        candidates,
        kept_before_dedupe,
        complexity_counts: counts,
        aborted,
    })
}

fn normalize_question(q: &str) -> String {
    q.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trims questions, drops empty ones and duplicates of an earlier
/// (normalized question, query) pair, then renumbers ids.
pub fn dedupe_clean(records: Vec<SynthRecord>) -> Vec<SynthRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter_map(|mut r| {
            r.question = r.question.trim().to_string();
            let key = (normalize_question(&r.question), r.mql_text.clone());
            (!key.0.is_empty() && seen.insert(key)).then_some(r)
        })
        .enumerate()
        .map(|(i, r)| SynthRecord {
            id: format!("synth-{:05}", i + 1),
            ..r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::test_util::docs;
    use crate::generator::{FnGenerator, GenResponse};
    use crate::mql::parse_pipeline;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn db() -> Database {
        Database::new()
            .load_collection(
                "users",
                docs(
                    "[{_id:1,name:'Ann',city:'Oslo',age:31},{_id:2,name:'Bo',city:'Rome',age:19},\
                       {_id:3,name:'Cy',city:'Oslo',age:45},{_id:4,name:'Di',city:'Rome',age:27}]",
                ),
            )
            .unwrap()
    }

    const GOOD: &str = "<think>filter by city</think>\nQuestion: Which users live in the city of Oslo?\n\
                        ```javascript\ndb.users.aggregate([{$match:{city:'Oslo'}}])\n```";

    #[test]
    fn mix_split() {
        let mix = SamplingMix::default();
        assert_eq!(mix.split(10), (5, 3, 2));
        assert_eq!(mix.split(1), (1, 0, 0));
        assert_eq!(mix.split(7), (4, 2, 1));
        assert!(SamplingMix { rare_frac: 0.3, ..mix }.validate().is_err());
    }

    #[test]
    fn representative_sampling() {
        let db = db();
        let mix = SamplingMix::default();
        let a = sample_representative(&db, "users", 10, &mix, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_representative(&db, "users", 10, &mix, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        // city has the fewest distinct strings: strata alternate Oslo, Rome, Oslo
        let cities: Vec<_> = a[5..8].iter().map(|d| d["city"].as_str().unwrap()).collect();
        assert_eq!(cities, ["Oslo", "Rome", "Oslo"]);
        // extremes of _id then age: _id min and max
        assert_eq!(
            (a[8]["_id"].clone(), a[9]["_id"].clone()),
            (Literal::Int(1), Literal::Int(4))
        );
        let one = sample_representative(&db, "users", 1, &mix, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one.len(), 1);
        let empty = Database::new().load_collection("e", vec![]).unwrap();
        assert!(matches!(
            sample_representative(&empty, "e", 3, &mix, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SynthError::EmptyCollection(_))
        ));
        let bare = Database::new()
            .load_collection("b", docs("[{x:true},{x:false}]"))
            .unwrap();
        assert_eq!(
            sample_representative(&bare, "b", 4, &mix, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn complexity_picks() {
        let t = [0.3, 0.4, 0.3];
        assert_eq!(pick_complexity(&[0, 0, 0], &t), ComplexityLevel::Moderate);
        assert_ne!(pick_complexity(&[5, 0, 0], &t), ComplexityLevel::Simple);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            counts[pick_complexity(&counts, &t).index()] += 1;
        }
        for (c, target) in counts.iter().zip(t) {
            assert!((*c as f64 / 1000.0 - target).abs() <= 0.05);
        }
    }

    #[test]
    fn scores_follow_weights() {
        let db = db();
        let cfg = SynthConfig::default();
        let full = evaluate_candidate(GOOD, &db, &cfg);
        assert_eq!(full.score, 1.0);
        assert_eq!(full.reasoning.as_deref(), Some("filter by city"));
        let syn_only = evaluate_candidate("Question: what?\n```js\ndb.nope.aggregate([])\n```", &db, &cfg);
        assert_eq!(syn_only.score, 0.3);
        let no_consist = evaluate_candidate(
            "Question: Which users live in Rome today?\n```js\ndb.users.aggregate([{$match:{city:'Oslo'}}])\n```",
            &db,
            &cfg,
        );
        assert_eq!(no_consist.score, 0.8);
        assert!(!no_consist.indicators.consist);
        assert_eq!(evaluate_candidate("garbage", &db, &cfg).score, 0.0);
    }

    #[test]
    fn mentions_cover_numbers_and_lists() {
        let p = parse_pipeline("db.u.aggregate([{$match:{age:{$gt:30},city:{$in:['Oslo','Rome']},n:{$regex:'^A'}}}])")
            .unwrap();
        assert_eq!(required_mentions(&p), ["30", "Oslo", "Rome"]);
        assert!(is_consistent("Users older than 30 in oslo or ROME please", &p));
        assert!(!is_consistent("Users older than 30 in oslo", &p));
    }

    #[test]
    fn synthesize_keeps_argmax() {
        let db = db();
        let cfg = SynthConfig {
            target_count: 3,
            ..Default::default()
        };
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let gen = FnGenerator(|_: &GenRequest| {
            let i = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let age = 20 + i;
            Ok(GenResponse::text(match i % 3 {
                0 => "```js\nnot valid\n```".to_string(),
                1 => format!("Question: Users with age at least {age} please?\n```js\ndb.users.aggregate([{{$match:{{age:{{$gte:{age}}}}}}}])\n```"),
                _ => "Question: ok\n```js\ndb.users.aggregate([{$limit:1}])\n```".to_string(),
            }))
        });
        let report = synthesize(
            &db,
            &Annotations::default(),
            &gen,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(report.records.len(), 3);
        assert!(!report.aborted);
        assert!(report.records.iter().all(|r| r.score >= 0.8 && r.source == "synth"));
        assert_eq!(report.records[0].id, "synth-00001");
        assert_eq!(report.records[0].complexity, ComplexityLevel::Moderate);
    }

    #[test]
    fn synthesize_aborts_on_stall() {
        let db = db();
        let cfg = SynthConfig {
            max_stall: 4,
            ..Default::default()
        };
        let gen = FnGenerator(|_: &GenRequest| Ok(GenResponse::text("```js\n{{{\n```")));
        let report = synthesize(
            &db,
            &Annotations::default(),
            &gen,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(report.aborted);
        assert!(report.records.is_empty());
        assert_eq!(report.intents, 4);
        let failing = FnGenerator(|_: &GenRequest| Err(GenError::Unavailable("down".into())));
        assert!(matches!(
            synthesize(
                &db,
                &Annotations::default(),
                &failing,
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(SynthError::Generator(_))
        ));
    }

    #[test]
    fn dedupe_rules() {
        let rec = |q: &str, m: &str| SynthRecord {
            id: String::new(),
            question: q.into(),
            mql_text: m.into(),
            collection: "c".into(),
            complexity: ComplexityLevel::Simple,
            score: 1.0,
            source: "synth".into(),
            reasoning: None,
        };
        let out = dedupe_clean(vec![
            rec("How many users?", "a"),
            rec("how many users", "a"),
            rec("How many users?", "b"),
            rec("   ", "c"),
        ]);
        assert_eq!(out.iter().map(|r| r.mql_text.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(out[1].id, "synth-00002");
    }
}
