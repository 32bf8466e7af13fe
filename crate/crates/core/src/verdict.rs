//! Execution-based judging: fuzzy result matching, benchmark metrics, OPS
//! and the reward components.

use serde::{Deserialize, Serialize};

use crate::engine::{execute_text, returned_field_set, Database, ExecOutcome, ExecStatus};
use crate::mql::{values_equal, Document, Literal};

const REL_TOL: f64 = 1e-6;
const ABS_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VerdictError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

// ---------------------------------------------------------------------------
// Fuzzy matching
// ---------------------------------------------------------------------------

fn numbers_close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_TOL || diff <= REL_TOL * a.abs().max(b.abs())
}

/// True when every leaf of `want` is present in `have` with an equal value.
/// Documents may carry extra fields; arrays must match element-wise.
pub fn value_subsumes(have: &Literal, want: &Literal) -> bool {
    match (have, want) {
        (Literal::Document(h), Literal::Document(w)) => row_subsumes(h, w),
        (Literal::Array(h), Literal::Array(w)) => {
            h.len() == w.len() && h.iter().zip(w).all(|(a, b)| value_subsumes(a, b))
        }
        (a, b) if a.is_number() && b.is_number() => {
            numbers_close(a.as_f64().expect("number"), b.as_f64().expect("number"))
        }
        (a, b) => values_equal(a, b),
    }
}

pub fn row_subsumes(have: &Document, want: &Document) -> bool {
    want.iter()
        .all(|(k, w)| have.get(k).is_some_and(|h| value_subsumes(h, w)))
}

/// One-to-one assignment of every reference row to a subsuming result row,
/// order-preserving when `ordered`.
pub fn fuzzy_match(got: &[Document], reference: &[Document], ordered: bool) -> bool {
    if got.len() < reference.len() {
        return false;
    }
    if ordered {
        // earliest-fit assignment is optimal for subsequence embedding
        let mut next = 0;
        for row in got {
            if next < reference.len() && row_subsumes(row, &reference[next]) {
                next += 1;
            }
        }
        return next == reference.len();
    }
    let adj: Vec<Vec<usize>> = reference
        .iter()
        .map(|r| (0..got.len()).filter(|&g| row_subsumes(&got[g], r)).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; got.len()];
    (0..reference.len()).all(|r| {
        let mut seen = vec![false; got.len()];
        augment(r, &adj, &mut owner, &mut seen)
    })
}

fn augment(r: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[r] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].is_none() || augment(owner[g].expect("owned"), adj, owner, seen) {
            owner[g] = Some(r);
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRow {
    pub se: bool,
    pub neo: bool,
    pub ro: bool,
    pub cof: bool,
}

fn has_content(rows: &[Document]) -> bool {
    rows.iter().any(|r| !r.is_empty())
}

fn is_reasonable(value: &Literal) -> bool {
    match value {
        Literal::Null => false,
        Literal::String(s) => !s.is_empty(),
        Literal::Array(items) => items.iter().all(is_reasonable),
        Literal::Document(d) => d.values().all(is_reasonable),
        _ => true,
    }
}

pub fn score_instance(outcome: &ExecOutcome, reference: &[Document], ordered: bool) -> MetricRow {
    let Some(rows) = outcome.rows() else {
        return MetricRow::default();
    };
    let neo = has_content(rows);
    MetricRow {
        se: true,
        neo,
        ro: neo && rows.iter().all(|r| r.values().all(is_reasonable)),
        cof: fuzzy_match(rows, reference, ordered),
    }
}

/// Per-metric rates over a set of instances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRates {
    pub se: f64,
    pub neo: f64,
    pub ro: f64,
    pub cof: f64,
}

impl MetricRates {
    pub fn mean(rows: &[MetricRow]) -> MetricRates {
        if rows.is_empty() {
            return MetricRates::default();
        }
        let n = rows.len() as f64;
        let rate = |f: fn(&MetricRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
        MetricRates {
            se: rate(|r| r.se),
            neo: rate(|r| r.neo),
            ro: rate(|r| r.ro),
            cof: rate(|r| r.cof),
        }
    }

    pub fn ops(&self) -> f64 {
        ops_score(self.se, self.neo, self.ro, self.cof)
    }
}

/// Overall performance score.
pub fn ops_score(se: f64, neo: f64, ro: f64, cof: f64) -> f64 {
    0.6 * cof + 0.2 * se + 0.1 * neo + 0.1 * ro
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub tau_overfield: usize,
    pub lambda: f64,
    pub l_max: usize,
    pub l_cache: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau_overfield: 3,
            lambda: 0.2,
            l_max: 4096,
            l_cache: 512,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), VerdictError> {
        if !(self.l_cache > 0 && self.l_cache < self.l_max) {
            return Err(VerdictError::InvalidConfig(format!(
                "need 0 < l_cache < l_max, got l_cache={} l_max={}",
                self.l_cache, self.l_max
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(VerdictError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_res: f64,
    pub r_over: f64,
    pub total: f64,
}

pub fn result_reward(outcome: &ExecOutcome, reference: &[Document], cfg: &RewardConfig, ordered: bool) -> f64 {
    let Some(rows) = outcome.rows() else {
        return -1.0;
    };
    if !fuzzy_match(rows, reference, ordered) {
        return 0.1;
    }
    let got = returned_field_set(rows).len();
    let want = returned_field_set(reference).len();
    if got > want + cfg.tau_overfield {
        0.25
    } else {
        1.0
    }
}

pub fn overlong_penalty(len_tokens: usize, cfg: &RewardConfig) -> f64 {
    let soft = cfg.l_max - cfg.l_cache;
    if len_tokens <= soft {
        0.0
    } else if len_tokens <= cfg.l_max {
        -cfg.lambda * (len_tokens - soft) as f64 / cfg.l_cache as f64
    } else {
        -cfg.lambda
    }
}

pub fn total_reward(
    outcome: &ExecOutcome,
    reference: &[Document],
    len_tokens: usize,
    cfg: &RewardConfig,
    ordered: bool,
) -> RewardRecord {
    let r_res = result_reward(outcome, reference, cfg, ordered);
    let r_over = overlong_penalty(len_tokens, cfg);
    RewardRecord {
        r_res,
        r_over,
        total: r_res + r_over,
    }
}

/// Measures response length for the overlong penalty.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-delimited units.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Full judgement of one candidate query against a reference result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub status: ExecStatus,
    pub error_message: Option<String>,
    pub metrics: MetricRow,
    pub returned_fields: Vec<String>,
    pub reward: RewardRecord,
}

pub fn judge_outcome(
    outcome: &ExecOutcome,
    reference: &[Document],
    ordered: bool,
    len_tokens: usize,
    cfg: &RewardConfig,
) -> VerdictRecord {
    VerdictRecord {
        status: outcome.status(),
        error_message: outcome.error_message().map(str::to_string),
        metrics: score_instance(outcome, reference, ordered),
        returned_fields: outcome
            .rows()
            .map(|rows| returned_field_set(rows).iter().map(|p| p.to_string()).collect())
            .unwrap_or_default(),
        reward: total_reward(outcome, reference, len_tokens, cfg, ordered),
    }
}

/// Parses, executes and judges candidate query text.
pub fn judge_text(
    text: &str,
    db: &Database,
    reference: &[Document],
    ordered: bool,
    len_tokens: usize,
    cfg: &RewardConfig,
) -> (ExecOutcome, VerdictRecord) {
    let outcome = execute_text(text, db);
    let verdict = judge_outcome(&outcome, reference, ordered, len_tokens, cfg);
    (outcome, verdict)
}
