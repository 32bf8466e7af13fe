//! Metric evaluation over an annotated dataset.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, with_workers, OrchestratorError, RunConfig, Workspace};
use crate::curriculum::InstanceRecord;
use crate::engine::{execute, ExecOutcome};
use crate::evidence::ContextFlags;
use crate::generator::{build_refined_prompt, parse_response, GenRequest, Generator};
use crate::verdict::{judge_outcome, MetricRates, MetricRow, RewardRecord, TokenCounter, WhitespaceTokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub flags: String,
    pub response_text: Option<String>,
    /// `ok`, `syntax_error`, `runtime_error`, `generation_error` or
    /// `reference_error`.
    pub status: String,
    pub error_message: Option<String>,
    pub metrics: MetricRow,
    pub reward: Option<RewardRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub se: f64,
    pub neo: f64,
    pub ro: f64,
    pub cof: f64,
    pub ops: f64,
}

impl EvalSummary {
    pub fn of(records: &[EvalRecord]) -> EvalSummary {
        let rows: Vec<MetricRow> = records.iter().map(|r| r.metrics).collect();
        let rates = MetricRates::mean(&rows);
        EvalSummary {
            n: rows.len(),
            se: rates.se,
            neo: rates.neo,
            ro: rates.ro,
            cof: rates.cof,
            ops: rates.ops(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn failed(
    inst: &InstanceRecord,
    flags: ContextFlags,
    status: &str,
    message: String,
    text: Option<String>,
) -> EvalRecord {
    EvalRecord {
        id: inst.id.clone(),
        flags: flags.tag(),
        response_text: text,
        status: status.into(),
        error_message: Some(message),
        metrics: MetricRow::default(),
        reward: None,
    }
}

/// Produces the response for one instance: a replayed prediction, or a draft
/// followed by a refined generation when any refinement flag is on.
fn respond(
    inst: &InstanceRecord,
    ws: &Workspace,
    gen: &dyn Generator,
    cfg: &RunConfig,
    flags: ContextFlags,
) -> Result<String, OrchestratorError> {
    let draft_req = GenRequest::new(&ws.draft_prompt(inst)?, cfg.sampling)
        .with_seed(derive_seed(cfg.seed, &["eval-draft", &inst.id]));
    let draft = gen.generate(&draft_req)?.text;
    if flags == ContextFlags::DRAFT {
        return Ok(draft);
    }
    let parsed = parse_response(&draft).ok();
    let ctx = ws.context(&inst.question, &inst.reference.collection, parsed.as_ref(), flags)?;
    let req = GenRequest::new(&build_refined_prompt(&ctx, &ws.prompt), cfg.sampling)
        .with_seed(derive_seed(cfg.seed, &["eval", &flags.tag(), &inst.id]));
    Ok(gen.generate(&req)?.text)
}

fn eval_one(
    inst: &InstanceRecord,
    ws: &Workspace,
    gen: &dyn Generator,
    cfg: &RunConfig,
    flags: ContextFlags,
    predictions: Option<&HashMap<String, String>>,
) -> EvalRecord {
    let reference = match ws.reference_rows(inst) {
        Ok(rows) => rows,
        Err(e) => return failed(inst, flags, "reference_error", e.to_string(), None),
    };
    let text = match predictions {
        Some(p) => match p.get(&inst.id) {
            Some(t) => t.clone(),
            None => {
                return failed(
                    inst,
                    flags,
                    "generation_error",
                    "no prediction for instance".into(),
                    None,
                )
            }
        },
        None => match respond(inst, ws, gen, cfg, flags) {
            Ok(t) => t,
            Err(e) => return failed(inst, flags, "generation_error", e.to_string(), None),
        },
    };
    let outcome = match parse_response(&text) {
        Ok(p) => execute(&p, &ws.db),
        Err(e) => ExecOutcome::SyntaxError(e.to_string()),
    };
    let verdict = judge_outcome(
        &outcome,
        &reference,
        inst.reference.is_ordered(),
        WhitespaceTokens.count(&text),
        &cfg.reward,
    );
    EvalRecord {
        id: inst.id.clone(),
        flags: flags.tag(),
        response_text: Some(text),
        status: serde_json::to_value(verdict.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        error_message: verdict.error_message,
        metrics: verdict.metrics,
        reward: Some(verdict.reward),
    }
}

/// Scores every instance. Per-instance failures are recorded, never fatal.
pub fn run_eval(
    ws: &Workspace,
    gen: &dyn Generator,
    instances: &[InstanceRecord],
    cfg: &RunConfig,
    flags: ContextFlags,
    predictions: Option<&HashMap<String, String>>,
) -> EvalReport {
    let records: Vec<EvalRecord> = with_workers(cfg.workers, || {
        instances
            .par_iter()
            .map(|inst| eval_one(inst, ws, gen, cfg, flags, predictions))
            .collect()
    });
    let summary = EvalSummary::of(&records);
    EvalReport { records, summary }
}

/// Human-readable aggregate table.
pub fn format_table(s: &EvalSummary) -> String {
    let mut out = format!("{:<8}{:>8}\n", "metric", "value");
    for (name, v) in [
        ("SE", s.se),
        ("NEO", s.neo),
        ("RO", s.ro),
        ("COF", s.cof),
        ("OPS", s.ops),
    ] {
        let _ = writeln!(out, "{name:<8}{v:>8.4}");
    }
    let _ = writeln!(out, "{:<8}{:>8}", "n", s.n);
    out
}
