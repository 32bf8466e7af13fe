//! The Draft, Refine, Optimize loop with persisted, resumable rounds.
//!
//! Layout under `runs/<name>/`:
//! `config.json`, `state.json`, and per round `round-<t>/` holding
//! `drafts.jsonl`, `pool.jsonl`, `selected.json`, `rewards.jsonl`,
//! `policy.json` (toy) or `batch.jsonl` (export), `metrics.json` and `DONE`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{derive_seed, io_err, load_instances, with_workers, OrchestratorError, RunConfig, RunMode, Workspace};
use crate::curriculum::{bandpass_filter, select_round, write_records, InstanceRecord};
use crate::engine::{execute, resolve_query_path, ExecOutcome};
use crate::evidence::{value_mentions, ContextFlags, EvidenceContext};
use crate::generator::{build_refined_prompt, parse_response, GenRequest, Generator, Prompt};
use crate::gspo::{export_batch, train_linear_policy, ExportGroup, LinearPolicy, ToyPrompt, ToyTrainConfig};
use crate::mql::{extract_fields, values_equal, FieldPath, Literal, Pipeline};
use crate::schema::{prune, SchemaTree};
use crate::verdict::{judge_outcome, RewardRecord, TokenCounter, WhitespaceTokens};

/// Names of the toy policy's candidate features, in weight order.
pub const FEATURE_NAMES: [&str; 3] = ["schema_linked", "values_grounded", "parses"];

const STATE_FILE: &str = "state.json";
const DONE_FILE: &str = "DONE";

// ---------------------------------------------------------------------------
// Candidate features
// ---------------------------------------------------------------------------

/// What a context reveals about the database: the schema fields it shows
/// when linking is on, and the stored values its probes witnessed when
/// grounding is on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextView {
    pub visible_fields: Option<BTreeSet<FieldPath>>,
    pub witnessed_values: Option<Vec<Literal>>,
}

impl ContextView {
    pub fn of(ctx: &EvidenceContext, schema: &SchemaTree) -> ContextView {
        let visible_fields = ctx
            .flags
            .use_link
            .then(|| match (&ctx.linked_fields, ctx.link_fallback) {
                (Some(linked), false) => prune(schema, linked).flatten().into_iter().collect(),
                _ => schema.flatten().into_iter().collect(),
            });
        let witnessed_values = ctx.flags.use_ground.then(|| {
            let mut out = Vec::new();
            for probe in ctx.value_evidence.iter().flat_map(|ev| &ev.verified) {
                if !probe.case_insensitive {
                    out.push(probe.value.clone());
                    continue;
                }
                for doc in &probe.sample {
                    for v in resolve_query_path(doc, &probe.field) {
                        match v {
                            Literal::Array(items) => out.extend(items.iter().cloned()),
                            other => out.push(other.clone()),
                        }
                    }
                }
            }
            out
        });
        ContextView {
            visible_fields,
            witnessed_values,
        }
    }
}

/// `[schema_linked, values_grounded, parses]` for one candidate. The first
/// two are observable only through a context with linking or grounding on.
pub fn candidate_features(candidate: Option<&Pipeline>, view: &ContextView) -> Vec<f64> {
    let Some(p) = candidate else {
        return vec![0.0; FEATURE_NAMES.len()];
    };
    let linked = view
        .visible_fields
        .as_ref()
        .is_some_and(|visible| extract_fields(p).iter().all(|f| visible.contains(f)));
    let grounded = view.witnessed_values.as_ref().is_some_and(|known| {
        value_mentions(p)
            .iter()
            .all(|(_, v)| known.iter().any(|k| values_equal(k, v)))
    });
    let bit = |b: bool| if b { 1.0 } else { 0.0 };
    vec![bit(linked), bit(grounded), 1.0]
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub mode: RunMode,
    pub pool_size: usize,
    pub mid_size: usize,
    pub selected: usize,
    pub rho: f64,
    pub mean_rollout_reward: Option<f64>,
    /// Final GSPO objective value of the round's training (toy mode).
    pub objective: Option<f64>,
    pub heldout_cof_before: f64,
    pub heldout_cof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub completed_rounds: u32,
    pub policy: Option<LinearPolicy>,
    /// Instances not yet consumed by any round.
    pub pool: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct DraftRecord<'a> {
    id: &'a str,
    draft_index: Option<usize>,
    draft_text: &'a str,
    parses: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SelectionRecord<'a> {
    round: u32,
    rho: f64,
    mid_size: usize,
    ids: Vec<&'a str>,
}

#[derive(Debug, Clone, Serialize)]
struct RolloutRecord<'a> {
    prompt_id: &'a str,
    rollout_index: usize,
    candidate_index: Option<usize>,
    response_text: &'a str,
    r_res: f64,
    r_over: f64,
    reward: f64,
}

#[derive(Debug, Clone, Serialize)]
struct PolicyRecord<'a> {
    round: u32,
    feature_names: [&'static str; 3],
    weights: &'a [f64],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), OrchestratorError> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    fs::write(path, text).map_err(io_err(path))
}

fn write_state(run_dir: &Path, state: &RunState) -> Result<(), OrchestratorError> {
    let tmp = run_dir.join("state.json.tmp");
    write_json(&tmp, state)?;
    let dst = run_dir.join(STATE_FILE);
    fs::rename(&tmp, &dst).map_err(io_err(&dst))
}

/// Hash of the config fields that influence artifacts.
fn config_hash(cfg: &RunConfig) -> String {
    let normalized = RunConfig {
        name: String::new(),
        runs_dir: PathBuf::new(),
        iterations: 0,
        workers: 1,
        ..cfg.clone()
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&normalized).expect("serializable"));
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Shared per-instance work
// ---------------------------------------------------------------------------

/// A candidate response with its judgement.
struct Judged {
    text: String,
    parsed: Option<Pipeline>,
    reward: RewardRecord,
    cof: bool,
}

fn judge(inst: &InstanceRecord, text: String, ws: &Workspace, cfg: &RunConfig) -> Result<Judged, OrchestratorError> {
    let reference = ws.reference_rows(inst)?;
    let parsed = parse_response(&text).ok();
    let outcome = match &parsed {
        Some(p) => execute(p, &ws.db),
        None => ExecOutcome::SyntaxError("unparseable response".into()),
    };
    let v = judge_outcome(
        &outcome,
        &reference,
        inst.reference.is_ordered(),
        WhitespaceTokens.count(&text),
        &cfg.reward,
    );
    Ok(Judged {
        text,
        parsed,
        reward: v.reward,
        cof: v.metrics.cof,
    })
}

fn generate(gen: &dyn Generator, prompt: &Prompt, cfg: &RunConfig, seed: u64) -> Result<String, OrchestratorError> {
    Ok(gen
        .generate(&GenRequest::new(prompt, cfg.sampling).with_seed(seed))?
        .text)
}

fn key(seed: u64, phase: &str, round: u32, id: &str) -> u64 {
    derive_seed(seed, &[phase, &round.to_string(), id])
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Everything one round computes for a pool instance before selection.
struct Prepared {
    draft_index: Option<usize>,
    draft_text: String,
    draft_parses: bool,
    /// Candidates the policy chooses among (toy) or rollouts drawn for
    /// difficulty estimation (export).
    candidates: Vec<Judged>,
    features: Vec<Vec<f64>>,
    prompt: Option<Prompt>,
    difficulty: u32,
}

struct Env<'a> {
    ws: &'a Workspace,
    gen: &'a dyn Generator,
    cfg: &'a RunConfig,
    flags: ContextFlags,
}

impl Env<'_> {
    /// The toy policy's fixed candidate set: the first `toy.candidates`
    /// distinct responses to the draft prompt.
    fn toy_candidates(&self, inst: &InstanceRecord) -> Result<Vec<Judged>, OrchestratorError> {
        let prompt = self.ws.draft_prompt(inst)?;
        let mut texts: Vec<String> = Vec::new();
        for j in 0..self.cfg.toy.candidates {
            let text = generate(self.gen, &prompt, self.cfg, j as u64)?;
            if !texts.contains(&text) {
                texts.push(text);
            }
        }
        texts.into_iter().map(|t| judge(inst, t, self.ws, self.cfg)).collect()
    }

    /// Greedy draft, refined context and refined-context features.
    fn toy_refine(
        &self,
        inst: &InstanceRecord,
        policy: &LinearPolicy,
        cands: &[Judged],
    ) -> Result<(usize, Vec<Vec<f64>>), OrchestratorError> {
        let draft_view = ContextView::default();
        let draft_feats: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| candidate_features(c.parsed.as_ref(), &draft_view))
            .collect();
        let di = policy.greedy(&draft_feats);
        let coll = &inst.reference.collection;
        let ctx = self
            .ws
            .context(&inst.question, coll, cands[di].parsed.as_ref(), self.flags)?;
        let view = ContextView::of(&ctx, self.ws.schema(coll)?);
        let feats = cands
            .iter()
            .map(|c| candidate_features(c.parsed.as_ref(), &view))
            .collect();
        Ok((di, feats))
    }

    fn prepare_toy(
        &self,
        inst: &InstanceRecord,
        policy: &LinearPolicy,
        round: u32,
    ) -> Result<Prepared, OrchestratorError> {
        let cands = self.toy_candidates(inst)?;
        let (di, feats) = self.toy_refine(inst, policy, &cands)?;
        let n = self.cfg.curriculum.n_rollouts;
        let mut rng = ChaCha8Rng::seed_from_u64(key(self.cfg.seed, "difficulty", round, &inst.id));
        let correct = policy
            .sample(&feats, n as usize, &mut rng)
            .into_iter()
            .filter(|&s| cands[s].cof)
            .count() as u32;
        Ok(Prepared {
            draft_index: Some(di),
            draft_text: cands[di].text.clone(),
            draft_parses: cands[di].parsed.is_some(),
            candidates: cands,
            features: feats,
            prompt: None,
            difficulty: n - correct,
        })
    }

    /// Greedy correctness of the toy policy on one held-out instance.
    fn toy_heldout(&self, inst: &InstanceRecord, policy: &LinearPolicy) -> Result<bool, OrchestratorError> {
        let cands = self.toy_candidates(inst)?;
        let (_, feats) = self.toy_refine(inst, policy, &cands)?;
        Ok(cands[policy.greedy(&feats)].cof)
    }

    /// Sampled draft and the refined prompt built from it.
    fn export_refine(&self, inst: &InstanceRecord, round: u32) -> Result<(String, bool, Prompt), OrchestratorError> {
        let draft_prompt = self.ws.draft_prompt(inst)?;
        let draft_text = generate(
            self.gen,
            &draft_prompt,
            self.cfg,
            key(self.cfg.seed, "draft", round, &inst.id),
        )?;
        let draft = parse_response(&draft_text).ok();
        let ctx = self
            .ws
            .context(&inst.question, &inst.reference.collection, draft.as_ref(), self.flags)?;
        Ok((draft_text, draft.is_some(), build_refined_prompt(&ctx, &self.ws.prompt)))
    }

    fn prepare_export(&self, inst: &InstanceRecord, round: u32) -> Result<Prepared, OrchestratorError> {
        let (draft_text, draft_parses, prompt) = self.export_refine(inst, round)?;
        let n = self.cfg.curriculum.n_rollouts;
        let rollouts = (0..n)
            .map(|j| {
                let seed = key(self.cfg.seed, &format!("difficulty-{j}"), round, &inst.id);
                judge(inst, generate(self.gen, &prompt, self.cfg, seed)?, self.ws, self.cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let correct = rollouts.iter().filter(|r| r.cof).count() as u32;
        Ok(Prepared {
            draft_index: None,
            draft_text,
            draft_parses,
            candidates: rollouts,
            features: Vec::new(),
            prompt: Some(prompt),
            difficulty: n - correct,
        })
    }

    fn export_heldout(&self, inst: &InstanceRecord, round: u32) -> Result<bool, OrchestratorError> {
        let (_, _, prompt) = self.export_refine(inst, round)?;
        let text = generate(
            self.gen,
            &prompt,
            self.cfg,
            key(self.cfg.seed, "heldout", round, &inst.id),
        )?;
        Ok(judge(inst, text, self.ws, self.cfg)?.cof)
    }

    fn heldout_cof(
        &self,
        heldout: &[InstanceRecord],
        policy: Option<&LinearPolicy>,
        round: u32,
    ) -> Result<f64, OrchestratorError> {
        let hits = heldout
            .par_iter()
            .map(|inst| match policy {
                Some(p) => self.toy_heldout(inst, p),
                None => self.export_heldout(inst, round),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        Ok(mean(hits.iter().map(|h| if *h { 1.0 } else { 0.0 })).unwrap_or(0.0))
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DroOptions {
    /// Stop once this many rounds are complete, leaving the run resumable.
    pub stop_after: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroOutcome {
    pub run_dir: PathBuf,
    pub resumed_from: u32,
    pub completed_rounds: u32,
    pub metrics: Vec<RoundMetrics>,
}

fn round_dir(run_dir: &Path, round: u32) -> PathBuf {
    run_dir.join(format!("round-{round}"))
}

fn open_run(cfg: &RunConfig, train: Vec<InstanceRecord>) -> Result<(PathBuf, RunState), OrchestratorError> {
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let hash = config_hash(cfg);
    let state_path = run_dir.join(STATE_FILE);
    let state = if state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        let state: RunState = serde_json::from_str(&text)
            .map_err(|e| OrchestratorError::Resume(format!("{}: {e}", state_path.display())))?;
        if state.config_hash != hash {
            return Err(OrchestratorError::Resume(format!(
                "{} was created with a different configuration",
                run_dir.display()
            )));
        }
        state
    } else {
        write_json(&run_dir.join("config.json"), cfg)?;
        let state = RunState {
            config_hash: hash,
            completed_rounds: 0,
            policy: (cfg.mode == RunMode::Toy).then(|| LinearPolicy::zeros(FEATURE_NAMES.len())),
            pool: train,
        };
        write_state(&run_dir, &state)?;
        state
    };
    // rounds past the last completed one are partial leftovers of a crash
    let entries = fs::read_dir(&run_dir).map_err(io_err(&run_dir))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let round = name
            .to_str()
            .and_then(|n| n.strip_prefix("round-"))
            .and_then(|n| n.parse::<u32>().ok());
        if round.is_some_and(|r| r > state.completed_rounds) {
            fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok((run_dir, state))
}

/// Runs the remaining rounds of the configured run, resuming from its
/// persisted state when present.
pub fn run_dro(cfg: &RunConfig, gen: &dyn Generator, opts: DroOptions) -> Result<DroOutcome, OrchestratorError> {
    cfg.validate()?;
    let ws = Workspace::load(cfg)?;
    let mut instances = load_instances(&cfg.dataset)?;
    if cfg.heldout >= instances.len() {
        return Err(OrchestratorError::Config(format!(
            "heldout {} leaves no training instances out of {}",
            cfg.heldout,
            instances.len()
        )));
    }
    let heldout = instances.split_off(instances.len() - cfg.heldout);
    for inst in instances.iter().chain(&heldout) {
        ws.reference_rows(inst)?;
    }
    let (run_dir, mut state) = open_run(cfg, instances)?;
    let env = Env {
        ws: &ws,
        gen,
        cfg,
        flags: cfg.optimize_flags()?,
    };
    let resumed_from = state.completed_rounds;
    let mut metrics = Vec::new();
    for round in state.completed_rounds + 1..=cfg.iterations {
        if opts.stop_after.is_some_and(|s| state.completed_rounds >= s) {
            break;
        }
        let m = with_workers(cfg.workers, || run_round(&env, &run_dir, round, &mut state, &heldout))?;
        state.completed_rounds = round;
        write_state(&run_dir, &state)?;
        metrics.push(m);
    }
    Ok(DroOutcome {
        run_dir,
        resumed_from,
        completed_rounds: state.completed_rounds,
        metrics,
    })
}

fn run_round(
    env: &Env<'_>,
    run_dir: &Path,
    round: u32,
    state: &mut RunState,
    heldout: &[InstanceRecord],
) -> Result<RoundMetrics, OrchestratorError> {
    let cfg = env.cfg;
    let dir = round_dir(run_dir, round);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let policy = state.policy.clone();

    // draft, refine and estimate difficulty
    let prepared = state
        .pool
        .par_iter()
        .map(|inst| match &policy {
            Some(p) => env.prepare_toy(inst, p, round),
            None => env.prepare_export(inst, round),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let drafts: Vec<DraftRecord> = state
        .pool
        .iter()
        .zip(&prepared)
        .map(|(inst, p)| DraftRecord {
            id: &inst.id,
            draft_index: p.draft_index,
            draft_text: &p.draft_text,
            parses: p.draft_parses,
        })
        .collect();
    write_jsonl(&dir.join("drafts.jsonl"), &drafts)?;
    let snapshot: Vec<InstanceRecord> = state
        .pool
        .iter()
        .zip(&prepared)
        .map(|(inst, p)| InstanceRecord {
            difficulty: Some(p.difficulty),
            ..inst.clone()
        })
        .collect();
    write_records(&dir.join("pool.jsonl"), &snapshot)?;

    // curriculum selection
    let mid = bandpass_filter(&snapshot, &cfg.curriculum)?;
    let rho = cfg.curriculum.rho(round);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &["select", &round.to_string(), &cfg.curriculum.seed.to_string()],
    ));
    let (selected, remaining) = select_round(snapshot, &mid, rho, round, &mut rng)?;
    write_json(
        &dir.join("selected.json"),
        &SelectionRecord {
            round,
            rho,
            mid_size: mid.len(),
            ids: selected.iter().map(|r| r.id.as_str()).collect(),
        },
    )?;
    let index_of = |id: &str| state.pool.iter().position(|r| r.id == id).expect("selected from pool");

    // optimize
    let heldout_cof_before = env.heldout_cof(heldout, policy.as_ref(), round)?;
    let mut objective = None;
    let mut rollouts: Vec<(String, usize, Option<usize>, String, RewardRecord)> = Vec::new();
    let mut new_policy = policy.clone();
    match &policy {
        Some(p) => {
            let mut prompts = Vec::new();
            for inst in &selected {
                let prep = &prepared[index_of(&inst.id)];
                let mut rng = ChaCha8Rng::seed_from_u64(key(cfg.seed, "rollout", round, &inst.id));
                for (j, c) in p
                    .sample(&prep.features, cfg.group_size, &mut rng)
                    .into_iter()
                    .enumerate()
                {
                    let cand = &prep.candidates[c];
                    rollouts.push((inst.id.clone(), j, Some(c), cand.text.clone(), cand.reward));
                }
                prompts.push(ToyPrompt {
                    features: prep.features.clone(),
                    rewards: prep.candidates.iter().map(|c| c.reward.total).collect(),
                });
            }
            let mut trained = p.clone();
            if !prompts.is_empty() {
                let train = ToyTrainConfig {
                    seed: key(cfg.seed, "train", round, ""),
                    group_size: cfg.group_size,
                    ..cfg.toy.train
                };
                let values = train_linear_policy(&mut trained, &prompts, &train, &cfg.gspo)?;
                objective = values.last().copied();
            }
            write_json(
                &dir.join("policy.json"),
                &PolicyRecord {
                    round,
                    feature_names: FEATURE_NAMES,
                    weights: &trained.weights,
                },
            )?;
            new_policy = Some(trained);
        }
        None => {
            let groups = selected
                .par_iter()
                .map(|inst| {
                    let prompt = prepared[index_of(&inst.id)].prompt.as_ref().expect("export prompt");
                    let responses = (0..cfg.group_size)
                        .map(|j| {
                            let seed = key(cfg.seed, &format!("rollout-{j}"), round, &inst.id);
                            let judged = judge(inst, generate(env.gen, prompt, cfg, seed)?, env.ws, cfg)?;
                            Ok((judged.text, judged.reward))
                        })
                        .collect::<Result<Vec<_>, OrchestratorError>>()?;
                    Ok(ExportGroup {
                        prompt_id: inst.id.clone(),
                        prompt_text: format!("{}\n\n{}", prompt.system, prompt.user),
                        context_flags: env.flags.tag(),
                        responses,
                    })
                })
                .collect::<Result<Vec<_>, OrchestratorError>>()?;
            for g in &groups {
                for (j, (text, reward)) in g.responses.iter().enumerate() {
                    rollouts.push((g.prompt_id.clone(), j, None, text.clone(), *reward));
                }
            }
            export_batch(&dir.join("batch.jsonl"), &groups)?;
        }
    }
    let records: Vec<RolloutRecord> = rollouts
        .iter()
        .map(|(id, j, c, text, r)| RolloutRecord {
            prompt_id: id,
            rollout_index: *j,
            candidate_index: *c,
            response_text: text,
            r_res: r.r_res,
            r_over: r.r_over,
            reward: r.total,
        })
        .collect();
    write_jsonl(&dir.join("rewards.jsonl"), &records)?;

    let heldout_cof = match &new_policy {
        Some(p) => env.heldout_cof(heldout, Some(p), round)?,
        None => heldout_cof_before,
    };
    let metrics = RoundMetrics {
        round,
        mode: cfg.mode,
        pool_size: prepared.len(),
        mid_size: mid.len(),
        selected: selected.len(),
        rho,
        mean_rollout_reward: mean(rollouts.iter().map(|r| r.4.total)),
        objective,
        heldout_cof_before,
        heldout_cof,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    let done = dir.join(DONE_FILE);
    fs::write(&done, "").map_err(io_err(&done))?;

    state.policy = new_policy;
    state.pool = remaining;
    Ok(metrics)
}
