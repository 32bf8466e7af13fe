//! Sequence-level policy optimization: importance ratios, group-relative
//! advantages, the clipped objective, a toy softmax trainer and batch export
//! for external trainers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::verdict::RewardRecord;

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const EXPORT_SCHEMA: &str = "drokit.gspo_batch";
pub const EXPORT_VERSION: u32 = 1;
const STD_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GspoError {
    #[error("trajectory has {new} new and {old} old log-probs")]
    LengthMismatch { new: usize, old: usize },
    #[error("trajectory has no tokens")]
    EmptyTrajectory,
    #[error("log-probability {0} is positive or not finite")]
    InvalidLogProb(f64),
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("no rollout groups")]
    NoGroups,
    #[error("all candidate rewards are equal")]
    DegenerateRewards,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

// ---------------------------------------------------------------------------
// Core math
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub token_logps_new: Vec<f64>,
    pub token_logps_old: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.token_logps_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logps_new.is_empty()
    }

    fn validate(&self) -> Result<(), GspoError> {
        let (new, old) = (self.token_logps_new.len(), self.token_logps_old.len());
        if new != old {
            return Err(GspoError::LengthMismatch { new, old });
        }
        if new == 0 {
            return Err(GspoError::EmptyTrajectory);
        }
        for lp in self.token_logps_new.iter().chain(&self.token_logps_old) {
            if !(lp.is_finite() && *lp <= 0.0) {
                return Err(GspoError::InvalidLogProb(*lp));
            }
        }
        Ok(())
    }

    /// Mean per-token log ratio between the new and old policies.
    pub fn mean_log_ratio(&self) -> Result<f64, GspoError> {
        self.validate()?;
        let sum: f64 = self
            .token_logps_new
            .iter()
            .zip(&self.token_logps_old)
            .map(|(n, o)| n - o)
            .sum();
        Ok(sum / self.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GspoConfig {
    /// Half-width of the sequence-ratio clip range.
    pub clip_epsilon: f64,
}

impl Default for GspoConfig {
    fn default() -> Self {
        GspoConfig { clip_epsilon: 0.2 }
    }
}

/// Geometric mean of the token-wise likelihood ratios.
pub fn seq_importance_ratio(t: &Trajectory) -> Result<f64, GspoError> {
    Ok(t.mean_log_ratio()?.exp())
}

/// Rewards standardized within the group (population std).
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + STD_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Derivative of the objective with respect to each trajectory's mean
    /// log ratio, indexed `[group][trajectory]`.
    pub per_traj_weight: Vec<Vec<f64>>,
}

pub fn gspo_objective(groups: &[RolloutGroup], cfg: &GspoConfig) -> Result<ObjectiveValue, GspoError> {
    if groups.is_empty() {
        return Err(GspoError::NoGroups);
    }
    if cfg.clip_epsilon.is_nan() || cfg.clip_epsilon <= 0.0 {
        return Err(GspoError::InvalidConfig("clip_epsilon must be positive".into()));
    }
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let n_groups = groups.len() as f64;
    let mut value = 0.0;
    let mut weights = Vec::with_capacity(groups.len());
    for g in groups {
        let rewards: Vec<f64> = g.trajectories.iter().map(|t| t.reward).collect();
        let adv = group_advantages(&rewards)?;
        let scale = 1.0 / (n_groups * g.trajectories.len() as f64);
        let mut w = Vec::with_capacity(adv.len());
        for (t, a) in g.trajectories.iter().zip(adv) {
            let s = seq_importance_ratio(t)?;
            let unclipped = s * a;
            let clipped = s.clamp(lo, hi) * a;
            // the clipped term is constant in the ratio, so it blocks the gradient
            let blocked = (a > 0.0 && s > hi) || (a < 0.0 && s < lo);
            value += scale * unclipped.min(clipped);
            w.push(if blocked { 0.0 } else { scale * a * s });
        }
        weights.push(w);
    }
    Ok(ObjectiveValue {
        value,
        per_traj_weight: weights,
    })
}

// ---------------------------------------------------------------------------
// Linear softmax policies
// ---------------------------------------------------------------------------

/// A softmax policy over candidate responses with logits `w · φ(c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub weights: Vec<f64>,
}

/// One prompt's rollouts under a [`LinearPolicy`]: the candidate features,
/// the reward of each candidate, which candidates were sampled, and the old
/// policy's log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGroup {
    pub features: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub samples: Vec<usize>,
    pub old_logps: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| (l - lse).min(0.0)).collect()
}

impl LinearPolicy {
    pub fn zeros(dim: usize) -> Self {
        LinearPolicy {
            weights: vec![0.0; dim],
        }
    }

    pub fn logits(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features
            .iter()
            .map(|f| f.iter().zip(&self.weights).map(|(x, w)| x * w).sum())
            .collect()
    }

    pub fn log_probs(&self, features: &[Vec<f64>]) -> Vec<f64> {
        log_softmax(&self.logits(features))
    }

    pub fn probs(&self, features: &[Vec<f64>]) -> Vec<f64> {
        self.log_probs(features).into_iter().map(f64::exp).collect()
    }

    /// Index of the most probable candidate; ties go to the lowest index.
    pub fn greedy(&self, features: &[Vec<f64>]) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        best
    }

    fn rollout_groups(&self, groups: &[ToyGroup]) -> Vec<RolloutGroup> {
        groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let new = self.log_probs(&g.features);
                RolloutGroup {
                    prompt_id: gi.to_string(),
                    trajectories: g
                        .samples
                        .iter()
                        .map(|&c| Trajectory {
                            token_logps_new: vec![new[c]],
                            token_logps_old: vec![g.old_logps[c]],
                            reward: g.rewards[c],
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Objective value and its analytic gradient with respect to the weights.
    pub fn objective_and_grad(&self, groups: &[ToyGroup], cfg: &GspoConfig) -> Result<(f64, Vec<f64>), GspoError> {
        let obj = gspo_objective(&self.rollout_groups(groups), cfg)?;
        let mut grad = vec![0.0; self.weights.len()];
        for (g, w) in groups.iter().zip(&obj.per_traj_weight) {
            let probs = self.probs(&g.features);
            let mut expected = vec![0.0; self.weights.len()];
            for (p, f) in probs.iter().zip(&g.features) {
                for (e, x) in expected.iter_mut().zip(f) {
                    *e += p * x;
                }
            }
            for (&c, wi) in g.samples.iter().zip(w) {
                for (j, gj) in grad.iter_mut().enumerate() {
                    *gj += wi * (g.features[c][j] - expected[j]);
                }
            }
        }
        Ok((obj.value, grad))
    }

    /// Draws `n` candidate indices from the current policy.
    pub fn sample(&self, features: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let probs = self.probs(features);
        let dist = WeightedIndex::new(&probs).expect("softmax weights are positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
}

/// A prompt the policy is trained on: candidate features and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPrompt {
    pub features: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub group_size: usize,
    /// Gradient steps taken against each old-policy snapshot.
    pub inner_epochs: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            steps: 200,
            lr: 0.1,
            group_size: DEFAULT_GROUP_SIZE,
            inner_epochs: 1,
            seed: 0,
        }
    }
}

/// Runs GSPO ascent on `policy`, resampling every group from the old-policy
/// snapshot at the start of each step. Returns the per-step objective values.
pub fn train_linear_policy(
    policy: &mut LinearPolicy,
    prompts: &[ToyPrompt],
    train: &ToyTrainConfig,
    cfg: &GspoConfig,
) -> Result<Vec<f64>, GspoError> {
    if train.group_size < 2 {
        return Err(GspoError::GroupTooSmall(train.group_size));
    }
    if prompts.is_empty() {
        return Err(GspoError::NoGroups);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut values = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        let old = policy.clone();
        let groups: Vec<ToyGroup> = prompts
            .iter()
            .map(|p| ToyGroup {
                samples: old.sample(&p.features, train.group_size, &mut rng),
                old_logps: old.log_probs(&p.features),
                features: p.features.clone(),
                rewards: p.rewards.clone(),
            })
            .collect();
        let mut last = 0.0;
        for _ in 0..train.inner_epochs.max(1) {
            let (v, grad) = policy.objective_and_grad(&groups, cfg)?;
            for (w, g) in policy.weights.iter_mut().zip(grad) {
                *w += train.lr * g;
            }
            last = v;
        }
        values.push(last);
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainResult {
    /// Final logits, one per candidate.
    pub logits: Vec<f64>,
    /// Probability of the highest-reward candidate after each step.
    pub best_prob_trace: Vec<f64>,
}

fn one_hot(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Trains a categorical policy over single-token candidates.
pub fn train_toy_policy(
    rewards: &[f64],
    train: &ToyTrainConfig,
    cfg: &GspoConfig,
) -> Result<ToyTrainResult, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::InvalidConfig("need at least 2 candidates".into()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Err(GspoError::DegenerateRewards);
    }
    let best = (0..rewards.len())
        .max_by(|&a, &b| rewards[a].total_cmp(&rewards[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let prompt = ToyPrompt {
        features: one_hot(rewards.len()),
        rewards: rewards.to_vec(),
    };
    let mut policy = LinearPolicy::zeros(rewards.len());
    let mut trace = Vec::with_capacity(train.steps);
    let single = ToyTrainConfig { steps: 1, ..*train };
    for step in 0..train.steps {
        let step_cfg = ToyTrainConfig {
            seed: train.seed.wrapping_add(step as u64),
            ..single
        };
        train_linear_policy(&mut policy, std::slice::from_ref(&prompt), &step_cfg, cfg)?;
        trace.push(policy.probs(&prompt.features)[best]);
    }
    Ok(ToyTrainResult {
        logits: policy.weights,
        best_prob_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Batch export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub schema: String,
    pub version: u32,
}

impl Default for ExportHeader {
    fn default() -> Self {
        ExportHeader {
            schema: EXPORT_SCHEMA.to_string(),
            version: EXPORT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt_id: String,
    pub prompt_text: String,
    pub response_text: String,
    pub reward: f64,
    pub r_res: f64,
    pub r_over: f64,
    /// Position of the record's group within the batch.
    pub group_index: usize,
    /// Position of the rollout within its group.
    pub rollout_index: usize,
    pub context_flags: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportGroup {
    pub prompt_id: String,
    pub prompt_text: String,
    pub context_flags: String,
    pub responses: Vec<(String, RewardRecord)>,
}

pub fn export_records(groups: &[ExportGroup]) -> Vec<ExportRecord> {
    let mut out = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (ri, (text, reward)) in g.responses.iter().enumerate() {
            out.push(ExportRecord {
                prompt_id: g.prompt_id.clone(),
                prompt_text: g.prompt_text.clone(),
                response_text: text.clone(),
                reward: reward.total,
                r_res: reward.r_res,
                r_over: reward.r_over,
                group_index: gi,
                rollout_index: ri,
                context_flags: g.context_flags.clone(),
            });
        }
    }
    out
}

/// Writes a header line followed by one JSON record per rollout.
pub fn export_batch(path: &Path, groups: &[ExportGroup]) -> Result<usize, GspoError> {
    let io = |source| GspoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let records = export_records(groups);
    let line = serde_json::to_string(&ExportHeader::default()).expect("serializable");
    writeln!(w, "{line}").map_err(io)?;
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r).expect("serializable")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records.len())
}

pub fn read_batch(path: &Path) -> Result<(ExportHeader, Vec<ExportRecord>), GspoError> {
    let file = File::open(path).map_err(|source| GspoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, message: String| GspoError::BadRecord {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ExportHeader = match lines.next() {
        Some((_, Ok(l))) => serde_json::from_str(&l).map_err(|e| bad(1, e.to_string()))?,
        Some((_, Err(source))) => {
            return Err(GspoError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
        None => return Err(bad(1, "missing header".into())),
    };
    if header.schema != EXPORT_SCHEMA || header.version > EXPORT_VERSION {
        return Err(bad(
            1,
            format!("unsupported batch schema {} v{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|source| GspoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?);
    }
    Ok((header, records))
}
