//! Online curriculum: rollout-based difficulty, band-pass filtering and the
//! cross-round candidate pool.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mql::Pipeline;

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error("instance {0:?} has no difficulty estimate")]
    UnsetDifficulty(String),
    #[error("invalid curriculum config: {0}")]
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

/// Serializes a pipeline as its canonical text.
pub mod pipeline_text {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::mql::{parse_pipeline, Pipeline};

    pub fn serialize<S: Serializer>(p: &Pipeline, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.render())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pipeline, D::Error> {
        let text = String::deserialize(d)?;
        parse_pipeline(&text).map_err(D::Error::custom)
    }
}

fn default_db() -> String {
    "toy".to_string()
}

/// A training instance plus its per-round bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub question: String,
    #[serde(rename = "mql_text", with = "pipeline_text")]
    pub reference: Pipeline,
    #[serde(default = "default_db")]
    pub db_name: String,
    #[serde(default)]
    pub difficulty: Option<u32>,
    #[serde(default)]
    pub consumed_round: Option<u32>,
}

impl InstanceRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>, reference: Pipeline) -> Self {
        InstanceRecord {
            id: id.into(),
            question: question.into(),
            reference,
            db_name: default_db(),
            difficulty: None,
            consumed_round: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub n_rollouts: u32,
    pub d_min: u32,
    pub d_max: u32,
    pub retention: Vec<f64>,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            n_rollouts: 9,
            d_min: 1,
            d_max: 8,
            retention: vec![0.5, 0.5, 1.0],
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if !(self.d_min < self.d_max && self.d_max <= self.n_rollouts) {
            return Err(CurriculumError::InvalidConfig(format!(
                "need d_min < d_max <= n_rollouts, got {} / {} / {}",
                self.d_min, self.d_max, self.n_rollouts
            )));
        }
        if self.retention.is_empty() {
            return Err(CurriculumError::InvalidConfig("retention schedule is empty".into()));
        }
        if let Some(r) = self.retention.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(CurriculumError::InvalidConfig(format!(
                "retention ratio {r} outside (0, 1]"
            )));
        }
        Ok(())
    }

    /// Retention ratio for 1-based `round`; rounds past the schedule reuse
    /// its last entry.
    pub fn rho(&self, round: u32) -> f64 {
        let i = (round.max(1) as usize - 1).min(self.retention.len() - 1);
        self.retention[i]
    }
}

/// `n` minus the number of correct rollouts. A failed rollout counts as
/// incorrect.
pub fn estimate_difficulty<E>(
    n: u32,
    mut sample: impl FnMut(u32) -> Result<String, E>,
    mut judge: impl FnMut(&str) -> bool,
) -> u32 {
    let correct = (0..n)
        .filter(|&j| match sample(j) {
            Ok(text) => judge(&text),
            Err(_) => false,
        })
        .count() as u32;
    n - correct
}

/// Records with `d_min < difficulty < d_max`, in input order.
pub fn bandpass_filter(
    pool: &[InstanceRecord],
    cfg: &CurriculumConfig,
) -> Result<Vec<InstanceRecord>, CurriculumError> {
    let mut out = Vec::new();
    for r in pool {
        let d = r
            .difficulty
            .ok_or_else(|| CurriculumError::UnsetDifficulty(r.id.clone()))?;
        if cfg.d_min < d && d < cfg.d_max {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Samples `ceil(rho * |mid|)` of `mid` uniformly without replacement, marks
/// them consumed in `round`, and removes them from the pool. Remaining pool
/// entries have their difficulty cleared for re-estimation.
pub fn select_round<R: Rng>(
    pool: Vec<InstanceRecord>,
    mid: &[InstanceRecord],
    rho: f64,
    round: u32,
    rng: &mut R,
) -> Result<(Vec<InstanceRecord>, Vec<InstanceRecord>), CurriculumError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(CurriculumError::InvalidConfig(format!(
            "retention ratio {rho} outside (0, 1]"
        )));
    }
    let take = ((rho * mid.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let take = take.min(mid.len());
    let mut picked = rand::seq::index::sample(rng, mid.len(), take).into_vec();
    picked.sort_unstable();
    let selected: Vec<InstanceRecord> = picked
        .into_iter()
        .map(|i| InstanceRecord {
            consumed_round: Some(round),
            ..mid[i].clone()
        })
        .collect();
    let chosen: HashSet<&str> = selected.iter().map(|r| r.id.as_str()).collect();
    let remaining = pool
        .into_iter()
        .filter(|r| !chosen.contains(r.id.as_str()))
        .map(|r| InstanceRecord { difficulty: None, ..r })
        .collect();
    Ok((selected, remaining))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CurriculumError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    let io = |source| CurriculumError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CurriculumError> {
    let text = fs::read_to_string(path).map_err(|source| CurriculumError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CurriculumError::BadRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mql::parse_pipeline;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(diffs: &[u32]) -> Vec<InstanceRecord> {
        diffs
            .iter()
            .enumerate()
            .map(|(i, d)| InstanceRecord {
                difficulty: Some(*d),
                ..InstanceRecord::new(format!("q{i}"), "q", parse_pipeline("db.c.aggregate([])").unwrap())
            })
            .collect()
    }

    #[test]
    fn difficulty_counts_failures() {
        let ok = |k: u32| {
            move |j: u32| {
                if j < k {
                    Ok::<_, ()>("good".to_string())
                } else {
                    Err(())
                }
            }
        };
        let judge = |t: &str| t == "good";
        assert_eq!(estimate_difficulty(9, ok(9), judge), 0);
        assert_eq!(estimate_difficulty(9, ok(0), judge), 9);
        assert_eq!(estimate_difficulty(9, ok(3), judge), 6);
    }

    #[test]
    fn bandpass_is_strict() {
        let cfg = CurriculumConfig::default();
        let kept: Vec<u32> = bandpass_filter(&pool(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]), &cfg)
            .unwrap()
            .iter()
            .map(|r| r.difficulty.unwrap())
            .collect();
        assert_eq!(kept, [2, 3, 4, 5, 6, 7]);
        assert!(bandpass_filter(&[], &cfg).unwrap().is_empty());
        let mut unset = pool(&[3]);
        unset[0].difficulty = None;
        assert!(matches!(
            bandpass_filter(&unset, &cfg),
            Err(CurriculumError::UnsetDifficulty(_))
        ));
    }

    #[test]
    fn selection_sizes_and_determinism() {
        let p = pool(&[4; 10]);
        let mid = bandpass_filter(&p, &CurriculumConfig::default()).unwrap();
        let run = || select_round(p.clone(), &mid, 0.5, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (sel, rest) = run();
        assert_eq!(sel.len(), 5);
        assert_eq!(rest.len(), 5);
        assert!(sel.iter().all(|r| r.consumed_round == Some(1)));
        assert!(rest.iter().all(|r| r.difficulty.is_none()));
        assert_eq!(run(), (sel, rest));
        let (all, empty) = select_round(p.clone(), &mid, 1.0, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(all.len(), 10);
        assert!(empty.is_empty());
        let (three, _) = select_round(p.clone(), &mid[..5], 0.5, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(three.len(), 3);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let p = pool(&[1, 5]);
        write_records(&path, &p).unwrap();
        assert_eq!(read_records::<InstanceRecord>(&path).unwrap(), p);
    }

    #[test]
    fn config_validation() {
        assert!(CurriculumConfig::default().validate().is_ok());
        let bad = CurriculumConfig {
            retention: vec![0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg = CurriculumConfig::default();
        assert_eq!((cfg.rho(1), cfg.rho(3), cfg.rho(7)), (0.5, 1.0, 1.0));
    }
}
