//! Run configuration, the shared workspace and the eval and DRO drivers.

mod dro;
mod eval;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{CurriculumConfig, CurriculumError, InstanceRecord};
use crate::engine::{execute, Database, EngineError, ExecOutcome};
use crate::evidence::{
    assemble_context, ContextFlags, ContextInputs, EvidenceContext, EvidenceError, FieldIndex, RemoteEmbedder,
    DEFAULT_K,
};
use crate::generator::{
    build_draft_prompt, GenError, Generator, HttpConfig, HttpGenerator, MockGenerator, Prompt, PromptOptions,
    SamplingParams,
};
use crate::gspo::{GspoConfig, GspoError, ToyTrainConfig};
use crate::mql::{Document, Pipeline};
use crate::schema::{infer_all, render_ts, Annotations, SchemaError, SchemaTree, DEFAULT_MAX_EXAMPLES};
use crate::synthesis::{SynthConfig, SynthError};
use crate::verdict::{RewardConfig, VerdictError};

pub use dro::{
    candidate_features, run_dro, ContextView, DroOptions, DroOutcome, RoundMetrics, RunState, FEATURE_NAMES,
};
pub use eval::{format_table, run_eval, EvalRecord, EvalReport, EvalSummary};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Gspo(#[from] GspoError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("reference query of instance {id:?} failed: {message}")]
    BadReference { id: String, message: String },
    #[error("cannot resume run: {0}")]
    Resume(String),
}

impl OrchestratorError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            OrchestratorError::Config(_) => "config",
            OrchestratorError::Io { .. } => "io",
            OrchestratorError::Engine(_) => "engine",
            OrchestratorError::Schema(_) => "schema",
            OrchestratorError::Evidence(_) => "evidence",
            OrchestratorError::Curriculum(_) => "curriculum",
            OrchestratorError::Gspo(_) => "gspo",
            OrchestratorError::Verdict(_) => "reward_config",
            OrchestratorError::Generator(_) => "generator",
            OrchestratorError::Synth(_) => "synthesis",
            OrchestratorError::BadReference { .. } => "bad_reference",
            OrchestratorError::Resume(_) => "resume",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Deterministic 64-bit seed for one unit of work.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Directory of the bundled toy assets. `DROKIT_ASSETS` overrides it.
pub fn bundled_assets() -> PathBuf {
    match std::env::var_os("DROKIT_ASSETS") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/toy"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Toy,
    Export,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Trigram,
    Remote {
        url: String,
        model: String,
        dim: usize,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
}

fn default_key_env() -> String {
    "DROKIT_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceConfig {
    pub k: usize,
    pub embedding: EmbeddingConfig,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig {
            k: DEFAULT_K,
            embedding: EmbeddingConfig::Trigram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub backend: Backend,
    pub fixtures: PathBuf,
    pub http: HttpConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            backend: Backend::Mock,
            fixtures: bundled_assets().join("fixtures"),
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub train: ToyTrainConfig,
    /// Candidate responses drawn per instance for the toy policy.
    pub candidates: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            train: ToyTrainConfig {
                steps: 60,
                lr: 0.05,
                ..Default::default()
            },
            candidates: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub runs_dir: PathBuf,
    pub db_dir: PathBuf,
    pub annotations: Option<PathBuf>,
    pub dataset: PathBuf,
    /// Trailing dataset instances held out from training.
    pub heldout: usize,
    pub reward: RewardConfig,
    pub curriculum: CurriculumConfig,
    pub gspo: GspoConfig,
    pub toy: ToyConfig,
    pub evidence: EvidenceConfig,
    pub generator: GeneratorConfig,
    pub sampling: SamplingParams,
    /// Rollouts per selected instance in the optimize phase.
    pub group_size: usize,
    /// Context variant used for difficulty estimation and optimization.
    pub context_flags: String,
    /// Context variant used by `eval`.
    pub eval_flags: String,
    pub prompt_max_chars: Option<usize>,
    pub iterations: u32,
    pub mode: RunMode,
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let assets = bundled_assets();
        RunConfig {
            name: "toy".into(),
            runs_dir: PathBuf::from("runs"),
            db_dir: assets.join("db"),
            annotations: Some(assets.join("annotations.json")),
            dataset: assets.join("dataset.jsonl"),
            heldout: 5,
            reward: RewardConfig::default(),
            curriculum: CurriculumConfig::default(),
            gspo: GspoConfig::default(),
            toy: ToyConfig::default(),
            evidence: EvidenceConfig::default(),
            generator: GeneratorConfig::default(),
            sampling: SamplingParams::default(),
            group_size: 8,
            context_flags: ContextFlags::FULL.tag(),
            eval_flags: ContextFlags::DRAFT.tag(),
            prompt_max_chars: None,
            iterations: 3,
            mode: RunMode::Toy,
            seed: 0,
            workers: 4,
            synth: SynthConfig::default(),
        }
    }
}

fn flags_from(tag: &str, what: &str) -> Result<ContextFlags, OrchestratorError> {
    ContextFlags::from_tag(tag)
        .ok_or_else(|| OrchestratorError::Config(format!("{what} {tag:?} is not a three-digit 0/1 tag")))
}

impl RunConfig {
    /// Reads a JSON config; relative paths in it resolve against its directory.
    pub fn from_json_file(path: &Path) -> Result<RunConfig, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_value(raw.clone())
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let given = |key: &str| raw.get(key).is_some();
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if given("runs_dir") {
            rebase(&mut cfg.runs_dir);
        }
        if given("db_dir") {
            rebase(&mut cfg.db_dir);
        }
        if given("dataset") {
            rebase(&mut cfg.dataset);
        }
        if given("annotations") {
            if let Some(p) = cfg.annotations.as_mut() {
                rebase(p);
            }
        }
        if raw.get("generator").and_then(|g| g.get("fixtures")).is_some() {
            rebase(&mut cfg.generator.fixtures);
        }
        Ok(cfg)
    }

    pub fn optimize_flags(&self) -> Result<ContextFlags, OrchestratorError> {
        flags_from(&self.context_flags, "context_flags")
    }

    pub fn eval_context_flags(&self) -> Result<ContextFlags, OrchestratorError> {
        flags_from(&self.eval_flags, "eval_flags")
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.evidence.k == 0 {
            return bad("evidence.k must be at least 1".into());
        }
        if self.toy.candidates < 2 {
            return bad("toy.candidates must be at least 2".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("run name {:?} is not a plain directory name", self.name));
        }
        for (what, p) in [("db_dir", &self.db_dir), ("dataset", &self.dataset)] {
            if !p.exists() {
                return bad(format!("{what} {} does not exist", p.display()));
            }
        }
        if let Some(a) = &self.annotations {
            if !a.exists() {
                return bad(format!("annotations {} does not exist", a.display()));
            }
        }
        if self.generator.backend == Backend::Mock && !self.generator.fixtures.is_dir() {
            return bad(format!(
                "fixture directory {} does not exist",
                self.generator.fixtures.display()
            ));
        }
        self.optimize_flags()?;
        self.eval_context_flags()?;
        self.reward.validate()?;
        self.curriculum.validate()?;
        self.sampling.validate()?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }
}

/// Builds the configured generator backend.
pub fn build_generator(cfg: &GeneratorConfig) -> Result<Arc<dyn Generator>, OrchestratorError> {
    Ok(match cfg.backend {
        Backend::Mock => Arc::new(MockGenerator::load_dir(&cfg.fixtures)?),
        Backend::Http => Arc::new(HttpGenerator::new(cfg.http.clone())?),
    })
}

pub fn load_instances(path: &Path) -> Result<Vec<InstanceRecord>, OrchestratorError> {
    Ok(crate::curriculum::read_records(path)?)
}

// ---------------------------------------------------------------------------
// Workspace
// ---------------------------------------------------------------------------

/// Database, schemas and field indexes shared by every command.
pub struct Workspace {
    pub db: Database,
    pub schemas: BTreeMap<String, SchemaTree>,
    pub indexes: BTreeMap<String, FieldIndex>,
    pub k: usize,
    pub prompt: PromptOptions,
}

impl Workspace {
    pub fn load(cfg: &RunConfig) -> Result<Workspace, OrchestratorError> {
        let db = Database::load_dir(&cfg.db_dir)?;
        let annotations = match &cfg.annotations {
            Some(p) => Annotations::load(p)?,
            None => Annotations::default(),
        };
        let schemas: BTreeMap<String, SchemaTree> =
            infer_all(&db, &annotations, DEFAULT_MAX_EXAMPLES).into_iter().collect();
        let mut indexes = BTreeMap::new();
        for (name, tree) in &schemas {
            let idx = match &cfg.evidence.embedding {
                EmbeddingConfig::Trigram => FieldIndex::trigram(tree),
                EmbeddingConfig::Remote {
                    url,
                    model,
                    dim,
                    api_key_env,
                } => {
                    let key = std::env::var(api_key_env).ok();
                    let embedder = RemoteEmbedder::new(url, model, key, *dim, Duration::from_secs(60))?;
                    FieldIndex::build(tree, Arc::new(embedder))?
                }
            };
            indexes.insert(name.clone(), idx);
        }
        Ok(Workspace {
            db,
            schemas,
            indexes,
            k: cfg.evidence.k,
            prompt: PromptOptions {
                max_chars: cfg.prompt_max_chars,
            },
        })
    }

    pub fn schema(&self, collection: &str) -> Result<&SchemaTree, OrchestratorError> {
        self.schemas
            .get(collection)
            .ok_or_else(|| OrchestratorError::Engine(EngineError::UnknownCollection(collection.to_string())))
    }

    pub fn draft_prompt(&self, inst: &InstanceRecord) -> Result<Prompt, OrchestratorError> {
        let s = self.schema(&inst.reference.collection)?;
        Ok(build_draft_prompt(&inst.question, &render_ts(s), &self.prompt))
    }

    pub fn context(
        &self,
        question: &str,
        collection: &str,
        draft: Option<&Pipeline>,
        flags: ContextFlags,
    ) -> Result<EvidenceContext, OrchestratorError> {
        let inputs = ContextInputs {
            schema: self.schema(collection)?,
            db: &self.db,
            index: &self.indexes[collection],
            k: self.k,
        };
        Ok(assemble_context(question, draft, flags, &inputs)?)
    }

    /// Rows of the instance's reference query.
    pub fn reference_rows(&self, inst: &InstanceRecord) -> Result<Vec<Document>, OrchestratorError> {
        match execute(&inst.reference, &self.db) {
            ExecOutcome::Ok(rows) => Ok(rows),
            other => Err(OrchestratorError::BadReference {
                id: inst.id.clone(),
                message: other.error_message().unwrap_or_default().to_string(),
            }),
        }
    }
}

/// Runs `f` on a pool with `workers` threads.
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
