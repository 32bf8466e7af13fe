//! The model boundary: prompt building, generation backends and response
//! parsing.

mod http;
mod prompt;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mql::{extract_code_block, parse_pipeline, strip_think, Pipeline, SyntaxError};

pub use http::{HttpConfig, HttpGenerator};
pub use prompt::{
    build_draft_prompt, build_refined_prompt, fill_template, render_evidence, Prompt, PromptOptions, PLACEHOLDERS,
    TEMPLATE_VERSION,
};

/// Name of the fixture stream used when no prompt-specific file exists.
pub const DEFAULT_FIXTURE: &str = "default";

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("endpoint failed after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("mock responses exhausted for prompt {0}")]
    MockExhausted(String),
    #[error("no mock responses for prompt {0}")]
    MockMissing(String),
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("{path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 4096,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidParams(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenError::InvalidParams(format!("top_p {}", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenRequest {
    pub system: String,
    pub user: String,
    pub params: SamplingParams,
    /// Sampling seed. Mock replay picks a scripted response by seed instead
    /// of consuming the stream, which keeps replays independent of call order.
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(prompt: &Prompt, params: SamplingParams) -> Self {
        GenRequest {
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            params,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.system, &self.user)
    }
}

/// Hex SHA-256 of the system and user parts.
pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub usage: Option<Usage>,
}

impl GenResponse {
    pub fn text(text: impl Into<String>) -> Self {
        GenResponse {
            text: text.into(),
            token_logprobs: None,
            usage: None,
        }
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError>;
}

/// Strips reasoning, extracts the fenced query and parses it.
pub fn parse_response(raw: &str) -> Result<Pipeline, SyntaxError> {
    parse_pipeline(&extract_code_block(strip_think(raw)))
}

// ---------------------------------------------------------------------------
// Mock replay
// ---------------------------------------------------------------------------

/// Replays scripted responses keyed by prompt hash.
///
/// A fixture directory holds `<prompt-hash>.json` files, each a JSON array
/// of response strings, plus an optional `default.json` used for prompts
/// without their own file.
#[derive(Debug, Default)]
pub struct MockGenerator {
    scripts: BTreeMap<String, Vec<String>>,
    cursors: Mutex<BTreeMap<String, VecDeque<String>>>,
}

impl MockGenerator {
    pub fn from_scripts(scripts: BTreeMap<String, Vec<String>>) -> Self {
        let cursors = scripts
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
            .collect();
        MockGenerator {
            scripts,
            cursors: Mutex::new(cursors),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self, GenError> {
        let fixture = |path: &Path, message: String| GenError::Fixture {
            path: path.to_path_buf(),
            message,
        };
        let entries = fs::read_dir(dir).map_err(|e| fixture(dir, e.to_string()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut scripts = BTreeMap::new();
        for path in paths {
            let key = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let text = fs::read_to_string(&path).map_err(|e| fixture(&path, e.to_string()))?;
            let responses: Vec<String> = serde_json::from_str(&text)
                .map_err(|e| fixture(&path, format!("expected an array of strings: {e}")))?;
            scripts.insert(key, responses);
        }
        Ok(MockGenerator::from_scripts(scripts))
    }

    /// Writes `scripts` in the layout [`MockGenerator::load_dir`] reads.
    pub fn write_dir(dir: &Path, scripts: &BTreeMap<String, Vec<String>>) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (key, responses) in scripts {
            let text = serde_json::to_string_pretty(responses).expect("serializable");
            fs::write(dir.join(format!("{key}.json")), text + "\n")?;
        }
        Ok(())
    }

    pub fn has_script(&self, hash: &str) -> bool {
        self.scripts.contains_key(hash)
    }
}

impl Generator for MockGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        let hash = req.prompt_hash();
        let key = if self.scripts.contains_key(&hash) {
            hash.clone()
        } else if self.scripts.contains_key(DEFAULT_FIXTURE) {
            DEFAULT_FIXTURE.to_string()
        } else {
            return Err(GenError::MockMissing(hash));
        };
        if let Some(seed) = req.seed {
            let script = &self.scripts[&key];
            if script.is_empty() {
                return Err(GenError::MockExhausted(hash));
            }
            return Ok(GenResponse::text(script[(seed % script.len() as u64) as usize].clone()));
        }
        let mut cursors = self.cursors.lock().expect("mock lock");
        cursors
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .map(GenResponse::text)
            .ok_or(GenError::MockExhausted(hash))
    }
}

/// A generator backed by a closure, for scripted in-process use.
pub struct FnGenerator<F>(pub F);

impl<F> Generator for FnGenerator<F>
where
    F: Fn(&GenRequest) -> Result<GenResponse, GenError> + Send + Sync,
{
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        (self.0)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> GenRequest {
        GenRequest {
            system: "s".into(),
            user: user.into(),
            params: SamplingParams::default(),
            seed: None,
        }
    }

    #[test]
    fn parse_response_paths() {
        let p = parse_response("<think>plan</think>\n```javascript\ndb.c.aggregate([{$limit:1}])\n```").unwrap();
        assert_eq!(p.render(), r#"db.c.aggregate([{"$limit":1}])"#);
        assert!(parse_response("```js\nnot a query\n```").is_err());
        assert!(parse_response("db.c.aggregate([])").is_ok());
    }

    #[test]
    fn mock_replays_in_order() {
        let r = req("hello");
        let mut scripts = BTreeMap::new();
        scripts.insert(r.prompt_hash(), vec!["one".to_string(), "two".to_string()]);
        let mock = MockGenerator::from_scripts(scripts.clone());
        assert_eq!(mock.generate(&r).unwrap().text, "one");
        assert_eq!(mock.generate(&r).unwrap().text, "two");
        assert!(matches!(mock.generate(&r), Err(GenError::MockExhausted(_))));
        assert!(matches!(mock.generate(&req("other")), Err(GenError::MockMissing(_))));
        let seeded = MockGenerator::from_scripts(scripts);
        assert_eq!(seeded.generate(&r.clone().with_seed(3)).unwrap().text, "two");
        assert_eq!(seeded.generate(&r.clone().with_seed(3)).unwrap().text, "two");
    }

    #[test]
    fn fixture_dir_round_trip_and_default() {
        let dir = tempfile::tempdir().unwrap();
        let mut scripts = BTreeMap::new();
        scripts.insert(DEFAULT_FIXTURE.to_string(), vec!["fallback".to_string()]);
        MockGenerator::write_dir(dir.path(), &scripts).unwrap();
        let mock = MockGenerator::load_dir(dir.path()).unwrap();
        assert_eq!(mock.generate(&req("anything")).unwrap().text, "fallback");
        fs::write(dir.path().join("bad.json"), "{}").unwrap();
        assert!(matches!(
            MockGenerator::load_dir(dir.path()),
            Err(GenError::Fixture { .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(SamplingParams::default().validate().is_ok());
        assert!(SamplingParams {
            top_p: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplingParams {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
