//! OpenAI-compatible chat-completions backend.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GenError, GenRequest, GenResponse, Generator, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub logprobs: bool,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: "DROKIT_API_KEY".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            logprobs: false,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpGenerator {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    slots: Slots,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpGenerator {
    pub fn new(cfg: HttpConfig) -> Result<Self, GenError> {
        if cfg.max_in_flight == 0 {
            return Err(GenError::Unavailable("max_in_flight must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| GenError::Unavailable(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(HttpGenerator {
            slots: Slots {
                free: Mutex::new(cfg.max_in_flight),
                cv: Condvar::new(),
            },
            cfg,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn body(&self, req: &GenRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        if self.cfg.logprobs {
            body["logprobs"] = json!(true);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<GenResponse, Attempt> {
        let mut rb = self.client.post(&self.cfg.url).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let v: Value = resp
            .json()
            .map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))?;
        parse_completion(&v).map_err(Attempt::Fatal)
    }
}

fn parse_completion(v: &Value) -> Result<GenResponse, String> {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .ok_or("response has no choices[0].message.content")?
        .to_string();
    let token_logprobs = choice["logprobs"]["content"].as_array().map(|items| {
        items
            .iter()
            .filter_map(|t| Some((t["token"].as_str()?.to_string(), t["logprob"].as_f64()?)))
            .collect()
    });
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u["prompt_tokens"].as_u64()?,
            completion_tokens: u["completion_tokens"].as_u64()?,
        })
    });
    Ok(GenResponse {
        text,
        token_logprobs,
        usage,
    })
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        req.params.validate()?;
        let body = self.body(req);
        let _slot = self.slots.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(message)) => return Err(GenError::Endpoint { attempts, message }),
                Err(Attempt::Retry(message)) if attempts > self.cfg.max_retries => {
                    return Err(GenError::Endpoint { attempts, message })
                }
                Err(Attempt::Retry(_)) => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempts - 1).min(10));
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::SamplingParams;

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        let gen = HttpGenerator::new(HttpConfig {
            url: "http://127.0.0.1:1/v1/chat/completions".into(),
            timeout_secs: 2.0,
            max_retries: 1,
            backoff_ms: 1,
            ..Default::default()
        })
        .unwrap();
        let req = GenRequest {
            system: "s".into(),
            user: "u".into(),
            params: SamplingParams::default(),
            seed: Some(1),
        };
        match gen.generate(&req) {
            Err(GenError::Endpoint { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected endpoint error, got {other:?}"),
        }
    }

    #[test]
    fn completion_parsing() {
        let v = json!({
            "choices": [{"message": {"content": "hi"},
                         "logprobs": {"content": [{"token": "h", "logprob": -0.5}]}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}
        });
        let r = parse_completion(&v).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.token_logprobs, Some(vec![("h".to_string(), -0.5)]));
        assert_eq!(r.usage.unwrap().completion_tokens, 1);
        assert!(parse_completion(&json!({"choices": []})).is_err());
    }
}
