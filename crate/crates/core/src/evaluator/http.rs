//! JSON-over-HTTP backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvaluationBackend, GenerationRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub url: String,
    pub timeout_secs: f64,
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Environment variable holding a bearer token, if any.
    pub auth_token_env: Option<String>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000".into(),
            timeout_secs: 600.0,
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 10_000,
            auth_token_env: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct GenerateBody {
    pub model: String,
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct GenerateReply {
    pub samples: Vec<SampleText>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SampleText {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ScoreBody {
    pub model: String,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ScoreReply {
    pub token_logprobs: Vec<f64>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: HttpBackendConfig,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| EvalError::InvalidRequest(format!("http client: {e}")))?;
        let token = config.auth_token_env.as_deref().and_then(|var| std::env::var(var).ok());
        Ok(Self { client, config, token })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, route: &str, body: &B) -> Result<R, EvalError> {
        let url = format!("{}/{}", self.config.url.trim_end_matches('/'), route);
        let attempts = self.config.max_retries + 1;
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(&url, body) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(e)) => {
                    log::warn!("{route} attempt {attempt}/{attempts} failed: {e}");
                    last = e.to_string();
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff = (backoff * 2).min(Duration::from_millis(self.config.max_backoff_ms));
                    }
                }
            }
        }
        Err(EvalError::BackendFailure { attempts, last })
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Transient(EvalError::Timeout)
            } else {
                Attempt::Transient(EvalError::MalformedResponse(format!("transport: {e}")))
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let code = status.as_u16();
            let err = EvalError::HttpStatus(code);
            return Err(if status.is_server_error() || code == 408 || code == 429 {
                Attempt::Transient(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let bytes = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                Attempt::Transient(EvalError::Timeout)
            } else {
                Attempt::Transient(EvalError::MalformedResponse(e.to_string()))
            }
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Attempt::Fatal(EvalError::MalformedResponse(e.to_string())))
    }
}

enum Attempt {
    Transient(EvalError),
    Fatal(EvalError),
}

impl EvaluationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, EvalError> {
        request.validate()?;
        let body = GenerateBody {
            model: request.model_ref.clone(),
            prompt: request.prompt.clone(),
            n: request.num_samples,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let reply: GenerateReply = self.post("generate", &body)?;
        Ok(reply.samples.into_iter().map(|s| s.text).collect())
    }

    fn score(&self, model_ref: &str, text: &str) -> Result<Vec<f64>, EvalError> {
        let body = ScoreBody {
            model: model_ref.to_string(),
            text: text.to_string(),
        };
        let reply: ScoreReply = self.post("score", &body)?;
        Ok(reply.token_logprobs)
    }
}
