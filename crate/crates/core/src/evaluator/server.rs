//! In-process HTTP server speaking the backend wire protocol, for tests and
//! offline dry runs. Responses come from any [`EvaluationBackend`].

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::http::{GenerateBody, GenerateReply, SampleText, ScoreBody, ScoreReply};
use super::{EvalError, EvaluationBackend, GenerationRequest};

/// Scripted misbehavior applied before the wrapped backend is consulted.
#[derive(Debug, Clone, Default)]
pub enum Fault {
    #[default]
    None,
    /// The next `count` requests get `status`.
    FailNext { count: usize, status: u16 },
    /// Every request gets `status`.
    Always(u16),
    /// Every reply is syntactically valid JSON missing the expected field.
    MissingField,
}

struct Shared {
    backend: Box<dyn EvaluationBackend>,
    fault: Mutex<Fault>,
    requests: AtomicUsize,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral local port and serves on a background thread.
    pub fn start(backend: Box<dyn EvaluationBackend>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            backend,
            fault: Mutex::new(Fault::None),
            requests: AtomicUsize::new(0),
        });
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new()
            .route("/generate", post(generate))
            .route("/score", post(score))
            .with_state(shared.clone());
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_fault(&self, fault: Fault) {
        *self.shared.fault.lock().unwrap() = fault;
    }

    /// Requests received so far, including faulted ones.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

enum Intercept {
    Pass,
    Status(StatusCode),
    MissingField,
}

fn intercept(shared: &Shared) -> Intercept {
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let mut fault = shared.fault.lock().unwrap();
    match &mut *fault {
        Fault::None => Intercept::Pass,
        Fault::Always(code) => Intercept::Status(status(*code)),
        Fault::MissingField => Intercept::MissingField,
        Fault::FailNext { count, status: code } => {
            if *count == 0 {
                return Intercept::Pass;
            }
            *count -= 1;
            Intercept::Status(status(*code))
        }
    }
}

fn status(code: u16) -> StatusCode {
    StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

fn error_response(err: EvalError) -> Response {
    let code = match err {
        EvalError::UnknownModelRef(_) => StatusCode::NOT_FOUND,
        EvalError::InvalidRequest(_) | EvalError::EmptyText => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (code, err.to_string()).into_response()
}

async fn generate(State(shared): State<Arc<Shared>>, Json(body): Json<GenerateBody>) -> Response {
    match intercept(&shared) {
        Intercept::Status(code) => return code.into_response(),
        Intercept::MissingField => return Json(serde_json::json!({"outputs": []})).into_response(),
        Intercept::Pass => {}
    }
    let request = GenerationRequest {
        model_ref: body.model,
        prompt: body.prompt,
        num_samples: body.n,
        temperature: body.temperature,
        max_tokens: body.max_tokens,
        seed: body.seed,
    };
    let worker = shared.clone();
    let result = tokio::task::spawn_blocking(move || worker.backend.generate(&request)).await;
    match result {
        Ok(Ok(texts)) => Json(GenerateReply {
            samples: texts.into_iter().map(|text| SampleText { text }).collect(),
        })
        .into_response(),
        Ok(Err(e)) => error_response(e),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

async fn score(State(shared): State<Arc<Shared>>, Json(body): Json<ScoreBody>) -> Response {
    match intercept(&shared) {
        Intercept::Status(code) => return code.into_response(),
        Intercept::MissingField => return Json(serde_json::json!({"logprobs": []})).into_response(),
        Intercept::Pass => {}
    }
    let worker = shared.clone();
    let result = tokio::task::spawn_blocking(move || worker.backend.score(&body.model, &body.text)).await;
    match result {
        Ok(Ok(token_logprobs)) => Json(ScoreReply { token_logprobs }).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::http::{HttpBackend, HttpBackendConfig};
    use crate::evaluator::mock::{Landscape, MockBackend};
    use crate::evaluator::{perplexity_of, sample_answers, ExtractionPolicy, GenerationParams};

    struct Fixed;

    impl EvaluationBackend for Fixed {
        fn generate(&self, _: &GenerationRequest) -> Result<Vec<String>, EvalError> {
            Ok(vec!["so \\boxed{12}".into(), "hence 7".into()])
        }

        fn score(&self, _: &str, _: &str) -> Result<Vec<f64>, EvalError> {
            Ok(vec![-0.5, -1.25, -2.0, -0.125])
        }
    }

    fn client(server: &MockServer, retries: u32) -> HttpBackend {
        HttpBackend::new(HttpBackendConfig {
            url: server.url(),
            timeout_secs: 10.0,
            max_retries: retries,
            initial_backoff_ms: 5,
            max_backoff_ms: 20,
            auth_token_env: None,
        })
        .unwrap()
    }

    #[test]
    fn fixed_payload_round_trip() {
        let server = MockServer::start(Box::new(Fixed)).unwrap();
        let http = client(&server, 0);
        let req = GenerationRequest::new("m", "q", 2, GenerationParams::default());
        let samples = sample_answers(&http, &req, ExtractionPolicy::default()).unwrap();
        let answers: Vec<_> = samples.iter().map(|s| s.extracted_answer.as_deref()).collect();
        assert_eq!(answers, vec![Some("12"), Some("7")]);

        let ppl = perplexity_of(&http, "m", "some text").unwrap();
        let local = (-(-0.5 - 1.25 - 2.0 - 0.125) / 4.0f64).exp();
        assert!((ppl - local).abs() < 1e-12);
    }

    #[test]
    fn retries_then_fails() {
        let server = MockServer::start(Box::new(Fixed)).unwrap();
        server.set_fault(Fault::Always(500));
        let http = client(&server, 2);
        let err = http.score("m", "x").unwrap_err();
        assert!(matches!(err, EvalError::BackendFailure { attempts: 3, .. }), "{err:?}");
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn transient_failures_recover() {
        let server = MockServer::start(Box::new(Fixed)).unwrap();
        server.set_fault(Fault::FailNext { count: 2, status: 503 });
        let http = client(&server, 3);
        assert_eq!(http.score("m", "x").unwrap().len(), 4);
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn client_errors_and_bad_bodies_are_not_retried() {
        let backend = MockBackend::new(
            Landscape::Constant {
                consistency: 1.0,
                perplexity: 2.0,
            },
            0,
        );
        let server = MockServer::start(Box::new(backend)).unwrap();
        let http = client(&server, 3);
        assert!(matches!(
            http.score("unknown-model", "x"),
            Err(EvalError::HttpStatus(404))
        ));
        assert_eq!(server.request_count(), 1);
        server.set_fault(Fault::MissingField);
        assert!(matches!(
            http.score("coeffs:0,0", "x"),
            Err(EvalError::MalformedResponse(_))
        ));
        assert_eq!(server.request_count(), 2);
    }
}
