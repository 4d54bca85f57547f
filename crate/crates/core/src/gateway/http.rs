//! HTTP-backed gateway with bounded concurrency and retry.
//!
//! Speaks a small JSON protocol: `POST {base}/v1/generate` returns
//! `{"text": ...}` and `POST {base}/v1/score` returns
//! `{"token_logprobs": [...]}`. Transport failures and 5xx responses are
//! retried with exponential backoff; 4xx responses and malformed bodies are
//! protocol errors and are not retried. The optional request log is an
//! operational record only and carries no determinism guarantee.
//!
//! Scheme support follows the TLS backends compiled into the HTTP client;
//! the default build targets plain-HTTP endpoints.

use crate::gateway::admission::AdmissionQueue;
use crate::gateway::{
    digest16, frame_count, Gateway, GatewayError, GatewayPolicy, GenerateRequest, ScoreRequest,
};
use crate::types::ScoreRecord;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

/// Environment variable naming the endpoint base URL.
pub const ENV_BASE_URL: &str = "VIDPREF_GATEWAY_URL";
/// Environment variable holding an optional bearer token.
pub const ENV_AUTH_TOKEN: &str = "VIDPREF_GATEWAY_TOKEN";

#[derive(Debug, Clone)]
pub struct HttpGatewayConfig {
    pub base_url: String,
    pub auth_token: Option<String>,
    pub policy: GatewayPolicy,
    /// Append-only JSONL request log. Remote calls only; never part of the
    /// reproducible outputs.
    pub log_path: Option<PathBuf>,
}

pub struct HttpGateway {
    base_url: String,
    auth_token: Option<String>,
    policy: GatewayPolicy,
    client: reqwest::blocking::Client,
    queue: AdmissionQueue,
    log: Option<Mutex<std::fs::File>>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    endpoint: &'a str,
    request_digest: &'a str,
    attempts: u32,
    latency_ms: u64,
    outcome: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

#[derive(Deserialize)]
struct ScoreResponse {
    token_logprobs: Vec<f64>,
}

impl HttpGateway {
    pub fn new(config: HttpGatewayConfig) -> Result<Self, GatewayError> {
        config.policy.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.policy.timeout())
            .build()
            .map_err(|e| GatewayError::Transport(format!("client construction: {e}")))?;
        let log = match &config.log_path {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| {
                        GatewayError::InvalidRequest(format!(
                            "cannot open gateway log {}: {e}",
                            path.display()
                        ))
                    })?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(HttpGateway {
            base_url: config.base_url.trim_end_matches('/').to_string(),
            auth_token: config.auth_token,
            queue: AdmissionQueue::new(config.policy.max_concurrent),
            policy: config.policy,
            client,
            log,
        })
    }

    /// Reads the endpoint and token from the environment.
    pub fn from_env(policy: GatewayPolicy, log_path: Option<PathBuf>) -> Result<Self, GatewayError> {
        let base_url = std::env::var(ENV_BASE_URL).map_err(|_| {
            GatewayError::InvalidRequest(format!("{ENV_BASE_URL} is not set"))
        })?;
        let auth_token = std::env::var(ENV_AUTH_TOKEN).ok();
        Self::new(HttpGatewayConfig {
            base_url,
            auth_token,
            policy,
            log_path,
        })
    }

    fn write_log(&self, endpoint: &str, digest: &str, attempts: u32, started: Instant, ok: bool) {
        if let Some(log) = &self.log {
            let line = LogLine {
                endpoint,
                request_digest: digest,
                attempts,
                latency_ms: started.elapsed().as_millis() as u64,
                outcome: if ok { "ok" } else { "error" },
            };
            if let Ok(mut file) = log.lock() {
                if let Ok(json) = serde_json::to_string(&line) {
                    let _ = writeln!(file, "{json}");
                }
            }
        }
    }

    /// Posts `body`, retrying transport failures and 5xx responses. Returns
    /// the parsed body and the number of attempts used.
    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        endpoint: &str,
        body: &B,
    ) -> Result<(R, u32), (GatewayError, u32)> {
        let url = format!("{}{endpoint}", self.base_url);
        let mut last = String::new();
        let attempts_max = self.policy.max_retries + 1;
        for attempt in 1..=attempts_max {
            if attempt > 1 {
                std::thread::sleep(self.policy.backoff(attempt - 1));
            }
            let mut rb = self.client.post(&url).json(body);
            if let Some(token) = &self.auth_token {
                rb = rb.bearer_auth(token);
            }
            match rb.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return match resp.json::<R>() {
                            Ok(parsed) => Ok((parsed, attempt)),
                            Err(e) => Err((
                                GatewayError::Protocol(format!("malformed response body: {e}")),
                                attempt,
                            )),
                        };
                    }
                    if status.is_server_error() {
                        last = format!("server status {status}");
                    } else {
                        return Err((
                            GatewayError::Protocol(format!("unexpected status {status}")),
                            attempt,
                        ));
                    }
                }
                Err(e) => {
                    last = format!("transport: {e}");
                }
            }
        }
        Err((
            GatewayError::RetriesExhausted {
                attempts: attempts_max,
                last,
            },
            attempts_max,
        ))
    }
}

impl Gateway for HttpGateway {
    fn generate(&self, req: &GenerateRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let digest = digest16(&[&serde_json::to_string(req)
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?]);
        self.queue.admit(|| {
            let started = Instant::now();
            match self.post_json::<_, GenerateResponse>("/v1/generate", req) {
                Ok((parsed, attempts)) => {
                    self.write_log("/v1/generate", &digest, attempts, started, true);
                    if parsed.text.trim().is_empty() {
                        return Err(GatewayError::Protocol("empty generation".into()));
                    }
                    Ok(parsed.text)
                }
                Err((err, attempts)) => {
                    self.write_log("/v1/generate", &digest, attempts, started, false);
                    Err(err)
                }
            }
        })
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreRecord, GatewayError> {
        req.validate()?;
        let digest = digest16(&[&serde_json::to_string(req)
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?]);
        self.queue.admit(|| {
            let started = Instant::now();
            match self.post_json::<_, ScoreResponse>("/v1/score", req) {
                Ok((parsed, attempts)) => {
                    self.write_log("/v1/score", &digest, attempts, started, true);
                    if parsed.token_logprobs.is_empty() {
                        return Err(GatewayError::Protocol("no token logprobs".into()));
                    }
                    if parsed
                        .token_logprobs
                        .iter()
                        .any(|lp| !lp.is_finite() || *lp > 0.0)
                    {
                        return Err(GatewayError::Protocol(
                            "token logprobs must be finite and non-positive".into(),
                        ));
                    }
                    let context_concat: Vec<&str> = req
                        .context_items
                        .iter()
                        .map(|i| i.payload.as_str())
                        .collect();
                    let record = ScoreRecord {
                        model_tag: req.model_tag,
                        context_id: format!("ctx-{}", digest16(&context_concat)),
                        response_id: format!("resp-{}", digest16(&[req.response.as_str()])),
                        sum_logprob: parsed.token_logprobs.iter().sum(),
                        token_count: parsed.token_logprobs.len() as u64,
                        context_frames: frame_count(&req.context_items),
                        token_logprobs: parsed.token_logprobs,
                    };
                    record
                        .validate()
                        .map_err(|e| GatewayError::Protocol(e.to_string()))?;
                    Ok(record)
                }
                Err((err, attempts)) => {
                    self.write_log("/v1/score", &digest, attempts, started, false);
                    Err(err)
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ContextItem;
    use crate::types::ModelTag;
    use std::io::{BufRead, BufReader, Read, Write as IoWrite};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// One canned reply: status line fragment plus body.
    #[derive(Clone)]
    struct Reply {
        status: &'static str,
        body: String,
    }

    fn ok(body: &str) -> Reply {
        Reply {
            status: "200 OK",
            body: body.to_string(),
        }
    }

    fn failure(status: &'static str) -> Reply {
        Reply {
            status,
            body: "{}".to_string(),
        }
    }

    /// Serves the reply sequence on a local port, repeating the last reply
    /// once the list runs out. Counts connections served.
    fn stub_server(replies: Vec<Reply>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let served = Arc::clone(&count);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let idx = served.fetch_add(1, Ordering::SeqCst);
                let reply = replies
                    .get(idx)
                    .or_else(|| replies.last())
                    .cloned()
                    .unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line
                        .to_ascii_lowercase()
                        .strip_prefix("content-length:")
                        .map(|v| v.trim().to_string())
                    {
                        content_length = v.parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut body);
                let response = format!(
                    "HTTP/1.1 {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.status,
                    reply.body.len(),
                    reply.body
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        (format!("http://{addr}"), count)
    }

    fn gateway(base_url: String, max_retries: u32) -> HttpGateway {
        HttpGateway::new(HttpGatewayConfig {
            base_url,
            auth_token: None,
            policy: GatewayPolicy {
                max_concurrent: 2,
                timeout_ms: 5_000,
                max_retries,
                backoff_base_ms: 1,
            },
            log_path: None,
        })
        .unwrap()
    }

    fn generate_request() -> GenerateRequest {
        GenerateRequest {
            prompt: "TASK: anchor_qa\nAsk about the clip.".into(),
            context_items: vec![ContextItem::caption("a dog chases a ball")],
            max_tokens: 32,
            seed: 1,
        }
    }

    #[test]
    fn recovers_from_transient_server_errors() {
        let (url, count) = stub_server(vec![
            failure("500 Internal Server Error"),
            failure("503 Service Unavailable"),
            ok(r#"{"text": "QUESTION: what? ANSWER: that."}"#),
        ]);
        let gw = gateway(url, 3);
        let text = gw.generate(&generate_request()).unwrap();
        assert!(text.starts_with("QUESTION"));
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let (url, count) = stub_server(vec![failure("500 Internal Server Error")]);
        let gw = gateway(url, 2);
        let err = gw.generate(&generate_request()).unwrap_err();
        match err {
            GatewayError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, count) = stub_server(vec![failure("400 Bad Request")]);
        let gw = gateway(url, 5);
        let err = gw.generate(&generate_request()).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)), "got {err}");
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_bodies_are_not_retried() {
        let (url, count) = stub_server(vec![Reply {
            status: "200 OK",
            body: "this is not json".into(),
        }]);
        let gw = gateway(url, 5);
        let err = gw.generate(&generate_request()).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)), "got {err}");
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn score_builds_a_valid_record() {
        let (url, _count) = stub_server(vec![ok(r#"{"token_logprobs": [-0.5, -0.25, -1.0]}"#)]);
        let gw = gateway(url, 0);
        let record = gw
            .score(&ScoreRequest {
                context_items: vec![
                    ContextItem::caption("the query"),
                    ContextItem::frame("clip-a#f0"),
                ],
                response: "some answer".into(),
                model_tag: ModelTag::Policy,
            })
            .unwrap();
        assert_eq!(record.token_count, 3);
        assert_eq!(record.context_frames, 1);
        assert!((record.sum_logprob + 1.75).abs() < 1e-12);
    }

    #[test]
    fn positive_logprobs_are_a_protocol_error() {
        let (url, _count) = stub_server(vec![ok(r#"{"token_logprobs": [-0.5, 0.25]}"#)]);
        let gw = gateway(url, 0);
        let err = gw
            .score(&ScoreRequest {
                context_items: vec![ContextItem::frame("clip-a#f0")],
                response: "some answer".into(),
                model_tag: ModelTag::Policy,
            })
            .unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)), "got {err}");
    }
}
