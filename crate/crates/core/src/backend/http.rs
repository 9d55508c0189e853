//! OpenAI-compatible chat-completions client.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, BackendResponse, CacheInfo, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Endpoint root; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_attempts: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_s: f64,
    pub temperature: f64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "SPEAR_API_KEY".into(),
            timeout_s: 60.0,
            max_attempts: 3,
            backoff_s: 0.5,
            temperature: 0.0,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("cfg", &self.cfg).finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        if cfg.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        if !(cfg.timeout_s.is_finite() && cfg.timeout_s > 0.0) {
            return Err(BackendError::Config("timeout_s must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(HttpBackend { cfg, agent, api_key })
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}: {}", snippet(&text))));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(BackendError::Protocol(format!("HTTP {status}: {}", snippet(&text)))));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(BackendError::Protocol(format!("invalid JSON: {e}"))))
    }
}

fn snippet(s: &str) -> &str {
    let end = s.char_indices().nth(200).map(|(i, _)| i).unwrap_or(s.len());
    &s[..end]
}

/// `exp(mean token logprob)`, when the provider returned logprobs.
fn confidence_from_logprobs(choice: &Value) -> Option<f64> {
    let content = choice.pointer("/logprobs/content")?.as_array()?;
    let lps: Vec<f64> = content.iter().filter_map(|t| t.get("logprob")?.as_f64()).collect();
    if lps.is_empty() {
        return None;
    }
    Some((lps.iter().sum::<f64>() / lps.len() as f64).exp().clamp(0.0, 1.0))
}

fn parse_completion(v: &Value, cache: CacheInfo) -> Result<(String, f64, Usage), BackendError> {
    let choice = v.pointer("/choices/0").ok_or_else(|| BackendError::Protocol("no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))?
        .to_string();
    let confidence = confidence_from_logprobs(choice).unwrap_or_else(|| {
        log::warn!("provider returned no logprobs; confidence defaults to 0.5");
        0.5
    });
    let num = |p: &str| v.pointer(p).and_then(Value::as_u64);
    let prompt_tokens = num("/usage/prompt_tokens").unwrap_or(cache.prompt_tokens as u64);
    let usage = Usage {
        prompt_tokens,
        cached_prefix_tokens: num("/usage/prompt_tokens_details/cached_tokens")
            .unwrap_or(cache.cached_tokens as u64)
            .min(prompt_tokens),
        completion_tokens: num("/usage/completion_tokens").unwrap_or(0),
    };
    Ok((text, confidence, usage))
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &BackendRequest, cache: CacheInfo) -> Result<BackendResponse, BackendError> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": self.cfg.temperature,
            "logprobs": true,
        });
        if let Some(max) = req.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            match self.attempt(&body) {
                Ok(v) => {
                    let (text, confidence, usage) = parse_completion(&v, cache)?;
                    return Ok(BackendResponse { text, confidence, usage, latency_s: start.elapsed().as_secs_f64() });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("request '{}' attempt {attempt} failed: {msg}", req.label);
                    last = msg;
                    if attempt < self.cfg.max_attempts {
                        let delay = self.cfg.backoff_s * 2f64.powi(attempt as i32 - 1);
                        std::thread::sleep(Duration::from_secs_f64(delay));
                    }
                }
            }
        }
        Err(BackendError::Transport { attempts: self.cfg.max_attempts, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the given (status, body) pairs in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn cfg(base_url: String) -> HttpConfig {
        HttpConfig { base_url, backoff_s: 0.01, api_key_env: "SPEAR_TEST_NO_KEY".into(), ..Default::default() }
    }

    const OK: &str = r#"{"choices":[{"message":{"content":"hi"},"logprobs":{"content":[{"logprob":0.0},{"logprob":-0.2}]}}],
        "usage":{"prompt_tokens":10,"completion_tokens":2,"prompt_tokens_details":{"cached_tokens":4}}}"#;

    #[test]
    fn parses_completion_and_usage() {
        let (url, seen) = serve(vec![(200, OK.into())]);
        let b = HttpBackend::new(cfg(url)).unwrap();
        let r = b.complete(&BackendRequest::new("g", "hello"), CacheInfo { prompt_tokens: 1, cached_tokens: 0 }).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.usage, Usage { prompt_tokens: 10, cached_prefix_tokens: 4, completion_tokens: 2 });
        assert!((r.confidence - (-0.1f64).exp()).abs() < 1e-9);
        let sent: Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["messages"][0]["content"], "hello");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![(503, "{}".into()), (200, OK.into())]);
        let b = HttpBackend::new(cfg(url)).unwrap();
        assert!(b.complete(&BackendRequest::new("g", "x"), CacheInfo { prompt_tokens: 1, cached_tokens: 0 }).is_ok());
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (url, _) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let b = HttpBackend::new(cfg(url)).unwrap();
        let e = b.complete(&BackendRequest::new("g", "x"), CacheInfo { prompt_tokens: 1, cached_tokens: 0 }).unwrap_err();
        assert!(matches!(e, BackendError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn missing_logprobs_default_confidence() {
        let body = r#"{"choices":[{"message":{"content":"ok"}}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let b = HttpBackend::new(cfg(url)).unwrap();
        let r = b.complete(&BackendRequest::new("g", "a b"), CacheInfo { prompt_tokens: 2, cached_tokens: 1 }).unwrap();
        assert_eq!(r.confidence, 0.5);
        assert_eq!(r.usage.cached_prefix_tokens, 1);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let b = HttpBackend::new(cfg(url)).unwrap();
        let e = b.complete(&BackendRequest::new("g", "x"), CacheInfo { prompt_tokens: 1, cached_tokens: 0 }).unwrap_err();
        assert!(matches!(e, BackendError::Protocol(_)));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}
