//! Chat-completion client with an on-disk cache.
//!
//! Requests use the OpenAI-compatible `/chat/completions` wire shape. Each
//! response is stored under its cache key before it is returned, so a rerun
//! never touches the network for a prompt it has already seen, and a
//! per-key lock makes concurrent duplicates wait for the first call.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::rundir;
use crate::seed::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer key. Empty sends no key.
    pub api_key_env: String,
    pub concurrency: usize,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Minimum spacing between request starts, across all workers.
    pub min_interval_ms: u64,
    pub timeout_secs: u64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            concurrency: 8,
            max_retries: 5,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            min_interval_ms: 0,
            timeout_secs: 120,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

impl GatewayConfig {
    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        }
    }

    /// Delay before retry number `attempt` (1-based): `base · 2^(attempt−1)`,
    /// capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub cache_key: String,
}

impl CompletionRequest {
    pub fn new(model: &str, prompt: &str, temperature: f64, max_tokens: u32) -> Self {
        Self {
            model_name: model.to_owned(),
            prompt_text: prompt.to_owned(),
            temperature,
            max_tokens,
            cache_key: cache_key(model, prompt, temperature),
        }
    }
}

/// SHA-256 over the canonical JSON of `[model, prompt, temperature]`.
pub fn cache_key(model: &str, prompt: &str, temperature: f64) -> String {
    let canonical = serde_json::to_vec(&json!([model, prompt, temperature])).expect("plain JSON");
    sha256_hex(&canonical)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    pub attempt_count: u32,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: CompletionRequest,
    response: CompletionResponse,
}

/// One JSON file per cache key.
#[derive(Clone, Debug)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CompletionResponse>> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        let entry: CacheEntry = rundir::read_json(&p)?;
        Ok(Some(entry.response))
    }

    pub fn put(&self, request: &CompletionRequest, response: &CompletionResponse) -> Result<()> {
        let entry = CacheEntry {
            request: request.clone(),
            response: CompletionResponse {
                from_cache: false,
                ..response.clone()
            },
        };
        rundir::write_json(&self.path(&request.cache_key), &entry)
    }
}

#[derive(Serialize)]
struct AuditLine<'a> {
    unix_ms: u128,
    cache_key: &'a str,
    model: &'a str,
    attempt: u32,
    status: Option<u16>,
    latency_ms: u64,
    from_cache: bool,
    error: Option<String>,
}

pub struct Gateway {
    config: GatewayConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: DiskCache,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    next_start: Mutex<Instant>,
    audit: Option<Mutex<File>>,
    network_calls: AtomicU64,
}

enum Outcome {
    Done(String),
    Retry { message: String, after: Option<Duration> },
    Fatal(Error),
}

impl Gateway {
    pub fn new(config: GatewayConfig, cache_dir: &Path, audit_log: Option<&Path>) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = (!config.api_key_env.is_empty())
            .then(|| std::env::var(&config.api_key_env).ok())
            .flatten();
        let audit = match audit_log {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        Ok(Self {
            config,
            agent,
            api_key,
            cache: DiskCache::new(cache_dir),
            key_locks: Mutex::new(HashMap::new()),
            next_start: Mutex::new(Instant::now()),
            audit,
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Requests for the configured model and decoding parameters.
    pub fn request(&self, prompt: &str) -> CompletionRequest {
        CompletionRequest::new(&self.config.model, prompt, self.config.temperature, self.config.max_tokens)
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().expect("lock table poisoned");
        locks.entry(key.to_owned()).or_default().clone()
    }

    fn audit(&self, line: AuditLine<'_>) {
        if let Some(f) = &self.audit {
            let mut row = serde_json::to_vec(&line).expect("plain JSON");
            row.push(b'\n');
            let mut f = f.lock().expect("audit log poisoned");
            if let Err(e) = f.write_all(&row) {
                tracing::warn!(error = %e, "audit log write failed");
            }
        }
    }

    fn wait_for_slot(&self) {
        if self.config.min_interval_ms == 0 {
            return;
        }
        let start = {
            let mut next = self.next_start.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + Duration::from_millis(self.config.min_interval_ms);
            start
        };
        let now = Instant::now();
        if start > now {
            thread::sleep(start - now);
        }
    }

    fn send(&self, req: &CompletionRequest) -> (Outcome, Option<u16>) {
        let body = json!({
            "model": req.model_name,
            "messages": [{"role": "user", "content": req.prompt_text}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut builder = self.agent.post(&self.config.url());
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut resp = match builder.send_json(&body) {
            Ok(r) => r,
            Err(e) => {
                return (
                    Outcome::Retry {
                        message: e.to_string(),
                        after: None,
                    },
                    None,
                )
            }
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return (
                    Outcome::Retry {
                        message: e.to_string(),
                        after: None,
                    },
                    Some(status),
                )
            }
        };
        let outcome = match status {
            200..=299 => {
                let content = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v["choices"][0]["message"]["content"].as_str().map(str::to_owned));
                match content {
                    Some(c) if !c.trim().is_empty() => Outcome::Done(c),
                    _ => Outcome::Fatal(Error::EmptyCompletion),
                }
            }
            429 | 500..=599 => Outcome::Retry {
                message: format!("HTTP {status}: {text}"),
                after: retry_after,
            },
            _ => Outcome::Fatal(Error::Http { status, body: text }),
        };
        (outcome, Some(status))
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        let started = Instant::now();
        let lock = self.lock_for(&req.cache_key);
        let _guard = lock.lock().expect("key lock poisoned");
        let audit_base = |attempt, status, from_cache, error: Option<String>| AuditLine {
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            cache_key: &req.cache_key,
            model: &req.model_name,
            attempt,
            status,
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache,
            error,
        };
        if let Some(mut hit) = self.cache.get(&req.cache_key)? {
            hit.from_cache = true;
            hit.latency_ms = started.elapsed().as_millis() as u64;
            self.audit(audit_base(0, None, true, None));
            return Ok(hit);
        }
        if !self.config.api_key_env.is_empty() && self.api_key.is_none() {
            return Err(Error::MissingApiKey(self.config.api_key_env.clone()));
        }
        let max_attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            self.wait_for_slot();
            let (outcome, status) = self.send(req);
            match outcome {
                Outcome::Done(text) => {
                    let response = CompletionResponse {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        from_cache: false,
                        attempt_count: attempt,
                    };
                    self.cache.put(req, &response)?;
                    self.audit(audit_base(attempt, status, false, None));
                    return Ok(response);
                }
                Outcome::Fatal(e) => {
                    self.audit(audit_base(attempt, status, false, Some(e.to_string())));
                    return Err(e);
                }
                Outcome::Retry { message, after } => {
                    self.audit(audit_base(attempt, status, false, Some(message.clone())));
                    last = message;
                    if attempt < max_attempts {
                        let delay = self.config.backoff(attempt).max(after.unwrap_or_default());
                        tracing::debug!(attempt, ?delay, "retrying completion");
                        thread::sleep(delay);
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: max_attempts,
            message: last,
        })
    }

    /// Results in request order, with at most `concurrency` requests in
    /// flight.
    pub fn complete_batch(&self, requests: &[CompletionRequest]) -> Vec<Result<CompletionResponse>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CompletionResponse>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.concurrency.max(1).min(requests.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.complete(&requests[i]);
                    *slots[i].lock().expect("slot poisoned") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
            .collect()
    }
}
