//! Completion gateway: one interface over the offline mock, the replay cache
//! and a live OpenAI-compatible endpoint, with caching, retries and rate
//! limiting.

mod cache;
mod http;
mod limiter;
mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, prompt_hash, ResponseCache};
pub use http::HttpProvider;
pub use limiter::{Clock, FakeClock, RateLimiter, SystemClock, WINDOW};
pub use mock::{MockProvider, ECHO_PREFIX};

use crate::corpus::DatabaseSchema;
use crate::prompt::{render_prompt, DemonstrationPlan, PromptError, COMPLETION_STEM};
use crate::sql::normalize;

pub const SQL_STOPS: [&str; 3] = [";", "Question:", "--"];

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("provider error: {message}")]
    Provider { message: String, retryable: bool },
    #[error("no cached response for request {hash}")]
    CacheMiss { hash: String },
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub stop: Vec<String>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, stop: Vec<String>, max_tokens: u32, temperature: f64) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            stop,
            max_tokens,
            temperature,
        }
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub trait CompletionProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError>;
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub provider: ProviderKind,
    pub cache_dir: Option<PathBuf>,
    /// Requests per minute.
    pub rate_limit: u32,
    pub retries: u32,
    pub model: String,
    pub base_url: String,
    pub api_key_env: String,
    pub max_tokens: u32,
    pub request_timeout_secs: u64,
    /// JSON object mapping prompt SHA-256 hex to a canned mock response.
    pub mock_responses: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            provider: ProviderKind::Mock,
            cache_dir: None,
            rate_limit: 60,
            retries: 3,
            model: "mock".into(),
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_tokens: 256,
            request_timeout_secs: 120,
            mock_responses: None,
        }
    }
}

impl GatewayConfig {
    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.cache_dir, &mut self.mock_responses].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CallCounts {
    /// Calls to [`Gateway::complete`].
    pub requests: u64,
    /// Requests that reached the provider (cache misses, including retries).
    pub backend_calls: u64,
    pub cache_hits: u64,
}

pub struct Gateway {
    provider: Option<Arc<dyn CompletionProvider>>,
    model_id: String,
    cache: ResponseCache,
    limiter: Option<RateLimiter>,
    retries: u32,
    clock: Arc<dyn Clock>,
    requests: AtomicU64,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

const BACKOFF_BASE: Duration = Duration::from_millis(500);
const BACKOFF_CAP: Duration = Duration::from_secs(30);

impl Gateway {
    /// Gateway over `provider` with an in-memory cache and no rate limit.
    pub fn new(provider: Arc<dyn CompletionProvider>) -> Self {
        Gateway {
            model_id: provider.model_id().to_string(),
            provider: Some(provider),
            cache: ResponseCache::in_memory(),
            limiter: None,
            retries: 0,
            clock: Arc::new(SystemClock::new()),
            requests: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Gateway that only answers from `cache`.
    pub fn replay(cache: ResponseCache, model_id: &str) -> Self {
        Gateway {
            provider: None,
            model_id: model_id.to_string(),
            cache,
            limiter: None,
            retries: 0,
            clock: Arc::new(SystemClock::new()),
            requests: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_rate_limit(mut self, per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::new(per_minute));
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, LlmError> {
        let cache = match &cfg.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir)?,
            None => ResponseCache::in_memory(),
        };
        let gateway = match cfg.provider {
            ProviderKind::Mock => {
                let mut mock = MockProvider::new();
                if let Some(path) = &cfg.mock_responses {
                    let text = std::fs::read_to_string(path).map_err(|e| {
                        LlmError::Config(format!("mock responses {}: {e}", path.display()))
                    })?;
                    let table = serde_json::from_str(&text).map_err(|e| {
                        LlmError::Config(format!("mock responses {}: {e}", path.display()))
                    })?;
                    mock = mock.with_table(table);
                }
                Gateway::new(Arc::new(mock)).with_cache(cache)
            }
            ProviderKind::Replay => {
                if cfg.cache_dir.is_none() {
                    return Err(LlmError::Config("replay provider needs llm.cache_dir".into()));
                }
                Gateway::replay(cache, &cfg.model)
            }
            ProviderKind::Http => {
                if cfg.rate_limit == 0 {
                    return Err(LlmError::Config("llm.rate_limit must be positive".into()));
                }
                let api_key = std::env::var(&cfg.api_key_env).ok();
                if api_key.is_none() {
                    log::warn!("{} is not set; calling {} without a key", cfg.api_key_env, cfg.base_url);
                }
                let http = HttpProvider::new(
                    &cfg.base_url,
                    &cfg.model,
                    api_key,
                    Duration::from_secs(cfg.request_timeout_secs),
                )?;
                Gateway::new(Arc::new(http))
                    .with_cache(cache)
                    .with_rate_limit(cfg.rate_limit)
            }
        };
        Ok(gateway.with_retries(cfg.retries))
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            requests: self.requests.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Continuation for `req`, cut at the first stop sequence.
    pub fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        req.validate()?;
        let key = cache_key(req, &self.model_id);
        if let Some(hit) = self.cache.get(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let Some(provider) = &self.provider else {
            return Err(LlmError::CacheMiss { hash: key });
        };
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match provider.complete(req) {
                Ok(text) => {
                    let text = truncate_at_stop(&text, &req.stop);
                    self.cache.put(&key, req, &self.model_id, &text)?;
                    return Ok(text);
                }
                Err(LlmError::Provider {
                    message,
                    retryable: true,
                }) if attempt < self.retries => {
                    let delay = BACKOFF_BASE
                        .saturating_mul(1 << attempt.min(16))
                        .min(BACKOFF_CAP);
                    log::warn!("provider error (attempt {}): {message}; retrying in {delay:?}", attempt + 1);
                    self.clock.sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Turns a continuation of the `select` stem into a full, normalized query.
/// Empty or unlexable output degrades to `select`.
pub fn sql_from_continuation(continuation: &str) -> String {
    let body = continuation.trim();
    if body.is_empty() {
        return COMPLETION_STEM.to_string();
    }
    let starts_with_stem = body
        .get(..COMPLETION_STEM.len())
        .is_some_and(|p| p.eq_ignore_ascii_case(COMPLETION_STEM))
        && !body[COMPLETION_STEM.len()..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric() || c == '_');
    let full = if starts_with_stem {
        body.to_string()
    } else {
        format!("{COMPLETION_STEM} {body}")
    };
    normalize(&full).unwrap_or_else(|_| COMPLETION_STEM.to_string())
}

/// Completes a text-to-SQL prompt ending in the `select` stem.
pub fn predict_sql(prompt: String, gateway: &Gateway, max_tokens: u32) -> Result<String, LlmError> {
    let req = CompletionRequest::new(
        prompt,
        SQL_STOPS.iter().map(|s| s.to_string()).collect(),
        max_tokens,
        0.0,
    );
    Ok(sql_from_continuation(&gateway.complete(&req)?))
}

/// Prediction with no demonstrations; the retrieval query for both
/// selection algorithms.
pub fn zero_shot_predict(
    schema: &DatabaseSchema,
    test_nlq: &str,
    gateway: &Gateway,
    with_descriptions: bool,
    max_tokens: u32,
) -> Result<String, LlmError> {
    let prompt = render_prompt(&DemonstrationPlan::zero_shot(schema, test_nlq), with_descriptions)?;
    predict_sql(prompt, gateway, max_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<String, LlmError>>>,
    }

    impl CompletionProvider for Scripted {
        fn model_id(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &CompletionRequest) -> Result<String, LlmError> {
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn transient() -> Result<String, LlmError> {
        Err(LlmError::Provider {
            message: "503".into(),
            retryable: true,
        })
    }

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest::new(prompt, vec![";".into()], 32, 0.0)
    }

    #[test]
    fn stop_sequences_truncate() {
        let stops = vec![";".into(), "Question:".into()];
        assert_eq!(truncate_at_stop(" count(*) from t; more", &stops), " count(*) from t");
        assert_eq!(truncate_at_stop(" a Question: b; c", &stops), " a ");
        assert_eq!(truncate_at_stop("plain", &stops), "plain");
    }

    #[test]
    fn cache_returns_identical_bytes_with_one_backend_call() {
        let mut mock = MockProvider::new();
        mock.insert("p", " count(*) from t; trailing");
        let gateway = Gateway::new(Arc::new(mock));
        let a = gateway.complete(&req("p")).unwrap();
        let b = gateway.complete(&req("p")).unwrap();
        assert_eq!(a, " count(*) from t");
        assert_eq!(a, b);
        let counts = gateway.counts();
        assert_eq!((counts.requests, counts.backend_calls, counts.cache_hits), (2, 1, 1));
    }

    #[test]
    fn replay_misses_name_the_hash() {
        let gateway = Gateway::replay(ResponseCache::in_memory(), "m");
        match gateway.complete(&req("p")) {
            Err(LlmError::CacheMiss { hash }) => assert_eq!(hash, cache_key(&req("p"), "m")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_serves_recorded_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut mock = MockProvider::new();
        mock.insert("p", "recorded");
        let live = Gateway::new(Arc::new(mock)).with_cache(ResponseCache::on_disk(dir.path()).unwrap());
        live.complete(&req("p")).unwrap();
        let replay = Gateway::replay(ResponseCache::on_disk(dir.path()).unwrap(), "mock");
        assert_eq!(replay.complete(&req("p")).unwrap(), "recorded");
    }

    #[test]
    fn retries_with_backoff_then_succeeds() {
        let clock = Arc::new(FakeClock::new());
        let provider = Scripted {
            replies: Mutex::new(vec![transient(), transient(), Ok("ok".into())]),
        };
        let gateway = Gateway::new(Arc::new(provider))
            .with_retries(2)
            .with_clock(clock.clone());
        assert_eq!(gateway.complete(&req("p")).unwrap(), "ok");
        assert_eq!(gateway.counts().backend_calls, 3);
        assert_eq!(clock.now(), Duration::from_millis(500 + 1000));
    }

    #[test]
    fn retry_budget_and_fatal_errors() {
        let provider = Scripted {
            replies: Mutex::new(vec![transient(), transient()]),
        };
        let gateway = Gateway::new(Arc::new(provider))
            .with_retries(1)
            .with_clock(Arc::new(FakeClock::new()));
        assert!(matches!(gateway.complete(&req("p")), Err(LlmError::Provider { .. })));
        assert_eq!(gateway.counts().backend_calls, 2);

        let provider = Scripted {
            replies: Mutex::new(vec![Err(LlmError::Provider {
                message: "401".into(),
                retryable: false,
            })]),
        };
        let gateway = Gateway::new(Arc::new(provider)).with_retries(5);
        assert!(gateway.complete(&req("p")).is_err());
        assert_eq!(gateway.counts().backend_calls, 1);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let gateway = Gateway::new(Arc::new(MockProvider::new()));
        let mut r = req("p");
        r.max_tokens = 0;
        assert!(matches!(gateway.complete(&r), Err(LlmError::InvalidRequest(_))));
        let mut r = req("p");
        r.temperature = -1.0;
        assert!(matches!(gateway.complete(&r), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn continuation_to_sql() {
        assert_eq!(sql_from_continuation(" count(*) from concert"), "select count(*) from concert");
        assert_eq!(sql_from_continuation(""), "select");
        assert_eq!(sql_from_continuation("   "), "select");
        assert_eq!(sql_from_continuation("SELECT Name FROM t"), "select name from t");
        assert_eq!(sql_from_continuation(" selection from t"), "select selection from t");
        assert_eq!(sql_from_continuation(" name from t where a = 'x"), "select");
    }

    #[test]
    fn zero_shot_with_mock_table() {
        let schema = crate::corpus::DatabaseSchema {
            db_id: "d".into(),
            tables: vec![crate::corpus::Table {
                name: "concert".into(),
                columns: vec![crate::corpus::Column {
                    name: "year".into(),
                    decl_type: "text".into(),
                    is_pk: false,
                    description: None,
                }],
                content_samples: Some(vec![vec![]]),
            }],
            foreign_keys: vec![],
        };
        let prompt = render_prompt(&DemonstrationPlan::zero_shot(&schema, "How many?"), false).unwrap();
        let mut mock = MockProvider::new();
        mock.insert(&prompt, " count(*) from concert;");
        let gateway = Gateway::new(Arc::new(mock));
        assert_eq!(
            zero_shot_predict(&schema, "How many?", &gateway, false, 64).unwrap(),
            "select count(*) from concert"
        );
        let mut empty = MockProvider::new();
        empty.insert(&prompt, "");
        let gateway = Gateway::new(Arc::new(empty));
        assert_eq!(zero_shot_predict(&schema, "How many?", &gateway, false, 64).unwrap(), "select");
    }
}
