//! Remote-provider plumbing shared by the captioning and embedding clients:
//! retry with exponential backoff, a bounded-parallel executor, and the
//! content-addressed fixture store that makes pipelines replayable offline.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::content_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_secs: 1.0,
        }
    }
}

/// Remote provider endpoint configuration. The auth token is named by env
/// var, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
}

fn default_model() -> String {
    "captioner-v1".to_string()
}

fn default_parallel() -> usize {
    4
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::Validation("max_parallel must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::Validation("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn auth_token(&self) -> Option<String> {
        self.auth_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
    }
}

// ---------------------------------------------------------------------------
// Content-addressed store (fixtures and embedding cache)
// ---------------------------------------------------------------------------

/// One JSON file per content hash under a directory.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn open(dir: &Path) -> Result<FixtureStore> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(FixtureStore {
            dir: dir.to_path_buf(),
        })
    }

    /// Content key over the concatenated parts.
    pub fn key(parts: &[&str]) -> String {
        content_hash(parts.concat().as_bytes())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).is_file()
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let path = self.path_for(key);
        if !path.is_file() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value = serde_json::from_str(&raw).map_err(|e| Error::json(&path, e))?;
        Ok(Some(value))
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let path = self.path_for(key);
        let json = serde_json::to_string(value).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

// ---------------------------------------------------------------------------
// Bounded-parallel execution
// ---------------------------------------------------------------------------

/// Run `job(i)` for `i in 0..n` on at most `max_parallel` worker threads.
/// Results come back indexed by input position, so output order never depends
/// on completion order.
pub fn run_bounded<T, F>(n: usize, max_parallel: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    assert!(max_parallel >= 1);
    let workers = max_parallel.min(n);
    if workers <= 1 {
        return (0..n).map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// HTTP with retry
// ---------------------------------------------------------------------------

pub fn http_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .expect("default client config is valid")
}

fn status_is_retryable(status: reqwest::StatusCode) -> bool {
    status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS
}

/// POST a JSON body and parse a JSON response, retrying transport failures
/// and retryable statuses with exponential backoff.
pub fn post_json_with_retry<B: Serialize, T: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    auth_token: Option<&str>,
    body: &B,
    retry: &RetryPolicy,
) -> std::result::Result<T, String> {
    let mut last_error = String::new();
    for attempt in 1..=retry.max_attempts {
        if attempt > 1 {
            let backoff = retry.base_backoff_secs * 2f64.powi(attempt as i32 - 2);
            std::thread::sleep(Duration::from_secs_f64(backoff));
        }
        let mut req = client.post(endpoint).json(body);
        if let Some(token) = auth_token {
            req = req.bearer_auth(token);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .json::<T>()
                        .map_err(|e| format!("malformed provider response: {e}"));
                }
                last_error = format!("http status {status}");
                if !status_is_retryable(status) {
                    return Err(last_error);
                }
            }
            Err(e) => {
                last_error = format!("transport: {e}");
            }
        }
    }
    Err(format!(
        "{last_error} (after {} attempts)",
        retry.max_attempts
    ))
}
