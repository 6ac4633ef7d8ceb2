//! Blocking JSON POST with bounded retries, shared by the remote embedding
//! and chat-completion clients.

use std::thread;
use std::time::Duration;

use log::warn;
use serde_json::Value;

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retry_limit: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_limit: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

pub(crate) fn client(timeout_s: f64) -> Result<reqwest::blocking::Client, String> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(timeout_s.max(0.001)))
        .build()
        .map_err(|e| e.to_string())
}

fn transient(status: reqwest::StatusCode) -> bool {
    status == reqwest::StatusCode::TOO_MANY_REQUESTS
        || status == reqwest::StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
}

/// POSTs `body` and parses the JSON reply. Transport errors, 408, 429 and 5xx
/// are retried with exponential backoff; other statuses fail immediately.
/// Returns the last failure message when retries run out.
pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, String> {
    let mut attempt = 0;
    loop {
        let mut req = client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let failure = match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .json::<Value>()
                        .map_err(|e| format!("malformed response body: {e}"));
                }
                let text = resp.text().unwrap_or_default();
                let msg = format!("HTTP {status}: {}", truncate(&text, 200));
                if !transient(status) {
                    return Err(msg);
                }
                msg
            }
            Err(e) => e.to_string(),
        };
        if attempt >= policy.retry_limit {
            return Err(format!(
                "gave up after {} attempts: {failure}",
                attempt + 1
            ));
        }
        let wait = policy.backoff(attempt);
        warn!("{url}: {failure}; retrying in {wait:?}");
        thread::sleep(wait);
        attempt += 1;
    }
}

pub(crate) fn truncate(s: &str, max_chars: usize) -> String {
    s.chars().take(max_chars).collect()
}
