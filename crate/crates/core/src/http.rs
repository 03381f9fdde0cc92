//! Blocking HTTP with bounded retries, shared by the chat and tool clients.

use std::thread;
use std::time::Duration;

use reqwest::blocking::{RequestBuilder, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            timeout_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(10)))
    }

    pub fn client(&self) -> reqwest::blocking::Client {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(self.timeout_ms))
            .build()
            .expect("http client builds")
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

/// Sends the request built by `build`, retrying transport failures, 429 and
/// 5xx responses with exponential backoff. Returns a successful response or
/// a description of the last failure.
pub(crate) fn send_with_retry(
    policy: &RetryPolicy,
    build: impl Fn() -> RequestBuilder,
) -> Result<Response, String> {
    let mut attempt = 0;
    loop {
        let failure = match build().send() {
            Ok(resp) if resp.status().is_success() => return Ok(resp),
            Ok(resp) => {
                let status = resp.status();
                let body = resp.text().unwrap_or_default();
                let msg = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
                if !retryable(status) {
                    return Err(msg);
                }
                msg
            }
            Err(e) => e.to_string(),
        };
        if attempt >= policy.max_retries {
            return Err(format!("{failure} (after {} attempts)", attempt + 1));
        }
        log::warn!("request failed ({failure}); retrying");
        thread::sleep(policy.delay(attempt));
        attempt += 1;
    }
}
