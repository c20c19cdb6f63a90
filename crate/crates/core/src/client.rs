//! Chat-completion plumbing shared by the curation and judge clients.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spaces out calls so that at most one starts per `min_interval`.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self { min_interval, next: Mutex::new(None) }
    }

    pub fn per_second(calls: f64) -> Self {
        Self::new(if calls > 0.0 { Duration::from_secs_f64(1.0 / calls) } else { Duration::ZERO })
    }

    /// Blocks until the caller may proceed.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = next.map_or(now, |n| n.max(now));
            *next = Some(start + self.min_interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Endpoint settings for an OpenAI-compatible chat-completions service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpoint {
    pub url: String,
    /// Sent as a bearer token when present.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: u64,
}

impl ChatEndpoint {
    /// Reads `{prefix}_ENDPOINT`, `{prefix}_API_KEY` and `{prefix}_MODEL`.
    pub fn from_env(prefix: &str, temperature: f64, max_tokens: u32, timeout_s: u64) -> Result<Self> {
        let var = |name: &str| std::env::var(format!("{prefix}_{name}")).ok().filter(|v| !v.is_empty());
        let url = var("ENDPOINT").ok_or_else(|| Error::Client(format!("{prefix}_ENDPOINT is not set")))?;
        Ok(Self {
            url,
            api_key: var("API_KEY"),
            model: var("MODEL").unwrap_or_else(|| "default".into()),
            temperature,
            max_tokens,
            timeout_s,
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: String,
}

/// Blocking chat client with a shared limiter.
pub struct ChatClient {
    endpoint: ChatEndpoint,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl ChatClient {
    pub fn new(endpoint: ChatEndpoint, limiter: RateLimiter) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_s)))
            .build()
            .new_agent();
        Self { endpoint, agent, limiter }
    }

    /// Sends one user message and returns the first choice's text.
    pub fn complete(&self, user: &str) -> Result<String> {
        self.limiter.acquire();
        let body = ChatRequest {
            model: &self.endpoint.model,
            messages: vec![ChatMessage { role: "user", content: user }],
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_tokens,
        };
        let mut req = self.agent.post(&self.endpoint.url).header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Client(e.to_string()))?;
        let reply: ChatReply = resp.body_mut().read_json().map_err(|e| Error::Client(e.to_string()))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Client("reply has no choices".into()))
    }
}

/// The first balanced `{...}` object in `text`, skipping code fences and prose around it.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_json_inside_fences() {
        let reply = "Sure.\n```json\n{\"a\": \"x}\", \"b\": {\"c\": 1}}\n```\nDone";
        assert_eq!(extract_json_object(reply), Some("{\"a\": \"x}\", \"b\": {\"c\": 1}}"));
        assert_eq!(extract_json_object("no object"), None);
        assert_eq!(extract_json_object("{\"open\": 1"), None);
    }

    #[test]
    fn limiter_spaces_calls() {
        let l = RateLimiter::new(Duration::from_millis(20));
        let t0 = Instant::now();
        for _ in 0..3 {
            l.acquire();
        }
        assert!(t0.elapsed() >= Duration::from_millis(40));
    }

    #[test]
    fn missing_endpoint_is_a_client_error() {
        let r = ChatEndpoint::from_env("LARFT_TEST_UNSET_PREFIX", 0.5, 16, 5);
        assert!(matches!(r, Err(Error::Client(_))));
    }
}
