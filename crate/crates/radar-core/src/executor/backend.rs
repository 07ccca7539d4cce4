//! Agent backends: deterministic mocks for desk-scale runs and an
//! OpenAI-compatible chat-completions HTTP client.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed provider payload: {0}")]
    MalformedPayload(String),
    #[error("missing API key: set the RADAR_API_KEY environment variable")]
    MissingApiKey,
}

/// One completed backend invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Generation settings shared by real backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub max_tokens: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_tokens: 1000,
        }
    }
}

/// Capability contract every agent backend satisfies.
pub trait AgentBackend {
    fn identifier(&self) -> &str;
    fn invoke(&mut self, system_prompt: &str, user_prompt: &str)
        -> Result<BackendResponse, BackendError>;
}

/// Behavior modes for the mock backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockAgentMode {
    Echo,
    RoleScripted,
    Liar,
}

/// Deterministic in-process backend. Token counts are whitespace-token
/// counts of the prompts and the response.
#[derive(Debug, Clone, PartialEq)]
pub struct MockBackend {
    id: String,
    mode: MockAgentMode,
    /// Scripted truthful answer; liar mode falsifies it.
    script: String,
}

impl MockBackend {
    pub fn echo() -> Self {
        Self {
            id: "mock:echo".to_string(),
            mode: MockAgentMode::Echo,
            script: String::new(),
        }
    }

    pub fn scripted(answer: impl Into<String>) -> Self {
        Self {
            id: "mock:role_scripted".to_string(),
            mode: MockAgentMode::RoleScripted,
            script: answer.into(),
        }
    }

    pub fn liar(truth: impl Into<String>) -> Self {
        Self {
            id: "mock:liar".to_string(),
            mode: MockAgentMode::Liar,
            script: truth.into(),
        }
    }

    pub fn mode(&self) -> MockAgentMode {
        self.mode
    }

    /// Converts a scripted backend into its liar counterpart in place.
    pub fn make_liar(&mut self) {
        self.mode = MockAgentMode::Liar;
        self.id = "mock:liar".to_string();
    }

    fn respond(&self, user_prompt: &str) -> String {
        match self.mode {
            MockAgentMode::Echo => user_prompt.to_string(),
            MockAgentMode::RoleScripted => self.script.clone(),
            // The inversion contract: never emit the scripted truth.
            MockAgentMode::Liar => format!("NOT {}", self.script),
        }
    }
}

pub(crate) fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl AgentBackend for MockBackend {
    fn identifier(&self) -> &str {
        &self.id
    }

    fn invoke(
        &mut self,
        system_prompt: &str,
        user_prompt: &str,
    ) -> Result<BackendResponse, BackendError> {
        let text = self.respond(user_prompt);
        Ok(BackendResponse {
            prompt_tokens: whitespace_tokens(system_prompt) + whitespace_tokens(user_prompt),
            completion_tokens: whitespace_tokens(&text),
            text,
        })
    }
}

/// Request body for the chat-completions wire protocol.
pub(crate) fn build_chat_request(
    model: &str,
    system_prompt: &str,
    user_prompt: &str,
    settings: GenerationSettings,
) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "messages": [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": user_prompt},
        ],
        "temperature": settings.temperature,
        "max_tokens": settings.max_tokens,
    })
}

/// Pulls the first choice's content and usage counters out of a
/// chat-completions response body.
pub(crate) fn parse_chat_response(body: &serde_json::Value) -> Result<BackendResponse, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            BackendError::MalformedPayload("missing choices[0].message.content".to_string())
        })?
        .to_string();
    let prompt_tokens = body
        .pointer("/usage/prompt_tokens")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let completion_tokens = body
        .pointer("/usage/completion_tokens")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    Ok(BackendResponse {
        text,
        prompt_tokens,
        completion_tokens,
    })
}

/// OpenAI-compatible HTTP backend: one POST to
/// `{base_url}/v1/chat/completions` per invocation, bearer token from the
/// `RADAR_API_KEY` environment variable, bounded retries with exponential
/// backoff on transport failures.
pub struct HttpBackend {
    id: String,
    base_url: String,
    model: String,
    api_key: String,
    pub settings: GenerationSettings,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl HttpBackend {
    pub fn new(base_url: &str, model: &str) -> Result<Self, BackendError> {
        let api_key = std::env::var("RADAR_API_KEY").map_err(|_| BackendError::MissingApiKey)?;
        Ok(Self {
            id: format!("http:{model}"),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            settings: GenerationSettings::default(),
            max_retries: 3,
            backoff_ms: 250,
        })
    }

    fn post_once(&self, payload: &serde_json::Value) -> Result<serde_json::Value, String> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let mut resp = ureq::post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(payload)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_json().map_err(|e| e.to_string())
    }
}

impl AgentBackend for HttpBackend {
    fn identifier(&self) -> &str {
        &self.id
    }

    fn invoke(
        &mut self,
        system_prompt: &str,
        user_prompt: &str,
    ) -> Result<BackendResponse, BackendError> {
        let payload = build_chat_request(&self.model, system_prompt, user_prompt, self.settings);
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            match self.post_once(&payload) {
                Ok(body) => return parse_chat_response(&body),
                Err(e) => {
                    last_err = e;
                    if attempt < self.max_retries {
                        std::thread::sleep(std::time::Duration::from_millis(
                            self.backoff_ms << attempt,
                        ));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts: self.max_retries + 1,
            message: last_err,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_mock_returns_user_prompt() {
        let mut b = MockBackend::echo();
        let r = b.invoke("Role: Solver.", "2+2?").unwrap();
        assert_eq!(r.text, "2+2?");
        assert_eq!(r.completion_tokens, 1);
        assert_eq!(r.prompt_tokens, 2 + 1);
    }

    #[test]
    fn liar_mock_never_tells_the_truth() {
        let mut b = MockBackend::liar("4");
        let r = b.invoke("sys", "what is 2+2?").unwrap();
        assert_ne!(r.text, "4");
    }

    #[test]
    fn scripted_mock_is_deterministic() {
        let mut b = MockBackend::scripted("the answer is 4");
        let r1 = b.invoke("sys", "q").unwrap();
        let r2 = b.invoke("sys", "another q entirely").unwrap();
        assert_eq!(r1.text, "the answer is 4");
        assert_eq!(r1.text, r2.text);
    }

    #[test]
    fn chat_request_carries_settings_and_messages() {
        let req = build_chat_request("m1", "sys", "usr", GenerationSettings::default());
        assert_eq!(req["model"], "m1");
        assert_eq!(req["temperature"], 0.2);
        assert_eq!(req["max_tokens"], 1000);
        assert_eq!(req["messages"][0]["role"], "system");
        assert_eq!(req["messages"][0]["content"], "sys");
        assert_eq!(req["messages"][1]["role"], "user");
        assert_eq!(req["messages"][1]["content"], "usr");
    }

    // Environment mutation and the loopback exchange share one test so the
    // RADAR_API_KEY variable is never touched concurrently.
    #[test]
    fn http_backend_key_retries_and_loopback_round_trip() {
        use std::io::{Read, Write};

        std::env::remove_var("RADAR_API_KEY");
        assert!(matches!(
            HttpBackend::new("http://127.0.0.1:1", "m"),
            Err(BackendError::MissingApiKey)
        ));
        std::env::set_var("RADAR_API_KEY", "test-key");
        // Port 1 refuses connections immediately; all attempts must burn
        // before the transport error surfaces.
        let mut backend = HttpBackend::new("http://127.0.0.1:1", "m").unwrap();
        backend.max_retries = 2;
        backend.backoff_ms = 1;
        match backend.invoke("sys", "user") {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport failure, got {other:?}"),
        }

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut read = 0;
            // Read until the JSON body closes; requests here are small.
            loop {
                let n = stream.read(&mut buf[read..]).unwrap();
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]);
                if text.contains("max_tokens") && text.ends_with('}') {
                    break;
                }
                if n == 0 {
                    break;
                }
            }
            let request = String::from_utf8_lossy(&buf[..read]).to_string();
            let body = serde_json::json!({
                "choices": [{"message": {"content": "loopback says 4"}}],
                "usage": {"prompt_tokens": 21, "completion_tokens": 5}
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });

        let mut backend = HttpBackend::new(&format!("http://{addr}"), "test-model").unwrap();
        let result = backend.invoke("be factual", "what is 2+2?").unwrap();
        assert_eq!(result.text, "loopback says 4");
        assert_eq!(result.prompt_tokens, 21);
        assert_eq!(result.completion_tokens, 5);

        let request = server.join().unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.contains("Bearer test-key") || request.contains("bearer test-key"));
        assert!(request.contains("\"temperature\": 0.2"));
        assert!(request.contains("\"max_tokens\": 1000"));
        assert!(request.contains("what is 2+2?"));
    }

    #[test]
    fn chat_response_parsing() {
        let body = serde_json::json!({
            "choices": [{"message": {"content": "hello"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        });
        let r = parse_chat_response(&body).unwrap();
        assert_eq!(r.text, "hello");
        assert_eq!(r.prompt_tokens, 12);
        assert_eq!(r.completion_tokens, 3);

        let bad = serde_json::json!({"choices": []});
        assert!(matches!(
            parse_chat_response(&bad),
            Err(BackendError::MalformedPayload(_))
        ));
    }
}
