use std::time::Duration;

use chronolm::attribution::{GenerationError, TextGenerator};
use chronolm::pipeline::EndpointConfig;
use serde_json::{json, Value};

/// Client for an OpenAI-compatible chat completions endpoint.
pub struct ChatClient {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(endpoint: &EndpointConfig) -> anyhow::Result<Self> {
        let api_key = match &endpoint.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| anyhow::anyhow!("environment variable {var} is not set"))?)
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()?;
        Ok(ChatClient {
            client,
            url: format!("{}/chat/completions", endpoint.url.trim_end_matches('/')),
            model: endpoint.model.clone(),
            temperature: endpoint.temperature,
            api_key,
        })
    }
}

fn failure(message: String, retryable: bool) -> GenerationError {
    GenerationError { message, retryable }
}

impl TextGenerator for ChatClient {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| failure(e.to_string(), true))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let text = resp.text().unwrap_or_default();
            return Err(failure(format!("HTTP {status}: {text}"), retryable));
        }
        let value: Value = resp
            .json()
            .map_err(|e| failure(format!("bad response body: {e}"), false))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| failure(format!("response has no message content: {value}"), false))
    }
}
