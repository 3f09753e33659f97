use std::time::Duration;

use serde_json::{json, Value};

use super::{CompletionProvider, CompletionRequest, LlmError};

/// OpenAI-compatible `chat/completions` client.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(format!("http client: {e}")))?;
        Ok(HttpProvider {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
        })
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if !req.stop.is_empty() {
            // the API accepts at most four stop sequences
            body["stop"] = json!(req.stop.iter().take(4).collect::<Vec<_>>());
        }
        body
    }
}

fn retryable_status(status: reqwest::StatusCode) -> bool {
    status == reqwest::StatusCode::TOO_MANY_REQUESTS
        || status == reqwest::StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
}

impl CompletionProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        let mut call = self.client.post(&self.endpoint).json(&self.body(req));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| LlmError::Provider {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(LlmError::Provider {
                message: format!("{status}: {}", text.chars().take(500).collect::<String>()),
                retryable: retryable_status(status),
            });
        }
        let value: Value = resp.json().map_err(|e| LlmError::Provider {
            message: format!("malformed response: {e}"),
            retryable: false,
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Provider {
                message: format!("response without message content: {value}"),
                retryable: false,
            })
    }
}
