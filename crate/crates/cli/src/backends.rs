//! Reasoning backends the CLI can construct: a scripted one replaying a
//! response file, and an OpenAI-compatible HTTP one.

use std::collections::BTreeMap;

use memesense::pipeline::{BackendFactory, PipelineError, ReasonerSettings};
use memesense::reasoner::{BackendError, BackendRequest, ReasoningBackend, ScriptedBackend};

pub struct CliBackendFactory;

impl BackendFactory for CliBackendFactory {
    fn create(
        &self,
        settings: &ReasonerSettings,
    ) -> Result<Box<dyn ReasoningBackend>, PipelineError> {
        match settings.backend.as_str() {
            "scripted" => {
                let path = settings.script.as_ref().ok_or_else(|| {
                    PipelineError::ConfigInvalid(
                        "scripted backend needs reasoner.script, a JSON map of meme id to output"
                            .to_string(),
                    )
                })?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    PipelineError::ConfigInvalid(format!(
                        "cannot read script {}: {e}",
                        path.display()
                    ))
                })?;
                let responses: BTreeMap<String, String> = serde_json::from_str(&text)
                    .map_err(|e| {
                        PipelineError::ConfigInvalid(format!(
                            "bad script file {}: {e}",
                            path.display()
                        ))
                    })?;
                Ok(Box::new(ScriptedBackend::new(
                    "scripted_file",
                    responses.iter().map(|(k, v)| (k.as_str(), v.as_str())),
                )))
            }
            "http" => {
                let endpoint = settings.endpoint.clone().ok_or_else(|| {
                    PipelineError::ConfigInvalid(
                        "http backend needs reasoner.endpoint".to_string(),
                    )
                })?;
                let model = settings.model.clone().ok_or_else(|| {
                    PipelineError::ConfigInvalid("http backend needs reasoner.model".to_string())
                })?;
                Ok(Box::new(HttpBackend {
                    id: format!("http:{model}"),
                    endpoint,
                    model,
                    api_key_env: settings.api_key_env.clone(),
                }))
            }
            other => Err(PipelineError::ConfigInvalid(format!(
                "unknown reasoner backend {other:?} (expected \"scripted\" or \"http\")"
            ))),
        }
    }
}

/// Chat-completions style backend. The request carries the prompt as one
/// user message, with the image reference attached as an image part when
/// present. The credential is read from the configured environment
/// variable per request and appears only in the authorization header.
pub struct HttpBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key_env: Option<String>,
}

impl ReasoningBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let mut content = vec![serde_json::json!({
            "type": "text",
            "text": request.prompt_text,
        })];
        if let Some(image) = &request.image_ref {
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": image},
            }));
        }
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
        });

        let agent = ureq::AgentBuilder::new().timeout(request.timeout).build();
        let mut call = agent
            .post(&self.endpoint)
            .set("content-type", "application/json");
        if let Some(var) = &self.api_key_env {
            if let Ok(key) = std::env::var(var) {
                if !key.is_empty() {
                    call = call.set("authorization", &format!("Bearer {key}"));
                }
            }
        }
        let response = match call.send_string(&body.to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let message = format!("http {code}: {}", truncate(&detail));
                // Rate limits and server faults are worth another attempt;
                // anything else in the 4xx range is a bad request.
                return Err(if code == 429 || code >= 500 {
                    BackendError::Transport(message)
                } else {
                    BackendError::Rejected(message)
                });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(BackendError::Transport(t.to_string()));
            }
        };
        let text = response
            .into_string()
            .map_err(|e| BackendError::Transport(format!("reading response body: {e}")))?;
        extract_content(&text)
    }
}

fn truncate(s: &str) -> String {
    const LIMIT: usize = 200;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let cut = s
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}...", &s[..cut])
    }
}

fn extract_content(raw: &str) -> Result<String, BackendError> {
    let value: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| BackendError::Transport(format!("response is not json: {e}")))?;
    match &value["choices"][0]["message"]["content"] {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::Rejected(format!(
            "response has no message content: {}",
            truncate(raw)
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::time::Duration;

    fn http_response(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    /// Serves exactly one request, replying with `response`, and returns
    /// the raw request text for inspection.
    fn serve_once(response: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = stream.read(&mut buf).unwrap();
                raw.extend_from_slice(&buf[..n]);
                if let Some(header_end) = find_blank_line(&raw) {
                    let headers = String::from_utf8_lossy(&raw[..header_end]).to_string();
                    let need = content_length(&headers);
                    if raw.len() >= header_end + 4 + need {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&raw).to_string()
        });
        (endpoint, handle)
    }

    fn find_blank_line(raw: &[u8]) -> Option<usize> {
        raw.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn content_length(headers: &str) -> usize {
        headers
            .lines()
            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(str::to_string))
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    fn request(timeout: Duration) -> BackendRequest {
        BackendRequest {
            meme_id: "m1".to_string(),
            prompt_text: "describe the meme".to_string(),
            image_ref: Some("https://example.test/meme.png".to_string()),
            timeout,
        }
    }

    #[test]
    fn http_backend_extracts_message_content() {
        let body = serde_json::json!({
            "choices": [{"message": {"content": "Cause-Effect:\nA leads to B."}}]
        })
        .to_string();
        let (endpoint, server) = serve_once(http_response("200 OK", &body));
        let backend = HttpBackend {
            id: "http:test".to_string(),
            endpoint,
            model: "test".to_string(),
            api_key_env: Some("BACKEND_KEY_CONTENT_TEST".to_string()),
        };
        std::env::set_var("BACKEND_KEY_CONTENT_TEST", "sk-secret-123");
        let out = backend.complete(&request(Duration::from_secs(5))).unwrap();
        assert_eq!(out, "Cause-Effect:\nA leads to B.");

        let raw = server.join().unwrap();
        // The prompt, image, and credential all made it into the request.
        assert!(raw.contains("describe the meme"));
        assert!(raw.contains("https://example.test/meme.png"));
        assert!(raw.contains("authorization: Bearer sk-secret-123"));
        assert!(raw.contains("\"model\":\"test\""));
    }

    #[test]
    fn http_backend_maps_client_errors_to_rejections() {
        let (endpoint, server) = serve_once(http_response(
            "400 Bad Request",
            "{\"error\":\"bad prompt\"}",
        ));
        let backend = HttpBackend {
            id: "http:test".to_string(),
            endpoint,
            model: "test".to_string(),
            api_key_env: None,
        };
        let err = backend.complete(&request(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, BackendError::Rejected(_)), "{err}");
        assert!(!err.is_retryable());
        server.join().unwrap();
    }

    #[test]
    fn http_backend_maps_server_errors_to_retryable_transport() {
        let (endpoint, server) = serve_once(http_response("500 Internal Server Error", "{}"));
        let backend = HttpBackend {
            id: "http:test".to_string(),
            endpoint,
            model: "test".to_string(),
            api_key_env: None,
        };
        let err = backend.complete(&request(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, BackendError::Transport(_)), "{err}");
        assert!(err.is_retryable());
        server.join().unwrap();
    }

    #[test]
    fn content_parts_are_joined() {
        let raw = serde_json::json!({
            "choices": [{"message": {"content": [
                {"type": "text", "text": "part one "},
                {"type": "text", "text": "part two"}
            ]}}]
        })
        .to_string();
        assert_eq!(extract_content(&raw).unwrap(), "part one part two");
    }

    #[test]
    fn scripted_factory_replays_file_responses() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("script.json");
        std::fs::write(&script, "{\"m1\": \"output one\"}").unwrap();
        let settings = ReasonerSettings {
            script: Some(script),
            ..ReasonerSettings::default()
        };
        let backend = CliBackendFactory.create(&settings).unwrap();
        let out = backend
            .complete(&BackendRequest {
                meme_id: "m1".to_string(),
                prompt_text: String::new(),
                image_ref: None,
                timeout: Duration::from_secs(1),
            })
            .unwrap();
        assert_eq!(out, "output one");
    }

    #[test]
    fn unknown_backend_kind_is_config_error() {
        let settings = ReasonerSettings {
            backend: "telepathy".to_string(),
            ..ReasonerSettings::default()
        };
        match CliBackendFactory.create(&settings) {
            Err(PipelineError::ConfigInvalid(msg)) => assert!(msg.contains("telepathy")),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("telepathy backend was accepted"),
        }
    }
}
