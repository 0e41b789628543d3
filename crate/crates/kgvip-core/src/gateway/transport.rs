//! Wire transports behind the gateway.
//!
//! The live transport speaks a chat-completions-style protocol for chat,
//! vision-chat, and judge roles, and a `{modality, payload} -> {dim, values}`
//! protocol for the embedding roles. Every model named in the endpoint
//! config is expected to be servable behind these two shapes.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{EndpointRole, GatewayError, MediaPayload, ModelRequest};

/// A synchronous wire transport. Implementations must be thread-safe.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ModelRequest) -> Result<String, GatewayError>;
}

/// Endpoint URLs per role plus credentials.
#[derive(Debug, Clone, Default)]
pub struct EndpointConfig {
    pub endpoints: BTreeMap<EndpointRole, String>,
    pub api_key: Option<String>,
}

impl EndpointConfig {
    pub fn endpoint(&self, role: EndpointRole) -> Result<&str, GatewayError> {
        self.endpoints
            .get(&role)
            .map(String::as_str)
            .ok_or(GatewayError::EndpointNotConfigured { role })
    }
}

/// HTTP transport over the configured endpoints.
pub struct HttpTransport {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: EndpointConfig) -> Self {
        HttpTransport {
            config,
            agent: ureq::Agent::new_with_defaults(),
        }
    }

    fn post(&self, url: &str, body: Value) -> Result<String, GatewayError> {
        let mut request = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| GatewayError::Transport {
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::HttpStatus { status });
        }
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport {
                message: e.to_string(),
            })
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            TABLE[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            TABLE[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

impl Transport for HttpTransport {
    fn send(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        let url = self.config.endpoint(request.role)?;
        match request.role {
            EndpointRole::TextEmbed | EndpointRole::ImageEmbed => {
                let payload = match request.media.first() {
                    Some(part) => match &part.payload {
                        MediaPayload::Bytes(bytes) => base64_encode(bytes),
                        MediaPayload::Uri(uri) => uri.clone(),
                    },
                    None => request.prompt.clone(),
                };
                let modality = if request.role == EndpointRole::TextEmbed {
                    "text"
                } else {
                    "image"
                };
                self.post(url, json!({ "modality": modality, "payload": payload }))
            }
            EndpointRole::Chat | EndpointRole::VisionChat | EndpointRole::Judge => {
                let mut content = vec![json!({ "type": "text", "text": request.prompt })];
                for part in &request.media {
                    let url_value = match &part.payload {
                        MediaPayload::Bytes(bytes) => {
                            format!("data:image/png;base64,{}", base64_encode(bytes))
                        }
                        MediaPayload::Uri(uri) => uri.clone(),
                    };
                    content.push(json!({
                        "type": "image_url",
                        "image_url": { "url": url_value }
                    }));
                }
                let body = json!({
                    "messages": [{ "role": "user", "content": content }],
                    "temperature": request.temperature,
                    "max_tokens": request.max_tokens,
                });
                let raw = self.post(url, body)?;
                let value: Value =
                    serde_json::from_str(&raw).map_err(|e| GatewayError::Transport {
                        message: format!("malformed completion response: {e}"),
                    })?;
                value
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| GatewayError::Transport {
                        message: "completion response missing choices[0].message.content".into(),
                    })
            }
        }
    }
}
