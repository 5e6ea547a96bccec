use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{render_prompt, ModelBackend, ModelError, ModelRequest, PROMPT_VERSION};

pub const ENV_LIVE_URL: &str = "CI_LIVE_URL";
pub const ENV_LIVE_TOKEN: &str = "CI_LIVE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    /// Additional attempts after the first failure.
    pub retries: u32,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig { base_url: String::new(), token_env: ENV_LIVE_TOKEN.into(), timeout_secs: 60.0, retries: 2 }
    }
}

impl LiveConfig {
    /// Reads the base URL from `CI_LIVE_URL`.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var(ENV_LIVE_URL).ok().filter(|s| !s.is_empty())?;
        Some(LiveConfig { base_url, ..Default::default() })
    }
}

/// HTTP backend: `POST {base_url}/v1/{kind}` with
/// `{kind, prompt_version, prompt, payload, images: {name: base64 PNG}}`.
/// The response body is the model's JSON reply.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ModelError> {
        if config.base_url.is_empty() {
            return Err(ModelError::InvalidRequest("live backend needs a base URL".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ModelError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(LiveBackend { config, client })
    }

    fn body(request: &ModelRequest) -> Value {
        let mut images = Map::new();
        for (name, img) in &request.images {
            images.insert(name.clone(), Value::String(encode_png_base64(img)));
        }
        json!({
            "kind": request.kind,
            "prompt_version": PROMPT_VERSION,
            "prompt": render_prompt(request),
            "payload": request.payload,
            "images": images,
        })
    }
}

pub(crate) fn encode_png_base64(img: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("PNG encoding to memory");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

impl ModelBackend for LiveBackend {
    fn name(&self) -> String {
        "live".into()
    }

    fn call(&self, request: &ModelRequest) -> Result<Value, ModelError> {
        let url = format!("{}/v1/{}", self.config.base_url.trim_end_matches('/'), request.kind);
        let body = Self::body(request);
        let token = std::env::var(&self.config.token_env).ok();
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut req = self.client.post(&url).json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| ModelError::InvalidResponse {
                        kind: request.kind,
                        message: format!("response is not JSON: {e}"),
                    });
                }
                Ok(resp) if resp.status().is_client_error() => {
                    return Err(ModelError::Transport {
                        attempts: attempt,
                        message: format!("{url} returned {}", resp.status()),
                    });
                }
                Ok(resp) => last = format!("{url} returned {}", resp.status()),
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(attempt, attempts, error = %last, "live backend request failed");
        }
        Err(ModelError::Transport { attempts, message: last })
    }
}
