//! Async client for the sketchlift HTTP service.

pub mod api;

use std::time::Duration;

use base64::Engine as _;
use reqwest::multipart::{Form, Part};
use reqwest::{Method, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use api::*;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("HTTP {status}: {}", .error.message)]
    Api { status: u16, error: ApiError },
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("{what} {id} did not finish within {secs:.0}s")]
    Timeout { what: &'static str, id: String, secs: f64 },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll_interval: Duration,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder().build()?;
        Ok(Client { base: base_url.trim_end_matches('/').to_string(), http, poll_interval: Duration::from_millis(50) })
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn check(resp: Response) -> Result<Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let bytes = resp.bytes().await?;
        let error = serde_json::from_slice::<ErrorBody>(&bytes).map(|b| b.error).unwrap_or_else(|_| ApiError {
            code: if status == StatusCode::NOT_FOUND { "not-found" } else { "internal" }.into(),
            message: String::from_utf8_lossy(&bytes).into_owned(),
            stage: None,
            fields: Vec::new(),
        });
        Err(ClientError::Api { status: status.as_u16(), error })
    }

    async fn json<T: DeserializeOwned>(resp: Response) -> Result<T, ClientError> {
        let bytes = Self::check(resp).await?.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn send_json<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: &B) -> Result<T, ClientError> {
        Self::json(self.http.request(method, self.url(path)).json(body).send().await?).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::json(self.http.get(self.url(path)).send().await?).await
    }

    async fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        Ok(Self::check(self.http.get(self.url(path)).send().await?).await?.bytes().await?.to_vec())
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/healthz").await
    }

    /// Uploads a calibration file plus one PNG per view id.
    pub async fn upload_scene(&self, calibration_json: Vec<u8>, images: Vec<(String, Vec<u8>)>) -> Result<SceneCreated, ClientError> {
        let mut form = Form::new().part("calibration", Part::bytes(calibration_json).file_name("calibration.json"));
        for (id, png) in images {
            let file = format!("{id}.png");
            form = form.part(id, Part::bytes(png).file_name(file));
        }
        Self::json(self.http.post(self.url("/api/v1/scenes")).multipart(form).send().await?).await
    }

    pub async fn scene(&self, id: &str) -> Result<serde_json::Value, ClientError> {
        self.get(&format!("/api/v1/scenes/{id}")).await
    }

    pub async fn post_instruction(
        &self,
        instruction_json: &[u8],
        scene_id: Option<&str>,
        image_png: Option<&[u8]>,
    ) -> Result<InstructionCreated, ClientError> {
        let instruction = serde_json::from_slice(instruction_json).map_err(|e| ClientError::Decode(e.to_string()))?;
        let body = InstructionRequest {
            instruction,
            scene_id: scene_id.map(str::to_string),
            image_png_base64: image_png.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
        };
        self.send_json(Method::POST, "/api/v1/instructions", &body).await
    }

    pub async fn instruction(&self, id: &str) -> Result<serde_json::Value, ClientError> {
        self.get(&format!("/api/v1/instructions/{id}")).await
    }

    /// Registers a scripted scenario under `name`.
    pub async fn put_scenario(&self, name: &str, scenario_json: Vec<u8>) -> Result<(), ClientError> {
        let resp = self
            .http
            .put(self.url(&format!("/api/v1/scenarios/{name}")))
            .header("content-type", "application/json")
            .body(scenario_json)
            .send()
            .await?;
        Self::check(resp).await.map(|_| ())
    }

    pub async fn create_plan(&self, request: &PlanRequest) -> Result<PlanCreated, ClientError> {
        self.send_json(Method::POST, "/api/v1/plans", request).await
    }

    pub async fn plan(&self, id: &str) -> Result<PlanView, ClientError> {
        self.get(&format!("/api/v1/plans/{id}")).await
    }

    /// The plan file exactly as stored by the service.
    pub async fn plan_file(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        self.get_bytes(&format!("/api/v1/plans/{id}/plan")).await
    }

    pub async fn trace_file(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        self.get_bytes(&format!("/api/v1/plans/{id}/trace")).await
    }

    /// Polls until the plan leaves the running state.
    pub async fn wait_plan(&self, id: &str, timeout: Duration) -> Result<PlanView, ClientError> {
        let start = tokio::time::Instant::now();
        loop {
            let view = self.plan(id).await?;
            if view.status != RunStatus::Running {
                return Ok(view);
            }
            if start.elapsed() > timeout {
                return Err(ClientError::Timeout { what: "plan", id: id.into(), secs: timeout.as_secs_f64() });
            }
            tokio::time::sleep(self.poll_interval).await;
        }
    }

    pub async fn samples(&self, id: &str, n: usize, seed: u64) -> Result<SamplesResponse, ClientError> {
        self.send_json(Method::POST, &format!("/api/v1/plans/{id}/samples"), &SamplesRequest { n, seed }).await
    }

    pub async fn create_training(&self, request: &TrainRequest) -> Result<TrainCreated, ClientError> {
        self.send_json(Method::POST, "/api/v1/train", request).await
    }

    pub async fn training(&self, id: &str) -> Result<TrainView, ClientError> {
        self.get(&format!("/api/v1/train/{id}")).await
    }

    pub async fn wait_training(&self, id: &str, timeout: Duration) -> Result<TrainView, ClientError> {
        let start = tokio::time::Instant::now();
        loop {
            let view = self.training(id).await?;
            if view.status != RunStatus::Running {
                return Ok(view);
            }
            if start.elapsed() > timeout {
                return Err(ClientError::Timeout { what: "training", id: id.into(), secs: timeout.as_secs_f64() });
            }
            tokio::time::sleep(self.poll_interval.max(Duration::from_millis(200))).await;
        }
    }

    pub async fn training_artifact(&self, id: &str, name: &str) -> Result<Vec<u8>, ClientError> {
        self.get_bytes(&format!("/api/v1/train/{id}/artifacts/{name}")).await
    }
}
