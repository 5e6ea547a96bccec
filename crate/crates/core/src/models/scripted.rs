use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelBackend, ModelError, ModelRequest, RequestKind};

/// Canned responses keyed by request kind and canonical request digest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScriptedScenario {
    pub name: String,
    pub responses: BTreeMap<(RequestKind, String), Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub kind: RequestKind,
    pub request_digest: String,
    pub response: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    entries: Vec<ScenarioEntry>,
}

impl ScriptedScenario {
    pub fn new(name: impl Into<String>) -> Self {
        ScriptedScenario { name: name.into(), responses: BTreeMap::new() }
    }

    pub fn insert(&mut self, kind: RequestKind, digest: String, response: Value) {
        self.responses.insert((kind, digest), response);
    }

    pub fn get(&self, kind: RequestKind, digest: &str) -> Option<&Value> {
        self.responses.get(&(kind, digest.to_string()))
    }

    /// Request kinds with no entry at all.
    pub fn missing_kinds(&self) -> Vec<RequestKind> {
        RequestKind::ALL
            .into_iter()
            .filter(|k| !self.responses.keys().any(|(kind, _)| kind == k))
            .collect()
    }

    pub fn entries(&self) -> Vec<ScenarioEntry> {
        self.responses
            .iter()
            .map(|((kind, digest), response)| ScenarioEntry { kind: *kind, request_digest: digest.clone(), response: response.clone() })
            .collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let file = ScenarioFile { name: self.name.clone(), entries: self.entries() };
        let mut out = serde_json::to_vec_pretty(&file).expect("scenario serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ModelError> {
        let file: ScenarioFile =
            serde_json::from_slice(bytes).map_err(|e| ModelError::InvalidRequest(format!("scenario JSON: {e}")))?;
        if file.name.is_empty() {
            return Err(ModelError::InvalidRequest("scenario name is empty".into()));
        }
        let mut s = ScriptedScenario::new(file.name);
        for e in file.entries {
            if s.responses.insert((e.kind, e.request_digest.clone()), e.response).is_some() {
                return Err(ModelError::InvalidRequest(format!("duplicate {} entry {}", e.kind, e.request_digest)));
            }
        }
        Ok(s)
    }
}

/// Replays a [`ScriptedScenario`]; unknown requests are an error.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    scenario: Arc<ScriptedScenario>,
}

impl ScriptedBackend {
    pub fn new(scenario: ScriptedScenario) -> Self {
        ScriptedBackend { scenario: Arc::new(scenario) }
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> String {
        format!("scripted:{}", self.scenario.name)
    }

    fn call(&self, request: &ModelRequest) -> Result<Value, ModelError> {
        let digest = request.digest();
        self.scenario
            .get(request.kind, &digest)
            .cloned()
            .ok_or(ModelError::ScenarioIncomplete { kind: request.kind, digest })
    }
}

/// Shared capture store for one recording session.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    entries: Arc<Mutex<BTreeMap<(RequestKind, String), Value>>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wrap(&self, inner: Arc<dyn ModelBackend>) -> RecordingBackend {
        RecordingBackend { inner, recorder: self.clone() }
    }

    pub fn scenario(&self, name: impl Into<String>) -> ScriptedScenario {
        ScriptedScenario { name: name.into(), responses: self.entries.lock().unwrap().clone() }
    }
}

/// Forwards to a backend and captures each successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn ModelBackend>,
    recorder: Recorder,
}

impl ModelBackend for RecordingBackend {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn call(&self, request: &ModelRequest) -> Result<Value, ModelError> {
        let response = self.inner.call(request)?;
        self.recorder
            .entries
            .lock()
            .unwrap()
            .insert((request.kind, request.digest()), response.clone());
        Ok(response)
    }
}
