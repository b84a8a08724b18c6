//! Language-model client interface with an HTTP implementation and
//! deterministic stubs.
//!
//! Wire format: the request body is `{"model", "temperature", "prompt"}`.
//! The response is free text; if the body is a JSON object carrying the text
//! under `text`, `response`, `output`, or an OpenAI-style `choices[0]`, that
//! text is used, otherwise the raw body is.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMetadata;
use crate::model::{ActionSchema, FeatureSchema, FeatureType};
use crate::util::keyed_rng;

pub const ENDPOINT_ENV: &str = "TRIDRIVE_LLM_ENDPOINT";
pub const KEY_ENV: &str = "TRIDRIVE_LLM_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no endpoint configured (set {ENDPOINT_ENV} or the config endpoint)")]
    NoEndpoint,
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("stub has no response for round {0}")]
    Exhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    FeatureSelection,
    RewardGeneration,
}

/// One completion request. Only `model`, `temperature` and `prompt` go on
/// the wire; the rest lets stubs answer without parsing the prompt.
#[derive(Debug, Clone, Serialize)]
pub struct LlmRequest {
    pub model: String,
    pub temperature: f64,
    pub prompt: String,
    #[serde(skip)]
    pub kind: PromptKind,
    #[serde(skip)]
    pub round: usize,
    /// Feature ids the request concerns (critical set for generation).
    #[serde(skip)]
    pub features: Vec<String>,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;

    fn model(&self) -> &str {
        "stub"
    }

    fn temperature(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmClientConfig {
    /// Falls back to `TRIDRIVE_LLM_ENDPOINT` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: None,
            model: "gpt-oss-20b".into(),
            temperature: 1.0,
            timeout_secs: 120,
            retries: 2,
        }
    }
}

pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    key: Option<String>,
    cfg: LlmClientConfig,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.cfg.model)
            .field("key", &self.key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self, LlmError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .filter(|e| !e.is_empty())
            .ok_or(LlmError::NoEndpoint)?;
        let key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(HttpClient { agent, endpoint, key, cfg })
    }

    fn attempt(&self, request: &LlmRequest) -> Result<String, String> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "prompt": request.prompt,
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(extract_text(&text))
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let attempts = self.cfg.retries as usize + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(LlmError::Transport {
            attempts,
            message: last,
        })
    }

    fn model(&self) -> &str {
        &self.cfg.model
    }

    fn temperature(&self) -> f64 {
        self.cfg.temperature
    }
}

/// Pulls the completion text out of common response envelopes.
pub fn extract_text(body: &str) -> String {
    let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.to_string();
    };
    for key in ["text", "response", "output"] {
        if let Some(s) = obj.get(key).and_then(|v| v.as_str()) {
            return s.to_string();
        }
    }
    if let Some(choice) = obj.get("choices").and_then(|c| c.get(0)) {
        if let Some(s) = choice.get("text").and_then(|v| v.as_str()) {
            return s.to_string();
        }
        if let Some(s) = choice.pointer("/message/content").and_then(|v| v.as_str()) {
            return s.to_string();
        }
    }
    body.to_string()
}

/// Returns fixed responses indexed by round (cycling when rounds exceed the
/// script). `None` entries simulate a transport failure.
#[derive(Debug, Clone)]
pub struct ScriptedClient {
    responses: Vec<Option<String>>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        ScriptedClient {
            responses: responses.into_iter().map(|s| Some(s.into())).collect(),
        }
    }

    pub fn with_failures(responses: Vec<Option<String>>) -> Self {
        ScriptedClient { responses }
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        if self.responses.is_empty() {
            return Err(LlmError::Exhausted(request.round));
        }
        self.responses[request.round % self.responses.len()]
            .clone()
            .ok_or_else(|| LlmError::Transport {
                attempts: 1,
                message: format!("scripted failure at round {}", request.round),
            })
    }
}

/// Offline stand-in that answers from dataset statistics. Every answer is a
/// pure function of `(seed, kind, round)`.
#[derive(Debug, Clone)]
pub struct SyntheticClient {
    seed: u64,
    k: usize,
    excluded: Vec<String>,
    metadata: Vec<FeatureMetadata>,
    feature_schema: BTreeMap<String, FeatureSchema>,
    action_schema: BTreeMap<String, ActionSchema>,
}

impl SyntheticClient {
    pub fn new(
        seed: u64,
        k: usize,
        excluded: Vec<String>,
        metadata: Vec<FeatureMetadata>,
        feature_schema: BTreeMap<String, FeatureSchema>,
        action_schema: BTreeMap<String, ActionSchema>,
    ) -> Self {
        SyntheticClient {
            seed,
            k,
            excluded,
            metadata,
            feature_schema,
            action_schema,
        }
    }

    fn select(&self, round: usize) -> String {
        let mut rng = keyed_rng(self.seed, 0x5e1e_c700_0000_0000 | round as u64);
        let mut scored: Vec<(f64, &FeatureMetadata)> = self
            .metadata
            .iter()
            .filter(|m| !self.excluded.iter().any(|e| e.eq_ignore_ascii_case(&m.feature_id)))
            .map(|m| {
                let r = m.rho_outcome.map(|c| c.r.abs()).unwrap_or(0.0);
                (r + 0.15 * rng.random::<f64>() - 0.3 * m.missingness, m)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.feature_id.cmp(&b.1.feature_id)));
        let picks: Vec<serde_json::Value> = scored
            .iter()
            .take(self.k)
            .map(|(_, m)| {
                let r = m.rho_outcome.map(|c| format!("{:.3}", c.r)).unwrap_or_else(|| "undefined".into());
                serde_json::json!({
                    "feature_name": m.feature_id,
                    "rationale": format!("Correlation with mortality r={r} and missingness {:.2}.", m.missingness),
                })
            })
            .collect();
        serde_json::json!({ "critical_state_features": picks }).to_string()
    }

    fn generate(&self, round: usize, features: &[String]) -> String {
        let mut rng = keyed_rng(self.seed, 0x6e4e_0000_0000_0000 | round as u64);
        let mut survival = serde_json::Map::new();
        let mut taus = serde_json::Map::new();
        let tau_choices = [3.0, 6.0, 12.0, 24.0];
        for f in features {
            let weight = (0.5 + rng.random::<f64>()).clamp(0.5, 1.5);
            let cfg = match self.feature_schema.get(f) {
                Some(FeatureSchema {
                    feature_type: FeatureType::NormalRange,
                    healthy_interval: Some([lo, hi]),
                    ..
                }) => {
                    let center = 0.5 * (lo + hi);
                    let half = (0.5 * (hi - lo)).max(0.02);
                    let sigma = half * (0.6 + 0.9 * rng.random::<f64>());
                    let jitter = half * 0.3 * (rng.random::<f64>() - 0.5);
                    serde_json::json!({"form": "bell", "target": (center + jitter).clamp(0.0, 1.0), "sigma": sigma, "weight": weight})
                }
                Some(FeatureSchema {
                    feature_type: FeatureType::DirectionalHigh,
                    ..
                }) => serde_json::json!({"form": "decay_high", "tau": 0.15 + 0.45 * rng.random::<f64>(), "weight": weight}),
                _ => {
                    if rng.random::<f64>() < 0.7 {
                        serde_json::json!({"form": "decay_low", "tau": 0.15 + 0.45 * rng.random::<f64>(), "weight": weight})
                    } else {
                        serde_json::json!({"form": "asymmetric_above", "target": 0.1 + 0.2 * rng.random::<f64>(), "sigma": 0.1 + 0.3 * rng.random::<f64>(), "weight": weight})
                    }
                }
            };
            survival.insert(f.clone(), cfg);
            taus.insert(f.clone(), tau_choices[rng.random_range(0..tau_choices.len())].into());
        }
        let action_max: serde_json::Map<String, serde_json::Value> =
            self.action_schema.iter().map(|(k, a)| (k.clone(), a.max.into())).collect();
        let half_life = [24.0, 48.0, 72.0, 96.0][rng.random_range(0..4)];
        let spec = serde_json::json!({
            "survival": survival,
            "confidence_tau": taus,
            "decay_half_life": half_life,
            "gamma": 0.99,
            "lambda": 0.3 * rng.random::<f64>(),
            "action_cost_scale": 0.1 + 0.4 * rng.random::<f64>(),
            "action_max": action_max,
        });
        serde_json::to_string_pretty(&spec).expect("json")
    }
}

impl LlmClient for SyntheticClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        Ok(match request.kind {
            PromptKind::FeatureSelection => self.select(request.round),
            PromptKind::RewardGeneration => self.generate(request.round, &request.features),
        })
    }
}
