//! Candidate reward-spec generation through the language-model client.
//! Responses are declarative spec documents; anything that fails to parse or
//! validate is quarantined with its reason instead of aborting the batch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMetadata;
use crate::llm::{LlmClient, LlmError, LlmRequest, PromptKind};
use crate::model::{FeatureType, TrajectoryDataset};
use crate::reward::RewardSpec;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no JSON document found in response")]
    NoDocument,
    #[error("{0}")]
    Invalid(String),
    #[error("critical feature set is empty")]
    NoFeatures,
    #[error("feature '{0}' is not in the dataset schema")]
    UnknownFeature(String),
    #[error("candidate count must be positive")]
    NoCandidates,
    #[error("client failed at candidate {index}: {source}")]
    Client {
        index: usize,
        #[source]
        source: LlmError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenerationError + '_ {
    move |source| GenerationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn type_label(t: FeatureType) -> &'static str {
    match t {
        FeatureType::NormalRange => "goldilocks (healthy inside an interval)",
        FeatureType::DirectionalLow => "directional (lower is healthier)",
        FeatureType::DirectionalHigh => "directional (higher is healthier)",
    }
}

/// Renders the generation prompt for one critical feature set.
pub fn build_generation_prompt(
    dataset: &TrajectoryDataset,
    features: &[String],
    metadata: &[FeatureMetadata],
    task: &str,
) -> String {
    let actions: Vec<&str> = dataset.action_schema.keys().map(String::as_str).collect();
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You are an expert in clinical data science specializing in Offline Reinforcement Learning. Your task is to **DESIGN** a reward function based on a Potential Function (Phi) for an RL agent to learn the optimal policy for {task} ({actions:?})."
    );
    p.push_str("Reward is difference-based with discount factor: R(s, a, t, s', t') = gamma * Phi(s', t') - Phi(s, t) - lambda * C(a)\n");
    p.push_str("Phi(s, t) is the potential function and C(a) is the competence cost. s = (o, dt): o are the critical features below, forward filled, and dt is the number of hours since the feature was last measured. t is the integer time step.\n");
    p.push_str("## DESIGN\n");
    p.push_str("1. **Survival:** for every feature choose a scoring form in [0, 1]. Goldilocks features need a bell curve; directional features need a decay curve.\n");
    p.push_str("   Allowed forms: {\"form\": \"bell\", \"target\", \"sigma\"}, {\"form\": \"decay_low\", \"tau\"}, {\"form\": \"decay_high\", \"tau\"}, {\"form\": \"asymmetric_above\", \"target\", \"sigma\"}; each also takes a positive \"weight\".\n");
    p.push_str("2. **Confidence:** choose a decay constant tau (hours) per feature for exp(-dt / tau). Trust must drop as dt grows.\n");
    p.push_str("3. **Competence:** choose action_cost_scale; the cost is action_cost_scale * sum(level / action_max).\n");
    p.push_str("Also choose decay_half_life (time steps) for strategic annealing of the potential, gamma in (0, 1] and a nonnegative lambda.\n");
    p.push_str("### INPUT\n");
    p.push_str("Feature values are min-max normalized to [0, 1]. Action values are integer levels from low to high.\n");
    p.push_str("CRITICAL FEATURES:\n");
    for f in features {
        let Some(schema) = dataset.feature_schema.get(f) else { continue };
        let _ = write!(
            p,
            "- {f}: {} declared range [{}, {}]",
            type_label(schema.feature_type),
            schema.declared_min,
            schema.declared_max
        );
        if let Some([lo, hi]) = schema.healthy_interval {
            let _ = write!(p, ", healthy interval (normalized) [{lo:.4}, {hi:.4}]");
        }
        if let Some(m) = metadata.iter().find(|m| &m.feature_id == f) {
            let _ = write!(
                p,
                ", mean {:.4}, median {:.4}, IQR [{:.4}, {:.4}], missingness {:.4}",
                m.mean, m.median, m.q25, m.q75, m.missingness
            );
        }
        p.push('\n');
    }
    p.push_str("ACTIONS:\n");
    for (a, s) in &dataset.action_schema {
        let _ = writeln!(p, "- {a}: levels 0..{}", s.max);
    }
    p.push_str("### OUTPUT FORMAT\n");
    p.push_str("Output ONLY one JSON object with exactly these keys:\n");
    p.push_str("{\"survival\": {feature: form}, \"confidence_tau\": {feature: hours}, \"decay_half_life\": number, \"gamma\": number, \"lambda\": number, \"action_cost_scale\": number, \"action_max\": {action: max level}}\n");
    p.push_str("survival and confidence_tau must cover exactly the critical features; action_max must cover exactly the actions.\n");
    p
}

/// Takes the body of the first fenced code block if there is one, otherwise
/// the outermost `{...}` span.
fn extract_document(text: &str) -> Option<&str> {
    if let Some(start) = text.find("```") {
        let rest = &text[start + 3..];
        let body_start = rest.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &rest[body_start..];
        if let Some(end) = body.find("```") {
            return Some(body[..end].trim());
        }
    }
    let lo = text.find('{')?;
    let hi = text.rfind('}')?;
    (hi > lo).then(|| &text[lo..=hi])
}

/// Parses and checks one generated spec against the dataset and critical set.
pub fn parse_reward_response(text: &str, dataset: &TrajectoryDataset, features: &[String]) -> Result<RewardSpec, GenerationError> {
    let doc = extract_document(text).ok_or(GenerationError::NoDocument)?;
    let spec = RewardSpec::from_json(doc).map_err(|e| GenerationError::Invalid(e.to_string()))?;
    let mut want: Vec<&str> = features.iter().map(String::as_str).collect();
    want.sort_unstable();
    want.dedup();
    let got: Vec<&str> = spec.features().collect();
    if got != want {
        return Err(GenerationError::Invalid(format!(
            "survival features {got:?} do not match the critical set {want:?}"
        )));
    }
    let actions: Vec<&String> = dataset.action_schema.keys().collect();
    if !spec.action_max.keys().eq(actions.iter().copied()) {
        return Err(GenerationError::Invalid(format!(
            "action_max keys {:?} do not match dataset actions {actions:?}",
            spec.action_max.keys().collect::<Vec<_>>()
        )));
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub candidates: usize,
    pub parallelism: usize,
    pub task: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            candidates: 20,
            parallelism: 4,
            task: "sepsis treatment".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedCandidate {
    pub spec_id: String,
    pub reason: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    /// `(spec_id, spec)` in candidate order.
    pub valid: Vec<(String, RewardSpec)>,
    pub quarantined: Vec<QuarantinedCandidate>,
}

pub fn spec_id(index: usize) -> String {
    format!("cand_{index:03}")
}

/// Requests `cfg.candidates` specs. Candidate `i` is always `cand_{i:03}`,
/// whether it lands among the valid specs or in quarantine.
pub fn generate_candidates(
    dataset: &TrajectoryDataset,
    features: &[String],
    metadata: &[FeatureMetadata],
    client: &dyn LlmClient,
    cfg: &GenerationConfig,
) -> Result<GenerationOutcome, GenerationError> {
    if features.is_empty() {
        return Err(GenerationError::NoFeatures);
    }
    if let Some(f) = features.iter().find(|f| !dataset.feature_schema.contains_key(*f)) {
        return Err(GenerationError::UnknownFeature(f.clone()));
    }
    if cfg.candidates == 0 {
        return Err(GenerationError::NoCandidates);
    }
    let prompt = build_generation_prompt(dataset, features, metadata, &cfg.task);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .expect("thread pool");
    let responses: Vec<Result<String, LlmError>> = pool.install(|| {
        (0..cfg.candidates)
            .into_par_iter()
            .map(|round| {
                client.complete(&LlmRequest {
                    model: client.model().to_string(),
                    temperature: client.temperature(),
                    prompt: prompt.clone(),
                    kind: PromptKind::RewardGeneration,
                    round,
                    features: features.to_vec(),
                })
            })
            .collect()
    });
    let mut valid = Vec::new();
    let mut quarantined = Vec::new();
    for (i, res) in responses.into_iter().enumerate() {
        let text = res.map_err(|source| GenerationError::Client { index: i, source })?;
        match parse_reward_response(&text, dataset, features) {
            Ok(spec) => valid.push((spec_id(i), spec)),
            Err(e) => quarantined.push(QuarantinedCandidate {
                spec_id: spec_id(i),
                reason: e.to_string(),
                response: text,
            }),
        }
    }
    Ok(GenerationOutcome { valid, quarantined })
}

/// Writes `<dir>/<spec_id>.json` for valid specs and
/// `<dir>/quarantine/<spec_id>.json` (reason plus raw response) for the rest.
pub fn write_candidates(outcome: &GenerationOutcome, dir: &Path) -> Result<(), GenerationError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (id, spec) in &outcome.valid {
        let path = dir.join(format!("{id}.json"));
        std::fs::write(&path, spec.to_json() + "\n").map_err(io_err(&path))?;
    }
    if !outcome.quarantined.is_empty() {
        let qdir = dir.join("quarantine");
        std::fs::create_dir_all(&qdir).map_err(io_err(&qdir))?;
        for q in &outcome.quarantined {
            let path = qdir.join(format!("{}.json", q.spec_id));
            let text = serde_json::to_string_pretty(q).expect("serializable");
            std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Loads every `*.json` spec directly under `dir`, sorted by file stem.
/// Files that fail to load are returned separately with the reason.
#[allow(clippy::type_complexity)]
pub fn load_candidates(dir: &Path) -> Result<(Vec<(String, RewardSpec)>, BTreeMap<String, String>), GenerationError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut specs = Vec::new();
    let mut failed = BTreeMap::new();
    for path in paths {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match RewardSpec::load(&path) {
            Ok(s) => specs.push((id, s)),
            Err(e) => {
                failed.insert(id, e.to_string());
            }
        }
    }
    Ok((specs, failed))
}
