//! Per-feature statistics, the feature-selection prompt, response parsing and
//! ensemble voting over repeated selection rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::fitness::pearson;
use crate::llm::{LlmClient, LlmError, LlmRequest, PromptKind};
use crate::model::TrajectoryDataset;
use crate::util::{nan_f64, quantile_sorted, sha256_hex};

/// Static patient attributes that never belong in the critical set.
pub const DEFAULT_EXCLUDED: [&str; 6] = ["age", "gender", "elixhauser_vanwalraven", "weight", "readmission", "step_id"];

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("no feature metadata")]
    EmptyMetadata,
    #[error("response is not a bare JSON object: {0}")]
    Parse(String),
    #[error("unknown feature(s): {}", .0.join(", "))]
    UnknownFeatures(Vec<String>),
    #[error("excluded feature(s) selected: {}", .0.join(", "))]
    ExcludedFeatures(Vec<String>),
    #[error("expected {expected} distinct features, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("no rounds to vote over")]
    NoRounds,
    #[error("all {0} rounds produced invalid responses")]
    NoValidRounds(usize),
    #[error("client failed at round {round} ({completed} of {total} rounds completed): {source}")]
    Client {
        round: usize,
        completed: usize,
        total: usize,
        #[source]
        source: LlmError,
    },
    #[error("missing mask: {0}")]
    Mask(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SelectionError + '_ {
    move |source| SelectionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pearson correlation with its two-sided p-value. `None` where the
/// correlation is undefined (a constant side).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStat {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetadata {
    pub feature_id: String,
    pub count: usize,
    #[serde(with = "nan_f64")]
    pub mean: f64,
    #[serde(with = "nan_f64")]
    pub std: f64,
    #[serde(with = "nan_f64")]
    pub min: f64,
    #[serde(with = "nan_f64")]
    pub max: f64,
    pub missingness: f64,
    pub rho_outcome: Option<CorrelationStat>,
    pub rho_action: BTreeMap<String, Option<CorrelationStat>>,
    #[serde(with = "nan_f64")]
    pub q25: f64,
    #[serde(with = "nan_f64")]
    pub median: f64,
    #[serde(with = "nan_f64")]
    pub q75: f64,
    #[serde(with = "nan_f64")]
    pub iqr: f64,
}

/// Explicit missingness: patient_id → per step, the features not measured.
pub type MissingMask = BTreeMap<String, Vec<Vec<String>>>;

pub fn load_mask(path: impl AsRef<Path>) -> Result<MissingMask, SelectionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SelectionError::Mask(e.to_string()))
}

fn check_mask(dataset: &TrajectoryDataset, mask: &MissingMask) -> Result<(), SelectionError> {
    for traj in &dataset.trajectories {
        if let Some(rows) = mask.get(&traj.patient_id) {
            if rows.len() != traj.steps.len() {
                return Err(SelectionError::Mask(format!(
                    "patient '{}' has {} steps but {} mask rows",
                    traj.patient_id,
                    traj.steps.len(),
                    rows.len()
                )));
            }
        }
    }
    Ok(())
}

struct Reading {
    value: f64,
    survived: f64,
    actions: BTreeMap<String, f64>,
}

/// Walks every (trajectory, step) slot for `feature`; returns the total slot
/// count and the non-missing readings.
fn readings(dataset: &TrajectoryDataset, feature: &str, mask: Option<&MissingMask>) -> (usize, Vec<Reading>) {
    let mut total = 0;
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        // with a mask, patients it does not list have no missing readings
        let rows = mask.map(|m| m.get(&traj.patient_id));
        for (i, step) in traj.steps.iter().enumerate() {
            total += 1;
            let Some(obs) = step.obs.get(feature) else { continue };
            let missing = match rows {
                Some(Some(rows)) => rows.get(i).is_some_and(|r| r.iter().any(|f| f == feature)),
                Some(None) => false,
                None => obs.staleness > 0,
            };
            if !missing {
                out.push(Reading {
                    value: obs.value,
                    survived: if traj.survived { 1.0 } else { 0.0 },
                    actions: step.action.clone(),
                });
            }
        }
    }
    (total, out)
}

/// `(q25, median, q75)` of the non-missing readings, or `None` if there are none.
pub fn feature_quartiles(dataset: &TrajectoryDataset, feature: &str, mask: Option<&MissingMask>) -> Option<(f64, f64, f64)> {
    let (_, rs) = readings(dataset, feature, mask);
    let mut v: Vec<f64> = rs.iter().map(|r| r.value).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some((quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75)))
}

fn correlation(xs: &[f64], ys: &[f64]) -> Option<CorrelationStat> {
    let r = pearson(xs, ys).ok()?;
    let n = xs.len();
    let df = n as f64 - 2.0;
    let p_value = if df <= 0.0 {
        1.0
    } else if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Some(CorrelationStat { r, p_value, n })
}

/// One record per schema feature, in schema order. Statistics use non-missing
/// readings only; a reading is missing if the mask says so or, without a
/// mask, if its staleness is positive.
pub fn compute_metadata(dataset: &TrajectoryDataset, mask: Option<&MissingMask>) -> Result<Vec<FeatureMetadata>, SelectionError> {
    if dataset.is_empty() {
        return Err(SelectionError::EmptyDataset);
    }
    if let Some(m) = mask {
        check_mask(dataset, m)?;
    }
    let mut out = Vec::with_capacity(dataset.feature_schema.len());
    for feature in dataset.feature_schema.keys() {
        let (total, rs) = readings(dataset, feature, mask);
        let values: Vec<f64> = rs.iter().map(|r| r.value).collect();
        let count = values.len();
        let missingness = if total == 0 { 1.0 } else { (total - count) as f64 / total as f64 };
        let (mut mean, mut std, mut min, mut max) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        let (mut q25, mut median, mut q75) = (f64::NAN, f64::NAN, f64::NAN);
        if count > 0 {
            mean = values.iter().sum::<f64>() / count as f64;
            std = if count > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            min = sorted[0];
            max = sorted[count - 1];
            q25 = quantile_sorted(&sorted, 0.25);
            median = quantile_sorted(&sorted, 0.5);
            q75 = quantile_sorted(&sorted, 0.75);
        }
        let outcome: Vec<f64> = rs.iter().map(|r| r.survived).collect();
        let rho_outcome = correlation(&values, &outcome);
        let mut rho_action = BTreeMap::new();
        for action in dataset.action_schema.keys() {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rs
                .iter()
                .filter_map(|r| r.actions.get(action).map(|&a| (r.value, a)))
                .unzip();
            rho_action.insert(action.clone(), correlation(&xs, &ys));
        }
        out.push(FeatureMetadata {
            feature_id: feature.clone(),
            count,
            mean,
            std,
            min,
            max,
            missingness,
            rho_outcome,
            rho_action,
            q25,
            median,
            q75,
            iqr: q75 - q25,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total_records: usize,
    pub total_patients: usize,
    pub avg_records_per_patient: f64,
    pub mortality_rate: f64,
}

impl DatasetSummary {
    pub fn of(dataset: &TrajectoryDataset) -> Self {
        let patients = dataset.len();
        let records = dataset.total_steps();
        let deaths = dataset.trajectories.iter().filter(|t| !t.survived).count();
        let per = |x: usize| if patients == 0 { 0.0 } else { x as f64 / patients as f64 };
        DatasetSummary {
            total_records: records,
            total_patients: patients,
            avg_records_per_patient: per(records),
            mortality_rate: per(deaths),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureTask {
    /// Number of features requested per round.
    pub k: usize,
    pub excluded: Vec<String>,
    /// Optional extra context appended to the task line.
    #[serde(default)]
    pub description: String,
}

impl Default for FeatureTask {
    fn default() -> Self {
        FeatureTask {
            k: 7,
            excluded: DEFAULT_EXCLUDED.iter().map(|s| s.to_string()).collect(),
            description: String::new(),
        }
    }
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "n/a".into()
    }
}

fn fmt_corr(c: &Option<CorrelationStat>) -> String {
    match c {
        Some(c) => format!("r={:.4} (p={:.4}, n={})", c.r, c.p_value, c.n),
        None => "r=undefined (constant values)".into(),
    }
}

/// Correlation lines ordered by |r| descending, undefined last, ties by name.
fn corr_block(out: &mut String, entries: Vec<(&str, &Option<CorrelationStat>)>) {
    let mut entries = entries;
    entries.sort_by(|a, b| {
        let key = |c: &Option<CorrelationStat>| c.map(|c| c.r.abs()).unwrap_or(-1.0);
        key(b.1).total_cmp(&key(a.1)).then_with(|| a.0.cmp(b.0))
    });
    for (name, c) in entries {
        let _ = writeln!(out, "  - {name}: {}", fmt_corr(c));
    }
}

/// Renders the feature-selection prompt. Output is a pure function of the
/// inputs.
pub fn build_feature_prompt(metadata: &[FeatureMetadata], summary: &DatasetSummary, task: &FeatureTask) -> String {
    let mut p = String::new();
    p.push_str("You are an expert Clinical Data Scientist and Intensivist specializing in Offline Reinforcement Learning.\n");
    let _ = write!(
        p,
        "TASK: Select the top {} **Critical State Features** based on the statistical analysis provided below.",
        task.k
    );
    if !task.description.is_empty() {
        let _ = write!(p, " {}", task.description.trim());
    }
    p.push('\n');
    p.push_str("SELECTION CRITERIA:\n");
    p.push_str("- Select features that are strong indicators of patient condition that are highly correlated to the disease and patient outcome.\n");
    p.push_str("- Exclude features that are direct proxies of interventions to prevent reward hacking (high correlation with actions).\n");
    if !task.excluded.is_empty() {
        let _ = writeln!(
            p,
            "- EXCLUDE all demographic and baseline features: {}. These are static patient characteristics, not dynamic state features. Focus ONLY on dynamic physiological and clinical state features that change over time.",
            task.excluded.join(", ")
        );
    }
    p.push_str("- Prefer features with low missingness and strong predictive power for outcomes.\n");
    p.push_str("OUTPUT FORMAT: IMPORTANT: Output ONLY valid JSON. Do not include any preamble, thinking process, explanations, or text before or after the JSON.\n");
    p.push_str("Return a JSON object with keys: critical_state_features, rank the features by their importance for reward modeling. For each feature, provide a 1-sentence rationale explaining its selection based on the provided statistics.\n");
    p.push_str("Format your response as structured JSON with the following schema:\n");
    p.push_str("{\"critical_state_features\": [{\n\"feature_name\": \"...\",\n\"rationale\": \"...\"\n}]}\n");
    p.push_str("Your response must start with { and end with }. Do not include any other text.\n");
    p.push_str("DATASET SUMMARY:\n");
    let _ = writeln!(p, "Total records: {}", summary.total_records);
    let _ = writeln!(p, "Total patients: {}", summary.total_patients);
    let _ = writeln!(p, "Average records per patient: {:.2}", summary.avg_records_per_patient);
    let _ = writeln!(p, "Mortality Rates: {:.4}", summary.mortality_rate);
    p.push_str("FEATURE STATISTICS:\n");
    for m in metadata {
        let _ = writeln!(p, "Feature: {}", m.feature_id);
        let _ = writeln!(p, "  Count: {}", m.count);
        let _ = writeln!(p, "  Mean: {}  Std: {}", fmt_num(m.mean), fmt_num(m.std));
        let _ = writeln!(p, "  Range: [{}, {}]", fmt_num(m.min), fmt_num(m.max));
        let _ = writeln!(p, "  Median: {}  IQR: [{}, {}]", fmt_num(m.median), fmt_num(m.q25), fmt_num(m.q75));
        let _ = writeln!(p, "  Missingness: {:.4}", m.missingness);
    }
    p.push_str("CORRELATIONS WITH OUTCOMES:\n");
    p.push_str("Outcome: survival (1 = survived)\n");
    corr_block(&mut p, metadata.iter().map(|m| (m.feature_id.as_str(), &m.rho_outcome)).collect());
    let actions: BTreeSet<&str> = metadata
        .iter()
        .flat_map(|m| m.rho_action.keys().map(String::as_str))
        .collect();
    if !actions.is_empty() {
        p.push_str("ACTION-FEATURE CORRELATIONS (to identify action-dependent features):\n");
        for a in actions {
            let _ = writeln!(p, "Action: {a}");
            corr_block(
                &mut p,
                metadata
                    .iter()
                    .filter_map(|m| m.rho_action.get(a).map(|c| (m.feature_id.as_str(), c)))
                    .collect(),
            );
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub round_index: usize,
    /// In the order the response ranked them.
    pub selected: Vec<String>,
    pub rationales: BTreeMap<String, String>,
}

impl SelectionRound {
    pub fn contains(&self, feature: &str) -> bool {
        self.selected.iter().any(|f| f == feature)
    }
}

#[derive(Deserialize)]
struct RawSelection {
    critical_state_features: Vec<RawPick>,
}

#[derive(Deserialize)]
struct RawPick {
    feature_name: String,
    #[serde(default)]
    rationale: String,
}

/// Parses one response. The trimmed text must be exactly one JSON object;
/// every feature must be known, not excluded, and there must be `k`
/// distinct ones.
pub fn parse_selection_response<S: AsRef<str>>(
    text: &str,
    round_index: usize,
    known: &BTreeSet<String>,
    excluded: &[S],
    k: usize,
) -> Result<SelectionRound, SelectionError> {
    let body = text.trim();
    if !(body.starts_with('{') && body.ends_with('}')) {
        return Err(SelectionError::Parse("text outside the JSON object".into()));
    }
    let raw: RawSelection = serde_json::from_str(body).map_err(|e| SelectionError::Parse(e.to_string()))?;
    let mut selected = Vec::new();
    let mut rationales = BTreeMap::new();
    let mut unknown = Vec::new();
    let mut banned = Vec::new();
    for pick in raw.critical_state_features {
        let name = pick.feature_name.trim().to_string();
        if excluded.iter().any(|e| e.as_ref().eq_ignore_ascii_case(&name)) {
            banned.push(name);
        } else if !known.contains(&name) {
            unknown.push(name);
        } else if !rationales.contains_key(&name) {
            rationales.insert(name.clone(), pick.rationale);
            selected.push(name);
        }
    }
    if !banned.is_empty() {
        return Err(SelectionError::ExcludedFeatures(banned));
    }
    if !unknown.is_empty() {
        return Err(SelectionError::UnknownFeatures(unknown));
    }
    if selected.len() != k {
        return Err(SelectionError::WrongCount {
            expected: k,
            got: selected.len(),
        });
    }
    Ok(SelectionRound {
        round_index,
        selected,
        rationales,
    })
}

/// Selection frequency of every feature seen in any round.
pub fn vote_frequencies(rounds: &[SelectionRound]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rounds {
        let uniq: BTreeSet<&String> = r.selected.iter().collect();
        for f in uniq {
            *counts.entry(f.clone()).or_default() += 1;
        }
    }
    let n = rounds.len() as f64;
    counts.into_iter().map(|(f, c)| (f, c as f64 / n)).collect()
}

/// Features whose selection frequency reaches `threshold`.
pub fn ensemble_vote(rounds: &[SelectionRound], threshold: f64) -> Result<BTreeSet<String>, SelectionError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SelectionError::Threshold(threshold));
    }
    if rounds.is_empty() {
        return Err(SelectionError::NoRounds);
    }
    let n = rounds.len();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rounds {
        let uniq: BTreeSet<&str> = r.selected.iter().map(String::as_str).collect();
        for f in uniq {
            *counts.entry(f).or_default() += 1;
        }
    }
    // count/n >= threshold, compared without dividing
    Ok(counts
        .into_iter()
        .filter(|&(_, c)| c as f64 >= threshold * n as f64 - 1e-9)
        .map(|(f, _)| f.to_string())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub rounds: usize,
    pub consensus_threshold: f64,
    pub parallelism: usize,
    pub task: FeatureTask,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            rounds: 20,
            consensus_threshold: 0.6,
            parallelism: 4,
            task: FeatureTask::default(),
        }
    }
}

/// One audit record; `outcome` is either the parsed round or the reason the
/// response was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub model: String,
    pub temperature: f64,
    pub prompt_sha256: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub selected: BTreeSet<String>,
    pub frequencies: BTreeMap<String, f64>,
    pub consensus_threshold: f64,
    pub valid_rounds: usize,
    pub invalid_rounds: Vec<usize>,
}

pub fn round_file_name(round: usize) -> String {
    format!("round_{round:03}.json")
}

fn write_records(dir: &Path, records: &[RoundRecord]) -> Result<(), SelectionError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for rec in records {
        let path = dir.join(round_file_name(rec.round_index));
        let text = serde_json::to_string_pretty(rec).expect("round record serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

/// Rebuilds the vote from a directory of round records.
pub fn replay_audit(dir: impl AsRef<Path>, threshold: f64) -> Result<BTreeSet<String>, SelectionError> {
    let dir = dir.as_ref();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("round_") && n.ends_with(".json")))
        .collect();
    names.sort();
    let mut rounds = Vec::new();
    for path in names {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let rec: RoundRecord = serde_json::from_str(&text).map_err(|e| SelectionError::Parse(e.to_string()))?;
        rounds.extend(rec.selection);
    }
    ensemble_vote(&rounds, threshold)
}

/// Runs `cfg.rounds` prompt/response/parse rounds (concurrently, up to
/// `cfg.parallelism`) and votes over the valid ones. When `audit_dir` is
/// given, the prompt and one record per round are written there, in round
/// order, including on client failure.
pub fn run_selection(
    dataset: &TrajectoryDataset,
    metadata: &[FeatureMetadata],
    client: &dyn LlmClient,
    cfg: &SelectionConfig,
    audit_dir: Option<&Path>,
) -> Result<SelectionOutcome, SelectionError> {
    if metadata.is_empty() {
        return Err(SelectionError::EmptyMetadata);
    }
    if !(cfg.consensus_threshold > 0.0 && cfg.consensus_threshold <= 1.0) {
        return Err(SelectionError::Threshold(cfg.consensus_threshold));
    }
    if cfg.rounds == 0 {
        return Err(SelectionError::NoRounds);
    }
    let prompt = build_feature_prompt(metadata, &DatasetSummary::of(dataset), &cfg.task);
    let prompt_sha = sha256_hex(prompt.as_bytes());
    if let Some(dir) = audit_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("prompt.txt");
        std::fs::write(&path, &prompt).map_err(io_err(&path))?;
    }
    let known: BTreeSet<String> = dataset.feature_schema.keys().cloned().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<String, LlmError>> = pool.install(|| {
        (0..cfg.rounds)
            .into_par_iter()
            .map(|round| {
                client.complete(&LlmRequest {
                    model: client.model().to_string(),
                    temperature: client.temperature(),
                    prompt: prompt.clone(),
                    kind: PromptKind::FeatureSelection,
                    round,
                    features: Vec::new(),
                })
            })
            .collect()
    });

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut failure = None;
    for (round, res) in results.into_iter().enumerate() {
        match res {
            Ok(text) => {
                let parsed = parse_selection_response(&text, round, &known, &cfg.task.excluded, cfg.task.k);
                let (selection, error) = match parsed {
                    Ok(s) => (Some(s), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                records.push(RoundRecord {
                    round_index: round,
                    model: client.model().to_string(),
                    temperature: client.temperature(),
                    prompt_sha256: prompt_sha.clone(),
                    response: text,
                    selection,
                    error,
                });
            }
            Err(e) => {
                if failure.is_none() {
                    failure = Some((round, e));
                }
            }
        }
    }
    if let Some(dir) = audit_dir {
        write_records(dir, &records)?;
    }
    if let Some((round, source)) = failure {
        return Err(SelectionError::Client {
            round,
            completed: records.len(),
            total: cfg.rounds,
            source,
        });
    }
    let valid: Vec<SelectionRound> = records.iter().filter_map(|r| r.selection.clone()).collect();
    let invalid_rounds: Vec<usize> = records.iter().filter(|r| r.selection.is_none()).map(|r| r.round_index).collect();
    if valid.is_empty() {
        return Err(SelectionError::NoValidRounds(cfg.rounds));
    }
    Ok(SelectionOutcome {
        selected: ensemble_vote(&valid, cfg.consensus_threshold)?,
        frequencies: vote_frequencies(&valid),
        consensus_threshold: cfg.consensus_threshold,
        valid_rounds: valid.len(),
        invalid_rounds,
    })
}
