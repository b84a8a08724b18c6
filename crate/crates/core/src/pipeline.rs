//! End-to-end run orchestration: statistics, feature selection, candidate
//! generation, fitness scoring, Pareto selection and off-policy evaluation,
//! checkpointed in a run directory.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json
//! 00_inputs/     dataset.json, policy_table.json (when available)
//! 01_stats/      metadata.json, summary.json
//! 02_features/   features.json, rounds/prompt.txt, rounds/round_NNN.json
//! 03_candidates/ prompt.txt, cand_NNN.json, quarantine/cand_NNN.json
//! 04_fitness/    fitness.json, fitness.csv
//! 05_pareto/     selection.json, champion.json
//! 06_ope/        wis.json, mortality_curve.csv, wis_series.csv
//! ```
//!
//! Each stage records a digest of its inputs (config section plus upstream
//! output digests) and of its output directory. On resume, a completed stage
//! whose input and output digests still match is not recomputed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, compute_metadata, run_selection, DatasetSummary, FeatureMetadata, SelectionConfig, SelectionOutcome};
use crate::fitness::{fitness_from_traces, CompMetricConfig, FitnessVector};
use crate::generate::{self, GenerationConfig};
use crate::llm::{HttpClient, LlmClient, LlmClientConfig, SyntheticClient};
use crate::model::{load_dataset, TrajectoryDataset};
use crate::ope::{self, BootstrapConfig, PolicyProbTable, WisEstimate};
use crate::pareto::{select_champion, Candidate, ParetoResult};
use crate::reward::{trace_dataset, Baseline, BaselineConfig, RewardSpec};
use crate::synth::{self, CohortConfig};
use crate::util::{dir_digest, sha256_hex};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("injected failure at stage {0}")]
    Injected(Stage),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 for usage or configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Inputs,
    Stats,
    Features,
    Candidates,
    Fitness,
    Pareto,
    Ope,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Inputs,
        Stage::Stats,
        Stage::Features,
        Stage::Candidates,
        Stage::Fitness,
        Stage::Pareto,
        Stage::Ope,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Inputs => "00_inputs",
            Stage::Stats => "01_stats",
            Stage::Features => "02_features",
            Stage::Candidates => "03_candidates",
            Stage::Fitness => "04_fitness",
            Stage::Pareto => "05_pareto",
            Stage::Ope => "06_ope",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    /// Accepts a stage name or its number (`0` to `6`).
    pub fn parse(s: &str) -> Option<Stage> {
        if let Ok(i) = s.parse::<usize>() {
            return Stage::ALL.get(i).copied();
        }
        Stage::ALL.iter().copied().find(|st| st.to_string() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Inputs => "inputs",
            Stage::Stats => "stats",
            Stage::Features => "features",
            Stage::Candidates => "candidates",
            Stage::Fitness => "fitness",
            Stage::Pareto => "pareto",
            Stage::Ope => "ope",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    #[default]
    Stub,
    Http,
}

/// Everything a run depends on. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Single source of randomness: synthetic cohort, stub client, bootstrap.
    pub seed: u64,
    /// Dataset file; when absent a synthetic cohort is generated.
    pub dataset: Option<PathBuf>,
    pub cohort: CohortConfig,
    /// Optional explicit missingness sidecar.
    pub missing_mask: Option<PathBuf>,
    /// Evaluation-policy table; the synthetic cohort supplies one otherwise.
    pub policy_table: Option<PathBuf>,
    /// Extra tables (one per checkpoint) for the WIS series.
    pub checkpoint_tables: Vec<PathBuf>,
    /// Use the reward-train partition for stages 1 to 5 and the policy-test
    /// partition for OPE.
    pub use_split: bool,
    pub client: ClientKind,
    pub llm: LlmClientConfig,
    pub selection: SelectionConfig,
    pub generation: GenerationConfig,
    pub metrics: CompMetricConfig,
    pub baseline: BaselineConfig,
    pub bootstrap: BootstrapConfig,
    pub mortality_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            dataset: None,
            cohort: CohortConfig::default(),
            missing_mask: None,
            policy_table: None,
            checkpoint_tables: Vec::new(),
            use_split: false,
            client: ClientKind::Stub,
            llm: LlmClientConfig::default(),
            selection: SelectionConfig::default(),
            generation: GenerationConfig::default(),
            metrics: CompMetricConfig::default(),
            baseline: BaselineConfig::default(),
            bootstrap: BootstrapConfig::default(),
            mortality_bins: 10,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        let t = self.selection.consensus_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(cfg(format!("consensus_threshold must lie in (0,1], got {t}")));
        }
        if self.selection.rounds == 0 {
            return Err(cfg("selection.rounds must be positive".into()));
        }
        if self.selection.task.k == 0 {
            return Err(cfg("selection.task.k must be positive".into()));
        }
        if self.generation.candidates == 0 {
            return Err(cfg("generation.candidates must be positive".into()));
        }
        if self.mortality_bins == 0 {
            return Err(cfg("mortality_bins must be positive".into()));
        }
        self.metrics.validate().map_err(|e| cfg(e.to_string()))?;
        self.bootstrap.validate().map_err(|e| cfg(e.to_string()))?;
        if self.dataset.is_none() {
            self.cohort.validate().map_err(|e| cfg(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run_id: String,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub champion: Option<String>,
    /// Only recorded on request, so reruns stay byte-identical by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        &self.stages[stage.index()]
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Test hook: fail the given stage before it runs.
    pub fail_at: Option<Stage>,
    /// Record a start time (from `SOURCE_DATE_EPOCH` if set, else the clock).
    pub wall_clock: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn reset_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Patient-level 7:1:1:1 partition by hashed patient id.
pub fn split_name(patient_id: &str) -> &'static str {
    let digest = sha256_hex(patient_id.as_bytes());
    let bucket = u64::from_str_radix(&digest[..16], 16).expect("hex") % 10;
    match bucket {
        0..=6 => "policy_train",
        7 => "reward_train",
        8 => "policy_test",
        _ => "reward_test",
    }
}

pub fn split_dataset(dataset: &TrajectoryDataset) -> BTreeMap<&'static str, TrajectoryDataset> {
    ["policy_train", "reward_train", "policy_test", "reward_test"]
        .into_iter()
        .map(|name| (name, dataset.subset(|t| split_name(&t.patient_id) == name)))
        .collect()
}

/// Writes the metadata report for a dataset.
pub fn stage_stats(
    dataset: &TrajectoryDataset,
    mask: Option<&features::MissingMask>,
    dir: &Path,
) -> Result<Vec<FeatureMetadata>, PipelineError> {
    let md = compute_metadata(dataset, mask).map_err(|e| stage_err(Stage::Stats)(e.to_string()))?;
    write_json(&dir.join("metadata.json"), &md)?;
    write_json(&dir.join("summary.json"), &DatasetSummary::of(dataset))?;
    Ok(md)
}

pub fn stage_select(
    dataset: &TrajectoryDataset,
    metadata: &[FeatureMetadata],
    client: &dyn LlmClient,
    cfg: &SelectionConfig,
    dir: &Path,
) -> Result<SelectionOutcome, PipelineError> {
    let rounds = dir.join("rounds");
    let out = run_selection(dataset, metadata, client, cfg, Some(&rounds)).map_err(|e| stage_err(Stage::Features)(e.to_string()))?;
    write_json(&dir.join("features.json"), &out)?;
    if out.selected.is_empty() {
        return Err(stage_err(Stage::Features)("no feature reached the consensus threshold".into()));
    }
    Ok(out)
}

/// Reads a feature-set file: a selection outcome or a plain JSON array.
pub fn load_feature_set(path: &Path) -> Result<Vec<String>, PipelineError> {
    let value: serde_json::Value = read_json(path)?;
    let list = match &value {
        serde_json::Value::Array(_) => value.clone(),
        serde_json::Value::Object(o) => o.get("selected").cloned().unwrap_or(serde_json::Value::Null),
        _ => serde_json::Value::Null,
    };
    let set: BTreeSet<String> = serde_json::from_value(list)
        .map_err(|_| PipelineError::Config(format!("{}: expected a feature list or an object with 'selected'", path.display())))?;
    Ok(set.into_iter().collect())
}

pub fn stage_generate(
    dataset: &TrajectoryDataset,
    features: &[String],
    metadata: &[FeatureMetadata],
    client: &dyn LlmClient,
    cfg: &GenerationConfig,
    dir: &Path,
) -> Result<generate::GenerationOutcome, PipelineError> {
    let err = stage_err(Stage::Candidates);
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let prompt = generate::build_generation_prompt(dataset, features, metadata, &cfg.task);
    std::fs::write(dir.join("prompt.txt"), prompt).map_err(io_err(dir))?;
    let out = generate::generate_candidates(dataset, features, metadata, client, cfg).map_err(|e| err(e.to_string()))?;
    generate::write_candidates(&out, dir).map_err(|e| err(e.to_string()))?;
    if out.valid.is_empty() {
        return Err(err("every candidate was quarantined".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRow {
    pub spec_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<FitnessVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub features: Vec<String>,
    pub candidates: Vec<FitnessRow>,
    pub baselines: Vec<FitnessRow>,
}

impl FitnessReport {
    pub fn valid_candidates(&self) -> Vec<Candidate> {
        self.candidates
            .iter()
            .filter_map(|r| r.fitness.map(|f| Candidate::new(r.spec_id.clone(), f)))
            .collect()
    }
}

fn row(spec_id: String, res: Result<FitnessVector, String>) -> FitnessRow {
    match res {
        Ok(f) => FitnessRow {
            spec_id,
            fitness: Some(f),
            error: None,
        },
        Err(e) => FitnessRow {
            spec_id,
            fitness: None,
            error: Some(e),
        },
    }
}

pub fn score_specs(
    dataset: &TrajectoryDataset,
    specs: &[(String, RewardSpec)],
    features: &[String],
    metrics: &CompMetricConfig,
    baseline: &BaselineConfig,
) -> FitnessReport {
    let candidates = specs
        .iter()
        .map(|(id, spec)| {
            let res = trace_dataset(dataset, spec)
                .map_err(|e| e.to_string())
                .and_then(|tr| fitness_from_traces(dataset, &tr, features, metrics).map_err(|e| e.to_string()));
            row(id.clone(), res)
        })
        .collect();
    let baselines = Baseline::ALL
        .iter()
        .map(|b| {
            let res = b
                .trace_dataset(dataset, baseline)
                .map_err(|e| e.to_string())
                .and_then(|tr| fitness_from_traces(dataset, &tr, features, metrics).map_err(|e| e.to_string()));
            row(b.name().to_string(), res)
        })
        .collect();
    FitnessReport {
        features: features.to_vec(),
        candidates,
        baselines,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_fitness(report: &FitnessReport, dir: &Path) -> Result<(), PipelineError> {
    write_json(&dir.join("fitness.json"), report)?;
    let path = dir.join("fitness.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| PipelineError::Io {
        path: path.clone(),
        source: e.into(),
    })?;
    let mut rows = vec![vec!["kind".to_string(), "spec_id".into(), "j_surv".into(), "j_conf".into(), "j_comp".into(), "error".into()]];
    for (kind, list) in [("candidate", &report.candidates), ("baseline", &report.baselines)] {
        for r in list {
            rows.push(vec![
                kind.to_string(),
                r.spec_id.clone(),
                fmt_opt(r.fitness.map(|f| f.j_surv)),
                fmt_opt(r.fitness.map(|f| f.j_conf)),
                fmt_opt(r.fitness.map(|f| f.j_comp)),
                r.error.clone().unwrap_or_default(),
            ]);
        }
    }
    for r in rows {
        w.write_record(&r).map_err(|e| PipelineError::Io {
            path: path.clone(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(&path))
}

pub fn stage_pareto(report: &FitnessReport, dir: &Path) -> Result<ParetoResult, PipelineError> {
    let cands = report.valid_candidates();
    let result = select_champion(&cands).map_err(|e| stage_err(Stage::Pareto)(e.to_string()))?;
    write_json(&dir.join("selection.json"), &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub spec_id: String,
    pub estimate: WisEstimate,
    pub behavior_mean_return: f64,
}

/// WIS with bootstrap interval for one spec, plus the mortality curve and a
/// WIS series over the checkpoint tables.
#[allow(clippy::too_many_arguments)]
pub fn stage_ope(
    dataset: &TrajectoryDataset,
    spec_id: &str,
    spec: &RewardSpec,
    table: &PolicyProbTable,
    checkpoints: &[(String, PolicyProbTable)],
    bootstrap: &BootstrapConfig,
    bins: usize,
    dir: &Path,
) -> Result<OpeReport, PipelineError> {
    let err = stage_err(Stage::Ope);
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let traces = trace_dataset(dataset, spec).map_err(|e| err(e.to_string()))?;
    let estimate = ope::bootstrap_ci(dataset, &traces, table, bootstrap).map_err(|e| err(e.to_string()))?;
    let behavior_mean_return = traces.iter().map(|t| t.cumulative).sum::<f64>() / traces.len() as f64;
    let report = OpeReport {
        spec_id: spec_id.to_string(),
        estimate,
        behavior_mean_return,
    };
    write_json(&dir.join("wis.json"), &report)?;
    let curve = ope::mortality_curve(dataset, &traces, bins.min(dataset.len())).map_err(|e| err(e.to_string()))?;
    ope::write_mortality_csv(&curve, dir.join("mortality_curve.csv")).map_err(|e| err(e.to_string()))?;
    let series = ope::wis_series(dataset, &traces, checkpoints).map_err(|e| err(e.to_string()))?;
    ope::write_series_csv(&series, dir.join("wis_series.csv")).map_err(|e| err(e.to_string()))?;
    Ok(report)
}

/// Same table with `p_eval` replaced by `p_behavior`.
pub fn behavior_table(table: &PolicyProbTable) -> PolicyProbTable {
    PolicyProbTable(
        table
            .0
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.iter()
                        .map(|e| ope::ProbEntry {
                            p_eval: e.p_behavior,
                            ..*e
                        })
                        .collect(),
                )
            })
            .collect(),
    )
}

pub fn make_client(
    cfg: &PipelineConfig,
    dataset: &TrajectoryDataset,
    metadata: &[FeatureMetadata],
) -> Result<Box<dyn LlmClient>, PipelineError> {
    Ok(match cfg.client {
        ClientKind::Stub => Box::new(SyntheticClient::new(
            cfg.seed,
            cfg.selection.task.k,
            cfg.selection.task.excluded.clone(),
            metadata.to_vec(),
            dataset.feature_schema.clone(),
            dataset.action_schema.clone(),
        )),
        ClientKind::Http => Box::new(HttpClient::new(cfg.llm.clone()).map_err(|e| PipelineError::Config(e.to_string()))?),
    })
}

struct Runner<'a> {
    out: &'a Path,
    opts: &'a RunOptions,
    previous: Option<RunManifest>,
    manifest: RunManifest,
    executed: Vec<Stage>,
    reused: Vec<Stage>,
}

impl Runner<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir_name())
    }

    fn save(&self) -> Result<(), PipelineError> {
        write_json(&self.out.join("manifest.json"), &self.manifest)
    }

    /// Runs `body` unless a matching completed record can be reused.
    fn run<T>(
        &mut self,
        stage: Stage,
        input_hash: String,
        body: impl FnOnce(&Path) -> Result<T, PipelineError>,
        reload: impl FnOnce(&Path) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let dir = self.dir(stage);
        if self.opts.resume {
            if let Some(prev) = self.previous.as_ref().map(|m| m.stage(stage).clone()) {
                let on_disk = dir_digest(&dir).map_err(io_err(&dir))?;
                if prev.status == StageStatus::Completed
                    && prev.input_hash.as_deref() == Some(input_hash.as_str())
                    && prev.output_hash.as_deref() == Some(on_disk.as_str())
                {
                    if let Ok(value) = reload(&dir) {
                        self.manifest.stages[stage.index()] = prev;
                        self.reused.push(stage);
                        self.save()?;
                        return Ok(value);
                    }
                }
            }
        }
        let rec = &mut self.manifest.stages[stage.index()];
        rec.input_hash = Some(input_hash);
        rec.output_hash = None;
        rec.error = None;
        if self.opts.fail_at == Some(stage) {
            let e = PipelineError::Injected(stage);
            rec.status = StageStatus::Failed;
            rec.error = Some(e.to_string());
            self.save()?;
            return Err(e);
        }
        reset_dir(&dir)?;
        match body(&dir) {
            Ok(v) => {
                let rec = &mut self.manifest.stages[stage.index()];
                rec.status = StageStatus::Completed;
                rec.output_hash = Some(dir_digest(&dir).map_err(io_err(&dir))?);
                self.executed.push(stage);
                self.save()?;
                Ok(v)
            }
            Err(e) => {
                let rec = &mut self.manifest.stages[stage.index()];
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                self.save()?;
                Err(e)
            }
        }
    }

    fn output_hash(&self, stage: Stage) -> String {
        self.manifest.stage(stage).output_hash.clone().unwrap_or_default()
    }
}

fn hash_parts(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}").as_bytes())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn read_file(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Runs (or resumes) the full pipeline into `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    // Load or synthesize inputs up front so their hashes define the run.
    let (dataset_text, table_text) = match &cfg.dataset {
        Some(p) => {
            let ds = load_dataset(p).map_err(|e| PipelineError::Config(e.to_string()))?;
            let table = match &cfg.policy_table {
                Some(t) => Some(read_file(t)?),
                None => None,
            };
            (ds.to_json(), table)
        }
        None => {
            let cohort_cfg = CohortConfig {
                seed: cfg.seed,
                ..cfg.cohort.clone()
            };
            let cohort = synth::generate(&cohort_cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
            let table = match &cfg.policy_table {
                Some(t) => read_file(t)?,
                None => cohort.policy_table.to_json(),
            };
            (cohort.dataset.to_json(), Some(table))
        }
    };
    let mask_text = match &cfg.missing_mask {
        Some(p) => Some(read_file(p)?),
        None => None,
    };
    let mut checkpoints_text = Vec::new();
    for p in &cfg.checkpoint_tables {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
        checkpoints_text.push((name, read_file(p)?));
    }

    let config_hash = sha256_hex(json(cfg).as_bytes());
    let mut input_hashes = BTreeMap::new();
    input_hashes.insert("config".to_string(), config_hash.clone());
    input_hashes.insert("dataset".to_string(), sha256_hex(dataset_text.as_bytes()));
    if let Some(t) = &table_text {
        input_hashes.insert("policy_table".to_string(), sha256_hex(t.as_bytes()));
    }
    if let Some(m) = &mask_text {
        input_hashes.insert("missing_mask".to_string(), sha256_hex(m.as_bytes()));
    }
    for (name, text) in &checkpoints_text {
        input_hashes.insert(format!("checkpoint:{name}"), sha256_hex(text.as_bytes()));
    }
    let run_id = hash_parts(&input_hashes.values().map(String::as_str).collect::<Vec<_>>())[..16].to_string();

    let started_at = opts.wall_clock.then(|| {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            })
    });

    let manifest_path = out.join("manifest.json");
    let previous = if opts.resume && manifest_path.exists() {
        RunManifest::load(&manifest_path).ok().filter(|m| m.stages.len() == Stage::ALL.len())
    } else {
        None
    };
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        run_id,
        seed: cfg.seed,
        input_hashes: input_hashes.clone(),
        stages: Stage::ALL
            .iter()
            .map(|&stage| StageRecord {
                stage,
                status: StageStatus::Pending,
                input_hash: None,
                output_hash: None,
                error: None,
            })
            .collect(),
        champion: None,
        started_at,
    };
    let mut r = Runner {
        out,
        opts,
        previous,
        manifest,
        executed: Vec::new(),
        reused: Vec::new(),
    };
    r.save()?;

    // 0: inputs
    let inputs_hash = hash_parts(&input_hashes.values().map(String::as_str).collect::<Vec<_>>());
    let (dataset, table) = {
        let dt = dataset_text.clone();
        let tt = table_text.clone();
        r.run(
            Stage::Inputs,
            inputs_hash,
            |dir| {
                std::fs::write(dir.join("dataset.json"), &dt).map_err(io_err(dir))?;
                if let Some(t) = &tt {
                    std::fs::write(dir.join("policy_table.json"), t).map_err(io_err(dir))?;
                }
                Ok(())
            },
            |_| Ok(()),
        )?;
        let full = TrajectoryDataset::from_json(&dataset_text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let table = match &table_text {
            Some(t) => Some(PolicyProbTable::from_json(t).map_err(|e| PipelineError::Config(e.to_string()))?),
            None => None,
        };
        (full, table)
    };
    let mask = match &mask_text {
        Some(t) => Some(serde_json::from_str::<features::MissingMask>(t).map_err(|e| PipelineError::Config(format!("missing mask: {e}")))?),
        None => None,
    };
    let (reward_ds, ope_ds) = if cfg.use_split {
        let mut parts = split_dataset(&dataset);
        (parts.remove("reward_train").unwrap(), parts.remove("policy_test").unwrap())
    } else {
        (dataset.clone(), dataset)
    };
    if reward_ds.len() < 2 {
        return Err(PipelineError::Config("fewer than 2 trajectories available for reward selection".into()));
    }

    // 1: stats
    let h = hash_parts(&[&r.output_hash(Stage::Inputs), &json(&cfg.use_split)]);
    let metadata = r.run(
        Stage::Stats,
        h,
        |dir| stage_stats(&reward_ds, mask.as_ref(), dir),
        |dir| read_json(&dir.join("metadata.json")),
    )?;

    let client = make_client(cfg, &reward_ds, &metadata)?;

    // 2: features
    let h = hash_parts(&[
        &r.output_hash(Stage::Stats),
        &json(&cfg.selection),
        &json(&cfg.client),
        &json(&cfg.llm),
        &cfg.seed.to_string(),
    ]);
    let selection = r.run(
        Stage::Features,
        h,
        |dir| stage_select(&reward_ds, &metadata, client.as_ref(), &cfg.selection, dir),
        |dir| read_json::<SelectionOutcome>(&dir.join("features.json")),
    )?;
    let features: Vec<String> = selection.selected.iter().cloned().collect();

    // 3: candidates
    let h = hash_parts(&[
        &r.output_hash(Stage::Features),
        &json(&cfg.generation),
        &json(&cfg.client),
        &json(&cfg.llm),
        &cfg.seed.to_string(),
    ]);
    let specs = r.run(
        Stage::Candidates,
        h,
        |dir| stage_generate(&reward_ds, &features, &metadata, client.as_ref(), &cfg.generation, dir).map(|o| o.valid),
        |dir| {
            generate::load_candidates(dir)
                .map(|(specs, _)| specs)
                .map_err(|e| PipelineError::Config(e.to_string()))
        },
    )?;

    // 4: fitness
    let h = hash_parts(&[&r.output_hash(Stage::Candidates), &json(&cfg.metrics), &json(&cfg.baseline)]);
    let report = r.run(
        Stage::Fitness,
        h,
        |dir| {
            let report = score_specs(&reward_ds, &specs, &features, &cfg.metrics, &cfg.baseline);
            write_fitness(&report, dir)?;
            if report.valid_candidates().is_empty() {
                return Err(stage_err(Stage::Fitness)("no candidate produced a valid fitness vector".into()));
            }
            Ok(report)
        },
        |dir| read_json(&dir.join("fitness.json")),
    )?;

    // 5: pareto
    let h = hash_parts(&[&r.output_hash(Stage::Fitness)]);
    let pareto = r.run(
        Stage::Pareto,
        h,
        |dir| {
            let res = stage_pareto(&report, dir)?;
            let spec = &specs.iter().find(|(id, _)| *id == res.champion).expect("champion among specs").1;
            std::fs::write(dir.join("champion.json"), spec.to_json() + "\n").map_err(io_err(dir))?;
            Ok(res)
        },
        |dir| read_json(&dir.join("selection.json")),
    )?;
    r.manifest.champion = Some(pareto.champion.clone());
    r.save()?;

    // 6: ope
    let h = hash_parts(&[
        &r.output_hash(Stage::Pareto),
        &r.output_hash(Stage::Inputs),
        &json(&cfg.bootstrap),
        &cfg.mortality_bins.to_string(),
        &cfg.seed.to_string(),
    ]);
    match &table {
        Some(table) => {
            let champion_spec = specs
                .iter()
                .find(|(id, _)| *id == pareto.champion)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| stage_err(Stage::Ope)("champion spec not found".into()))?;
            let mut checkpoints = vec![("behavior".to_string(), behavior_table(table)), ("evaluation".to_string(), table.clone())];
            for (name, text) in &checkpoints_text {
                checkpoints.push((name.clone(), PolicyProbTable::from_json(text).map_err(|e| PipelineError::Config(e.to_string()))?));
            }
            let bootstrap = BootstrapConfig {
                seed: cfg.seed,
                ..cfg.bootstrap.clone()
            };
            let champion = pareto.champion.clone();
            r.run(
                Stage::Ope,
                h,
                |dir| stage_ope(&ope_ds, &champion, &champion_spec, table, &checkpoints, &bootstrap, cfg.mortality_bins, dir),
                |dir| read_json::<OpeReport>(&dir.join("wis.json")),
            )?;
        }
        None => {
            r.manifest.stages[Stage::Ope.index()].status = StageStatus::Skipped;
            r.save()?;
        }
    }

    Ok(RunReport {
        manifest: r.manifest,
        executed: r.executed,
        reused: r.reused,
    })
}
