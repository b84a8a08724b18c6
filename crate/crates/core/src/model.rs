//! Trajectory data model and the on-disk dataset format.
//!
//! Feature values are stored pre-normalized to `[0, 1]`. Every observation
//! carries its own staleness (hours since the feature was last genuinely
//! measured), so forward-filled values keep a record of how old they are.
//! Maps are `BTreeMap`s so serialization order is canonical (lexicographic
//! by id) and `load(save(d)) == d` holds bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("format error at line {line}, column {column}: {message}")]
    Format {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error for patient '{patient_id}', field '{field}': {message}")]
    Validation {
        patient_id: String,
        field: String,
        message: String,
    },
    #[error("schema error for '{id}': {message}")]
    Schema { id: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    fn validation(patient_id: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Validation {
            patient_id: patient_id.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }
}

/// One feature reading. `value` is normalized; `staleness` is the number of
/// hours since the last real measurement (0 when fresh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    #[serde(rename = "v")]
    pub value: f64,
    #[serde(rename = "dt")]
    pub staleness: u32,
}

impl Observation {
    pub fn fresh(value: f64) -> Self {
        Observation {
            value,
            staleness: 0,
        }
    }

    pub fn new(value: f64, staleness: u32) -> Self {
        Observation { value, staleness }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    /// Absolute time in hours from admission.
    pub t: u32,
    /// Clinical severity score at this step.
    pub sofa: f64,
    pub obs: BTreeMap<String, Observation>,
    /// Action levels (discrete) or magnitudes (continuous) keyed by action id.
    #[serde(default)]
    pub action: BTreeMap<String, f64>,
}

impl Step {
    pub fn new(t: u32, sofa: f64) -> Self {
        Step {
            t,
            sofa,
            obs: BTreeMap::new(),
            action: BTreeMap::new(),
        }
    }

    pub fn with_obs(mut self, feature: &str, obs: Observation) -> Self {
        self.obs.insert(feature.to_string(), obs);
        self
    }

    pub fn with_action(mut self, action: &str, level: f64) -> Self {
        self.action.insert(action.to_string(), level);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub patient_id: String,
    pub survived: bool,
    pub sofa_baseline: f64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Builds a trajectory whose SOFA baseline is the severity at the first step.
    pub fn new(patient_id: impl Into<String>, survived: bool, steps: Vec<Step>) -> Self {
        let sofa_baseline = steps.first().map(|s| s.sofa).unwrap_or(0.0);
        Trajectory {
            patient_id: patient_id.into(),
            survived,
            sofa_baseline,
            steps,
        }
    }

    pub fn with_sofa_baseline(mut self, baseline: f64) -> Self {
        self.sofa_baseline = baseline;
        self
    }

    /// Number of transitions (steps minus one).
    pub fn transitions(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    /// Healthy inside an interval.
    NormalRange,
    /// Lower is better.
    DirectionalLow,
    /// Higher is better.
    DirectionalHigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub declared_min: f64,
    pub declared_max: f64,
    pub feature_type: FeatureType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy_interval: Option<[f64; 2]>,
}

impl FeatureSchema {
    /// Maps a normalized value back to declared units for display.
    pub fn denormalize(&self, value: f64) -> f64 {
        self.declared_min + value * (self.declared_max - self.declared_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSchema {
    /// Highest level (discrete) or upper end of the magnitude range (continuous).
    pub max: f64,
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDataset {
    pub feature_schema: BTreeMap<String, FeatureSchema>,
    pub action_schema: BTreeMap<String, ActionSchema>,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn feature_ids(&self) -> impl Iterator<Item = &str> {
        self.feature_schema.keys().map(String::as_str)
    }

    /// Subset keeping the schema and the given trajectories (file order preserved).
    pub fn subset<F: Fn(&Trajectory) -> bool>(&self, keep: F) -> TrajectoryDataset {
        TrajectoryDataset {
            feature_schema: self.feature_schema.clone(),
            action_schema: self.action_schema.clone(),
            trajectories: self.trajectories.iter().filter(|t| keep(t)).cloned().collect(),
        }
    }

    /// Checks every type invariant. Errors name the offending patient and field.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (id, fs) in &self.feature_schema {
            if !(fs.declared_min.is_finite() && fs.declared_max.is_finite()) {
                return Err(ModelError::Schema {
                    id: id.clone(),
                    message: "declared range must be finite".into(),
                });
            }
            match (fs.feature_type, fs.healthy_interval) {
                (FeatureType::NormalRange, None) => {
                    return Err(ModelError::Schema {
                        id: id.clone(),
                        message: "normal_range feature requires healthy_interval".into(),
                    })
                }
                (_, Some([lo, hi])) if !(0.0 <= lo && lo <= hi && hi <= 1.0) => {
                    return Err(ModelError::Schema {
                        id: id.clone(),
                        message: format!("healthy_interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"),
                    })
                }
                _ => {}
            }
        }
        for (id, a) in &self.action_schema {
            if !(a.max.is_finite() && a.max > 0.0) {
                return Err(ModelError::Schema {
                    id: id.clone(),
                    message: "action max must be positive".into(),
                });
            }
        }

        let mut seen = BTreeSet::new();
        for traj in &self.trajectories {
            self.validate_trajectory(traj)?;
            if !seen.insert(traj.patient_id.as_str()) {
                return Err(ModelError::validation(&traj.patient_id, "patient_id", "duplicate patient_id"));
            }
        }
        Ok(())
    }

    fn validate_trajectory(&self, traj: &Trajectory) -> Result<(), ModelError> {
        let pid = traj.patient_id.as_str();
        if traj.steps.len() < 2 {
            return Err(ModelError::validation(pid, "steps", "trajectory needs at least 2 steps"));
        }
        if !(traj.sofa_baseline.is_finite() && traj.sofa_baseline >= 0.0) {
            return Err(ModelError::validation(pid, "sofa_baseline", "must be a nonnegative number"));
        }
        let first_keys: Vec<&String> = traj.steps[0].obs.keys().collect();
        let mut prev_t: Option<u32> = None;
        for (i, step) in traj.steps.iter().enumerate() {
            if let Some(p) = prev_t {
                if step.t <= p {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].t"),
                        "non-increasing time index",
                    ));
                }
            }
            prev_t = Some(step.t);
            if !(step.sofa.is_finite() && step.sofa >= 0.0) {
                return Err(ModelError::validation(pid, format!("steps[{i}].sofa"), "must be a nonnegative number"));
            }
            if !step.obs.keys().eq(first_keys.iter().copied()) {
                return Err(ModelError::validation(
                    pid,
                    format!("steps[{i}].obs"),
                    "feature set differs from step 0",
                ));
            }
            for (fid, o) in &step.obs {
                if !self.feature_schema.contains_key(fid) {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].obs.{fid}"),
                        "feature not declared in feature_schema",
                    ));
                }
                if !(o.value.is_finite() && (0.0..=1.0).contains(&o.value)) {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].obs.{fid}.v"),
                        format!("value out of [0,1]: {}", o.value),
                    ));
                }
            }
            for (aid, &level) in &step.action {
                let Some(schema) = self.action_schema.get(aid) else {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].action.{aid}"),
                        "action not declared in action_schema",
                    ));
                };
                if !(level.is_finite() && level >= 0.0 && level <= schema.max) {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].action.{aid}"),
                        format!("level {level} outside [0, {}]", schema.max),
                    ));
                }
                if schema.kind == ActionKind::Discrete && level.fract() != 0.0 {
                    return Err(ModelError::validation(
                        pid,
                        format!("steps[{i}].action.{aid}"),
                        format!("discrete level {level} is not an integer"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON serialization used for files and content hashes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ds: TrajectoryDataset = serde_json::from_str(text).map_err(|e| ModelError::Format {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        ds.validate()?;
        Ok(ds)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TrajectoryDataset::from_json(&text)
}

pub fn save_dataset(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, dataset.to_json()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Scalar staleness summary for one step: mean over the given features.
/// Features absent from the step are skipped; `None` if none are present.
pub fn mean_staleness<'a>(step: &Step, features: impl IntoIterator<Item = &'a str>) -> Option<f64> {
    let (sum, n) = features
        .into_iter()
        .filter_map(|f| step.obs.get(f))
        .fold((0.0, 0usize), |(s, n), o| (s + o.staleness as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}
