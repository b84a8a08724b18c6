//! Declarative potential-based reward functions and baseline reward models.
//!
//! A [`RewardSpec`] describes a health potential
//!
//! ```text
//! Φ(s_t, t) = δ(t) · Σ_f ω_f · S_f(v_{t,f}) · U_f(Δt_{t,f}) / Σ_f ω_f
//! ```
//!
//! and the per-transition reward `γ·Φ(s_{t+1}, t+1) − Φ(s_t, t) − λ·C(a_t)`.
//! The action cost sits outside the potential, so with `λ = 0` the
//! discounted return telescopes to `γ^T Φ_T − Φ_0`.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Step, Trajectory, TrajectoryDataset};
use crate::util::inf_f64;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward spec: {0}")]
    InvalidSpec(String),
    #[error("spec parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown action id '{0}' (not in action_max)")]
    UnknownAction(String),
    #[error("trajectory '{0}' has fewer than 2 steps")]
    TooShort(String),
    #[error("trajectory '{patient_id}': {message}")]
    Validation { patient_id: String, message: String },
    #[error("all raw credits are zero; cannot rescale")]
    DegenerateCredits,
    #[error("credit count {got} does not match transition count {expected}")]
    CreditLength { got: usize, expected: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Shape of a survival score curve over a normalized value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurvivalForm {
    /// Gaussian bump around `target`.
    Bell { target: f64, sigma: f64 },
    /// Lower is better: `exp(−v/τ)`.
    DecayLow { tau: f64 },
    /// Higher is better: `exp(−(1−v)/τ)`.
    DecayHigh { tau: f64 },
    /// Flat at 1 up to `target`, then halves every `sigma` above it.
    AsymmetricAbove { target: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSurvivalConfig", into = "RawSurvivalConfig")]
pub struct SurvivalConfig {
    pub form: SurvivalForm,
    pub weight: f64,
}

impl SurvivalConfig {
    pub fn bell(target: f64, sigma: f64) -> Self {
        SurvivalConfig {
            form: SurvivalForm::Bell { target, sigma },
            weight: 1.0,
        }
    }

    pub fn decay_low(tau: f64) -> Self {
        SurvivalConfig {
            form: SurvivalForm::DecayLow { tau },
            weight: 1.0,
        }
    }

    pub fn decay_high(tau: f64) -> Self {
        SurvivalConfig {
            form: SurvivalForm::DecayHigh { tau },
            weight: 1.0,
        }
    }

    pub fn asymmetric_above(target: f64, sigma: f64) -> Self {
        SurvivalConfig {
            form: SurvivalForm::AsymmetricAbove { target, sigma },
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    fn check(&self) -> Result<(), String> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        let unit = |v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("target must lie in [0,1], got {v}"))
            }
        };
        pos("weight", self.weight)?;
        match self.form {
            SurvivalForm::Bell { target, sigma } | SurvivalForm::AsymmetricAbove { target, sigma } => {
                unit(target)?;
                pos("sigma", sigma)
            }
            SurvivalForm::DecayLow { tau } | SurvivalForm::DecayHigh { tau } => pos("tau", tau),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurvivalConfig {
    form: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    weight: f64,
}

impl TryFrom<RawSurvivalConfig> for SurvivalConfig {
    type Error = String;

    fn try_from(raw: RawSurvivalConfig) -> Result<Self, String> {
        let form = match (raw.form.as_str(), raw.target, raw.sigma, raw.tau) {
            ("bell", Some(target), Some(sigma), None) => SurvivalForm::Bell { target, sigma },
            ("asymmetric_above", Some(target), Some(sigma), None) => SurvivalForm::AsymmetricAbove { target, sigma },
            ("decay_low", None, None, Some(tau)) => SurvivalForm::DecayLow { tau },
            ("decay_high", None, None, Some(tau)) => SurvivalForm::DecayHigh { tau },
            ("bell" | "asymmetric_above", ..) => {
                return Err(format!("form '{}' takes exactly `target` and `sigma`", raw.form))
            }
            ("decay_low" | "decay_high", ..) => return Err(format!("form '{}' takes exactly `tau`", raw.form)),
            (other, ..) => return Err(format!("unknown survival form '{other}'")),
        };
        let cfg = SurvivalConfig {
            form,
            weight: raw.weight,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

impl From<SurvivalConfig> for RawSurvivalConfig {
    fn from(c: SurvivalConfig) -> Self {
        let (form, target, sigma, tau) = match c.form {
            SurvivalForm::Bell { target, sigma } => ("bell", Some(target), Some(sigma), None),
            SurvivalForm::AsymmetricAbove { target, sigma } => ("asymmetric_above", Some(target), Some(sigma), None),
            SurvivalForm::DecayLow { tau } => ("decay_low", None, None, Some(tau)),
            SurvivalForm::DecayHigh { tau } => ("decay_high", None, None, Some(tau)),
        };
        RawSurvivalConfig {
            form: form.to_string(),
            target,
            sigma,
            tau,
            weight: c.weight,
        }
    }
}

fn default_true() -> bool {
    true
}

/// One candidate reward function. Parsed strictly: unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub survival: BTreeMap<String, SurvivalConfig>,
    /// Confidence decay constant per feature, in hours. `"inf"` disables it.
    #[serde(with = "inf_f64::map")]
    pub confidence_tau: BTreeMap<String, f64>,
    /// Half-life of the strategic time decay, in time steps. `"inf"` disables it.
    #[serde(with = "inf_f64")]
    pub decay_half_life: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub action_cost_scale: f64,
    pub action_max: BTreeMap<String, f64>,
    /// Divide the weighted survival sum by the total weight.
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::InvalidSpec(m));
        if self.survival.is_empty() {
            return bad("survival config is empty".into());
        }
        if !self.survival.keys().eq(self.confidence_tau.keys()) {
            return bad("survival and confidence_tau must have identical feature keys".into());
        }
        for (f, cfg) in &self.survival {
            cfg.check().map_err(|m| RewardError::InvalidSpec(format!("survival.{f}: {m}")))?;
        }
        for (f, &tau) in &self.confidence_tau {
            if !(tau > 0.0) || tau.is_nan() {
                return bad(format!("confidence_tau.{f} must be positive, got {tau}"));
            }
        }
        if !(self.decay_half_life > 0.0) {
            return bad(format!("decay_half_life must be positive, got {}", self.decay_half_life));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0,1], got {}", self.gamma));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.action_cost_scale.is_finite() && self.action_cost_scale >= 0.0) {
            return bad(format!("action_cost_scale must be nonnegative, got {}", self.action_cost_scale));
        }
        for (a, &m) in &self.action_max {
            if !(m.is_finite() && m > 0.0) {
                return bad(format!("action_max.{a} must be positive, got {m}"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RewardError> {
        let spec: RewardSpec = serde_json::from_str(text).map_err(|e| RewardError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RewardError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| RewardError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RewardError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| RewardError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.survival.keys().map(String::as_str)
    }

    /// Copy with the confidence component switched off (τ = ∞ for every feature).
    pub fn without_confidence(&self) -> Self {
        let mut s = self.clone();
        for tau in s.confidence_tau.values_mut() {
            *tau = f64::INFINITY;
        }
        s
    }

    /// Copy with a different cost multiplier.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        RewardSpec {
            lambda,
            ..self.clone()
        }
    }
}

/// Survival score of one normalized value, clamped to `[0, 1]`.
pub fn survival_score(value: f64, cfg: &SurvivalConfig) -> f64 {
    let s = match cfg.form {
        SurvivalForm::Bell { target, sigma } => {
            let z = (value - target) / sigma;
            (-0.5 * z * z).exp()
        }
        SurvivalForm::DecayLow { tau } => (-value / tau).exp(),
        SurvivalForm::DecayHigh { tau } => (-(1.0 - value) / tau).exp(),
        SurvivalForm::AsymmetricAbove { target, sigma } => {
            if value <= target {
                1.0
            } else {
                (-(LN_2 / sigma) * (value - target)).exp()
            }
        }
    };
    s.clamp(0.0, 1.0)
}

/// Trust in a reading that is `staleness` hours old.
pub fn confidence_weight(staleness: f64, tau: f64) -> f64 {
    (-staleness / tau).exp()
}

/// Strategic annealing factor `0.5^(t / half_life)`.
pub fn time_decay(t: f64, half_life: f64) -> f64 {
    0.5f64.powf(t / half_life)
}

/// `w_c · Σ_i a_i / a_max,i`. Action ids missing from `spec.action_max` are errors.
pub fn competence_cost(action: &BTreeMap<String, f64>, spec: &RewardSpec) -> Result<f64, RewardError> {
    let mut total = 0.0;
    for (id, &level) in action {
        let max = spec
            .action_max
            .get(id)
            .ok_or_else(|| RewardError::UnknownAction(id.clone()))?;
        total += level / max;
    }
    Ok(spec.action_cost_scale * total)
}

/// Health potential of one step. Features in the spec but absent from the
/// step carry zero confidence and drop out of the weight normalizer; if every
/// feature is absent the undecayed potential is the neutral 0.5.
pub fn potential(step: &Step, spec: &RewardSpec) -> f64 {
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    for (feature, cfg) in &spec.survival {
        let Some(obs) = step.obs.get(feature) else {
            continue;
        };
        let tau = spec.confidence_tau.get(feature).copied().unwrap_or(f64::INFINITY);
        weighted += cfg.weight * survival_score(obs.value, cfg) * confidence_weight(obs.staleness as f64, tau);
        weight_sum += cfg.weight;
    }
    let base = if weight_sum == 0.0 {
        0.5
    } else if spec.normalize_weights {
        weighted / weight_sum
    } else {
        weighted
    };
    time_decay(step.t as f64, spec.decay_half_life) * base
}

/// `γ·Φ(next) − Φ(prev) − λ·C(prev.action)`. The next action does not enter.
pub fn reward(prev: &Step, next: &Step, spec: &RewardSpec) -> Result<f64, RewardError> {
    let cost = competence_cost(&prev.action, spec)?;
    Ok(spec.gamma * potential(next, spec) - potential(prev, spec) - spec.lambda * cost)
}

/// Per-transition rewards, per-step potentials and the discounted return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub rewards: Vec<f64>,
    /// One potential per step; empty for baselines that have none.
    pub potentials: Vec<f64>,
    pub cumulative: f64,
    pub gamma: f64,
}

impl RewardTrace {
    /// Builds a trace from raw rewards, computing `Σ_t γ^t r_t`.
    pub fn from_rewards(rewards: Vec<f64>, potentials: Vec<f64>, gamma: f64) -> Self {
        let cumulative = discounted_sum(&rewards, gamma);
        RewardTrace {
            rewards,
            potentials,
            cumulative,
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut disc = 1.0;
    let mut total = 0.0;
    for &v in values {
        total += disc * v;
        disc *= gamma;
    }
    total
}

pub fn trace(trajectory: &Trajectory, spec: &RewardSpec) -> Result<RewardTrace, RewardError> {
    if trajectory.steps.len() < 2 {
        return Err(RewardError::TooShort(trajectory.patient_id.clone()));
    }
    let potentials: Vec<f64> = trajectory.steps.iter().map(|s| potential(s, spec)).collect();
    let mut rewards = Vec::with_capacity(potentials.len() - 1);
    for (i, pair) in potentials.windows(2).enumerate() {
        let cost = competence_cost(&trajectory.steps[i].action, spec)?;
        rewards.push(spec.gamma * pair[1] - pair[0] - spec.lambda * cost);
    }
    Ok(RewardTrace::from_rewards(rewards, potentials, spec.gamma))
}

/// Traces for every trajectory, in dataset order.
pub fn trace_dataset(dataset: &TrajectoryDataset, spec: &RewardSpec) -> Result<Vec<RewardTrace>, RewardError> {
    dataset.trajectories.par_iter().map(|t| trace(t, spec)).collect()
}

/// Magnitudes used by the heuristic baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub gamma: f64,
    /// Terminal reward for survival (negated for death).
    pub outcome_reward: f64,
    /// Multiplier on the negative SOFA delta.
    pub sofa_scale: f64,
    /// Total credit the LLM-as-reward baseline distributes.
    pub llmr_total: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            gamma: 0.99,
            outcome_reward: 100.0,
            sofa_scale: 1.0,
            llmr_total: 15.0,
        }
    }
}

fn require_transitions(trajectory: &Trajectory) -> Result<usize, RewardError> {
    let n = trajectory.transitions();
    if n == 0 {
        return Err(RewardError::TooShort(trajectory.patient_id.clone()));
    }
    Ok(n)
}

/// Outcome-only rewards: zero everywhere except ±`outcome_reward` on the final transition.
pub fn baseline_orm(trajectory: &Trajectory, cfg: &BaselineConfig) -> Result<RewardTrace, RewardError> {
    let n = require_transitions(trajectory)?;
    let mut rewards = vec![0.0; n];
    rewards[n - 1] = if trajectory.survived {
        cfg.outcome_reward
    } else {
        -cfg.outcome_reward
    };
    Ok(RewardTrace::from_rewards(rewards, Vec::new(), cfg.gamma))
}

/// Process rewards: the decrease in SOFA between consecutive steps.
pub fn baseline_prm(trajectory: &Trajectory, cfg: &BaselineConfig) -> Result<RewardTrace, RewardError> {
    require_transitions(trajectory)?;
    if let Some(i) = trajectory.steps.iter().position(|s| !s.sofa.is_finite()) {
        return Err(RewardError::Validation {
            patient_id: trajectory.patient_id.clone(),
            message: format!("missing sofa at step {i}"),
        });
    }
    let rewards = trajectory
        .steps
        .windows(2)
        .map(|w| -cfg.sofa_scale * (w[1].sofa - w[0].sofa))
        .collect();
    Ok(RewardTrace::from_rewards(rewards, Vec::new(), cfg.gamma))
}

/// Outcome plus process rewards, elementwise.
pub fn baseline_oprm(trajectory: &Trajectory, cfg: &BaselineConfig) -> Result<RewardTrace, RewardError> {
    let orm = baseline_orm(trajectory, cfg)?;
    let prm = baseline_prm(trajectory, cfg)?;
    let rewards = orm.rewards.iter().zip(&prm.rewards).map(|(a, b)| a + b).collect();
    Ok(RewardTrace::from_rewards(rewards, Vec::new(), cfg.gamma))
}

/// Rescales LLM-assigned credits so they sum to `+total` (survivor) or
/// `−total`. Zeros stay zero. Nonzero credits are scaled by a common factor;
/// if they already cancel to zero, a common shift is applied instead.
pub fn baseline_llmr_normalize(raw: &[f64], survived: bool, total: f64) -> Result<Vec<f64>, RewardError> {
    let target = if survived { total } else { -total };
    let nonzero = raw.iter().filter(|&&c| c != 0.0).count();
    if nonzero == 0 {
        return Err(RewardError::DegenerateCredits);
    }
    let sum: f64 = raw.iter().sum();
    if sum != 0.0 {
        let scale = target / sum;
        Ok(raw.iter().map(|c| c * scale).collect())
    } else {
        let shift = target / nonzero as f64;
        Ok(raw.iter().map(|&c| if c == 0.0 { 0.0 } else { c + shift }).collect())
    }
}

/// LLM-as-reward trace from raw per-transition credits.
pub fn baseline_llmr(trajectory: &Trajectory, raw_credits: &[f64], cfg: &BaselineConfig) -> Result<RewardTrace, RewardError> {
    let n = require_transitions(trajectory)?;
    if raw_credits.len() != n {
        return Err(RewardError::CreditLength {
            got: raw_credits.len(),
            expected: n,
        });
    }
    let rewards = baseline_llmr_normalize(raw_credits, trajectory.survived, cfg.llmr_total)?;
    Ok(RewardTrace::from_rewards(rewards, Vec::new(), cfg.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Orm,
    Prm,
    Oprm,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Orm, Baseline::Prm, Baseline::Oprm];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Orm => "orm",
            Baseline::Prm => "prm",
            Baseline::Oprm => "oprm",
        }
    }

    pub fn trace(self, trajectory: &Trajectory, cfg: &BaselineConfig) -> Result<RewardTrace, RewardError> {
        match self {
            Baseline::Orm => baseline_orm(trajectory, cfg),
            Baseline::Prm => baseline_prm(trajectory, cfg),
            Baseline::Oprm => baseline_oprm(trajectory, cfg),
        }
    }

    pub fn trace_dataset(self, dataset: &TrajectoryDataset, cfg: &BaselineConfig) -> Result<Vec<RewardTrace>, RewardError> {
        dataset.trajectories.iter().map(|t| self.trace(t, cfg)).collect()
    }
}
