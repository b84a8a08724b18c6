//! Seeded synthetic cohorts with controllable couplings between latent
//! health, mortality, measurement staleness and over-treatment.
//!
//! Generative model, per patient `i`:
//! - latent health `h_t ∈ [0.02, 0.98]` starts near 0.6 and follows
//!   `h_{t+1} = h_t + d_i + ε_t` with a patient trend `d_i ~ N(0, 0.015)` and
//!   `ε_t ~ N(0, 0.015)`;
//! - deviation `D = 1 − h` drives every feature: normal-range features leave
//!   their healthy interval by `0.45·D` on a patient-specific side,
//!   directional-low features sit at `0.1 + 0.8·D`, directional-high at
//!   `0.9 − 0.8·D` (all with small noise);
//! - each feature is measured with probability `p_f·exp(−1.5·β_u·g_i)` where
//!   `g_i ~ U(0,1)`; unmeasured steps carry the last value forward;
//! - SOFA is `round(2 + 16·D + noise)` clamped to `[0, 24]`;
//! - death probability is `(1−β_m)·0.3 + β_m·σ(30·(0.6 − mean h))`;
//! - doses follow a discretized bell around `L·(1.2·D − 0.1)`; with
//!   probability `β_a` a patient is over-treated and receives the maximum
//!   level with probability 0.9 at every step. Doses never change the state;
//! - the evaluation policy mixes the untargeted dose bell (weight 0.8) with
//!   the same bell shifted one level lower (weight 0.2).
//!
//! Every draw comes from a stream keyed on `(seed, patient, tag)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionKind, ActionSchema, FeatureSchema, FeatureType, Observation, Step, Trajectory, TrajectoryDataset};
use crate::ope::{PolicyProbTable, ProbEntry};
use crate::reward::{RewardSpec, SurvivalConfig};
use crate::util::keyed_rng;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_patients: usize,
    /// Inclusive range of steps per trajectory.
    pub horizon: [usize; 2],
    pub n_normal: usize,
    pub n_dir_low: usize,
    pub n_dir_high: usize,
    /// Healthy interval shared by the normal-range features.
    pub healthy_interval: [f64; 2],
    /// Adds a static `age` feature (fresh at admission, stale afterwards).
    pub demographics: bool,
    pub n_actions: usize,
    pub action_levels: u32,
    pub beta_m: f64,
    pub beta_u: f64,
    pub beta_a: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 500,
            horizon: [12, 36],
            n_normal: 4,
            n_dir_low: 3,
            n_dir_high: 3,
            healthy_interval: [0.4, 0.6],
            demographics: true,
            n_actions: 2,
            action_levels: 4,
            beta_m: 1.0,
            beta_u: 1.0,
            beta_a: 0.2,
            seed: 42,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: &str| Err(CohortError::Config(m.to_string()));
        if self.n_patients < 2 {
            return bad("n_patients must be at least 2");
        }
        if self.horizon[0] < 2 || self.horizon[0] > self.horizon[1] {
            return bad("horizon must satisfy 2 <= min <= max");
        }
        if self.n_normal + self.n_dir_low + self.n_dir_high == 0 {
            return bad("at least one physiological feature is required");
        }
        let [lo, hi] = self.healthy_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("healthy_interval must satisfy 0 <= lo < hi <= 1");
        }
        if self.n_actions > 0 && self.action_levels == 0 {
            return bad("action_levels must be positive");
        }
        for (name, b) in [("beta_m", self.beta_m), ("beta_a", self.beta_a)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(CohortError::Config(format!("{name} must lie in [0,1], got {b}")));
            }
        }
        if !(self.beta_u.is_finite() && self.beta_u >= 0.0) {
            return bad("beta_u must be nonnegative");
        }
        Ok(())
    }

    pub fn feature_ids(&self) -> Vec<(String, FeatureType)> {
        let mut out = Vec::new();
        out.extend((0..self.n_normal).map(|i| (format!("norm_{i}"), FeatureType::NormalRange)));
        out.extend((0..self.n_dir_low).map(|i| (format!("low_{i}"), FeatureType::DirectionalLow)));
        out.extend((0..self.n_dir_high).map(|i| (format!("high_{i}"), FeatureType::DirectionalHigh)));
        out
    }

    pub fn action_ids(&self) -> Vec<String> {
        (0..self.n_actions).map(|i| format!("dose_{i}")).collect()
    }
}

/// Ground truth the generator knows about each patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub trend: f64,
    pub staleness_offset: f64,
    pub overtreated: bool,
    pub mean_health: f64,
    pub p_death: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub dataset: TrajectoryDataset,
    pub truth: Vec<PatientTruth>,
    /// Logged-action probabilities under the generating policy and under a
    /// lower-dose evaluation policy.
    pub policy_table: PolicyProbTable,
}

const STREAM_INIT: u64 = 1;
const STREAM_DYNAMICS: u64 = 2;
const STREAM_MEASURE: u64 = 3;
const STREAM_ACTIONS: u64 = 4;
const STREAM_OUTCOME: u64 = 5;

fn stream(patient: usize, tag: u64) -> u64 {
    ((patient as u64) << 8) | tag
}

/// Weight of the one-level-lower dose bell in the evaluation policy mixture.
const EVAL_SHIFT: f64 = 0.2;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Discretized bell over `0..=levels` centred at `mu`.
fn dose_distribution(mu: f64, levels: u32) -> Vec<f64> {
    let w: Vec<f64> = (0..=levels).map(|l| (-0.5 * ((l as f64 - mu) / 0.8).powi(2)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

struct PatientOut {
    trajectory: Trajectory,
    truth: PatientTruth,
    probs: Vec<ProbEntry>,
}

fn generate_patient(cfg: &CohortConfig, i: usize) -> PatientOut {
    let noise: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut init = keyed_rng(cfg.seed, stream(i, STREAM_INIT));
    let mut dyn_rng = keyed_rng(cfg.seed, stream(i, STREAM_DYNAMICS));
    let mut meas = keyed_rng(cfg.seed, stream(i, STREAM_MEASURE));
    let mut act = keyed_rng(cfg.seed, stream(i, STREAM_ACTIONS));
    let mut out_rng = keyed_rng(cfg.seed, stream(i, STREAM_OUTCOME));

    let patient_id = format!("P{i:05}");
    let features = cfg.feature_ids();
    let actions = cfg.action_ids();
    let horizon = init.random_range(cfg.horizon[0]..=cfg.horizon[1]);
    let trend = 0.015 * noise.sample(&mut init);
    let staleness_offset: f64 = init.random();
    let overtreated = init.random::<f64>() < cfg.beta_a;
    let sides: Vec<f64> = features.iter().map(|_| if init.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let age: f64 = init.random_range(0.1..0.9);
    let mut h: f64 = (0.6 + 0.02 * noise.sample(&mut init)).clamp(0.02, 0.98);

    let [lo, hi] = cfg.healthy_interval;
    let center = 0.5 * (lo + hi);
    let p_measure: Vec<f64> = (0..features.len())
        .map(|f| (0.6 + 0.3 * ((f * 7) % 5) as f64 / 4.0) * (-1.5 * cfg.beta_u * staleness_offset).exp())
        .collect();

    let mut steps = Vec::with_capacity(horizon);
    let mut probs = Vec::with_capacity(horizon);
    let mut last: Vec<(f64, u32)> = vec![(0.0, 0); features.len()];
    let mut health_sum = 0.0;
    let mut t: u32 = 0;
    for k in 0..horizon {
        if k > 0 {
            let u: f64 = dyn_rng.random();
            t += if u < 0.8 { 1 } else if u < 0.95 { 2 } else { 3 };
            h = (h + trend + 0.015 * noise.sample(&mut dyn_rng)).clamp(0.02, 0.98);
        }
        health_sum += h;
        let dev = 1.0 - h;
        let sofa = (2.0 + 16.0 * dev + 0.7 * noise.sample(&mut dyn_rng)).round().clamp(0.0, 24.0);
        let mut step = Step::new(t, sofa);
        for (f, (id, ftype)) in features.iter().enumerate() {
            let jitter = 0.02 * noise.sample(&mut dyn_rng);
            let value = match ftype {
                FeatureType::NormalRange => center + sides[f] * 0.45 * dev + jitter,
                FeatureType::DirectionalLow => 0.1 + 0.8 * dev + jitter,
                FeatureType::DirectionalHigh => 0.9 - 0.8 * dev + jitter,
            }
            .clamp(0.0, 1.0);
            let measured = k == 0 || meas.random::<f64>() < p_measure[f];
            if measured {
                last[f] = (value, t);
            }
            step = step.with_obs(id, Observation::new(last[f].0, t - last[f].1));
        }
        if cfg.demographics {
            step = step.with_obs("age", Observation::new(age, t));
        }

        let levels = cfg.action_levels;
        let mu_b = levels as f64 * (1.2 * dev - 0.1);
        let dist_b = dose_distribution(mu_b, levels);
        let dist_e: Vec<f64> = dose_distribution(mu_b - 1.0, levels)
            .iter()
            .zip(&dist_b)
            .map(|(low, b)| EVAL_SHIFT * low + (1.0 - EVAL_SHIFT) * b)
            .collect();
        let (mut p_b, mut p_e) = (1.0, 1.0);
        for a in &actions {
            let level = if overtreated && act.random::<f64>() < 0.9 {
                levels as usize
            } else {
                sample_categorical(&dist_b, &mut act)
            };
            let pb = if overtreated {
                0.9 * f64::from(level == levels as usize) + 0.1 * dist_b[level]
            } else {
                dist_b[level]
            };
            p_b *= pb;
            p_e *= dist_e[level];
            step = step.with_action(a, level as f64);
        }
        if k + 1 < horizon {
            probs.push(ProbEntry {
                t,
                p_eval: p_e,
                p_behavior: p_b,
            });
        }
        steps.push(step);
    }
    let mean_health = health_sum / horizon as f64;
    let p_death = (1.0 - cfg.beta_m) * 0.3 + cfg.beta_m * logistic(30.0 * (0.6 - mean_health));
    let survived = out_rng.random::<f64>() >= p_death;
    PatientOut {
        trajectory: Trajectory::new(patient_id.clone(), survived, steps),
        truth: PatientTruth {
            patient_id,
            trend,
            staleness_offset,
            overtreated,
            mean_health,
            p_death,
        },
        probs,
    }
}

/// Generates a cohort. Output is a pure function of `cfg`.
pub fn generate(cfg: &CohortConfig) -> Result<SyntheticCohort, CohortError> {
    cfg.validate()?;
    let patients: Vec<PatientOut> = (0..cfg.n_patients).into_par_iter().map(|i| generate_patient(cfg, i)).collect();
    let mut feature_schema = BTreeMap::new();
    for (id, ftype) in cfg.feature_ids() {
        feature_schema.insert(
            id,
            FeatureSchema {
                declared_min: 0.0,
                declared_max: 100.0,
                feature_type: ftype,
                healthy_interval: (ftype == FeatureType::NormalRange).then_some(cfg.healthy_interval),
            },
        );
    }
    if cfg.demographics {
        feature_schema.insert(
            "age".into(),
            FeatureSchema {
                declared_min: 18.0,
                declared_max: 90.0,
                feature_type: FeatureType::DirectionalLow,
                healthy_interval: None,
            },
        );
    }
    let action_schema = cfg
        .action_ids()
        .into_iter()
        .map(|a| {
            (
                a,
                ActionSchema {
                    max: cfg.action_levels as f64,
                    kind: ActionKind::Discrete,
                },
            )
        })
        .collect();
    let mut trajectories = Vec::with_capacity(patients.len());
    let mut truth = Vec::with_capacity(patients.len());
    let mut table = BTreeMap::new();
    for p in patients {
        table.insert(p.truth.patient_id.clone(), p.probs);
        trajectories.push(p.trajectory);
        truth.push(p.truth);
    }
    Ok(SyntheticCohort {
        dataset: TrajectoryDataset {
            feature_schema,
            action_schema,
            trajectories,
        },
        truth,
        policy_table: PolicyProbTable(table),
    })
}

/// Hand-written reference spec matched to the generator: a bell at the
/// healthy-interval centre with σ = half-width + 0.2 for normal-range
/// features and τ_s = 0.3 decays for directional ones, a light dose cost
/// and 24-hour confidence decay.
pub fn reference_spec(cfg: &CohortConfig) -> RewardSpec {
    let [lo, hi] = cfg.healthy_interval;
    let mut survival = BTreeMap::new();
    let mut confidence_tau = BTreeMap::new();
    for (id, ftype) in cfg.feature_ids() {
        let sc = match ftype {
            FeatureType::NormalRange => SurvivalConfig::bell(0.5 * (lo + hi), 0.5 * (hi - lo) + 0.2),
            FeatureType::DirectionalLow => SurvivalConfig::decay_low(0.3),
            FeatureType::DirectionalHigh => SurvivalConfig::decay_high(0.3),
        };
        survival.insert(id.clone(), sc);
        confidence_tau.insert(id, 24.0);
    }
    RewardSpec {
        survival,
        confidence_tau,
        decay_half_life: 240.0,
        gamma: 0.99,
        lambda: 0.02,
        action_cost_scale: 0.25,
        action_max: cfg.action_ids().into_iter().map(|a| (a, cfg.action_levels as f64)).collect(),
        normalize_weights: true,
    }
}
