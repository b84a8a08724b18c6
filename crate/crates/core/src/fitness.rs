//! Offline fitness of a reward function against a labelled dataset.
//!
//! Three correlations over trajectories, all computed from the same set of
//! reward traces:
//!
//! * survival: `ρ(R_τ, G(τ))` where `G` adds the survival indicator to the
//!   fraction of steps whose SOFA stays within `ε` of baseline;
//! * confidence: `−ρ(R_τ, U(τ))` where `U` is the mean staleness of the
//!   critical features;
//! * competence: `ρ(R_τ, E_τ)` where `E_t` is the homeostasis gain of a
//!   transition minus `α` times the normalized dose.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features;
use crate::model::{FeatureSchema, FeatureType, Step, Trajectory, TrajectoryDataset};
use crate::reward::{self, RewardError, RewardSpec, RewardTrace};

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("degenerate correlation: {side} has zero variance")]
    DegenerateCorrelation { side: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("critical feature set is empty")]
    EmptyFeatureSet,
    #[error("feature '{0}' is not in the dataset schema")]
    UnknownFeature(String),
    #[error("config error for feature '{feature}': {message}")]
    Config { feature: String, message: String },
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("trajectory '{patient_id}': {message}")]
    Validation { patient_id: String, message: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessVector {
    pub j_surv: f64,
    pub j_conf: f64,
    pub j_comp: f64,
}

impl FitnessVector {
    pub fn new(j_surv: f64, j_conf: f64, j_comp: f64) -> Self {
        FitnessVector { j_surv, j_conf, j_comp }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.j_surv, self.j_conf, self.j_comp]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompMetricConfig {
    /// SOFA stability band for the ground-truth score.
    pub epsilon: f64,
    /// Sigmoid steepness of the homeostasis score.
    pub k: f64,
    /// Dose penalty in the efficiency term.
    pub alpha: f64,
    pub aggregation: Aggregation,
    /// Interquartile range per normal-range feature. Filled from the dataset
    /// when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub iqr: BTreeMap<String, f64>,
}

impl Default for CompMetricConfig {
    fn default() -> Self {
        CompMetricConfig {
            epsilon: 2.0,
            k: 10.0,
            alpha: 0.1,
            aggregation: Aggregation::Mean,
            iqr: BTreeMap::new(),
        }
    }
}

impl CompMetricConfig {
    pub fn validate(&self) -> Result<(), FitnessError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(FitnessError::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(FitnessError::InvalidConfig(format!("k must be positive, got {}", self.k)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(FitnessError::InvalidConfig(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Pearson correlation, accumulated in one pass over the inputs in order.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, FitnessError> {
    pearson_named(xs, ys, "x", "y")
}

pub(crate) fn pearson_named(xs: &[f64], ys: &[f64], x_name: &str, y_name: &str) -> Result<f64, FitnessError> {
    if xs.len() != ys.len() {
        return Err(FitnessError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(FitnessError::TooFew(xs.len()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut max_x, mut max_y) = (0.0f64, 0.0f64);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
        max_x = max_x.max(x.abs());
        max_y = max_y.max(y.abs());
    }
    let n = xs.len() as f64;
    let flat = |ss: f64, scale: f64| ss <= 0.0 || !ss.is_finite() || (ss / n).sqrt() <= 1e-12 * scale;
    if flat(sxx, max_x) {
        return Err(FitnessError::DegenerateCorrelation { side: x_name.to_string() });
    }
    if flat(syy, max_y) {
        return Err(FitnessError::DegenerateCorrelation { side: y_name.to_string() });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `1(survived) + (1/T) Σ_t 1(|SOFA_t − SOFA_baseline| < ε)` over all `T` steps.
pub fn ground_truth_score(trajectory: &Trajectory, epsilon: f64) -> Result<f64, FitnessError> {
    if trajectory.steps.is_empty() {
        return Err(FitnessError::Validation {
            patient_id: trajectory.patient_id.clone(),
            message: "no steps".into(),
        });
    }
    let mut stable = 0usize;
    for (i, s) in trajectory.steps.iter().enumerate() {
        if !s.sofa.is_finite() {
            return Err(FitnessError::Validation {
                patient_id: trajectory.patient_id.clone(),
                message: format!("missing sofa at step {i}"),
            });
        }
        if (s.sofa - trajectory.sofa_baseline).abs() < epsilon {
            stable += 1;
        }
    }
    let survived = if trajectory.survived { 1.0 } else { 0.0 };
    Ok(survived + stable as f64 / trajectory.steps.len() as f64)
}

/// Mean staleness over all steps and the given features.
pub fn uncertainty_score(trajectory: &Trajectory, features: &[&str]) -> Result<f64, FitnessError> {
    if features.is_empty() {
        return Err(FitnessError::EmptyFeatureSet);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for step in &trajectory.steps {
        for f in features {
            if let Some(o) = step.obs.get(*f) {
                sum += o.staleness as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(FitnessError::Validation {
            patient_id: trajectory.patient_id.clone(),
            message: "none of the critical features is observed".into(),
        });
    }
    Ok(sum / n as f64)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Unified homeostasis score of one normalized value.
pub fn homeostasis_feature(
    value: f64,
    feature_type: FeatureType,
    interval: Option<[f64; 2]>,
    iqr: Option<f64>,
    k: f64,
) -> Result<f64, String> {
    match feature_type {
        FeatureType::NormalRange => {
            let [lo, hi] = interval.ok_or("normal_range feature has no healthy interval")?;
            if (lo..=hi).contains(&value) {
                return Ok(1.0);
            }
            let iqr = iqr.ok_or("normal_range feature has no IQR")?;
            if !(iqr.is_finite() && iqr > 0.0) {
                return Err(format!("IQR must be positive, got {iqr}"));
            }
            let d = if value < lo { lo - value } else { value - hi };
            Ok(logistic(k * (0.5 - d / iqr)))
        }
        FeatureType::DirectionalLow => Ok(logistic(k * (0.5 - value))),
        FeatureType::DirectionalHigh => Ok(logistic(-k * (0.5 - value))),
    }
}

/// Mean normalized action magnitude: `level / max` averaged over action dimensions.
pub fn action_magnitude(step: &Step, action_schema: &BTreeMap<String, crate::model::ActionSchema>) -> f64 {
    if action_schema.is_empty() {
        return 0.0;
    }
    let total: f64 = action_schema
        .iter()
        .map(|(id, a)| step.action.get(id).copied().unwrap_or(0.0) / a.max)
        .sum();
    total / action_schema.len() as f64
}

/// Homeostasis and efficiency evaluation bound to one dataset schema and a
/// critical feature set.
#[derive(Debug, Clone)]
pub struct CompetenceScorer<'a> {
    features: Vec<String>,
    dataset: &'a TrajectoryDataset,
    cfg: CompMetricConfig,
}

impl<'a> CompetenceScorer<'a> {
    /// Resolves the feature set against the schema and fills any missing IQR
    /// from the dataset's fresh readings.
    pub fn new<S: AsRef<str>>(
        dataset: &'a TrajectoryDataset,
        features: &[S],
        cfg: &CompMetricConfig,
    ) -> Result<Self, FitnessError> {
        cfg.validate()?;
        if features.is_empty() {
            return Err(FitnessError::EmptyFeatureSet);
        }
        let mut cfg = cfg.clone();
        let mut resolved = Vec::with_capacity(features.len());
        for f in features {
            let f = f.as_ref();
            let schema = dataset
                .feature_schema
                .get(f)
                .ok_or_else(|| FitnessError::UnknownFeature(f.to_string()))?;
            if schema.feature_type == FeatureType::NormalRange && !cfg.iqr.contains_key(f) {
                let iqr = features::feature_quartiles(dataset, f, None)
                    .map(|q| q.2 - q.0)
                    .ok_or_else(|| FitnessError::Config {
                        feature: f.to_string(),
                        message: "no readings to estimate IQR".into(),
                    })?;
                cfg.iqr.insert(f.to_string(), iqr);
            }
            resolved.push(f.to_string());
        }
        Ok(CompetenceScorer {
            features: resolved,
            dataset,
            cfg,
        })
    }

    pub fn config(&self) -> &CompMetricConfig {
        &self.cfg
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(String::as_str)
    }

    fn schema(&self, f: &str) -> &FeatureSchema {
        &self.dataset.feature_schema[f]
    }

    /// Unweighted mean of the feature homeostasis scores present at the step.
    pub fn homeostasis_state(&self, step: &Step) -> Result<f64, FitnessError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for f in &self.features {
            let Some(obs) = step.obs.get(f) else { continue };
            let schema = self.schema(f);
            let h = homeostasis_feature(
                obs.value,
                schema.feature_type,
                schema.healthy_interval,
                self.cfg.iqr.get(f).copied(),
                self.cfg.k,
            )
            .map_err(|message| FitnessError::Config {
                feature: f.clone(),
                message,
            })?;
            sum += h;
            n += 1;
        }
        if n == 0 {
            return Err(FitnessError::EmptyFeatureSet);
        }
        Ok(sum / n as f64)
    }

    /// `H(next) − H(prev) − α·ā(prev)`.
    pub fn efficiency(&self, prev: &Step, next: &Step) -> Result<f64, FitnessError> {
        let dose = action_magnitude(prev, &self.dataset.action_schema);
        Ok(self.homeostasis_state(next)? - self.homeostasis_state(prev)? - self.cfg.alpha * dose)
    }

    /// Trajectory-level efficiency `E_τ` (mean or sum of `E_t`).
    pub fn trajectory_efficiency(&self, trajectory: &Trajectory) -> Result<f64, FitnessError> {
        let h: Vec<f64> = trajectory
            .steps
            .iter()
            .map(|s| self.homeostasis_state(s))
            .collect::<Result<_, _>>()?;
        let mut total = 0.0;
        for (i, w) in h.windows(2).enumerate() {
            let dose = action_magnitude(&trajectory.steps[i], &self.dataset.action_schema);
            total += w[1] - w[0] - self.cfg.alpha * dose;
        }
        let n = h.len().saturating_sub(1);
        if n == 0 {
            return Err(FitnessError::Validation {
                patient_id: trajectory.patient_id.clone(),
                message: "no transitions".into(),
            });
        }
        Ok(match self.cfg.aggregation {
            Aggregation::Mean => total / n as f64,
            Aggregation::Sum => total,
        })
    }

    /// Mean homeostasis over all steps of a trajectory.
    pub fn mean_homeostasis(&self, trajectory: &Trajectory) -> Result<f64, FitnessError> {
        let mut sum = 0.0;
        for s in &trajectory.steps {
            sum += self.homeostasis_state(s)?;
        }
        Ok(sum / trajectory.steps.len() as f64)
    }
}

fn returns(dataset: &TrajectoryDataset, traces: &[RewardTrace]) -> Result<Vec<f64>, FitnessError> {
    if traces.len() != dataset.len() {
        return Err(FitnessError::LengthMismatch(traces.len(), dataset.len()));
    }
    if dataset.len() < 2 {
        return Err(FitnessError::TooFew(dataset.len()));
    }
    Ok(traces.iter().map(|t| t.cumulative).collect())
}

pub fn j_surv(dataset: &TrajectoryDataset, traces: &[RewardTrace], epsilon: f64) -> Result<f64, FitnessError> {
    let r = returns(dataset, traces)?;
    let g: Vec<f64> = dataset
        .trajectories
        .iter()
        .map(|t| ground_truth_score(t, epsilon))
        .collect::<Result<_, _>>()?;
    pearson_named(&r, &g, "cumulative reward", "ground-truth score G")
}

pub fn j_conf<S: AsRef<str>>(
    dataset: &TrajectoryDataset,
    traces: &[RewardTrace],
    features: &[S],
) -> Result<f64, FitnessError> {
    let r = returns(dataset, traces)?;
    let names: Vec<&str> = features.iter().map(AsRef::as_ref).collect();
    let u: Vec<f64> = dataset
        .trajectories
        .iter()
        .map(|t| uncertainty_score(t, &names))
        .collect::<Result<_, _>>()?;
    Ok(-pearson_named(&r, &u, "cumulative reward", "uncertainty U")?)
}

pub fn j_comp(dataset: &TrajectoryDataset, traces: &[RewardTrace], scorer: &CompetenceScorer) -> Result<f64, FitnessError> {
    let r = returns(dataset, traces)?;
    let e: Vec<f64> = dataset
        .trajectories
        .par_iter()
        .map(|t| scorer.trajectory_efficiency(t))
        .collect::<Result<_, _>>()?;
    pearson_named(&r, &e, "cumulative reward", "efficiency E")
}

/// Fitness of precomputed traces against a critical feature set.
pub fn fitness_from_traces<S: AsRef<str>>(
    dataset: &TrajectoryDataset,
    traces: &[RewardTrace],
    features: &[S],
    cfg: &CompMetricConfig,
) -> Result<FitnessVector, FitnessError> {
    let scorer = CompetenceScorer::new(dataset, features, cfg)?;
    Ok(FitnessVector {
        j_surv: j_surv(dataset, traces, cfg.epsilon)?,
        j_conf: j_conf(dataset, traces, features)?,
        j_comp: j_comp(dataset, traces, &scorer)?,
    })
}

/// Fitness of a reward spec; its survival features form the critical set.
pub fn fitness(dataset: &TrajectoryDataset, spec: &RewardSpec, cfg: &CompMetricConfig) -> Result<FitnessVector, FitnessError> {
    spec.validate()?;
    if dataset.len() < 2 {
        return Err(FitnessError::TooFew(dataset.len()));
    }
    let traces = reward::trace_dataset(dataset, spec)?;
    let features: Vec<&str> = spec.features().collect();
    fitness_from_traces(dataset, &traces, &features, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionKind, ActionSchema, Observation};
    use approx::assert_abs_diff_eq;

    /// Two-pass textbook formula, independent of the streaming implementation.
    fn pearson_two_pass(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, epsilon = 1e-15);
        let xs = [1., 2., 3., 4.];
        let ys = [1., 3., 2., 4.];
        assert_abs_diff_eq!(pearson_two_pass(&xs, &ys), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&xs, &ys).unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn pearson_degenerate_names_side() {
        let err = pearson_named(&[1., 1., 1.], &[1., 2., 3.], "reward", "g").unwrap_err();
        assert!(err.to_string().contains("reward"), "{err}");
        let err = pearson_named(&[1., 2., 3.], &[0., 0., 0.], "reward", "g").unwrap_err();
        assert!(matches!(err, FitnessError::DegenerateCorrelation { side } if side == "g"));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(FitnessError::TooFew(1))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(FitnessError::LengthMismatch(2, 1))));
    }

    proptest::proptest! {
        #[test]
        fn pearson_matches_two_pass(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..60)) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                proptest::prop_assert!((r - pearson_two_pass(&xs, &ys)).abs() < 1e-12);
                proptest::prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn directional_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            proptest::prop_assume!(a < b);
            let low = |v| homeostasis_feature(v, FeatureType::DirectionalLow, None, None, 10.0).unwrap();
            let high = |v| homeostasis_feature(v, FeatureType::DirectionalHigh, None, None, 10.0).unwrap();
            proptest::prop_assert!(low(a) > low(b));
            proptest::prop_assert!(high(a) < high(b));
        }
    }

    fn sofa_traj(survived: bool, sofas: &[f64]) -> Trajectory {
        Trajectory::new(
            "p",
            survived,
            sofas.iter().enumerate().map(|(i, &s)| Step::new(i as u32, s)).collect(),
        )
    }

    #[test]
    fn ground_truth_cases() {
        assert_eq!(ground_truth_score(&sofa_traj(true, &[6., 7., 5., 6.5]), 2.0).unwrap(), 2.0);
        assert_eq!(ground_truth_score(&sofa_traj(false, &[6., 9., 12.]).with_sofa_baseline(0.0), 2.0).unwrap(), 0.0);
        assert_eq!(ground_truth_score(&sofa_traj(true, &[6., 6., 10., 11.]), 2.0).unwrap(), 1.5);
    }

    fn stale_traj(dts: &[u32]) -> Trajectory {
        Trajectory::new(
            "p",
            true,
            dts.iter()
                .enumerate()
                .map(|(i, &d)| Step::new(i as u32, 1.0).with_obs("x", Observation::new(0.5, d)))
                .collect(),
        )
    }

    #[test]
    fn uncertainty_cases() {
        assert_eq!(uncertainty_score(&stale_traj(&[0, 0, 0]), &["x"]).unwrap(), 0.0);
        assert_eq!(uncertainty_score(&stale_traj(&[6, 6]), &["x"]).unwrap(), 6.0);
        assert_eq!(uncertainty_score(&stale_traj(&[0, 12, 0, 12]), &["x"]).unwrap(), 6.0);
        assert!(matches!(uncertainty_score(&stale_traj(&[0, 1]), &[]), Err(FitnessError::EmptyFeatureSet)));
    }

    #[test]
    fn homeostasis_feature_cases() {
        let h = |v, t, k| homeostasis_feature(v, t, Some([0.4, 0.6]), Some(0.2), k).unwrap();
        assert_eq!(h(0.5, FeatureType::NormalRange, 10.0), 1.0);
        assert_eq!(h(0.5, FeatureType::DirectionalLow, 10.0), 0.5);
        assert_abs_diff_eq!(h(0.0, FeatureType::DirectionalLow, 10.0), 0.993307, epsilon = 1e-6);
        assert_abs_diff_eq!(h(1.0, FeatureType::DirectionalHigh, 10.0), 0.993307, epsilon = 1e-6);
        // just outside the interval: sigmoid branch near σ(k/2)
        assert_abs_diff_eq!(h(0.6 + 1e-12, FeatureType::NormalRange, 10.0), logistic(5.0), epsilon = 1e-9);
        // one IQR outside → σ(k·(0.5 − 1))
        assert_abs_diff_eq!(h(0.2, FeatureType::NormalRange, 10.0), logistic(-5.0), epsilon = 1e-12);
        assert!(homeostasis_feature(0.9, FeatureType::NormalRange, None, Some(0.1), 10.0).is_err());
    }

    fn small_dataset() -> TrajectoryDataset {
        let mut ds = TrajectoryDataset::default();
        for (id, t) in [("a", FeatureType::NormalRange), ("b", FeatureType::DirectionalLow), ("c", FeatureType::DirectionalHigh)] {
            ds.feature_schema.insert(
                id.into(),
                FeatureSchema {
                    declared_min: 0.0,
                    declared_max: 1.0,
                    feature_type: t,
                    healthy_interval: (t == FeatureType::NormalRange).then_some([0.4, 0.6]),
                },
            );
        }
        ds.action_schema.insert(
            "dose".into(),
            ActionSchema {
                max: 4.0,
                kind: ActionKind::Discrete,
            },
        );
        ds
    }

    #[test]
    fn homeostasis_state_mean() {
        let mut ds = small_dataset();
        ds.trajectories.push(Trajectory::new(
            "p",
            true,
            vec![
                Step::new(0, 1.0)
                    .with_obs("a", Observation::fresh(0.5))
                    .with_obs("b", Observation::fresh(0.5))
                    .with_obs("c", Observation::fresh(1.0)),
                Step::new(1, 1.0)
                    .with_obs("a", Observation::fresh(0.3))
                    .with_obs("b", Observation::fresh(0.5))
                    .with_obs("c", Observation::fresh(1.0)),
            ],
        ));
        let cfg = CompMetricConfig {
            iqr: [("a".to_string(), 0.2)].into(),
            ..Default::default()
        };
        let scorer = CompetenceScorer::new(&ds, &["a", "b", "c"], &cfg).unwrap();
        let h = scorer.homeostasis_state(&ds.trajectories[0].steps[0]).unwrap();
        assert_abs_diff_eq!(h, (1.0 + 0.5 + logistic(5.0)) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.831102, epsilon = 1e-6);
        let scorer_a = CompetenceScorer::new(&ds, &["a"], &cfg).unwrap();
        assert_eq!(scorer_a.homeostasis_state(&ds.trajectories[0].steps[0]).unwrap(), 1.0);
        assert!(matches!(
            CompetenceScorer::new(&ds, &["zz"], &cfg),
            Err(FitnessError::UnknownFeature(_))
        ));
    }

    #[test]
    fn efficiency_cases() {
        let ds = small_dataset();
        let cfg = CompMetricConfig::default();
        let scorer = CompetenceScorer::new(&ds, &["b"], &cfg).unwrap();
        let s = |v: f64, dose: f64| Step::new(0, 1.0).with_obs("b", Observation::fresh(v)).with_action("dose", dose);
        assert_eq!(scorer.efficiency(&s(0.5, 0.0), &s(0.5, 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(scorer.efficiency(&s(0.5, 2.0), &s(0.5, 0.0)).unwrap(), -0.05, epsilon = 1e-15);
        // ΔH = +0.2 at full dose
        let lo = 0.5;
        let target_h = 0.7f64;
        let hi = 0.5 - (target_h / (1.0 - target_h)).ln() / 10.0;
        let e = scorer.efficiency(&s(lo, 4.0), &s(hi, 0.0)).unwrap();
        assert_abs_diff_eq!(e, 0.1, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn efficiency_affine_in_dose(d1 in 0.0f64..4.0, d2 in 0.0f64..4.0, v in 0.0f64..1.0) {
            let ds = small_dataset();
            let scorer = CompetenceScorer::new(&ds, &["b"], &CompMetricConfig::default()).unwrap();
            let s = |dose: f64| Step::new(0, 1.0).with_obs("b", Observation::fresh(v)).with_action("dose", dose);
            let next = Step::new(1, 1.0).with_obs("b", Observation::fresh(0.3));
            let e1 = scorer.efficiency(&s(d1), &next).unwrap();
            let e2 = scorer.efficiency(&s(d2), &next).unwrap();
            proptest::prop_assert!(((e1 - e2) - (-0.1 * (d1 - d2) / 4.0)).abs() < 1e-12);
        }
    }

    fn with_returns(values: &[f64]) -> Vec<RewardTrace> {
        values
            .iter()
            .map(|&r| RewardTrace::from_rewards(vec![r], vec![], 1.0))
            .collect()
    }

    #[test]
    fn j_surv_perfect_alignment() {
        let mut ds = small_dataset();
        ds.trajectories = vec![
            sofa_traj(true, &[6., 6.]),
            sofa_traj(false, &[6., 10.]),
            sofa_traj(true, &[6., 9.]),
        ];
        let g: Vec<f64> = ds.trajectories.iter().map(|t| ground_truth_score(t, 2.0).unwrap()).collect();
        assert_abs_diff_eq!(j_surv(&ds, &with_returns(&g), 2.0).unwrap(), 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(j_surv(&ds, &with_returns(&neg), 2.0).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn j_conf_sign() {
        let mut ds = small_dataset();
        ds.trajectories = vec![stale_traj(&[0, 0]), stale_traj(&[2, 4]), stale_traj(&[8, 8])];
        // mean staleness 0, 3, 8
        assert_abs_diff_eq!(j_conf(&ds, &with_returns(&[8.0, 5.0, 0.0]), &["x"]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j_conf(&ds, &with_returns(&[0.0, 1.5, 4.0]), &["x"]).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn j_comp_alignment() {
        let mut ds = small_dataset();
        let mk = |vals: &[f64], doses: &[f64]| {
            Trajectory::new(
                "p",
                true,
                vals.iter()
                    .zip(doses)
                    .enumerate()
                    .map(|(i, (&v, &d))| Step::new(i as u32, 1.0).with_obs("b", Observation::fresh(v)).with_action("dose", d))
                    .collect(),
            )
        };
        ds.trajectories = vec![
            mk(&[0.5, 0.4, 0.3], &[0.0, 1.0, 0.0]),
            mk(&[0.2, 0.6, 0.6], &[4.0, 4.0, 4.0]),
            mk(&[0.7, 0.8, 0.4], &[2.0, 0.0, 0.0]),
        ];
        let scorer = CompetenceScorer::new(&ds, &["b"], &CompMetricConfig::default()).unwrap();
        let e: Vec<f64> = ds.trajectories.iter().map(|t| scorer.trajectory_efficiency(t).unwrap()).collect();
        assert_abs_diff_eq!(j_comp(&ds, &with_returns(&e), &scorer).unwrap(), 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = e.iter().map(|x| -2.0 * x).collect();
        assert_abs_diff_eq!(j_comp(&ds, &with_returns(&neg), &scorer).unwrap(), -1.0, epsilon = 1e-12);

        let sum_cfg = CompMetricConfig {
            aggregation: Aggregation::Sum,
            ..Default::default()
        };
        let sum_scorer = CompetenceScorer::new(&ds, &["b"], &sum_cfg).unwrap();
        let e_sum = sum_scorer.trajectory_efficiency(&ds.trajectories[0]).unwrap();
        assert_abs_diff_eq!(e_sum, 2.0 * e[0], epsilon = 1e-15);
    }

    #[test]
    fn constant_reward_spec_is_degenerate() {
        use crate::reward::SurvivalConfig;
        let mut ds = small_dataset();
        let mk = |v: f64, survived| {
            Trajectory::new(
                "p",
                survived,
                (0..3)
                    .map(|i| Step::new(i, 1.0 + i as f64).with_obs("b", Observation::new(v, i)))
                    .collect(),
            )
        };
        ds.trajectories = vec![mk(0.2, true), mk(0.7, false), mk(0.4, true)];
        let spec = RewardSpec {
            survival: [("b".to_string(), SurvivalConfig::decay_low(0.3))].into(),
            confidence_tau: [("b".to_string(), f64::INFINITY)].into(),
            decay_half_life: f64::INFINITY,
            gamma: 1.0,
            lambda: 0.0,
            action_cost_scale: 0.0,
            action_max: BTreeMap::new(),
            normalize_weights: true,
        };
        let err = fitness(&ds, &spec, &CompMetricConfig::default()).unwrap_err();
        assert!(matches!(err, FitnessError::DegenerateCorrelation { ref side } if side == "cumulative reward"), "{err}");
    }
}
