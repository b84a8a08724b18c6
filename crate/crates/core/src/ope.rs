//! Off-policy evaluation: trajectory-level weighted importance sampling,
//! percentile bootstrap intervals and the mortality-by-return diagnostic.
//!
//! WIS is the self-normalized estimator `Σ w_i R_i / Σ w_i`. It is biased for
//! finite samples and consistent as the number of trajectories grows.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Trajectory, TrajectoryDataset};
use crate::reward::RewardTrace;
use crate::util::{keyed_rng, quantile_sorted};

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("no probability entry for patient '{patient_id}' at t={t}")]
    MissingCoverage { patient_id: String, t: u32 },
    #[error("behavior probability is not positive for patient '{patient_id}' at t={t}")]
    SupportViolation { patient_id: String, t: u32 },
    #[error("invalid probability {value} for patient '{patient_id}' at t={t}")]
    InvalidProbability { patient_id: String, t: u32, value: f64 },
    #[error("all importance weights are zero")]
    Degenerate,
    #[error("{got} traces for {expected} trajectories")]
    LengthMismatch { got: usize, expected: usize },
    #[error("need at least {need} trajectories, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("{0}")]
    Config(String),
    #[error("probability table parse error: {0}")]
    Parse(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OpeError + '_ {
    move |source| OpeError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbEntry {
    pub t: u32,
    pub p_eval: f64,
    pub p_behavior: f64,
}

/// Probability of each logged action under the evaluation and behavior
/// policies, keyed by patient and step time. Every step except the last
/// (which has no outgoing transition) must be covered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyProbTable(pub BTreeMap<String, Vec<ProbEntry>>);

impl PolicyProbTable {
    pub fn from_json(text: &str) -> Result<Self, OpeError> {
        serde_json::from_str(text).map_err(|e| OpeError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OpeError> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OpeError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    fn entry(&self, patient_id: &str, t: u32) -> Option<&ProbEntry> {
        self.0.get(patient_id)?.iter().find(|e| e.t == t)
    }
}

/// `Π_t p_eval / p_behavior` over the trajectory's transitions, optionally
/// capping each ratio.
pub fn trajectory_weight(trajectory: &Trajectory, probs: &PolicyProbTable, max_ratio: Option<f64>) -> Result<f64, OpeError> {
    let mut w = 1.0;
    for step in &trajectory.steps[..trajectory.steps.len().saturating_sub(1)] {
        let pid = &trajectory.patient_id;
        let e = probs.entry(pid, step.t).ok_or_else(|| OpeError::MissingCoverage {
            patient_id: pid.clone(),
            t: step.t,
        })?;
        for v in [e.p_eval, e.p_behavior] {
            if !(0.0..=1.0).contains(&v) {
                return Err(OpeError::InvalidProbability {
                    patient_id: pid.clone(),
                    t: step.t,
                    value: v,
                });
            }
        }
        if e.p_behavior <= 0.0 {
            return Err(OpeError::SupportViolation {
                patient_id: pid.clone(),
                t: step.t,
            });
        }
        let mut ratio = e.p_eval / e.p_behavior;
        if let Some(cap) = max_ratio {
            ratio = ratio.min(cap);
        }
        w *= ratio;
    }
    Ok(w)
}

pub fn weights(dataset: &TrajectoryDataset, probs: &PolicyProbTable, max_ratio: Option<f64>) -> Result<Vec<f64>, OpeError> {
    dataset
        .trajectories
        .par_iter()
        .map(|t| trajectory_weight(t, probs, max_ratio))
        .collect()
}

/// Self-normalized weighted mean of the returns.
pub fn wis_from_weights(weights: &[f64], returns: &[f64]) -> Result<f64, OpeError> {
    if weights.len() != returns.len() {
        return Err(OpeError::LengthMismatch {
            got: returns.len(),
            expected: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(OpeError::Degenerate);
    }
    let num: f64 = weights.iter().zip(returns).map(|(w, r)| w * r).sum();
    Ok(num / total)
}

fn returns(dataset: &TrajectoryDataset, traces: &[RewardTrace]) -> Result<Vec<f64>, OpeError> {
    if traces.len() != dataset.len() {
        return Err(OpeError::LengthMismatch {
            got: traces.len(),
            expected: dataset.len(),
        });
    }
    Ok(traces.iter().map(|t| t.cumulative).collect())
}

pub fn wis(dataset: &TrajectoryDataset, traces: &[RewardTrace], probs: &PolicyProbTable) -> Result<f64, OpeError> {
    if dataset.is_empty() {
        return Err(OpeError::TooFew { need: 1, got: 0 });
    }
    let r = returns(dataset, traces)?;
    wis_from_weights(&weights(dataset, probs, None)?, &r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ratio: Option<f64>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            level: 0.95,
            resamples: 1000,
            seed: 0,
            max_ratio: None,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), OpeError> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(OpeError::Config(format!("level must lie in (0,1), got {}", self.level)));
        }
        if self.resamples == 0 {
            return Err(OpeError::Config("resamples must be positive".into()));
        }
        if let Some(c) = self.max_ratio {
            if !(c > 0.0) {
                return Err(OpeError::Config(format!("max_ratio must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WisEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Kish effective sample size `(Σw)² / Σw²`.
    pub n_effective: f64,
    /// Standard deviation of the bootstrap replicates.
    pub std_error: f64,
    pub level: f64,
    pub resamples: usize,
    /// Resamples dropped because every drawn weight was zero.
    pub skipped: usize,
}

/// Percentile bootstrap over trajectories. Resample `b` draws from its own
/// keyed stream, so results do not depend on thread scheduling.
pub fn bootstrap_from_weights(weights: &[f64], returns: &[f64], cfg: &BootstrapConfig) -> Result<WisEstimate, OpeError> {
    cfg.validate()?;
    let n = weights.len();
    if n < 2 {
        return Err(OpeError::TooFew { need: 2, got: n });
    }
    let value = wis_from_weights(weights, returns)?;
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let reps: Vec<Option<f64>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = keyed_rng(cfg.seed, b as u64);
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                num += weights[i] * returns[i];
                den += weights[i];
            }
            (den > 0.0).then(|| num / den)
        })
        .collect();
    let mut ok: Vec<f64> = reps.iter().flatten().copied().collect();
    let skipped = cfg.resamples - ok.len();
    if ok.is_empty() {
        return Err(OpeError::Degenerate);
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let std_error = if ok.len() > 1 {
        (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    ok.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.level;
    Ok(WisEstimate {
        value,
        ci_low: quantile_sorted(&ok, alpha / 2.0),
        ci_high: quantile_sorted(&ok, 1.0 - alpha / 2.0),
        n_effective: sw * sw / sw2,
        std_error,
        level: cfg.level,
        resamples: cfg.resamples,
        skipped,
    })
}

pub fn bootstrap_ci(
    dataset: &TrajectoryDataset,
    traces: &[RewardTrace],
    probs: &PolicyProbTable,
    cfg: &BootstrapConfig,
) -> Result<WisEstimate, OpeError> {
    let r = returns(dataset, traces)?;
    cfg.validate()?;
    bootstrap_from_weights(&weights(dataset, probs, cfg.max_ratio)?, &r, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityBin {
    pub bin: usize,
    pub return_low: f64,
    pub return_high: f64,
    pub mortality: f64,
    pub count: usize,
}

/// Sorts trajectories by return and splits them into `n_bins` near-equal
/// consecutive groups (earlier bins take the remainder).
pub fn mortality_curve(dataset: &TrajectoryDataset, traces: &[RewardTrace], n_bins: usize) -> Result<Vec<MortalityBin>, OpeError> {
    let r = returns(dataset, traces)?;
    if n_bins == 0 {
        return Err(OpeError::Config("n_bins must be positive".into()));
    }
    if r.len() < n_bins {
        return Err(OpeError::TooFew { need: n_bins, got: r.len() });
    }
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    let (base, extra) = (r.len() / n_bins, r.len() % n_bins);
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0;
    for bin in 0..n_bins {
        let size = base + usize::from(bin < extra);
        let idx = &order[start..start + size];
        let deaths = idx.iter().filter(|&&i| !dataset.trajectories[i].survived).count();
        out.push(MortalityBin {
            bin,
            return_low: r[idx[0]],
            return_high: r[idx[size - 1]],
            mortality: deaths as f64 / size as f64,
            count: size,
        });
        start += size;
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    crate::fitness::pearson(&ranks(xs), &ranks(ys)).ok()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), OpeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OpeError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    let to_io = |e: csv::Error| OpeError::Io {
        path: path.display().to_string(),
        source: e.into(),
    };
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_mortality_csv(bins: &[MortalityBin], path: impl AsRef<Path>) -> Result<(), OpeError> {
    write_csv(
        path.as_ref(),
        &["bin", "return_low", "return_high", "mortality", "count"],
        bins.iter().map(|b| {
            vec![
                b.bin.to_string(),
                b.return_low.to_string(),
                b.return_high.to_string(),
                b.mortality.to_string(),
                b.count.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub checkpoint: String,
    pub wis: f64,
}

/// One WIS value per probability table (e.g. one per training checkpoint).
pub fn wis_series(
    dataset: &TrajectoryDataset,
    traces: &[RewardTrace],
    tables: &[(String, PolicyProbTable)],
) -> Result<Vec<SeriesPoint>, OpeError> {
    tables
        .iter()
        .map(|(name, t)| {
            Ok(SeriesPoint {
                checkpoint: name.clone(),
                wis: wis(dataset, traces, t)?,
            })
        })
        .collect()
}

pub fn write_series_csv(points: &[SeriesPoint], path: impl AsRef<Path>) -> Result<(), OpeError> {
    write_csv(
        path.as_ref(),
        &["checkpoint", "wis"],
        points.iter().map(|p| vec![p.checkpoint.clone(), p.wis.to_string()]),
    )
}

/// Writes the estimate as pretty JSON.
pub fn write_estimate(est: &WisEstimate, path: impl AsRef<Path>) -> Result<(), OpeError> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    let text = serde_json::to_string_pretty(est).expect("serializable");
    writeln!(f, "{text}").map_err(io_err(path))
}
