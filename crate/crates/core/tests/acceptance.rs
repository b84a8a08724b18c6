//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dashu_float::round::mode::HalfAway;
use dashu_float::FBig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tridrive_core::features::SelectionConfig;
use tridrive_core::fitness::{self, homeostasis_feature, CompMetricConfig, FitnessVector};
use tridrive_core::generate::GenerationConfig;
use tridrive_core::model::{FeatureType, Observation, Step, Trajectory, TrajectoryDataset};
use tridrive_core::ope::{self, BootstrapConfig, PolicyProbTable, ProbEntry};
use tridrive_core::pareto::{non_dominated_sort_indices, Candidate};
use tridrive_core::pipeline::{behavior_table, run_pipeline, PipelineConfig, RunOptions};
use tridrive_core::reward::{
    self, confidence_weight, survival_score, time_decay, Baseline, BaselineConfig, RewardSpec, RewardTrace,
    SurvivalConfig, SurvivalForm,
};
use tridrive_core::synth::{self, CohortConfig};
use tridrive_core::util::dir_digest;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const POOL: [&str; 6] = ["f0", "f1", "f2", "f3", "f4", "f5"];
const ACTIONS: [&str; 2] = ["a0", "a1"];

fn random_form(rng: &mut ChaCha8Rng) -> SurvivalForm {
    match rng.random_range(0..4) {
        0 => SurvivalForm::Bell {
            target: rng.random_range(0.0..1.0),
            sigma: rng.random_range(0.05..1.0),
        },
        1 => SurvivalForm::DecayLow {
            tau: rng.random_range(0.05..2.0),
        },
        2 => SurvivalForm::DecayHigh {
            tau: rng.random_range(0.05..2.0),
        },
        _ => SurvivalForm::AsymmetricAbove {
            target: rng.random_range(0.0..1.0),
            sigma: rng.random_range(0.05..1.0),
        },
    }
}

fn random_spec(rng: &mut ChaCha8Rng, lambda: f64) -> RewardSpec {
    let mut survival = BTreeMap::new();
    let mut confidence_tau = BTreeMap::new();
    let n = rng.random_range(1..=POOL.len());
    for f in &POOL[..n] {
        let form = random_form(rng);
        survival.insert(
            f.to_string(),
            SurvivalConfig {
                form,
                weight: rng.random_range(0.1..3.0),
            },
        );
        let tau = if rng.random_bool(0.2) {
            f64::INFINITY
        } else {
            rng.random_range(1.0..48.0)
        };
        confidence_tau.insert(f.to_string(), tau);
    }
    let spec = RewardSpec {
        survival,
        confidence_tau,
        decay_half_life: if rng.random_bool(0.2) {
            f64::INFINITY
        } else {
            rng.random_range(2.0..200.0)
        },
        gamma: rng.random_range(0.8..=1.0),
        lambda,
        action_cost_scale: rng.random_range(0.05..1.0),
        action_max: ACTIONS.iter().map(|a| (a.to_string(), 4.0)).collect(),
        normalize_weights: rng.random_bool(0.8),
    };
    spec.validate().expect("random spec is valid");
    spec
}

fn random_trajectory(rng: &mut ChaCha8Rng, id: usize) -> Trajectory {
    let len = rng.random_range(2..40);
    let mut t = 0u32;
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        let mut step = Step::new(t, rng.random_range(0.0..24.0));
        for f in POOL {
            if rng.random_bool(0.9) {
                step = step.with_obs(f, Observation::new(rng.random_range(0.0..1.0), rng.random_range(0..24)));
            }
        }
        for a in ACTIONS {
            step = step.with_action(a, rng.random_range(0..=4) as f64);
        }
        steps.push(step);
        t += rng.random_range(1..4);
    }
    Trajectory::new(format!("p{id}"), rng.random_bool(0.5), steps)
}

/// Potential computed directly from the closed forms.
fn oracle_potential(step: &Step, spec: &RewardSpec) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, cfg) in &spec.survival {
        let Some(o) = step.obs.get(f) else { continue };
        let v = o.value;
        let s = match cfg.form {
            SurvivalForm::Bell { target, sigma } => (-0.5 * ((v - target) / sigma).powi(2)).exp(),
            SurvivalForm::DecayLow { tau } => (-v / tau).exp(),
            SurvivalForm::DecayHigh { tau } => (-(1.0 - v) / tau).exp(),
            SurvivalForm::AsymmetricAbove { target, sigma } => {
                if v <= target {
                    1.0
                } else {
                    2f64.powf(-(v - target) / sigma)
                }
            }
        };
        let u = (-(o.staleness as f64) / spec.confidence_tau[f]).exp();
        num += cfg.weight * s * u;
        den += cfg.weight;
    }
    let base = if den == 0.0 {
        0.5
    } else if spec.normalize_weights {
        num / den
    } else {
        num
    };
    base * (-(step.t as f64) * std::f64::consts::LN_2 / spec.decay_half_life).exp()
}

fn oracle_cost(step: &Step, spec: &RewardSpec) -> f64 {
    spec.action_cost_scale * step.action.iter().map(|(a, l)| l / spec.action_max[a]).sum::<f64>()
}

fn random_pairs(lambda_range: Option<(f64, f64)>) -> Vec<(Trajectory, RewardSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..1000)
        .map(|i| {
            let traj = random_trajectory(&mut rng, i);
            let lambda = lambda_range.map_or(0.0, |(lo, hi)| rng.random_range(lo..hi));
            (traj, random_spec(&mut rng, lambda))
        })
        .collect()
}

fn telescoped(traj: &Trajectory, spec: &RewardSpec) -> (f64, f64) {
    let n = traj.steps.len() - 1;
    let phi_t = oracle_potential(&traj.steps[n], spec);
    let phi_0 = oracle_potential(&traj.steps[0], spec);
    let cost: f64 = (0..n).map(|t| spec.gamma.powi(t as i32) * oracle_cost(&traj.steps[t], spec)).sum();
    (spec.gamma.powi(n as i32) * phi_t - phi_0, cost)
}

fn c1_telescoping() -> Outcome {
    let start = Instant::now();
    let pairs = random_pairs(None);
    let mut worst = 0.0f64;
    for (traj, spec) in &pairs {
        let tr = reward::trace(traj, spec).unwrap();
        let (expected, _) = telescoped(traj, spec);
        worst = worst.max((tr.cumulative - expected).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(5),
        format!("max error {worst:.2e} over 1000 pairs in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn c2_lagrangian() -> Outcome {
    let pairs = random_pairs(Some((0.01, 1.0)));
    let mut worst = 0.0f64;
    for (traj, spec) in &pairs {
        let tr = reward::trace(traj, spec).unwrap();
        let (phi, cost) = telescoped(traj, spec);
        worst = worst.max((tr.cumulative - (phi - spec.lambda * cost)).abs());
    }
    outcome(worst < 1e-9, format!("max error {worst:.2e} over 1000 pairs"))
}

const N_STATES: usize = 5;
const N_ACTIONS: usize = 2;
const MDP_GAMMA: f64 = 0.99;

struct Mdp {
    p: [[[f64; N_STATES]; N_ACTIONS]; N_STATES],
    r: [[[f64; N_STATES]; N_ACTIONS]; N_STATES],
}

fn random_mdp(rng: &mut ChaCha8Rng) -> Mdp {
    let mut p = [[[0.0; N_STATES]; N_ACTIONS]; N_STATES];
    let mut r = [[[0.0; N_STATES]; N_ACTIONS]; N_STATES];
    for s in 0..N_STATES {
        for a in 0..N_ACTIONS {
            let raw: Vec<f64> = (0..N_STATES).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let total: f64 = raw.iter().sum();
            for s2 in 0..N_STATES {
                p[s][a][s2] = raw[s2] / total;
                r[s][a][s2] = rng.random_range(-1.0..1.0);
            }
        }
    }
    Mdp { p, r }
}

/// Value iteration on `r + shaping(s, s')`; returns the greedy policy.
fn greedy_policy(mdp: &Mdp, shaping: &[[f64; N_STATES]; N_STATES]) -> [usize; N_STATES] {
    let mut v = [0.0; N_STATES];
    let q = |v: &[f64; N_STATES], s: usize, a: usize| -> f64 {
        (0..N_STATES)
            .map(|s2| mdp.p[s][a][s2] * (mdp.r[s][a][s2] + shaping[s][s2] + MDP_GAMMA * v[s2]))
            .sum()
    };
    loop {
        let mut next = [0.0; N_STATES];
        for (s, slot) in next.iter_mut().enumerate() {
            *slot = (0..N_ACTIONS).map(|a| q(&v, s, a)).fold(f64::NEG_INFINITY, f64::max);
        }
        let delta = (0..N_STATES).map(|s| (next[s] - v[s]).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-10 {
            break;
        }
    }
    let mut policy = [0; N_STATES];
    for (s, slot) in policy.iter_mut().enumerate() {
        *slot = if q(&v, s, 1) > q(&v, s, 0) { 1 } else { 0 };
    }
    policy
}

fn c3_policy_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mdp = random_mdp(&mut rng);
    let base = greedy_policy(&mdp, &[[0.0; N_STATES]; N_STATES]);
    let mut mismatches = 0;
    let mut span = 0.0f64;
    for _ in 0..20 {
        let mut spec = random_spec(&mut rng, 0.0);
        spec.gamma = MDP_GAMMA;
        let states: Vec<Step> = (0..N_STATES)
            .map(|_| {
                POOL.iter().fold(Step::new(0, 0.0), |st, f| {
                    st.with_obs(f, Observation::new(rng.random_range(0.0..1.0), rng.random_range(0..12)))
                })
            })
            .collect();
        let mut shaping = [[0.0; N_STATES]; N_STATES];
        for s in 0..N_STATES {
            for s2 in 0..N_STATES {
                shaping[s][s2] = reward::reward(&states[s], &states[s2], &spec).unwrap();
            }
        }
        let phis: Vec<f64> = states.iter().map(|s| reward::potential(s, &spec)).collect();
        span = span.max(phis.iter().cloned().fold(f64::MIN, f64::max) - phis.iter().cloned().fold(f64::MAX, f64::min));
        if greedy_policy(&mdp, &shaping) != base {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/20 shaped policies differ (base policy {base:?}, max potential span {span:.3})"),
    )
}

fn cohort(beta_m: f64, beta_a: f64, beta_u: f64) -> synth::SyntheticCohort {
    let cfg = CohortConfig {
        n_patients: 500,
        beta_m,
        beta_a,
        beta_u,
        seed: 7,
        ..CohortConfig::default()
    };
    synth::generate(&cfg).unwrap()
}

fn reference(beta_m: f64, beta_a: f64, beta_u: f64) -> RewardSpec {
    synth::reference_spec(&CohortConfig {
        beta_m,
        beta_a,
        beta_u,
        ..CohortConfig::default()
    })
}

fn c4_fitness_sign() -> Outcome {
    let start = Instant::now();
    let c = cohort(1.0, 0.2, 1.0);
    let ds = &c.dataset;
    let eps = CompMetricConfig::default().epsilon;
    let spec = reference(1.0, 0.2, 1.0);
    let med = fitness::j_surv(ds, &reward::trace_dataset(ds, &spec).unwrap(), eps).unwrap();
    let orm = fitness::j_surv(ds, &Baseline::Orm.trace_dataset(ds, &BaselineConfig::default()).unwrap(), eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<RewardTrace> = ds
        .trajectories
        .iter()
        .map(|t| {
            let r = (0..t.transitions()).map(|_| rng.sample(normal)).collect();
            RewardTrace::from_rewards(r, Vec::new(), 0.99)
        })
        .collect();
    let noise_j = fitness::j_surv(ds, &noise, eps).unwrap();
    let elapsed = start.elapsed();
    outcome(
        med >= 0.5 && orm >= 0.5 && noise_j.abs() <= 0.15 && elapsed < Duration::from_secs(30),
        format!(
            "reference {med:.3}, ORM {orm:.3}, noise {noise_j:.3} in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c5_competence() -> Outcome {
    let c = cohort(1.0, 0.5, 1.0);
    let cfg = CompMetricConfig::default();
    let spec = reference(1.0, 0.5, 1.0);
    let aware = fitness::fitness(&c.dataset, &spec, &cfg).unwrap().j_comp;
    let blind = fitness::fitness(&c.dataset, &spec.with_lambda(0.0), &cfg).unwrap().j_comp;
    outcome(
        aware - blind >= 0.1,
        format!("J_comp cost-aware {aware:.3}, lambda=0 {blind:.3}, gap {:.3}", aware - blind),
    )
}

fn c6_confidence() -> Outcome {
    let c = cohort(1.0, 0.2, 1.0);
    let cfg = CompMetricConfig::default();
    let spec = reference(1.0, 0.2, 1.0);
    let finite = fitness::fitness(&c.dataset, &spec, &cfg).unwrap().j_conf;
    let disabled = fitness::fitness(&c.dataset, &spec.without_confidence(), &cfg).unwrap().j_conf;
    outcome(
        finite > disabled,
        format!("J_conf finite tau {finite:.4}, disabled {disabled:.4}"),
    )
}

fn brute_force_fronts(points: &[FitnessVector]) -> Vec<Vec<usize>> {
    let dom = |a: &FitnessVector, b: &FitnessVector| {
        let (a, b) = (a.as_array(), b.as_array());
        (0..3).all(|i| a[i] >= b[i]) && (0..3).any(|i| a[i] > b[i])
    };
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| !remaining.iter().any(|&j| dom(&points[j], &points[i])))
            .collect();
        remaining.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

fn c7_nsga_oracle() -> Outcome {
    let mut failures = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = seed % 2 == 0;
        let mut draw = || {
            if grid {
                rng.random_range(0..4) as f64 / 3.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let points: Vec<FitnessVector> = (0..50).map(|_| FitnessVector::new(draw(), draw(), draw())).collect();
        let candidates: Vec<Candidate> = points
            .iter()
            .enumerate()
            .map(|(i, f)| Candidate::new(format!("c{i}"), *f))
            .collect();
        let mut got = non_dominated_sort_indices(&candidates);
        got.iter_mut().for_each(|f| f.sort_unstable());
        if got != brute_force_fronts(&points) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures}/100 seeds disagree with the brute-force oracle"))
}

type Criterion = (&'static str, fn() -> Outcome);

type Logged = (TrajectoryDataset, Vec<RewardTrace>, PolicyProbTable);

/// Two-step MDP with two states and two actions, enumerable exactly.
struct TinyMdp {
    init: [f64; 2],
    trans: [[[f64; 2]; 2]; 2],
    reward: [[f64; 2]; 2],
    behavior: [f64; 2],
    evaluation: [f64; 2],
    gamma: f64,
}

impl TinyMdp {
    fn pi(p_one: f64, a: usize) -> f64 {
        if a == 1 {
            p_one
        } else {
            1.0 - p_one
        }
    }

    fn value(&self) -> f64 {
        let mut v = 0.0;
        for s0 in 0..2 {
            for a0 in 0..2 {
                for s1 in 0..2 {
                    for a1 in 0..2 {
                        let p = self.init[s0]
                            * Self::pi(self.evaluation[s0], a0)
                            * self.trans[s0][a0][s1]
                            * Self::pi(self.evaluation[s1], a1);
                        v += p * (self.reward[s0][a0] + self.gamma * self.reward[s1][a1]);
                    }
                }
            }
        }
        v
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Logged {
        let pick = |rng: &mut ChaCha8Rng, p_one: f64| usize::from(rng.random_bool(p_one));
        let mut trajectories = Vec::with_capacity(n);
        let mut traces = Vec::with_capacity(n);
        let mut table = BTreeMap::new();
        for i in 0..n {
            let s0 = pick(rng, self.init[1]);
            let a0 = pick(rng, self.behavior[s0]);
            let s1 = pick(rng, self.trans[s0][a0][1]);
            let a1 = pick(rng, self.behavior[s1]);
            let s2 = pick(rng, self.trans[s1][a1][1]);
            let steps = [(s0, Some(a0)), (s1, Some(a1)), (s2, None)]
                .iter()
                .enumerate()
                .map(|(t, &(s, a))| {
                    let st = Step::new(t as u32, 0.0).with_obs("state", Observation::fresh(s as f64));
                    match a {
                        Some(a) => st.with_action("act", a as f64),
                        None => st,
                    }
                })
                .collect();
            let id = format!("m{i:05}");
            trajectories.push(Trajectory::new(id.clone(), true, steps));
            traces.push(RewardTrace::from_rewards(
                vec![self.reward[s0][a0], self.reward[s1][a1]],
                Vec::new(),
                self.gamma,
            ));
            let entry = |t, s: usize, a| ProbEntry {
                t,
                p_eval: Self::pi(self.evaluation[s], a),
                p_behavior: Self::pi(self.behavior[s], a),
            };
            table.insert(id, vec![entry(0, s0, a0), entry(1, s1, a1)]);
        }
        let ds = TrajectoryDataset {
            feature_schema: BTreeMap::new(),
            action_schema: BTreeMap::new(),
            trajectories,
        };
        (ds, traces, PolicyProbTable(table))
    }
}

fn c8_wis() -> Outcome {
    let c = cohort(1.0, 0.2, 1.0);
    let traces = reward::trace_dataset(&c.dataset, &reference(1.0, 0.2, 1.0)).unwrap();
    let same = behavior_table(&c.policy_table);
    let w = ope::wis(&c.dataset, &traces, &same).unwrap();
    let mean = traces.iter().map(|t| t.cumulative).sum::<f64>() / traces.len() as f64;
    let reduction = (w - mean).abs();

    let mdp = TinyMdp {
        init: [0.6, 0.4],
        trans: [[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.1, 0.9]]],
        reward: [[1.0, -0.5], [0.0, 2.0]],
        behavior: [0.5, 0.4],
        evaluation: [0.8, 0.3],
        gamma: 0.9,
    };
    let truth = mdp.value();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (ds, tr, table) = mdp.sample(2000, &mut rng);
    let est = ope::bootstrap_ci(&ds, &tr, &table, &BootstrapConfig::default()).unwrap();
    let gap = (est.value - truth).abs();
    outcome(
        reduction < 1e-9 && gap <= 3.0 * est.std_error,
        format!(
            "equal-policy error {reduction:.2e}; enumerable WIS {:.4} vs exact {truth:.4}, gap {gap:.4} <= 3*SE {:.4}",
            est.value,
            3.0 * est.std_error
        ),
    )
}

fn c9_mortality_trend() -> Outcome {
    let c = cohort(1.0, 0.2, 1.0);
    let traces = reward::trace_dataset(&c.dataset, &reference(1.0, 0.2, 1.0)).unwrap();
    let bins = ope::mortality_curve(&c.dataset, &traces, 10).unwrap();
    let idx: Vec<f64> = bins.iter().map(|b| b.bin as f64).collect();
    let mort: Vec<f64> = bins.iter().map(|b| b.mortality).collect();
    let rho = ope::spearman(&idx, &mort).unwrap_or(f64::NAN);
    outcome(
        rho <= -0.7,
        format!("Spearman {rho:.3}, mortality by decile {:?}", mort.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>()),
    )
}

fn c10_defaults() -> Outcome {
    let loaded = PipelineConfig::from_json("{}").unwrap();
    let checks = [
        ("gamma", loaded.baseline.gamma == 0.99),
        ("consensus threshold", loaded.selection.consensus_threshold == 0.6),
        ("K", loaded.selection.task.k == 7),
        ("N", loaded.generation.candidates == 20),
        ("epsilon", loaded.metrics.epsilon == 2.0),
        ("k", loaded.metrics.k == 10.0),
        ("alpha", loaded.metrics.alpha == 0.1),
        ("default() agrees", loaded == PipelineConfig::default()),
        ("selection default", SelectionConfig::default().consensus_threshold == 0.6),
        ("generation default", GenerationConfig::default().candidates == 20),
        ("reference gamma", synth::reference_spec(&CohortConfig::default()).gamma == 0.99),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(bad.is_empty(), if bad.is_empty() { "all literal defaults match".into() } else { format!("mismatched: {bad:?}") })
}

fn c11_determinism() -> Outcome {
    let cfg = PipelineConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = RunOptions::default();
    if let Err(e) = run_pipeline(&cfg, a.path(), &opts).and_then(|_| run_pipeline(&cfg, b.path(), &opts)) {
        return outcome(false, format!("pipeline failed: {e}"));
    }
    let (da, db) = (dir_digest(a.path()).unwrap(), dir_digest(b.path()).unwrap());
    outcome(da == db, format!("run digests {} / {}", &da[..16], &db[..16]))
}

type Big = FBig<HalfAway, 2>;
const PREC: usize = 256;

fn big(x: f64) -> Big {
    Big::try_from(x).unwrap().with_precision(PREC).value()
}

fn big_exp(x: Big) -> Big {
    x.exp()
}

fn to_f64(x: &Big) -> f64 {
    x.to_f64().value()
}

fn hp_survival(v: f64, form: SurvivalForm) -> f64 {
    let half = big(0.5);
    let one = big(1.0);
    let r = match form {
        SurvivalForm::Bell { target, sigma } => {
            let z = (big(v) - big(target)) / big(sigma);
            big_exp(-(half * z.clone() * z))
        }
        SurvivalForm::DecayLow { tau } => big_exp(-(big(v) / big(tau))),
        SurvivalForm::DecayHigh { tau } => big_exp(-((one - big(v)) / big(tau))),
        SurvivalForm::AsymmetricAbove { target, sigma } => {
            if v <= target {
                one
            } else {
                big_exp(-(big(2.0).ln() / big(sigma) * (big(v) - big(target))))
            }
        }
    };
    to_f64(&r).clamp(0.0, 1.0)
}

fn hp_logistic(z: Big) -> f64 {
    to_f64(&(big(1.0) / (big(1.0) + big_exp(-z))))
}

fn hp_homeostasis(v: f64, ft: FeatureType, interval: [f64; 2], iqr: f64, k: f64) -> f64 {
    let half = big(0.5);
    match ft {
        FeatureType::NormalRange => {
            let [lo, hi] = interval;
            if v >= lo && v <= hi {
                return 1.0;
            }
            let d = if v < lo { big(lo) - big(v) } else { big(v) - big(hi) };
            hp_logistic(big(k) * (half - d / big(iqr)))
        }
        FeatureType::DirectionalLow => hp_logistic(big(k) * (half - big(v))),
        FeatureType::DirectionalHigh => hp_logistic(-(big(k) * (half - big(v)))),
    }
}

fn c12_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = [0.0f64; 4];
    for _ in 0..10_000 {
        let v = rng.random_range(-0.2..1.2);
        let form = random_form(&mut rng);
        let cfg = SurvivalConfig { form, weight: 1.0 };
        worst[0] = worst[0].max((survival_score(v, &cfg) - hp_survival(v, form)).abs());

        let dt = rng.random_range(0.0..72.0);
        let tau = rng.random_range(0.5..48.0);
        let expected = to_f64(&big_exp(-(big(dt) / big(tau))));
        worst[1] = worst[1].max((confidence_weight(dt, tau) - expected).abs());

        let t = rng.random_range(0..400) as f64;
        let hl = rng.random_range(1.0..200.0);
        let expected = to_f64(&big_exp(-(big(t) / big(hl) * big(2.0).ln())));
        worst[2] = worst[2].max((time_decay(t, hl) - expected).abs());

        let ft = [FeatureType::NormalRange, FeatureType::DirectionalLow, FeatureType::DirectionalHigh][rng.random_range(0..3)];
        let lo = rng.random_range(0.0..0.8);
        let interval = [lo, lo + rng.random_range(0.0..0.4)];
        let iqr = rng.random_range(0.05..1.0);
        let k = rng.random_range(1.0..20.0);
        let got = homeostasis_feature(v, ft, Some(interval), Some(iqr), k).unwrap();
        worst[3] = worst[3].max((got - hp_homeostasis(v, ft, interval, iqr, k)).abs());
    }
    outcome(
        worst.iter().all(|&w| w < 1e-12),
        format!(
            "max error survival {:.1e}, confidence {:.1e}, decay {:.1e}, homeostasis {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("telescoping identity", c1_telescoping),
        ("lagrangian decomposition", c2_lagrangian),
        ("shaping policy invariance", c3_policy_invariance),
        ("fitness sign", c4_fitness_sign),
        ("competence discrimination", c5_competence),
        ("confidence discrimination", c6_confidence),
        ("non-dominated sort oracle", c7_nsga_oracle),
        ("wis reduction", c8_wis),
        ("mortality trend", c9_mortality_trend),
        ("default fidelity", c10_defaults),
        ("end-to-end determinism", c11_determinism),
        ("closed-form precision", c12_closed_forms),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{:>2}] {name}: {}", i + 1, result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
