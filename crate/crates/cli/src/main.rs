//! `tridrive`: run the reward engineering pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tridrive_core::features::{self, compute_metadata, MissingMask};
use tridrive_core::generate::load_candidates;
use tridrive_core::model::{load_dataset, save_dataset, TrajectoryDataset};
use tridrive_core::ope::PolicyProbTable;
use tridrive_core::pipeline::{
    self, load_feature_set, make_client, read_json, score_specs, split_dataset, stage_generate, stage_ope,
    stage_pareto, stage_select, stage_stats, write_fitness, write_json, ClientKind, FitnessReport, PipelineConfig,
    PipelineError, RunOptions, Stage,
};
use tridrive_core::reward::RewardSpec;
use tridrive_core::synth::{self, CohortConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            2 => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "tridrive", version, about = "Potential-based reward engineering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-feature statistical metadata report.
    Stats(StatsArgs),
    /// Ensemble feature selection over repeated client rounds.
    SelectFeatures(SelectArgs),
    /// Generate candidate reward specs.
    Generate(GenerateArgs),
    /// Score a directory of reward specs.
    Score(ScoreArgs),
    /// Pareto fronts and champion from a fitness report.
    Pareto(ParetoArgs),
    /// Off-policy evaluation of one reward spec.
    Ope(OpeArgs),
    /// Full pipeline with checkpointed run directory.
    Pipeline(PipelineArgs),
    /// Write a seeded synthetic cohort.
    Synth(SynthArgs),
    /// Deterministic 7:1:1:1 patient-level split.
    Split(SplitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientArg {
    Stub,
    Http,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration JSON; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, value_enum)]
    client: Option<ClientArg>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Explicit missingness sidecar.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    client: ClientArgs,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Feature-set file from `select-features` or a JSON array.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    client: ClientArgs,
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory of `<spec_id>.json` files.
    #[arg(long)]
    specs: PathBuf,
    /// Features for the confidence and competence metrics; defaults to the
    /// union of the specs' survival features.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ParetoArgs {
    /// `fitness.json` from `score`.
    #[arg(long)]
    fitness: PathBuf,
    /// Spec directory; when given the champion spec is copied out.
    #[arg(long)]
    specs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OpeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Policy probability table for the evaluation policy.
    #[arg(long)]
    policy: PathBuf,
    /// Extra tables for the WIS series, one per checkpoint.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    /// Dataset file; a synthetic cohort is generated when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    client: ClientArgs,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Reuse completed stages whose inputs and outputs are unchanged.
    #[arg(long)]
    resume: bool,
    /// Select on the reward-train partition and evaluate on policy-test.
    #[arg(long)]
    split: bool,
    /// Record a start time in the manifest.
    #[arg(long)]
    timestamp: bool,
    #[arg(long, hide = true, value_parser = parse_stage)]
    fail_at: Option<Stage>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Cohort configuration JSON.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    beta_m: Option<f64>,
    #[arg(long)]
    beta_u: Option<f64>,
    #[arg(long)]
    beta_a: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage '{s}'"))
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    load_dataset(path).map_err(usage)
}

fn mask(path: Option<&PathBuf>) -> Result<Option<MissingMask>, CliError> {
    path.map(|p| features::load_mask(p).map_err(usage)).transpose()
}

fn base_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_client(cfg: &mut PipelineConfig, args: &ClientArgs) {
    match args.client {
        Some(ClientArg::Stub) => cfg.client = ClientKind::Stub,
        Some(ClientArg::Http) => cfg.client = ClientKind::Http,
        None => {}
    }
}

fn validated(cfg: PipelineConfig) -> Result<PipelineConfig, CliError> {
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_stats(a: StatsArgs) -> CliResult {
    let ds = dataset(&a.dataset)?;
    let m = mask(a.mask.as_ref())?;
    let md = stage_stats(&ds, m.as_ref(), &a.out)?;
    println!("{} features, {} patients -> {}", md.len(), ds.len(), a.out.display());
    Ok(())
}

fn cmd_select(a: SelectArgs) -> CliResult {
    let mut cfg = base_config(&a.config)?;
    apply_client(&mut cfg, &a.client);
    if let Some(r) = a.rounds {
        cfg.selection.rounds = r;
    }
    if let Some(t) = a.threshold {
        cfg.selection.consensus_threshold = t;
    }
    let cfg = validated(cfg)?;
    let ds = dataset(&a.dataset)?;
    let m = mask(a.mask.as_ref())?;
    let md = compute_metadata(&ds, m.as_ref()).map_err(runtime)?;
    let client = make_client(&cfg, &ds, &md)?;
    let out = stage_select(&ds, &md, client.as_ref(), &cfg.selection, &a.out)?;
    println!(
        "selected {} features from {} valid rounds: {}",
        out.selected.len(),
        out.valid_rounds,
        out.selected.iter().cloned().collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let mut cfg = base_config(&a.config)?;
    apply_client(&mut cfg, &a.client);
    if let Some(n) = a.candidates {
        cfg.generation.candidates = n;
    }
    let cfg = validated(cfg)?;
    let ds = dataset(&a.dataset)?;
    let features = load_feature_set(&a.features)?;
    let m = mask(a.mask.as_ref())?;
    let md = compute_metadata(&ds, m.as_ref()).map_err(runtime)?;
    let client = make_client(&cfg, &ds, &md)?;
    let out = stage_generate(&ds, &features, &md, client.as_ref(), &cfg.generation, &a.out)?;
    println!("{} valid, {} quarantined -> {}", out.valid.len(), out.quarantined.len(), a.out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> CliResult {
    let cfg = validated(base_config(&a.config)?)?;
    let ds = dataset(&a.dataset)?;
    let (specs, failed) = load_candidates(&a.specs).map_err(usage)?;
    for (id, why) in &failed {
        eprintln!("warning: skipping {id}: {why}");
    }
    if specs.is_empty() {
        return Err(usage(format!("no reward specs in {}", a.specs.display())));
    }
    let features = match &a.features {
        Some(p) => load_feature_set(p)?,
        None => specs
            .iter()
            .flat_map(|(_, s)| s.features().map(str::to_string))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let report = score_specs(&ds, &specs, &features, &cfg.metrics, &cfg.baseline);
    write_fitness(&report, &a.out)?;
    let valid = report.valid_candidates().len();
    println!("{valid}/{} specs scored -> {}", report.candidates.len(), a.out.display());
    if valid == 0 {
        return Err(runtime("no spec produced a valid fitness vector"));
    }
    Ok(())
}

fn cmd_pareto(a: ParetoArgs) -> CliResult {
    let report: FitnessReport = read_json(&a.fitness).map_err(usage)?;
    let res = stage_pareto(&report, &a.out)?;
    if let Some(dir) = &a.specs {
        let spec = RewardSpec::load(dir.join(format!("{}.json", res.champion))).map_err(usage)?;
        std::fs::write(a.out.join("champion.json"), spec.to_json() + "\n").map_err(runtime)?;
    }
    println!("champion {} ({} fronts)", res.champion, res.fronts.len());
    Ok(())
}

fn cmd_ope(a: OpeArgs) -> CliResult {
    let mut cfg = base_config(&a.config)?;
    if let Some(b) = a.bootstrap {
        cfg.bootstrap.resamples = b;
    }
    if let Some(l) = a.level {
        cfg.bootstrap.level = l;
    }
    if let Some(n) = a.bins {
        cfg.mortality_bins = n;
    }
    cfg.bootstrap.seed = cfg.seed;
    let cfg = validated(cfg)?;
    let ds = dataset(&a.dataset)?;
    let spec = RewardSpec::load(&a.spec).map_err(usage)?;
    let table = PolicyProbTable::load(&a.policy).map_err(usage)?;
    let spec_id = a.spec.file_stem().and_then(|s| s.to_str()).unwrap_or("spec").to_string();
    let mut checkpoints = vec![
        ("behavior".to_string(), pipeline::behavior_table(&table)),
        ("evaluation".to_string(), table.clone()),
    ];
    for p in &a.checkpoints {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
        checkpoints.push((name, PolicyProbTable::load(p).map_err(usage)?));
    }
    let report = stage_ope(&ds, &spec_id, &spec, &table, &checkpoints, &cfg.bootstrap, cfg.mortality_bins, &a.out)?;
    let e = &report.estimate;
    println!(
        "WIS {:.4} [{:.4}, {:.4}] at {:.0}%, n_eff {:.1}",
        e.value,
        e.ci_low,
        e.ci_high,
        100.0 * e.level,
        e.n_effective
    );
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> CliResult {
    let mut cfg = base_config(&a.config)?;
    apply_client(&mut cfg, &a.client);
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    if a.policy.is_some() {
        cfg.policy_table = a.policy.clone();
    }
    if let Some(r) = a.rounds {
        cfg.selection.rounds = r;
    }
    if let Some(t) = a.threshold {
        cfg.selection.consensus_threshold = t;
    }
    if let Some(n) = a.candidates {
        cfg.generation.candidates = n;
    }
    if let Some(b) = a.bootstrap {
        cfg.bootstrap.resamples = b;
    }
    if let Some(l) = a.level {
        cfg.bootstrap.level = l;
    }
    if a.split {
        cfg.use_split = true;
    }
    let cfg = validated(cfg)?;
    let opts = RunOptions {
        resume: a.resume,
        fail_at: a.fail_at,
        wall_clock: a.timestamp,
    };
    let report = pipeline::run_pipeline(&cfg, &a.out, &opts)?;
    let names = |v: &[Stage]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    println!("run {} executed [{}] reused [{}]", report.manifest.run_id, names(&report.executed), names(&report.reused));
    if let Some(c) = &report.manifest.champion {
        println!("champion {c}");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut cfg: CohortConfig = match &a.cohort {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => CohortConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.patients {
        cfg.n_patients = n;
    }
    if let Some(b) = a.beta_m {
        cfg.beta_m = b;
    }
    if let Some(b) = a.beta_u {
        cfg.beta_u = b;
    }
    if let Some(b) = a.beta_a {
        cfg.beta_a = b;
    }
    cfg.validate().map_err(usage)?;
    let cohort = synth::generate(&cfg).map_err(runtime)?;
    ensure_dir(&a.out)?;
    save_dataset(&cohort.dataset, a.out.join("dataset.json")).map_err(runtime)?;
    cohort.policy_table.save(a.out.join("policy_table.json")).map_err(runtime)?;
    write_json(&a.out.join("truth.json"), &cohort.truth)?;
    synth::reference_spec(&cfg).save(a.out.join("reference_spec.json")).map_err(runtime)?;
    println!("{} patients -> {}", cohort.dataset.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> CliResult {
    let ds = dataset(&a.dataset)?;
    ensure_dir(&a.out)?;
    for (name, part) in split_dataset(&ds) {
        save_dataset(&part, a.out.join(format!("{name}.json"))).map_err(runtime)?;
        println!("{name}: {} patients", part.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::SelectFeatures(a) => cmd_select(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Score(a) => cmd_score(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Ope(a) => cmd_ope(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Runtime(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
