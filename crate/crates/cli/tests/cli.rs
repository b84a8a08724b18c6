use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tridrive(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tridrive"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TRIDRIVE_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tridrive(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = tridrive(args, cwd);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Small synthetic cohort in a fresh directory.
fn cohort() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "c", "--patients", "90", "--seed", "21"], dir.path());
    dir
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{"cohort": {"n_patients": 80}, "selection": {"rounds": 6}, "generation": {"candidates": 6}, "bootstrap": {"resamples": 100}}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn stats_reports_every_feature_and_is_byte_stable() {
    let d = cohort();
    ok(&["stats", "--dataset", "c/dataset.json", "--out", "s1"], d.path());
    ok(&["stats", "--dataset", "c/dataset.json", "--out", "s2"], d.path());
    let md = read_json(d.path().join("s1/metadata.json"));
    let ds = read_json(d.path().join("c/dataset.json"));
    assert_eq!(md.as_array().unwrap().len(), ds["feature_schema"].as_object().unwrap().len());
    assert_eq!(
        fs::read(d.path().join("s1/metadata.json")).unwrap(),
        fs::read(d.path().join("s2/metadata.json")).unwrap()
    );
}

#[test]
fn missing_dataset_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let (c, err) = code(&["stats", "--dataset", "nope.json", "--out", "s"], d.path());
    assert_eq!(c, 2);
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn bad_threshold_and_unknown_config_key_are_usage_errors() {
    let d = cohort();
    let (c, err) = code(
        &["select-features", "--dataset", "c/dataset.json", "--out", "f", "--threshold", "1.01"],
        d.path(),
    );
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("consensus_threshold"));
    fs::write(d.path().join("bad.json"), r#"{"selection": {"roundz": 3}}"#).unwrap();
    let (c, _) = code(&["pipeline", "--out", "run", "--config", "bad.json"], d.path());
    assert_eq!(c, 2);
    let (c, _) = code(&["pipeline", "--bogus"], d.path());
    assert_eq!(c, 2);
}

#[test]
fn stub_feature_set_matches_golden() {
    let d = cohort();
    ok(&["select-features", "--dataset", "c/dataset.json", "--out", "f", "--client", "stub"], d.path());
    let got = fs::read_to_string(d.path().join("f/features.json")).unwrap();
    let golden = fixture("stub_features.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(golden).unwrap());
    assert_eq!(read_json(d.path().join("f/features.json"))["valid_rounds"], 20);
}

#[test]
fn single_round_vote_equals_that_round() {
    let d = cohort();
    ok(&["select-features", "--dataset", "c/dataset.json", "--out", "f", "--rounds", "1"], d.path());
    let round = read_json(d.path().join("f/rounds/round_000.json"));
    let mut chosen: Vec<String> = round["selection"]["selected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    chosen.sort();
    let set: Vec<String> = serde_json::from_value(read_json(d.path().join("f/features.json"))["selected"].clone()).unwrap();
    assert_eq!(set, chosen);
    assert_eq!(set.len(), 7);
}

fn files_with_hashes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn stage_by_stage_flow() {
    let d = cohort();
    let p = d.path();
    ok(&["select-features", "--dataset", "c/dataset.json", "--out", "f", "--rounds", "8"], p);
    ok(&["generate", "--dataset", "c/dataset.json", "--features", "f/features.json", "--out", "g"], p);
    ok(&["generate", "--dataset", "c/dataset.json", "--features", "f/features.json", "--out", "g2"], p);
    let specs: Vec<_> = files_with_hashes(&p.join("g")).into_iter().filter(|(n, _)| n.starts_with("cand_")).collect();
    assert_eq!(specs.len(), 20);
    assert_eq!(files_with_hashes(&p.join("g")), files_with_hashes(&p.join("g2")));

    // A spec over a feature the dataset lacks, without decay, discount or
    // cost, gives every patient the same return.
    fs::copy(p.join("g/cand_000.json"), p.join("g/ghost.json")).unwrap();
    let mut ghost = read_json(p.join("g/ghost.json"));
    let surv = ghost["survival"].as_object().unwrap().values().next().unwrap().clone();
    ghost["survival"] = serde_json::json!({ "ghost": surv });
    ghost["confidence_tau"] = serde_json::json!({ "ghost": 6.0 });
    ghost["decay_half_life"] = serde_json::json!("inf");
    ghost["gamma"] = serde_json::json!(1.0);
    ghost["lambda"] = serde_json::json!(0.0);
    fs::write(p.join("g/ghost.json"), ghost.to_string()).unwrap();

    ok(&["score", "--dataset", "c/dataset.json", "--specs", "g", "--features", "f/features.json", "--out", "sc"], p);
    let report = read_json(p.join("sc/fitness.json"));
    let rows = report["candidates"].as_array().unwrap();
    assert_eq!(rows.len(), 21);
    let bad = rows.iter().find(|r| r["spec_id"] == "ghost").unwrap();
    assert!(bad.get("fitness").is_none());
    assert!(bad["error"].as_str().unwrap().contains("zero variance"), "{bad}");
    assert_eq!(report["baselines"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(p.join("sc/fitness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 21 + 3);

    let out = ok(&["pareto", "--fitness", "sc/fitness.json", "--specs", "g", "--out", "pa"], p);
    let sel = read_json(p.join("pa/selection.json"));
    let champion = sel["champion"].as_str().unwrap();
    assert!(out.contains(champion));
    assert!(sel["fronts"][0].as_array().unwrap().iter().any(|v| v == champion));
    assert_eq!(
        read_json(p.join("pa/champion.json")),
        read_json(p.join(format!("g/{champion}.json")))
    );

    ok(
        &[
            "ope", "--dataset", "c/dataset.json", "--spec", "pa/champion.json", "--policy", "c/policy_table.json",
            "--out", "o", "--bootstrap", "200", "--level", "0.9", "--checkpoint", "c/policy_table.json",
        ],
        p,
    );
    let wis = read_json(p.join("o/wis.json"));
    let est = &wis["estimate"];
    assert_eq!(est["resamples"], 200);
    assert_eq!(est["level"], 0.9);
    assert!(est["ci_low"].as_f64().unwrap() <= est["value"].as_f64().unwrap());
    assert!(est["value"].as_f64().unwrap() <= est["ci_high"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(p.join("o/mortality_curve.csv")).unwrap().lines().count(), 11);
    let series = fs::read_to_string(p.join("o/wis_series.csv")).unwrap();
    assert_eq!(series.lines().count(), 4);
}

#[test]
fn split_writes_four_disjoint_partitions() {
    let d = cohort();
    ok(&["split", "--dataset", "c/dataset.json", "--out", "sp"], d.path());
    let mut total = 0;
    for name in ["policy_train", "reward_train", "policy_test", "reward_test"] {
        total += read_json(d.path().join(format!("sp/{name}.json")))["trajectories"].as_array().unwrap().len();
    }
    assert_eq!(total, 90);
}

#[test]
fn pipeline_resume_after_injected_failure() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let (c, err) = code(&["pipeline", "--out", "run", "--config", &cfg, "--fail-at", "4"], d.path());
    assert_eq!(c, 1);
    assert!(err.contains("fitness"), "{err}");
    let m = read_json(d.path().join("run/manifest.json"));
    assert_eq!(m["stages"][4]["status"], "failed");
    assert_eq!(m["stages"][3]["status"], "completed");

    let out = ok(&["pipeline", "--out", "run", "--config", &cfg, "--resume"], d.path());
    assert!(out.contains("reused [inputs,stats,features,candidates]"), "{out}");
    assert!(out.contains("executed [fitness,pareto,ope]"), "{out}");
    let m = read_json(d.path().join("run/manifest.json"));
    assert!(m["champion"].is_string());
}

#[test]
fn default_pipeline_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let a = ok(&["pipeline", "--out", "a", "--client", "stub"], d.path());
    let b = ok(&["pipeline", "--out", "b", "--seed", "42"], d.path());
    assert!(a.contains("champion cand_"));
    assert_eq!(a, b);
    let ma = read_json(d.path().join("a/manifest.json"));
    let mb = read_json(d.path().join("b/manifest.json"));
    assert_eq!(ma, mb);
    for stage in ["01_stats/metadata.json", "02_features/features.json", "04_fitness/fitness.csv", "06_ope/wis.json"] {
        assert_eq!(
            fs::read(d.path().join("a").join(stage)).unwrap(),
            fs::read(d.path().join("b").join(stage)).unwrap(),
            "{stage}"
        );
    }
}

#[test]
fn timestamp_is_opt_in() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let out = tridrive(&["pipeline", "--out", "run", "--config", &cfg, "--timestamp"], d.path());
    assert!(out.status.success());
    assert!(read_json(d.path().join("run/manifest.json"))["started_at"].is_u64());
}
