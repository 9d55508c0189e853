use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn programs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../programs")
}

fn spear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spear")).args(args).output().expect("spawn spear")
}

fn enoxaparin() -> String {
    programs().join("enoxaparin.spear").display().to_string()
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn first_gen(report: &Value) -> &Value {
    report["trace"].as_array().unwrap().iter().find(|t| t["kind"] == "gen").expect("a GEN record")
}

#[test]
fn enoxaparin_run_succeeds_and_refines_on_low_confidence() {
    let out = spear(&["run", &enoxaparin(), "--pipeline", "enoxaparin_qa"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let context = &r["state"]["context"];
    assert!(context.get("answer_0").is_some());
    let confidence = first_gen(&r)["confidence"].as_f64().unwrap();
    assert!(confidence < 0.7);
    assert!(context.get("answer_1").is_some());
}

#[test]
fn unknown_pipeline_is_a_usage_error() {
    let out = spear(&["run", &enoxaparin(), "--pipeline", "no_such_pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown pipeline"));
}

#[test]
fn missing_program_file_is_a_usage_error() {
    assert_eq!(spear(&["run", "/nonexistent/x.spear"]).status.code(), Some(2));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(spear(&["run", &enoxaparin(), "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn invalid_program_exits_one_with_located_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.spear");
    std::fs::write(&p, "pipeline p {\n  REF[UPDATE, f_missing]\n}\n").unwrap();
    let out = spear(&["run", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.spear:2:"), "{err}");
}

#[test]
fn persisted_store_warms_the_cache_for_the_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let mut reports = Vec::new();
    for i in 0..2 {
        let out_path = dir.path().join(format!("r{i}.json"));
        let out = spear(&[
            "run", &enoxaparin(), "--pipeline", "enoxaparin_qa",
            "--store", store.to_str().unwrap(), "--out", out_path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(report(&out_path));
    }
    assert_eq!(first_gen(&reports[0])["cached_prefix_tokens"], 0);
    assert!(first_gen(&reports[1])["cached_prefix_tokens"].as_u64().unwrap() > 0);
    assert!(store.exists());
}

#[test]
fn shadow_run_leaves_the_store_file_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let args = ["run", &enoxaparin(), "--pipeline", "enoxaparin_qa", "--store", store.to_str().unwrap()];
    assert_eq!(spear(&args).status.code(), Some(0));
    let before = std::fs::read(&store).unwrap();
    let mut shadow = args.to_vec();
    shadow.push("--shadow");
    let out = spear(&shadow);
    assert_eq!(out.status.code(), Some(0));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["shadow"], true);
    assert_eq!(std::fs::read(&store).unwrap(), before);
}

#[test]
fn inspect_diff_and_replay_read_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let s = store.to_str().unwrap();
    assert_eq!(spear(&["run", &enoxaparin(), "--pipeline", "enoxaparin_qa", "--store", s]).status.code(), Some(0));

    let out = spear(&["inspect", "--store", s, "qa_prompt", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let history = v["history"].as_array().unwrap();
    assert_eq!(history[0]["action"], "CREATE");
    assert!(history.len() >= 2);

    let out = spear(&["diff", "--store", s, "qa_prompt", "retrieve_meds_72hr"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("histories diverge at record 0"));

    let out = spear(&["replay", "--store", s]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("qa_prompt: ok"));

    assert_eq!(spear(&["inspect", "--store", s, "no_such_key"]).status.code(), Some(2));
}

#[test]
fn replay_flags_a_tampered_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let s = store.to_str().unwrap();
    assert_eq!(spear(&["run", &enoxaparin(), "--pipeline", "enoxaparin_qa", "--store", s]).status.code(), Some(0));
    let text = std::fs::read_to_string(&store).unwrap();
    std::fs::write(&store, text.replacen("Answer the question", "Answer a question", 1)).unwrap();
    // A tampered text either fails to load or fails replay; both are reported as failures.
    let code = spear(&["replay", "--store", s]).status.code();
    assert!(matches!(code, Some(1) | Some(2)), "{code:?}");
}

#[test]
fn stats_aggregate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("r.json");
    let out = spear(&[
        "run", &programs().join("table1.spear").display().to_string(),
        "--pipeline", "confidence_retry", "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = spear(&["stats", out_path.to_str().unwrap(), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["rows"].is_array());
    let out = spear(&["stats", out_path.to_str().unwrap(), "--format", "csv"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("refiner_id,mode,n_applied"));
}

#[test]
fn check_accepts_shipped_programs_one_at_a_time() {
    for f in ["enoxaparin.spear", "table1.spear", "table2.spear", "fusion.spear"] {
        let out = spear(&["check", &programs().join(f).display().to_string()]);
        assert_eq!(out.status.code(), Some(0), "{f}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn check_rejects_conflicting_files_in_one_namespace() {
    let t1 = programs().join("table1.spear").display().to_string();
    let t2 = programs().join("table2.spear").display().to_string();
    let out = spear(&["check", &t1, &t2]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
}

#[test]
fn fmt_is_canonical_on_shipped_programs_and_keeps_comments() {
    let files: Vec<String> = ["enoxaparin.spear", "table1.spear", "table2.spear", "fusion.spear"]
        .iter()
        .map(|f| programs().join(f).display().to_string())
        .collect();
    let mut args = vec!["fmt", "--check"];
    args.extend(files.iter().map(String::as_str));
    assert_eq!(spear(&args).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("messy.spear");
    std::fs::write(&p, "# keep me\npipeline   p{RET[\"x\"]->GEN[\"y\"]}\n").unwrap();
    let ps = p.to_str().unwrap();
    assert_eq!(spear(&["fmt", "--check", ps]).status.code(), Some(1));
    assert_eq!(spear(&["fmt", "--write", ps]).status.code(), Some(0));
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("# keep me\npipeline \"p\" {\n"), "{text}");
    assert_eq!(spear(&["fmt", "--check", ps]).status.code(), Some(0));
}

#[test]
fn bench_writes_tables_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[corpus]\nsize = 10\n").unwrap();
    let out_dir = dir.path().join("out");
    for (suite, file) in [("fusion-selectivity", "fusion_selectivity.csv"), ("refinement-modes", "refinement_modes.csv")] {
        let out = spear(&["bench", suite, "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{suite}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stdout.is_empty());
        let csv = std::fs::read_to_string(out_dir.join(file)).unwrap();
        assert!(csv.lines().count() > 1);
    }
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[backend]\nkind = \"carrier_pigeon\"\n").unwrap();
    let out = spear(&["run", &enoxaparin(), "--pipeline", "enoxaparin_qa", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn http_backend_requires_live() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("http.toml");
    std::fs::write(&cfg, "[backend]\nkind = \"http\"\nmodel = \"gpt-4o-mini\"\n").unwrap();
    let out = spear(&["run", &enoxaparin(), "--pipeline", "enoxaparin_qa", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--live"));
}
