use std::path::{Path, PathBuf};
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hwtrack-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_plan(dir: &Path, n_list: &str, kappa: f64) -> PathBuf {
    std::fs::write(
        dir.join("system.json"),
        format!(
            r#"{{"classes": [{{"a": 0.5, "mu": 1.0, "c": 1.0}}, {{"a": 0.5, "mu": 2.0, "c": 3.0}}],
                "beta": 1.0, "gamma": 1.0, "kappa": {kappa}, "m": 1}}"#
        ),
    )
    .unwrap();
    let plan = dir.join("plan.json");
    std::fs::write(
        &plan,
        format!(
            r#"{{"system": "system.json", "non_paper_regime": true, "n_list": {n_list},
                "grid_points": 31, "replications": 400, "sde_paths": 200, "psi_paths": 4}}"#
        ),
    )
    .unwrap();
    plan
}

fn run(sub: &str, config: &Path, out: &Path) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_hwtrack"))
        .args([sub, "--config"])
        .arg(config)
        .args(["--seed", "7", "--out"])
        .arg(out)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&output.stdout).into_owned() + &String::from_utf8_lossy(&output.stderr);
    (output.status.code().unwrap_or(-1), text)
}

#[test]
fn config_errors_exit_with_two() {
    let dir = scratch("config");
    let (code, _) = run("solve-hjb", &dir.join("missing.json"), &dir.join("out"));
    assert_eq!(code, 2);
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"system": {"classes": []}, "n_list": [4]}"#).unwrap();
    let (code, text) = run("oracle", &bad, &dir.join("out"));
    assert_eq!(code, 2, "{text}");
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = scratch("numeric");
    // a ball far too wide for n = 10 leaves the region where the diffusion exists
    let plan = write_plan(&dir, "[10]", 3.0);
    let (code, text) = run("solve-hjb", &plan, &dir.join("out"));
    assert_eq!(code, 3, "{text}");
    let (code, text) = run("gap-study", &plan, &dir.join("gap"));
    assert_eq!(code, 3, "{text}");
    assert!(dir.join("gap/gap_report.json").exists());
}

#[test]
fn gap_study_is_deterministic_and_nonnegative() {
    let dir = scratch("gap");
    let plan = write_plan(&dir, "[4]", 0.25);
    let (code, text) = run("gap-study", &plan, &dir.join("a"));
    assert_eq!(code, 0, "{text}");
    let (code, _) = run("gap-study", &plan, &dir.join("b"));
    assert_eq!(code, 0);
    let a = std::fs::read(dir.join("a/gap_report.csv")).unwrap();
    let b = std::fs::read(dir.join("b/gap_report.csv")).unwrap();
    assert_eq!(a, b);
    let rows = hwtrack::harness::parse_csv(std::str::from_utf8(&a).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0][4] >= 0.0, "gap {}", rows[0][4]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("a/gap_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["lower_bound_exact"], true);
    assert_eq!(report["provenance"]["seed"], 7);
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = scratch("empty");
    let plan = write_plan(&dir, "[]", 0.25);
    let (code, _) = run("gap-study", &plan, &dir.join("out"));
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(dir.join("out/gap_report.csv")).unwrap();
    assert_eq!(text, format!("{}\n", hwtrack::harness::CSV_HEADER));
}

#[test]
fn every_subcommand_writes_artifacts() {
    let dir = scratch("all");
    let plan = write_plan(&dir, "[16]", 0.25);
    let out = dir.join("out");
    for (sub, file) in [
        ("solve-hjb", "hjb_n16.json"),
        ("simulate", "trajectory_n16.csv"),
        ("sde-check", "sde-check.json"),
        ("oracle", "optimal_value_n16.csv"),
    ] {
        let (code, text) = run(sub, &plan, &out);
        assert_eq!(code, 0, "{sub}: {text}");
        assert!(out.join(file).exists(), "{sub} did not write {file}");
    }
    let sol = hwtrack::HjbSolution::load(out.join("hjb_n16.json")).unwrap();
    assert_eq!(sol.system.n, 16);
    let meta = std::fs::read_to_string(out.join("optimal_value_n16.meta.json")).unwrap();
    assert!(meta.contains("reject_arrivals_at_cap"));
}
