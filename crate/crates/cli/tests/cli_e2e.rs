//! End-to-end tests of the `switchvi` binary: exit codes, file outputs,
//! CSV round-trip bit-exactness, manifest determinism, the node cap.

use std::path::{Path, PathBuf};
use std::process::Command;

use switchvi_cli::output::{field_to_csv, parse_csv};
use switchvi_cli::problem::load_problem;
use switchvi_core::bilateral::{solve_bilateral, BilateralConfig};
use switchvi_core::grid::{build_grid, GridSpec, DEFAULT_VALUE_CAP};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_switchvi"))
}

fn problems_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("switchvi-e2e-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn validate_exit_codes() {
    let status = bin().arg("validate").arg(problems_dir().join("d1.json")).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let out = bin().arg("validate").arg(problems_dir().join("d1_zero_costs.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("free loop"), "witness loop expected:\n{text}");

    let out = bin().arg("validate").arg(problems_dir().join("d1_h3_violation.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("terminal"), "terminal witness expected:\n{text}");
}

#[test]
fn solve_writes_csv_manifest_and_report() {
    let dir = tmp_dir("solve");
    let prefix = dir.join("run");
    let status = bin()
        .arg("solve")
        .arg(problems_dir().join("d1.json"))
        .args(["--scheme", "bilateral-min", "--grid", "-3,3,31;10", "--out"])
        .arg(&prefix)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    let (header, rows) = parse_csv(&csv).unwrap();
    assert_eq!(header, vec!["t", "x1", "i", "j", "value"]);
    assert_eq!(rows.len(), 11 * 31 * 4); // (slices) x nodes x pairs
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["solver"]["scheme"], "bilateral-min");
    assert_eq!(manifest["grid"]["nodes_per_dim"][0], 31);
    assert!(manifest["validation"]["no_free_loop_ok"].as_bool().unwrap());
    assert!(prefix.with_extension("report.json").exists());
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let d1 = load_problem(&problems_dir().join("d1.json")).unwrap();
    let spec = GridSpec { nodes_per_dim: vec![21], time_steps: 6, ..d1.grid_spec.clone().unwrap() };
    let grid = build_grid(&spec, &d1.problem, DEFAULT_VALUE_CAP).unwrap();
    let (field, _) = solve_bilateral(&d1.problem, &grid, &BilateralConfig::default()).unwrap();
    let csv = field_to_csv(&field, &grid, d1.problem.modes());
    let (_, rows) = parse_csv(&csv).unwrap();
    let lambda = d1.problem.modes().lambda();
    let mut row = 0;
    for s in 0..=field.time_steps() {
        for node in 0..grid.n_nodes() {
            for pair in 0..lambda {
                let expected = field.at(s, pair, node);
                let got = rows[row][grid.dim_k() + 3]; // t, x1..xk, i, j, value
                assert_eq!(got.to_bits(), expected.to_bits(), "row {row}");
                row += 1;
            }
        }
    }
}

#[test]
fn identical_runs_produce_identical_hashes() {
    let dir = tmp_dir("det");
    let mut hashes = Vec::new();
    for tag in ["a", "b"] {
        let prefix = dir.join(tag);
        let status = bin()
            .arg("solve")
            .arg(problems_dir().join("d1.json"))
            .args(["--scheme", "doubly", "--n", "2", "--m", "1", "--grid", "-3,3,41;12", "--out"])
            .arg(&prefix)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("manifest.json")).unwrap())
                .unwrap();
        let csv_hash = manifest["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .find(|o| o["path"].as_str().unwrap().ends_with(".csv"))
            .map(|o| o["fnv1a64"].as_str().unwrap().to_string())
            .unwrap();
        hashes.push(csv_hash);
    }
    assert_eq!(hashes[0], hashes[1], "reruns must be bit-identical");
}

#[test]
fn schedule_solve_emits_family_and_diagnostics() {
    let dir = tmp_dir("sched");
    let prefix = dir.join("dec");
    let out = bin()
        .arg("solve")
        .arg(problems_dir().join("d1.json"))
        .args(["--scheme", "decreasing", "--schedule", "1,2,4,8", "--grid", "-3,3,31;10", "--out"])
        .arg(&prefix)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for m in [1, 2, 4, 8] {
        assert!(prefix.with_extension(format!("n0m{m}.csv")).exists(), "missing family member m={m}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("report.json")).unwrap()).unwrap();
    let checks = report["schedule_checks"].as_array().unwrap();
    assert_eq!(checks.len(), 3);
    for c in checks {
        assert_eq!(c["direction"], "decreasing");
        assert!(c["ok"].as_bool().unwrap());
    }
}

#[test]
fn threaded_schedule_matches_serial() {
    let dir = tmp_dir("thr");
    let mut hashes = Vec::new();
    for (tag, threads) in [("serial", "1"), ("par", "4")] {
        let prefix = dir.join(tag);
        let status = bin()
            .arg("solve")
            .arg(problems_dir().join("d1.json"))
            .args(["--scheme", "increasing", "--schedule", "1,2,4", "--grid", "-3,3,31;8", "--threads", threads, "--out"])
            .arg(&prefix)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let csvs: Vec<String> = [1, 2, 4]
            .iter()
            .map(|n| std::fs::read_to_string(prefix.with_extension(format!("n{n}m0.csv"))).unwrap())
            .collect();
        hashes.push(csvs.join("\n"));
    }
    assert_eq!(hashes[0], hashes[1], "parallel schedule must be bit-identical to serial");
}

#[test]
fn oracle_solve_prints_root_values() {
    let dir = tmp_dir("oracle");
    let prefix = dir.join("oracle");
    let out = bin()
        .arg("solve")
        .arg(problems_dir().join("d1.json"))
        .args(["--scheme", "oracle", "--n-steps", "8", "--out"])
        .arg(&prefix)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for pair in ["v[1,1]", "v[1,2]", "v[2,1]", "v[2,2]"] {
        assert!(text.contains(pair), "missing {pair} in:\n{text}");
    }
    let (_, rows) = parse_csv(&std::fs::read_to_string(prefix.with_extension("csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn non_convergence_exits_2() {
    let dir = tmp_dir("nonconv");
    let status = bin()
        .arg("solve")
        .arg(problems_dir().join("d1.json"))
        .args(["--scheme", "bilateral-min", "--grid", "-3,3,41;10", "--tol", "1e-14", "--max-inner-iters", "1", "--out"])
        .arg(dir.join("nc"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unvalidated_problem_refuses_to_solve_unless_forced() {
    let dir = tmp_dir("force");
    let status = bin()
        .arg("solve")
        .arg(problems_dir().join("d1_zero_costs.json"))
        .args(["--scheme", "bilateral-min", "--grid", "-3,3,21;5", "--out"])
        .arg(dir.join("gated"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let status = bin()
        .arg("solve")
        .arg(problems_dir().join("d1_zero_costs.json"))
        .args(["--scheme", "bilateral-min", "--grid", "-3,3,21;5", "--force", "--out"])
        .arg(dir.join("forced"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0), "zero data has the zero solution; forced run succeeds");
}

#[test]
fn node_cap_env_is_enforced() {
    let status = bin()
        .arg("validate")
        .arg(problems_dir().join("d1.json"))
        .env("SWITCHVI_MAX_NODES", "100")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn malformed_input_exits_3() {
    let dir = tmp_dir("bad");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let status = bin().arg("validate").arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let status = bin().arg("solve").arg(problems_dir().join("d1.json")).status().unwrap();
    assert_eq!(status.code(), Some(3), "solve without --scheme is a usage error");

    let status = bin().arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn verify_rejects_negated_cost_before_solving() {
    // flipping one cost's sign must be caught by the validators, reported
    // before any solve runs
    let dir = tmp_dir("negcost");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(problems_dir().join("d1.json")).unwrap()).unwrap();
    doc["costs"]["g_lower_1_2"] = serde_json::json!("-0.3");
    let path = dir.join("negated.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let out = bin().arg("verify").arg(&path).args(["--level", "fast", "--out"]).arg(dir.join("v")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL") && text.contains("validators"), "{text}");
    assert!(
        !text.contains("residual-and-feasibility"),
        "no solver properties should run after a validator failure:\n{text}"
    );
}

#[test]
fn verify_fast_passes_on_d1() {
    let dir = tmp_dir("verify");
    let out = bin()
        .arg("verify")
        .arg(problems_dir().join("d1.json"))
        .args(["--level", "fast", "--out"])
        .arg(dir.join("v"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && !text.contains("FAIL"));

    // tolerances tightened 1000x: controlled failures, exit 1
    let out = bin()
        .arg("verify")
        .arg(problems_dir().join("d1.json"))
        .args(["--level", "fast", "--tol-scale", "1000", "--out"])
        .arg(dir.join("vt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
