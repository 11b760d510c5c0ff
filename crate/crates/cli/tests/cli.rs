//! End-to-end tests of the `lcirt` binary: exit codes, artifact formats,
//! determinism, and the agreement between text summaries and JSON.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lcirt")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Two classes, five binary items, one dimension.
const TRUTH_1D: &str = r#"{
  "pi": [0.45, 0.55],
  "items": {
    "kind": "irt",
    "support": [[-1.1], [1.2]],
    "difficulties": {
      "kind": "free",
      "beta": [[0.0], [0.5], [-0.6], [0.9], [-0.2]]
    },
    "discrimination": [1.0, 1.0, 1.0, 1.0, 1.0]
  }
}"#;

/// Four classes on a 2x2 product grid over two dimensions; items 1,2 load
/// on the first dimension, items 3,4 on the second.
const TRUTH_2D: &str = r#"{
  "pi": [0.25, 0.25, 0.25, 0.25],
  "items": {
    "kind": "irt",
    "support": [[-1.1, -1.1], [-1.1, 1.1], [1.1, -1.1], [1.1, 1.1]],
    "difficulties": {
      "kind": "free",
      "beta": [[0.0], [0.4], [0.0], [-0.4]]
    },
    "discrimination": [1.0, 1.0, 1.0, 1.0]
  }
}"#;

/// Simulates the unidimensional truth into `dir/sim.csv` and returns the path.
fn simulate_1d(dir: &Path, n: u32, seed: u32) -> PathBuf {
    std::fs::write(dir.join("truth_params.json"), TRUTH_1D).unwrap();
    let out = run_in(
        dir,
        &[
            "simulate",
            "--params",
            "truth_params.json",
            "--k",
            "2",
            "--link",
            "global",
            "--cats",
            "2,2,2,2,2",
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
            "--output",
            "sim.csv",
            "--truth",
            "truth.json",
        ],
    );
    assert_eq!(code(&out), 0, "simulate failed: {}", stderr(&out));
    dir.join("sim.csv")
}

fn strip_timestamp(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).expect("artifact should parse");
    let map = v.as_object_mut().expect("artifact should be an object");
    assert!(
        map.remove("generated_at_unix_ms").is_some(),
        "artifact should carry the timestamp field"
    );
    v
}

#[test]
fn simulate_fit_round_trip_exits_zero_and_recovers_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 1200, 11);
    let out = run_in(
        dir.path(),
        &["fit", "--input", "sim.csv", "--k", "2", "--link", "global", "--output", "fit.json"],
    );
    assert_eq!(code(&out), 0, "fit failed: {}", stderr(&out));
    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap());
    assert_eq!(art["converged"], serde_json::json!(true));
    let pi: Vec<f64> =
        serde_json::from_value(art["params"]["pi"].clone()).expect("pi should deserialize");
    assert_eq!(pi.len(), 2);
    assert!((pi[0] - 0.45).abs() < 0.1, "pi[0] = {} far from truth", pi[0]);
    // the true class of every unit is recorded 1-based in the truth file
    let truth = strip_timestamp(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap());
    let classes: Vec<u64> = serde_json::from_value(truth["classes"].clone()).unwrap();
    assert_eq!(classes.len(), 1200);
    assert!(classes.iter().all(|&c| c == 1 || c == 2));
}

#[test]
fn fit_summary_numbers_match_the_json_artifact_exactly() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 400, 3);
    let out = run_in(
        dir.path(),
        &["fit", "--input", "sim.csv", "--k", "2", "--link", "global", "--output", "fit.json"],
    );
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap());
    let line = |prefix: &str| -> String {
        text.lines()
            .find_map(|l| l.strip_prefix(prefix))
            .unwrap_or_else(|| panic!("summary should contain {prefix:?}"))
            .to_string()
    };
    assert_eq!(line("log-likelihood = "), serde_json::to_string(&art["lk"]).unwrap());
    assert_eq!(line("AIC = "), serde_json::to_string(&art["aic"]).unwrap());
    assert_eq!(line("BIC = "), serde_json::to_string(&art["bic"]).unwrap());
    let pi: Vec<serde_json::Value> = art["params"]["pi"].as_array().unwrap().clone();
    let pi_text: Vec<String> =
        pi.iter().map(|v| serde_json::to_string(v).unwrap()).collect();
    assert_eq!(line("class weights: "), pi_text.join(", "));
}

#[test]
fn reruns_write_byte_identical_artifacts_apart_from_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 300, 21);
    for name in ["a.json", "b.json"] {
        let out = run_in(
            dir.path(),
            &[
                "fit", "--input", "sim.csv", "--k", "2", "--link", "global", "--start", "random",
                "--n-starts", "2", "--seed", "9", "--output", name,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let strip_lines = |name: &str| -> String {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.contains("generated_at_unix_ms"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_lines("a.json"), strip_lines("b.json"));
}

#[test]
fn numeric_flag_codes_mean_the_same_as_the_names() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 200, 5);
    let by_name = run_in(
        dir.path(),
        &[
            "fit", "--input", "sim.csv", "--k", "2", "--link", "global", "--disc", "constrained",
            "--difl", "free", "--start", "deterministic",
        ],
    );
    let by_code = run_in(
        dir.path(),
        &[
            "fit", "--input", "sim.csv", "--k", "2", "--link", "1", "--disc", "0", "--difl", "0",
            "--start", "0",
        ],
    );
    assert_eq!(code(&by_name), 0);
    assert_eq!(stdout(&by_name), stdout(&by_code));
}

#[test]
fn aggregate_output_feeds_fit_identically_to_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 250, 7);
    let agg = run_in(
        dir.path(),
        &["aggregate", "--input", "sim.csv", "--output", "matrix.json"],
    );
    assert_eq!(code(&agg), 0);
    assert!(stdout(&agg).contains("250 units"));
    let from_csv = run_in(dir.path(), &["fit", "--input", "sim.csv", "--k", "2"]);
    let from_matrix = run_in(dir.path(), &["fit", "--input", "matrix.json", "--k", "2"]);
    assert_eq!(code(&from_csv), 0);
    assert_eq!(stdout(&from_csv), stdout(&from_matrix));
    // without --output the matrix JSON goes to stdout, without a timestamp
    let piped = run_in(dir.path(), &["aggregate", "--input", "sim.csv"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&piped)).unwrap();
    assert!(v.get("generated_at_unix_ms").is_none());
    assert_eq!(v["cats"], serde_json::json!([2, 2, 2, 2, 2]));
}

#[test]
fn validation_errors_exit_two_and_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 100, 2);

    let bad_k = run_in(dir.path(), &["fit", "--input", "sim.csv", "--k", "0"]);
    assert_eq!(code(&bad_k), 2);
    assert!(stderr(&bad_k).contains("k"), "stderr: {}", stderr(&bad_k));

    let bad_multi =
        run_in(dir.path(), &["fit", "--input", "sim.csv", "--k", "2", "--multi", "1-4"]);
    assert_eq!(code(&bad_multi), 2);
    assert!(stderr(&bad_multi).contains("dimension groups"), "stderr: {}", stderr(&bad_multi));

    let bad_link = run_in(dir.path(), &["fit", "--input", "sim.csv", "--k", "2", "--link", "x"]);
    assert_eq!(code(&bad_link), 2);
    assert!(stderr(&bad_link).contains("--link"), "stderr: {}", stderr(&bad_link));

    let missing_file = run_in(dir.path(), &["fit", "--input", "nowhere.csv", "--k", "2"]);
    assert_eq!(code(&missing_file), 2);
    assert!(stderr(&missing_file).contains("--input"), "stderr: {}", stderr(&missing_file));
}

#[test]
fn iteration_cap_exits_three_but_still_writes_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 300, 13);
    let out = run_in(
        dir.path(),
        &[
            "fit", "--input", "sim.csv", "--k", "2", "--link", "global", "--max-iter", "2",
            "--output", "capped.json",
        ],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("capped.json")).unwrap());
    assert_eq!(art["converged"], serde_json::json!(false));
    assert!(stdout(&out).contains("iteration cap"));
}

#[test]
fn test_dim_reports_the_comparison_and_rejects_crossed_partitions() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 400, 17);
    let ok = run_in(
        dir.path(),
        &[
            "test-dim", "--input", "sim.csv", "--k", "2", "--multi0", "1-5", "--multi1",
            "1,2|3,4,5", "--output", "lr.json",
        ],
    );
    assert_eq!(code(&ok), 0, "stderr: {}", stderr(&ok));
    let text = stdout(&ok);
    assert!(text.contains("restricted:"));
    assert!(text.contains("deviance = "));
    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("lr.json")).unwrap());
    assert!(art["deviance"].as_f64().unwrap() >= 0.0);
    assert_eq!(art["df"], serde_json::json!(1));

    let crossed = run_in(
        dir.path(),
        &[
            "test-dim", "--input", "sim.csv", "--k", "2", "--multi0", "1,2|3,4,5", "--multi1",
            "1,3|2,4,5",
        ],
    );
    assert_eq!(code(&crossed), 2);
    assert!(stderr(&crossed).contains("nest"), "stderr: {}", stderr(&crossed));
}

#[test]
fn cluster_writes_the_merge_table_dendrogram_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("truth2d.json"), TRUTH_2D).unwrap();
    let sim = run_in(
        dir.path(),
        &[
            "simulate", "--params", "truth2d.json", "--k", "4", "--link", "global", "--multi",
            "1,2|3,4", "--cats", "2,2,2,2", "--n", "700", "--seed", "31", "--output", "blocks.csv",
        ],
    );
    assert_eq!(code(&sim), 0, "stderr: {}", stderr(&sim));
    let out = run_in(
        dir.path(),
        &[
            "cluster", "--input", "blocks.csv", "--k", "4", "--link", "global", "--seed", "3",
            "--output", "trace.json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);

    // first table row: step 1 merges two original items (both codes negative)
    let row1 = text
        .lines()
        .find(|l| l.trim_start().starts_with("1 "))
        .expect("merge table should have a first row");
    let tokens: Vec<&str> = row1.split_whitespace().collect();
    assert_eq!(tokens[0], "1");
    let a: i64 = tokens[1].parse().unwrap();
    let b: i64 = tokens[2].parse().unwrap();
    assert!(a < 0 && b < 0, "first merge should join two items: {row1}");
    assert!(text.contains("suggested dimensions at alpha = 0.05:"));
    assert!(text.contains("leaf order:"));

    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("trace.json")).unwrap());
    assert_eq!(art["n_items"], serde_json::json!(4));
    assert_eq!(art["steps"].as_array().unwrap().len(), 3);
    let order: Vec<u64> = serde_json::from_value(art["order"].clone()).unwrap();
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![1, 2, 3, 4], "leaf order must be a 1-based permutation");

    let dot = run_in(
        dir.path(),
        &[
            "cluster", "--input", "blocks.csv", "--k", "4", "--link", "global", "--seed", "3",
            "--output", "trace.dot", "--format", "dot",
        ],
    );
    assert_eq!(code(&dot), 0);
    let dot_text = std::fs::read_to_string(dir.path().join("trace.dot")).unwrap();
    assert!(dot_text.starts_with("graph dendrogram {"));
    assert!(dot_text.contains("s1 -- "));
    assert!(dot_text.contains("s3"));
}

#[test]
fn grid_tabulates_models_sorted_by_bic() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 300, 41);
    let out = run_in(
        dir.path(),
        &[
            "grid", "--input", "sim.csv", "--k", "1,2", "--link", "global,none", "--output",
            "grid.json", "--threads", "2",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("grid.json")).unwrap());
    let rows = art["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let bics: Vec<f64> = rows.iter().map(|r| r["bic"].as_f64().unwrap()).collect();
    assert!(bics.windows(2).all(|w| w[0] <= w[1]), "rows must be sorted by BIC: {bics:?}");
    for r in rows {
        assert!(stdout(&out).contains(r["label"].as_str().unwrap()));
    }
}

#[test]
fn fit_artifacts_and_truth_files_work_as_supplied_starts() {
    let dir = tempfile::tempdir().unwrap();
    simulate_1d(dir.path(), 600, 19);
    let cold = run_in(
        dir.path(),
        &["fit", "--input", "sim.csv", "--k", "2", "--output", "fit.json"],
    );
    assert_eq!(code(&cold), 0, "stderr: {}", stderr(&cold));
    let cold_art = strip_timestamp(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap());
    let cold_lk = cold_art["lk"].as_f64().unwrap();

    // the fit artifact, the truth file, and the bare parameter set are all
    // accepted by --start and reach the same optimum
    for start in ["fit.json", "truth.json", "truth_params.json"] {
        let warm = run_in(
            dir.path(),
            &[
                "fit", "--input", "sim.csv", "--k", "2", "--start", start, "--output",
                "warm.json",
            ],
        );
        assert_eq!(code(&warm), 0, "--start {start} failed: {}", stderr(&warm));
        let art = strip_timestamp(&std::fs::read_to_string(dir.path().join("warm.json")).unwrap());
        assert_eq!(art["converged"], serde_json::json!(true));
        let warm_lk = art["lk"].as_f64().unwrap();
        assert!(
            (warm_lk - cold_lk).abs() <= 1e-6,
            "--start {start}: {warm_lk} vs {cold_lk}"
        );
    }
}
