use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    lsa(&args)
}

fn csv_rows(out: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(out.join("results.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn two_state_td() -> Value {
    json!({
        "transition": [[0.5, 0.5], [0.5, 0.5]],
        "rewards": [0.1, -0.1],
        "discount": 0.1,
        "features": [[1, 0], [0, 1]]
    })
}

#[test]
fn lyapunov_of_a_diagonal_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"kind": "lyapunov", "a_bar": [[-1, 0], [0, -2]]}));
    let out = dir.path().join("out");
    assert!(run(&cfg, &out, &[]).status.success());
    let rows = csv_rows(&out);
    assert_eq!(rows[0], ["quantity", "row", "col", "value"]);
    // diagonal Ā: P_ii = 1/(2|a_ii|)
    let p = |r: &str, c: &str| -> f64 {
        let row = rows.iter().find(|x| x[0] == "p" && x[1] == r && x[2] == c).unwrap();
        row[3].parse().unwrap()
    };
    assert!((p("0", "0") - 0.5).abs() < 1e-14);
    assert!((p("1", "1") - 0.25).abs() < 1e-14);
    assert!(p("0", "1").abs() < 1e-14);
    let m = manifest(&out);
    assert_eq!(m["kind"], "lyapunov");
    assert_eq!(m["summary"]["hurwitz"], true);
    assert_eq!(m["csv_schema_version"], 1);
}

#[test]
fn counterexample_threshold_and_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"kind": "counterexample", "epsilon": 0.1, "max_order": 8}));
    let out = dir.path().join("out");
    assert!(run(&cfg, &out, &[]).status.success());
    let rows = csv_rows(&out);
    assert_eq!(
        rows[0],
        ["order", "leading_coefficient", "moment_final", "fixed_point", "diverged", "divergence_threshold"]
    );
    let by_order = |m: &str| rows.iter().find(|r| r[0] == m).unwrap().clone();
    assert_eq!(by_order("2")[5], "6");
    assert_eq!(by_order("4")[4], "false");
    assert_eq!(by_order("6")[4], "true");
    // second-moment fixed point 0.01 / 0.075
    let fixed: f64 = by_order("2")[3].parse().unwrap();
    assert!((fixed - 0.01 / 0.075).abs() < 1e-12);
    assert_eq!(manifest(&out)["summary"]["divergence_threshold"], 6);
}

#[test]
fn bound_check_writes_the_domination_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "kind": "bound-check",
            "td": two_state_td(),
            "epsilon": 3.0e-4,
            "steps": 4000,
            "n_runs": 200,
            "record_every": 500,
            "seed": 11
        }),
    );
    let out = dir.path().join("out");
    assert!(run(&cfg, &out, &[]).status.success());
    let rows = csv_rows(&out);
    assert_eq!(rows[0], ["k", "empirical_msq", "std_err", "theorem1_bound", "dominated"]);
    let tau = manifest(&out)["summary"]["tau"].as_u64().unwrap() as usize;
    assert_eq!(rows[1][0], tau.to_string());
    assert!(rows[1..].iter().all(|r| r[4] == "true"));
    let m = manifest(&out);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["summary"]["all_dominated"], true);
    assert!(!out.join("error.json").exists());
}

#[test]
fn invalid_step_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({"kind": "bound-check", "td": two_state_td(), "epsilon": 0.01, "steps": 100, "n_runs": 10}),
    );
    let out = dir.path().join("out");
    let result = run(&cfg, &out, &[]);
    assert_eq!(result.status.code(), Some(2));
    let err: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["status"], "error");
    assert_eq!(err["category"], "config");
    assert_eq!(err["exit_code"], 2);
    assert!(!out.join("results.csv").exists());
}

#[test]
fn exit_codes_follow_the_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (json!({"kind": "lyapunov", "a_bar": [[-1]], "bogus": 1}), 2, "config"),
        (json!({"kind": "nonsense"}), 2, "config"),
        (
            json!({"kind": "mixing", "model": {"transition": [[0.5, 0.6], [0.5, 0.5]], "a": [[[-1]], [[-1]]], "b": [[0], [0]]}, "deltas": [0.1]}),
            3,
            "model",
        ),
        (
            json!({"kind": "mixing", "model": {"transition": [[0.99, 0.01], [0.01, 0.99]], "a": [[[-1]], [[-1]]], "b": [[0], [0]]}, "deltas": [1e-9], "k_cap": 5}),
            4,
            "numerical",
        ),
    ];
    for (i, (config, code, category)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), config);
        let out = dir.path().join(format!("out{i}"));
        let result = run(&cfg, &out, &[]);
        assert_eq!(result.status.code(), Some(*code), "case {i}: {}", String::from_utf8_lossy(&result.stderr));
        assert!(String::from_utf8_lossy(&result.stderr).starts_with("lsa: "));
        let err: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
        assert_eq!(err["category"], *category, "case {i}");
    }
    let missing = lsa(&["--config", dir.path().join("absent.json").to_str().unwrap(), "--quiet", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn success_clears_a_stale_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), "bad.json", &json!({"kind": "lyapunov", "a_bar": [[-1, 0]]}));
    assert!(!run(&bad, &out, &[]).status.success());
    assert!(out.join("error.json").exists());
    let good = write_config(dir.path(), "good.json", &json!({"kind": "lyapunov", "a_bar": [[-1]]}));
    assert!(run(&good, &out, &[]).status.success());
    assert!(!out.join("error.json").exists());
}

fn simulate_config(seed: Option<u64>) -> Value {
    let mut c = json!({
        "kind": "moments",
        "td": two_state_td(),
        "schedule": {"type": "constant", "epsilon": 0.01},
        "steps": 300,
        "n_runs": 100,
        "orders": [1, 2],
        "record_every": 50
    });
    if let Some(s) = seed {
        c["seed"] = json!(s);
    }
    c
}

#[test]
fn seed_precedence_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &simulate_config(Some(5)));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &[]).status.success());
    assert!(run(&cfg, &c, &["--seed", "6"]).status.success());
    let body = |p: &Path| std::fs::read(p.join("results.csv")).unwrap();
    assert_eq!(body(&a), body(&b));
    assert_ne!(body(&a), body(&c));
    assert_eq!(manifest(&a)["seed"], 5);
    assert_eq!(manifest(&c)["seed"], 6);

    let unseeded = write_config(dir.path(), "d.json", &simulate_config(None));
    let d = dir.path().join("d");
    assert!(run(&unseeded, &d, &[]).status.success());
    assert_eq!(manifest(&d)["seed"], lsa_cli::DEFAULT_SEED);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &simulate_config(Some(9)));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &["--threads", "1"]).status.success());
    assert!(run(&cfg, &b, &["--threads", "3"]).status.success());
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn file_references_resolve_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("a.json"), "[[-2, 1], [0, -3]]").unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"kind": "lyapunov", "a_bar": {"file": "data/a.json"}}));
    let inline = write_config(dir.path(), "i.json", &json!({"kind": "lyapunov", "a_bar": [[-2, 1], [0, -3]]}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&inline, &b, &[]).status.success());
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn output_in_the_config_is_relative_to_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"kind": "lyapunov", "a_bar": [[-1]], "output": "results"}));
    let result = lsa(&["--config", cfg.to_str().unwrap(), "--quiet"]);
    assert!(result.status.success());
    assert!(dir.path().join("results").join("results.csv").exists());
}

#[test]
fn td_and_mixing_kinds_run() {
    let dir = tempfile::tempdir().unwrap();
    let td = write_config(dir.path(), "td.json", &json!({"kind": "td0", "problem": two_state_td(), "delta": 1e-3}));
    let out = dir.path().join("td");
    assert!(run(&td, &out, &[]).status.success());
    let rows = csv_rows(&out);
    assert!(rows.iter().any(|r| r[0] == "theta_star"));
    assert_eq!(manifest(&out)["summary"]["tau"], 2);

    let mix = write_config(
        dir.path(),
        "mix.json",
        &json!({"kind": "mixing", "td": two_state_td(), "deltas": [0.5, 1e-3]}),
    );
    let out = dir.path().join("mix");
    assert!(run(&mix, &out, &[]).status.success());
    assert_eq!(csv_rows(&out)[0], ["delta", "tau"]);
}

#[test]
fn simulate_lists_every_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "kind": "simulate",
            "model": {"transition": [[0.9, 0.1], [0.2, 0.8]], "a": [[[-1]], [[-0.5]]], "b": [[0.1], [-0.2]]},
            "schedule": {"type": "polynomial", "eps0": 0.5, "power": 0.7},
            "steps": 20,
            "theta0": [1.0],
            "x0": 0
        }),
    );
    let out = dir.path().join("out");
    assert!(run(&cfg, &out, &[]).status.success());
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 1 + 21);
    assert_eq!(rows[1][1], "0");
    assert_eq!(rows[21][1], "");
}
