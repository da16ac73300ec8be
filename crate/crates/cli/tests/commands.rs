use std::path::{Path, PathBuf};
use std::process::Command as Process;

use hboot_cli::{main_with_args, Outcome};
use serde_json::Value;
use tempfile::TempDir;

const CHAIN: &str = r#"{"vertices": [
  {"id": 1, "kind": "leaf", "mean": 0.0, "variance": 1.0},
  {"id": 2, "kind": "internal", "children": [1], "expr": "x1"}
]}"#;

const FORWARD: &str = r#"{"vertices": [
  {"id": 1, "kind": "internal", "children": [2], "expr": "x2"},
  {"id": 2, "kind": "leaf", "mean": 0.0, "variance": 1.0}
]}"#;

const FIVE: &str = r#"{"vertices": [
  {"id": 1, "kind": "leaf", "mean": 1.0, "variance": 2.0},
  {"id": 2, "kind": "leaf", "mean": 2.0, "variance": 0.5, "cost": 2},
  {"id": 3, "kind": "leaf", "mean": 0.5, "variance": 1.0},
  {"id": 4, "kind": "internal", "children": [1, 2], "expr": "x1 * x2"},
  {"id": 5, "kind": "internal", "children": [3, 4], "expr": "exp(x3) + 2 * x4"}
]}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }
}

fn hboot(args: &[&str], tree: &Path) -> Outcome {
    let mut argv = vec![
        "hboot".to_string(),
        args[0].to_string(),
        "--tree".into(),
        tree.display().to_string(),
    ];
    argv.extend(args[1..].iter().map(ToString::to_string));
    main_with_args(argv)
}

fn json(out: &Outcome) -> Value {
    serde_json::from_str(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", out.stdout))
}

fn sizes_arg(doc: &Value) -> String {
    doc["sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n.as_u64().unwrap().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn optimize_chain_budget_four() {
    let fx = Fixture::new();
    let tree = fx.file("chain.json", CHAIN);
    let out = hboot(&["optimize", "--budget", "4"], &tree);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.contains("n* = (2, 2)"), "{}", out.stdout);
    assert!(out.stdout.contains("D* = 0.75"), "{}", out.stdout);

    let doc = json(&hboot(
        &["optimize", "--budget", "4", "--format", "json-like"],
        &tree,
    ));
    assert_eq!(sizes_arg(&doc), "2,2");
    assert!((doc["variance"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    let mut keys: Vec<&str> = doc
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort();
    assert_eq!(keys, ["alphas", "budgets", "sizes", "variance"]);
}

#[test]
fn variance_chain_four_five() {
    let fx = Fixture::new();
    let tree = fx.file("chain.json", CHAIN);
    let out = hboot(&["variance", "--sizes", "4,5"], &tree);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(
        out.stdout.contains("estimator variance: 0.4"),
        "{}",
        out.stdout
    );
    let doc = json(&hboot(
        &["variance", "--sizes", "4,5", "--format", "json-like"],
        &tree,
    ));
    assert!((doc["variance"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(doc["total_cost"], 9);
}

#[test]
fn forward_reference_fails_validation() {
    let fx = Fixture::new();
    let tree = fx.file("forward.json", FORWARD);
    let out = hboot(&["validate"], &tree);
    assert_ne!(out.code, 0);
    assert!(out.stderr.contains("correct-numbering"), "{}", out.stderr);
    assert!(
        out.stderr
            .lines()
            .all(|l| l.starts_with("tree-model: vertex ")),
        "{}",
        out.stderr
    );
}

#[test]
fn validate_reports_structure() {
    let fx = Fixture::new();
    let tree = fx.file("five.json", FIVE);
    let out = hboot(&["validate"], &tree);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.contains("valid: 5 vertices, 3 leaves, root 5"));
    let doc = json(&hboot(
        &["validate", "--format", "json-like", "--costs", "1=3"],
        &tree,
    ));
    assert_eq!(doc["valid"], true);
    assert_eq!(doc["costs"], serde_json::json!([3, 2, 1, 1, 1]));
    let mean5 = doc["means"][4].as_f64().unwrap();
    assert!((mean5 - (0.5f64.exp() + 4.0)).abs() < 1e-12);
}

#[test]
fn refed_sizes_reproduce_optimum() {
    let fx = Fixture::new();
    let tree = fx.file("five.json", FIVE);
    for method in ["collapsed", "grid"] {
        for budget in ["7", "13", "25"] {
            let opt = json(&hboot(
                &[
                    "optimize",
                    "--budget",
                    budget,
                    "--method",
                    method,
                    "--costs",
                    "5=2",
                    "--format",
                    "json-like",
                ],
                &tree,
            ));
            let d_star = opt["variance"].as_f64().unwrap();
            let var = json(&hboot(
                &[
                    "variance",
                    "--sizes",
                    &sizes_arg(&opt),
                    "--budget",
                    budget,
                    "--costs",
                    "5=2",
                    "--format",
                    "json-like",
                ],
                &tree,
            ));
            let d = var["variance"].as_f64().unwrap();
            assert!(
                (d - d_star).abs() <= 1e-9,
                "{method} b={budget}: {d} vs {d_star}"
            );
            assert!(var["total_cost"].as_u64().unwrap() <= budget.parse().unwrap());
        }
    }
}

#[test]
fn infeasibility_exits_two() {
    let fx = Fixture::new();
    let tree = fx.file("five.json", FIVE);
    let out = hboot(&["optimize", "--budget", "5"], &tree);
    assert_eq!(out.code, 2);
    assert!(
        out.stderr.starts_with("allocator: infeasible"),
        "{}",
        out.stderr
    );
    let out = hboot(
        &["variance", "--sizes", "2,2,2,2,2", "--budget", "11"],
        &tree,
    );
    assert_eq!(out.code, 2);
    let doc = json(&hboot(
        &["optimize", "--budget", "5", "--format", "json-like"],
        &tree,
    ));
    assert_eq!(doc["error"]["exit_code"], 2);
}

#[test]
fn domain_and_config_errors_exit_one() {
    let fx = Fixture::new();
    let bad = fx.file(
        "log.json",
        r#"{"vertices": [
          {"id": 1, "kind": "leaf", "mean": -1.0, "variance": 1.0},
          {"id": 2, "kind": "internal", "children": [1], "expr": "log(x1)"}
        ]}"#,
    );
    let out = hboot(&["variance", "--sizes", "2,2"], &bad);
    assert_eq!(out.code, 1);
    assert!(
        out.stderr.starts_with("tree-model: vertex 2:"),
        "{}",
        out.stderr
    );

    let tree = fx.file("chain.json", CHAIN);
    assert_eq!(hboot(&["variance"], &tree).code, 1);
    assert_eq!(hboot(&["variance", "--sizes", "1,2,3"], &tree).code, 1);
    assert_eq!(hboot(&["variance", "--sizes", "0,2"], &tree).code, 1);
    assert_eq!(
        hboot(&["optimize", "--budget", "4", "--costs", "9=1"], &tree).code,
        1
    );
    assert_eq!(
        hboot(&["optimize", "--budget", "4", "--costs", "1=0"], &tree).code,
        1
    );
    assert_eq!(
        hboot(
            &[
                "optimize",
                "--budget",
                "4",
                "--alpha-grid",
                "1",
                "--method",
                "grid"
            ],
            &tree
        )
        .code,
        1
    );
    assert_eq!(
        hboot(
            &["simulate", "--sizes", "2,2", "--replications", "1"],
            &tree
        )
        .code,
        1
    );
    let missing = fx.dir.path().join("absent.json");
    let out = hboot(&["validate"], &missing);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("cli-io:"));
}

#[test]
fn simulate_echoes_seed_and_replays() {
    let fx = Fixture::new();
    let tree = fx.file("five.json", FIVE);
    let args = [
        "simulate",
        "--sizes",
        "3,3,3,4,5",
        "--replications",
        "500",
        "--seed",
        "42",
        "--format",
        "json-like",
        "--emit-values",
    ];
    let a = hboot(&args, &tree);
    let b = hboot(&args, &tree);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    let doc = json(&a);
    assert_eq!(doc["seed"], 42);
    assert_eq!(doc["values"].as_array().unwrap().len(), 500);

    let unseeded = json(&hboot(
        &[
            "simulate",
            "--sizes",
            "3,3,3,4,5",
            "--replications",
            "50",
            "--format",
            "json-like",
        ],
        &tree,
    ));
    assert!(unseeded["seed"].is_u64());
    assert!(unseeded.get("values").is_none());
    let human = hboot(
        &[
            "simulate",
            "--sizes",
            "3,3,3,4,5",
            "--replications",
            "50",
            "--seed",
            "7",
        ],
        &tree,
    );
    assert!(human
        .stdout
        .lines()
        .any(|l| l.starts_with("seed") && l.trim_end().ends_with(" 7")));
}

#[test]
fn simulate_distribution_overrides() {
    let fx = Fixture::new();
    let tree = fx.file("chain.json", CHAIN);
    let doc = json(&hboot(
        &[
            "simulate",
            "--sizes",
            "4,5",
            "--replications",
            "200",
            "--seed",
            "1",
            "--dist",
            "uniform(2,3)",
            "--format",
            "json-like",
        ],
        &tree,
    ));
    let mean = doc["mean"].as_f64().unwrap();
    assert!((2.0..=3.0).contains(&mean));
    assert_eq!(doc["leaves"]["synthetic"][0]["kind"], "uniform");
    let out = hboot(
        &["simulate", "--sizes", "4,5", "--dist", "2=normal(0,1)"],
        &tree,
    );
    assert_eq!(out.code, 1);
}

#[test]
fn simulate_fixed_leaf_data() {
    let fx = Fixture::new();
    fx.file("x1.csv", "1.0\n2.0\n\n3.0\n4.0\n");
    let tree = fx.file(
        "data.json",
        r#"{"vertices": [
          {"id": 1, "kind": "leaf", "samples_file": "x1.csv"},
          {"id": 2, "kind": "internal", "children": [1], "expr": "x1 / 2"}
        ]}"#,
    );
    let val = json(&hboot(&["validate", "--format", "json-like"], &tree));
    assert_eq!(val["means"][0], 2.5);
    let doc = json(&hboot(
        &[
            "simulate",
            "--fixed",
            "--sizes",
            "4,6",
            "--replications",
            "300",
            "--seed",
            "9",
            "--format",
            "json-like",
        ],
        &tree,
    ));
    let mean = doc["mean"].as_f64().unwrap();
    assert!((0.5..=2.0).contains(&mean));
    assert_eq!(
        hboot(&["simulate", "--fixed", "--sizes", "3,6"], &tree).code,
        1
    );
}

#[test]
fn oracle_check_passes() {
    let fx = Fixture::new();
    let tree = fx.file("five.json", FIVE);
    let out = hboot(&["oracle-check", "--budget", "12"], &tree);
    assert_eq!(out.code, 0, "{}\n{}", out.stdout, out.stderr);
    assert!(out.stdout.trim_end().ends_with("PASS"));
    let doc = json(&hboot(
        &[
            "oracle-check",
            "--budget",
            "12",
            "--format",
            "json-like",
            "--sequential",
        ],
        &tree,
    ));
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["collapsed"]["variance"], doc["oracle"]["variance"]);
}

#[test]
fn binary_exit_codes() {
    let fx = Fixture::new();
    let chain = fx.file("chain.json", CHAIN);
    let forward = fx.file("forward.json", FORWARD);
    let bin = env!("CARGO_BIN_EXE_hboot");
    let status = |args: &[&str]| Process::new(bin).args(args).output().unwrap();

    let ok = status(&[
        "optimize",
        "--tree",
        chain.to_str().unwrap(),
        "--budget",
        "4",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("D* = 0.75"));
    assert_eq!(
        status(&["validate", "--tree", forward.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        status(&[
            "optimize",
            "--tree",
            chain.to_str().unwrap(),
            "--budget",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(status(&["frobnicate"]).status.code(), Some(1));
}
