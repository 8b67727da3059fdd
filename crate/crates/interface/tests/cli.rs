use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--grid-size", "4", "--n-features", "3", "--true-space-size", "200", "--pool-size", "20", "--n-test-envs", "5",
    "--n-queries", "3", "--mi-samples", "100", "--query-size", "2",
];

fn aird(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aird")).args(args).output().expect("binary runs")
}

fn run_into(out: &Path, seeds: &str) -> Output {
    let mut args = vec!["run", "--seeds", seeds, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    aird(&args)
}

#[test]
fn help_succeeds() {
    let out = aird(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("run") && text.contains("serve"), "{text}");
}

#[test]
fn zero_query_size_is_rejected_by_flag_name() {
    let out = aird(&["run", "--query-size", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--query-size"), "{err}");
}

#[test]
fn invalid_config_reports_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "query_sise = 3\n").unwrap();
    let out = aird(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("query_sise"), "{err}");
}

#[test]
fn run_writes_per_seed_files_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), "0..1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in 0..=1 {
        let csv = std::fs::read_to_string(dir.path().join(format!("seed_{seed}.csv"))).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "step,regret,entropy");
        assert_eq!(lines.len(), 1 + 4);
        assert!(dir.path().join(format!("seed_{seed}.timing.csv")).exists());
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("seed_{seed}.json"))).unwrap()).unwrap();
        assert!(summary.is_object());
    }
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4);
}

#[test]
fn toml_config_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, "n_queries = 1\nselection = \"random\"\n").unwrap();
    let mut args = vec!["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = aird(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("seed_0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "the flag overrides the file");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("seed_0.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["selection"], "random", "the file overrides the default");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_into(a.path(), "4").status.success());
    assert!(run_into(b.path(), "4").status.success());
    for name in ["seed_4.csv", "aggregate.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}
