use std::path::Path;
use std::process::{Command, Output};

fn lp2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lp2s")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_PAC: [&str; 12] = ["--K", "100", "--R", "2", "--L", "10", "--mu0", "0.5", "--variant", "pac", "--a", "1"];

#[test]
fn solve_auto_delta0_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["solve"];
    args.extend(SMALL_PAC);
    args.extend(["--b", "1", "--delta0", "auto", "--out", out]);
    let o = lp2s(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let d: f64 = text.lines().find_map(|l| l.strip_prefix("delta0: ")).unwrap().parse().unwrap();
    assert!((d - 0.125).abs() <= 1e-4, "delta0 {d}");
    for f in ["solution.json", "actions.csv", "thresholds.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(json["status"], "optimal");
}

#[test]
fn solve_too_strict_delta0_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(SMALL_PAC);
    args.extend(["--b", "1", "--delta0", "0.05", "--out", dir.path().to_str().unwrap()]);
    let o = lp2s(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("w(R) < 1-delta0"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{ not json");
    assert_eq!(lp2s(&["solve", "--config", &cfg]).status.code(), Some(1));

    let cfg = write_config(dir.path(), r#"{"schema": "lp2s-config/1", "K": 10, "L": 20}"#);
    assert_eq!(lp2s(&["solve", "--config", &cfg]).status.code(), Some(1));

    let cfg = write_config(dir.path(), r#"{"schema": "lp2s-config/1", "unknown": 1}"#);
    assert_eq!(lp2s(&["solve", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lp2s(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(lp2s(&["solve", "--K", "many"]).status.code(), Some(1));
    assert_eq!(lp2s(&["--help"]).status.code(), Some(0));
}

fn simulate_uniform(dir: &Path) -> Output {
    let cfg = write_config(
        dir,
        r#"{"schema": "lp2s-config/1", "K": 20, "R": 4, "L": 3, "episodes": 10, "master_seed": 4,
            "policies": [{"kind": "uniform"}]}"#,
    );
    lp2s(&["simulate", "--config", &cfg, "--out", dir.to_str().unwrap()])
}

#[test]
fn simulate_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate_uniform(dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let episodes = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 11);
    assert_eq!(summary.lines().filter(|l| l.starts_with("uniform,")).count(), 1);
    assert!(!episodes.contains('\r'));
}

#[test]
fn simulate_same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(simulate_uniform(a.path()).status.code(), Some(0));
    assert_eq!(simulate_uniform(b.path()).status.code(), Some(0));
    for f in ["episodes.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_srm_reports_regret_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"schema": "lp2s-config/1", "K": 50, "R": 6, "L": 4, "episodes": 40, "master_seed": 2,
            "variant": {"kind": "srm"}, "policies": [{"kind": "lp2s"}], "checks": {"thm4": true}}"#,
    );
    let o = lp2s(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let row = summary.lines().find(|l| l.starts_with("bound:thm4,")).expect("thm4 row");
    assert!(row.ends_with(",true") || row.ends_with(",false"), "{row}");
}

#[test]
fn compare_needs_two_policies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"schema": "lp2s-config/1", "K": 20, "R": 4, "L": 3, "episodes": 10, "policies": [{"kind": "lp2s"}]}"#,
    );
    let o = lp2s(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_writes_row_per_policy_with_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"schema": "lp2s-config/1", "K": 40, "R": 6, "L": 4, "episodes": 40, "master_seed": 1,
            "policies": [{"kind": "lp2s"}, {"kind": "uniform"}]}"#,
    );
    let o = lp2s(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().contains("p_value"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn bounds_with_and_without_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = ["--K", "100", "--R", "8", "--L", "6", "--a", "1", "--b", "1", "--out", out];
    let o = lp2s(&[&["bounds"][..], &common].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let thm2 = csv.lines().find(|l| l.starts_with("thm2,")).unwrap().to_string();
    assert!(thm2.contains(",,"), "observed should be blank: {thm2}");
    assert!(csv.contains("b=1"), "{csv}");


    // a prior where f* sits under the bound
    let common = ["--K", "200", "--R", "10", "--L", "9", "--a", "1", "--b", "3", "--out", out];
    assert_eq!(lp2s(&[&["solve"][..], &common].concat()).status.code(), Some(0));
    let solution = dir.path().join("solution.json");
    let o = lp2s(&[&["bounds"][..], &common, &["--solution", solution.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let thm2 = csv.lines().find(|l| l.starts_with("thm2,")).unwrap();
    let fields: Vec<&str> = thm2.split(',').collect();
    assert!(!fields[2].is_empty(), "{thm2}");
    assert_eq!(fields[3], "true", "{thm2}");
}
