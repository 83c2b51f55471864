use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const UNIT_MODEL: &str = r#"{
  "schema": "kpidyn-model/1",
  "n": 1,
  "loss": {"matrix": [0.5]},
  "gain": {"kind": "quadratic_well", "u0": 0.0, "center": [0.0], "curvature": [1.0]},
  "boundary": {"x1": [0.0], "t1": 0.0, "x2": [1.0], "t2": 1.5707963267948966}
}"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_kpidyn"))
            .args(args)
            .current_dir(self.dir.path())
            .env("KPIDYN_OUT_DIR", self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn manifest(&self, sub: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(&format!("manifest-{sub}.json"))).unwrap()).unwrap()
    }
}

fn last_row(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let line = text.lines().last().unwrap();
    line.split(',').map(|c| if c.is_empty() { f64::NAN } else { c.parse().unwrap() }).collect()
}

#[test]
fn profit_of_stationary_trajectory_is_u0_times_span() {
    let sb = Sandbox::new();
    sb.write(
        "m.json",
        r#"{"loss": {"matrix": [[1.0, 0.0], [0.0, 2.0]]}, "gain": {"kind": "constant", "u0": 3.0}}"#,
    );
    let mut csv = String::from("t,x_1,x_2,v_1,v_2,U,K,E,D_norm\n");
    for k in 0..=10 {
        csv.push_str(&format!("{},0.5,-1,0,0,3,0,3,\n", k as f64 * 0.25));
    }
    sb.write("constant.csv", &csv);
    let printed: f64 = sb.ok(&["profit", "--model", "m.json", "--traj", "constant.csv"]).trim().parse().unwrap();
    assert!((printed - 3.0 * 2.5).abs() < 1e-12, "{printed}");
}

#[test]
fn solve_reaches_the_target_endpoint() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    for method in ["shooting", "direct"] {
        let out = format!("traj-{method}.csv");
        sb.ok(&["solve", "--model", "m.json", "--method", method, "--dt", "1e-3", "--out", &out]);
        let row = last_row(&sb.path(&out));
        assert!((row[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        assert!((row[1] - 1.0).abs() < 1e-6, "{method}: {}", row[1]);
        // x(t) = sin t, so x' at the start is 1.
        let text = fs::read_to_string(sb.path(&out)).unwrap();
        let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert!((first[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-3, "{method}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let sb = Sandbox::new();
    let out = sb.run(&["solve", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(sb.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sb.run(&[]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_json() {
    let sb = Sandbox::new();
    sb.write(
        "bad.json",
        r#"{"loss": {"matrix": [[1.0, 0.0], [0.0, -1.0]]}, "gain": {"kind": "constant", "u0": 0.0}}"#,
    );
    let out = sb.run(&["eig", "--model", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["kind"].is_string());
    assert!(err["error"]["message"].is_string());
    assert!(!sb.path("manifest-eig.json").exists());

    let missing = sb.run(&["profit", "--model", "nowhere.json", "--traj", "nowhere.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    serde_json::from_slice::<Value>(&missing.stderr).unwrap();
}

#[test]
fn manifest_records_digests_and_config() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    sb.ok(&["solve", "--model", "m.json", "--out", "traj.csv"]);
    let m = sb.manifest("solve");
    assert_eq!(m["tool"], "kpidyn");
    assert_eq!(m["subcommand"], "solve");
    assert!(m["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["config"]["args"]["method"], "shooting");
    let digests: Vec<&Value> = m["inputs"].as_array().unwrap().iter().chain(m["outputs"].as_array().unwrap()).collect();
    assert_eq!(digests.len(), 2);
    for d in digests {
        let h = d["sha256"].as_str().unwrap();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c)));
    }
    // Nothing left over from the atomic write.
    let stray: Vec<_> = fs::read_dir(sb.dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(stray.is_empty());
}

#[test]
fn replaying_the_manifest_is_bit_identical() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    sb.write("p.json", r#"{"damping": [0.05], "forcing": [{"amplitude": 0.1, "frequency": 0.9, "phase": 0.0}]}"#);
    let args = ["simulate", "--model", "m.json", "--perturb", "p.json", "--t", "30", "--dt", "0.01", "--y0", "0.5"];
    let first = sb.ok(&args);
    let digest = sb.manifest("simulate")["outputs"][0]["sha256"].clone();
    let second = sb.ok(&args);
    assert_eq!(first, second);
    assert_eq!(sb.manifest("simulate")["outputs"][0]["sha256"], digest);
}

#[test]
fn eig_reports_unit_frequency() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    let v: Value = serde_json::from_str(&sb.ok(&["eig", "--model", "m.json"])).unwrap();
    let text = v.to_string();
    assert!(text.contains("frequencies"), "{text}");
    let f = v["modal_basis"]["frequencies"][0].as_f64().unwrap();
    assert!((f - 1.0).abs() < 1e-12);
    assert!(sb.ok(&["eig", "--model", "m.json", "--format", "text"]).contains("eigenlosses"));
}

#[test]
fn plan_writes_leapfrog_points() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    sb.write("prev.json", "[0.1]");
    sb.write("curr.json", r#"{"values": [0.2]}"#);
    sb.ok(&["plan", "--model", "m.json", "--prev", "prev.json", "--curr", "curr.json", "--dt", "0.1", "--steps", "1"]);
    // 2·0.2 − 0.1 − 0.01·0.2 with (2K)⁻¹ = 1.
    let row = last_row(&sb.path("plan.csv"));
    assert!((row[1] - 0.298).abs() < 1e-12);
}

#[test]
fn simulate_flags_damping_as_destructive() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    sb.write("p.json", r#"{"damping": [0.1]}"#);
    let v: Value =
        serde_json::from_str(&sb.ok(&["simulate", "--model", "m.json", "--perturb", "p.json", "--t", "20", "--dt", "0.01", "--y0", "1"]))
            .unwrap();
    assert_eq!(v["force_class"], "destructive");
    assert!(sb.path("run.csv").exists());
}

#[test]
fn scans_emit_two_column_csv() {
    let sb = Sandbox::new();
    sb.ok(&["scan", "--kind", "forcing", "--omega", "1", "--from", "0.5", "--to", "1.5", "--points", "5", "--jobs", "2"]);
    let text = fs::read_to_string(sb.path("scan.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 2));
    let best = rows.iter().max_by(|a, b| a[1].total_cmp(&b[1])).unwrap();
    assert_eq!(best[0], 1.0);

    sb.ok(&["scan", "--kind", "parametric", "--omega", "1", "--from", "1", "--to", "3", "--points", "3", "--out", "par.csv"]);
    let text = fs::read_to_string(sb.path("par.csv")).unwrap();
    let s: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(s[1] > 0.02, "{s:?}");
}

#[test]
fn invariants_report_is_json() {
    let sb = Sandbox::new();
    sb.write("m.json", UNIT_MODEL);
    sb.ok(&["solve", "--model", "m.json"]);
    let v: Value = serde_json::from_str(&sb.ok(&["invariants", "--model", "m.json", "--traj", "traj.csv", "--tol", "1e-3"])).unwrap();
    assert!(v.is_object());
}
