use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdcp_core::data::{write_csv, TimeSeriesMatrix};
use hdcp_core::simulation::{generate, DgpSpec, ErrorDist, Scenario};
use serde_json::Value;
use tempfile::TempDir;

fn hdcp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdcp")).args(args).current_dir(cwd).output().expect("spawn hdcp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn assert_schema(name: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

fn write_panel(dir: &Path, name: &str, data: &TimeSeriesMatrix) -> PathBuf {
    let path = dir.join(name);
    let mut buf = Vec::new();
    write_csv(data, &mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

fn write_rows(dir: &Path, name: &str, rows: &[Vec<f64>]) -> PathBuf {
    write_panel(dir, name, &TimeSeriesMatrix::from_rows(rows).unwrap())
}

fn null_panel(dir: &Path, n: usize, p: usize, seed: u64) -> PathBuf {
    let data = generate(&DgpSpec::null(n, p, 0, Scenario::S1, ErrorDist::Normal, seed)).unwrap();
    write_panel(dir, &format!("null_{n}_{p}_{seed}.csv"), &data)
}

/// Small calibration artifact written into `dir` as `cal.json`.
fn calibration(dir: &Path) -> PathBuf {
    let out = hdcp(&["calibrate", "--grid", "300", "--reps", "300", "--seed", "0", "-o", "cal.json"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("cal.json")
}

#[test]
fn calibrate_is_reproducible_and_valid() {
    let dir = TempDir::new().unwrap();
    let args = ["calibrate", "--grid", "200", "--reps", "200", "--seed", "3"];
    let a = hdcp(&args, dir.path());
    let b = hdcp(&args, dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let doc = stdout_json(&a);
    assert_schema("calibration.schema.json", &doc);
    assert!(doc["c_hat"].as_f64().unwrap() > 0.0);
    assert!(doc.get("samples").is_none());
    assert!(String::from_utf8_lossy(&a.stderr).contains("c_hat"));

    let other = hdcp(&["calibrate", "--grid", "200", "--reps", "200", "--seed", "4"], dir.path());
    assert_ne!(a.stdout, other.stdout);

    let embedded = hdcp(&["calibrate", "--grid", "200", "--reps", "200", "--embed-samples"], dir.path());
    let doc = stdout_json(&embedded);
    assert_schema("calibration.schema.json", &doc);
    assert_eq!(doc["samples"].as_array().unwrap().len(), 200);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    for args in [
        &["calibrate", "--reps", "50"][..],
        &["calibrate", "--grid", "1"],
        &["calibrate", "--alpha", "0.7"],
        &["test"],
        &["test", "-i", "x.csv", "--method", "bogus"],
        &["no-such-command"],
        &["simulate", "--reps", "10"],
        &["simulate", "--tau-frac", "1.0", "--sparsity", "5", "--assert-ordering", "--reps", "50"],
    ] {
        let out = hdcp(args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(code(&hdcp(&["--help"], dir.path())), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let cal = cal.to_str().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "1,2\n3,x\n5,6\n7,8\n9,10\n").unwrap();
    std::fs::write(dir.path().join("ragged.csv"), "1,2\n3\n5,6\n7,8\n9,10\n").unwrap();
    std::fs::write(dir.path().join("short.csv"), "1,2\n3,4\n").unwrap();
    let header = null_panel(dir.path(), 30, 3, 1);
    let text = std::fs::read_to_string(&header).unwrap();
    std::fs::write(dir.path().join("header.csv"), format!("a,b,c\n{text}")).unwrap();

    for file in ["bad.csv", "ragged.csv", "short.csv", "missing.csv", "header.csv"] {
        let out = hdcp(&["test", "-i", file, "--calibration", cal], dir.path());
        assert_eq!(code(&out), 2, "{file}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    let out = hdcp(&["test", "-i", "header.csv", "--header", "--calibration", cal], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    let out = hdcp(&["test", "-i", "header.csv", "--header", "--calibration", "broken.json"], dir.path());
    assert_eq!(code(&out), 2);

    let out = hdcp(
        &["test", "-i", "header.csv", "--header", "--calibration", cal, "-o", "no/such/dir/out.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn test_command_output_matches_schema_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let panel = null_panel(dir.path(), 100, 20, 7);
    let args = ["test", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap()];
    let a = hdcp(&args, dir.path());
    let b = hdcp(&args, dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);

    let doc = stdout_json(&a);
    assert_schema("test.schema.json", &doc);
    let report = &doc["report"];
    let methods: Vec<&str> = report["reports"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["S", "M", "M_dagger", "T_CC", "T_CC_dagger"]);
    assert_eq!((report["n"].as_u64(), report["p"].as_u64()), (Some(100), Some(20)));
    assert_eq!(report["m_lag"].as_u64(), Some(2));
    assert_eq!(report["lambda_n"].as_u64(), Some(10));
    assert_eq!(doc["calibration"]["source"], "file");
    for r in report["reports"].as_array().unwrap() {
        assert_eq!(r["config_echo"]["alpha"].as_f64(), Some(0.05));
        assert_eq!(r["config_echo"]["grid_size"].as_u64(), Some(300));
    }

    let out_file = dir.path().join("res.json");
    let c = hdcp(&[&args[..], &["-o", out_file.to_str().unwrap()]].concat(), dir.path());
    assert_eq!(code(&c), 0);
    assert_eq!(std::fs::read(&out_file).unwrap(), a.stdout);
    assert!(String::from_utf8_lossy(&c.stdout).contains("p-value"));
}

#[test]
fn constant_panel_rejects_nothing() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let rows = vec![vec![2.5; 6]; 40];
    let panel = write_rows(dir.path(), "const.csv", &rows);
    let out = hdcp(&["test", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_schema("test.schema.json", &doc);
    let reports = doc["report"]["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 5);
    for r in reports {
        assert_eq!(r["reject"], false, "{r}");
        assert!(r["p_value"].as_f64().unwrap() > 0.999, "{r}");
    }
    assert_eq!(doc["report"]["statistics"]["s"]["value"].as_f64(), Some(0.0));
    assert!(!doc["report"]["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn single_method_is_lazy() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let panel = null_panel(dir.path(), 60, 10, 2);
    let out = hdcp(
        &["test", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap(), "--method", "l2"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_schema("test.schema.json", &doc);
    let st = &doc["report"]["statistics"];
    assert!(st["s"].is_object());
    assert!(st["m"].is_null() && st["m_dagger"].is_null());
    assert_eq!(doc["report"]["reports"].as_array().unwrap().len(), 1);

    // the max-type tests need no calibration at all
    let out = hdcp(&["test", "-i", panel.to_str().unwrap(), "--method", "linf,linf-trim"], dir.path());
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_schema("test.schema.json", &doc);
    assert!(doc.get("calibration").is_none());
    assert!(doc["report"]["statistics"]["s"].is_null());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn auto_calibration_warns() {
    let dir = TempDir::new().unwrap();
    let panel = null_panel(dir.path(), 40, 5, 3);
    let out = hdcp(&["test", "-i", panel.to_str().unwrap(), "--method", "l2"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: no --calibration"));
    let doc = stdout_json(&out);
    assert_eq!(doc["calibration"]["source"], "auto");
    assert_eq!(doc["calibration"]["grid_size"].as_u64(), Some(2000));
    assert!(doc["report"]["warnings"][0].as_str().unwrap().contains("--calibration"));
}

#[test]
fn trimming_failure_is_reported_per_method() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let panel = null_panel(dir.path(), 40, 5, 4);
    let args = ["test", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap(), "--lambda", "30"];
    let out = hdcp(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_schema("test.schema.json", &doc);
    let failures = doc["report"]["failures"].as_object().unwrap();
    assert!(failures.contains_key("M_dagger") && failures.contains_key("T_CC_dagger"));
    assert_eq!(doc["report"]["reports"].as_array().unwrap().len(), 3);

    let out = hdcp(&[&args[..], &["--method", "linf-trim"]].concat(), dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn locate_recovers_noiseless_shift() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let tau = 24;
    let rows: Vec<Vec<f64>> =
        (0..60).map(|i| (0..8).map(|j| if i >= tau && j < 3 { 1.0 } else { 0.0 }).collect()).collect();
    let panel = write_rows(dir.path(), "shift.csv", &rows);
    let out = hdcp(&["locate", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_schema("locate.schema.json", &doc);
    for m in ["S", "M", "M_dagger"] {
        assert_eq!(doc["candidates"][m].as_u64(), Some(tau as u64), "{m}");
    }
    assert_eq!(doc["tau_hat"]["tau_hat"].as_u64(), Some(tau as u64));
    assert_eq!(doc["tau_hat_dagger"]["tau_hat"].as_u64(), Some(tau as u64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_hat"));
}

#[test]
fn locate_on_generated_alternative() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let spec = DgpSpec::null(200, 40, 0, Scenario::S1, ErrorDist::Normal, 11).alternative(0.5, 40);
    let panel = write_panel(dir.path(), "alt.csv", &generate(&spec).unwrap());
    let out = hdcp(&["locate", "-i", panel.to_str().unwrap(), "--calibration", cal.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_schema("locate.schema.json", &doc);
    let tau_hat = doc["tau_hat"]["tau_hat"].as_u64().unwrap() as i64;
    assert!((tau_hat - spec.tau() as i64).abs() <= 10, "{tau_hat} vs {}", spec.tau());
}

#[test]
fn screen_iid_series_has_nominal_rejection_rate() {
    let dir = TempDir::new().unwrap();
    let panel = null_panel(dir.path(), 200, 500, 5);
    let out = hdcp(&["screen", "-i", panel.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_schema("screen.schema.json", &doc);
    assert_eq!(doc["results"].as_array().unwrap().len(), 500);
    assert_eq!(doc["lags"].as_u64(), Some(10));
    let counts: u64 = doc["histogram"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 500);
    let frac = doc["rejection_fraction"].as_f64().unwrap();
    assert!((0.02..=0.09).contains(&frac), "{frac}");
}

#[test]
fn screen_reports_degenerate_series() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0, (i as f64 * 0.7).sin(), ((i * i) % 7) as f64]).collect();
    let panel = write_rows(dir.path(), "mixed.csv", &rows);
    let out = hdcp(&["screen", "-i", panel.to_str().unwrap(), "--lags", "3", "--bins", "4"], dir.path());
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_schema("screen.schema.json", &doc);
    assert_eq!(doc["failed"][0]["series_index"].as_u64(), Some(0));
    assert_eq!(doc["results"].as_array().unwrap().len(), 2);
    assert_eq!(code(&hdcp(&["screen", "-i", panel.to_str().unwrap(), "--lags", "30"], dir.path())), 1);
}

fn simulate_args<'a>(cal: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["simulate", "--n", "60", "--p", "20", "--reps", "50", "--calibration", cal];
    v.extend_from_slice(extra);
    v
}

#[test]
fn simulate_emits_every_method_reproducibly() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let args = simulate_args(cal.to_str().unwrap(), &["--seed", "9"]);
    let a = hdcp(&args, dir.path());
    let b = hdcp(&args, dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);

    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scenario,n,p,M0,error,tau_frac,s,method,metric,value,reps,seed"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for m in ["S", "M", "M_dagger", "T_CC", "T_CC_dagger"] {
        let row = rows.iter().find(|r| r[7] == m && r[8] == "rejection_rate").unwrap_or_else(|| panic!("{m}"));
        let v: f64 = row[9].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(row[10], "50");
    }
    assert!(rows.iter().all(|r| r[8] != "location_error"), "no location rows under the null");

    let alt = hdcp(&simulate_args(cal.to_str().unwrap(), &["--tau-frac", "0.5", "--sparsity", "20"]), dir.path());
    let text = String::from_utf8(alt.stdout).unwrap();
    for label in ["S", "M", "M_dagger", "tau_hat", "tau_hat_dagger"] {
        assert!(text.lines().any(|l| l.contains(&format!(",{label},location_error,"))), "{label}");
    }
}

#[test]
fn assert_ordering_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cal = calibration(dir.path());
    let cal = cal.to_str().unwrap();
    let run = |c_tau: &str, seed: &str| {
        let args = [
            "simulate", "--n", "80", "--p", "50", "--tau-frac", "0.5", "--sparsity", "50", "--reps", "50",
            "--calibration", cal, "--assert-ordering", "--c-tau", c_tau, "--seed", seed, "-o", "o.csv",
        ];
        hdcp(&args, dir.path())
    };
    let holds = run("5", "0");
    assert_eq!(code(&holds), 0, "{}", String::from_utf8_lossy(&holds.stdout));
    let fails = run("8", "1");
    assert_eq!(code(&fails), 4);
    assert!(String::from_utf8_lossy(&fails.stdout).contains("S dense > sparse: FAILS"));
    let csv = std::fs::read_to_string(dir.path().join("o.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",1,S,rejection_rate,")));
    assert!(csv.lines().any(|l| l.contains(",50,S,rejection_rate,")));
}
