use std::path::Path;
use std::process::{Command, Output};

use deltapad_core::patterns::PatternLayout;
use serde_json::Value;

fn deltapad(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_deltapad"));
    cmd.args(args).env_remove("DELTAPAD_PORT").env_remove("DELTAPAD_DATA_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn perfect_responder_run_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = deltapad(&["run", "--mode", "contact", "--device", "sim", "--responder", "perfect", "--data-dir", dir, "--seed", "1"], &[]);
    let report = ok_json(&out);
    assert_eq!(report["mean_rate"].as_f64().unwrap(), 1.0);
    assert_eq!(report["trials"].as_array().unwrap().len(), 45);
    assert_eq!(std::fs::read_dir(tmp.path().join("sessions")).unwrap().count(), 1);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = deltapad(&["run", "--mode", "stretch", "--seed", "2"], &[("DELTAPAD_DATA_DIR", tmp.path())]);
    let report = ok_json(&out);
    assert_eq!(report["trials"].as_array().unwrap().len(), 40);
    assert!(tmp.path().join("sessions").read_dir().unwrap().next().is_some());
}

#[test]
fn stretch_r_stroke_spans_the_layout_length() {
    let out = deltapad(&["render", "--mode", "stretch", "--pattern", "R"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (x, y, phase) = (col("x"), col("y"), col("phase"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // a row's phase covers the interval up to the next row, so the stroke
    // ends at the row that follows the last stroke row
    let first = rows.iter().position(|f| f[phase] == "stroke").unwrap();
    let last = rows.iter().rposition(|f| f[phase] == "stroke").unwrap();
    let stroke: Vec<(f64, f64)> = rows[first..=last + 1].iter().map(|f| (f[x].parse().unwrap(), f[y].parse().unwrap())).collect();
    assert!(stroke.len() > 10);
    let xmin = stroke.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = stroke.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    // R runs along +x through the centre, half the length each side
    let len = PatternLayout::default().stretch_length;
    assert!((xmax - xmin - len).abs() < 1e-6, "{}", xmax - xmin);
    assert!((xmin + len / 2.0).abs() < 1e-6 && (xmax - len / 2.0).abs() < 1e-6);
    assert!(stroke.iter().all(|p| p.1.abs() < 1e-9));
}

#[test]
fn render_writes_to_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("traj.csv");
    let out = deltapad(&["render", "--mode", "contact", "--pattern", "C", "--out", path.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("t,"));
    assert!(text.lines().any(|l| l.ends_with(",contact")));
}

#[test]
fn analyze_sixteen_sessions_has_an_omnibus_section() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    for k in 0..16 {
        let subject = format!("S{:02}", k + 1);
        let seed = (100 + k).to_string();
        let out = deltapad(&["run", "--mode", "contact", "--subject", &subject, "--seed", &seed, "--data-dir", dir], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let report = ok_json(&deltapad(&["analyze", dir], &[]));
    let contact = &report["contact"];
    assert_eq!(contact["aggregate"]["sessions"], 16);
    let h = contact["omnibus"]["statistic"].as_f64().unwrap();
    let p = contact["omnibus"]["p_value"].as_f64().unwrap();
    assert!(h > 0.0 && (0.0..=1.0).contains(&p));
    assert_eq!(contact["pairwise"].as_array().unwrap().len(), 36);
    assert_eq!(contact["confusion_normalized"].as_array().unwrap().len(), 9);
    assert!(report.get("stretch").is_none());
}

#[test]
fn workspace_report_is_fully_reachable() {
    let r = ok_json(&deltapad(&["workspace-report"], &[]));
    assert_eq!(r["fraction_reachable"].as_f64().unwrap(), 1.0);
    assert!(r["min_contact_force"].as_f64().unwrap() >= 2.0);
}

#[test]
fn device_test_streams_a_centre_touch() {
    let out = deltapad(&["device-test", "--device", "sim"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snaps: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(snaps.len() > 10);
    let touching: Vec<&Value> = snaps.iter().filter(|s| s["in_contact"] == true).collect();
    assert!(!touching.is_empty());
    for s in touching {
        assert!(s["pose"]["x"].as_f64().unwrap().abs() < 0.2 && s["pose"]["y"].as_f64().unwrap().abs() < 0.2, "{s}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    for args in [
        &["render", "--mode", "contact", "--pattern", "ZZ"][..],
        &["run", "--mode", "contact", "--device", "serial:/nonexistent/tty"],
        &["run", "--mode", "contact", "--responder", "/nonexistent.json"],
        &["analyze", "/nonexistent/dir"],
        &["workspace-report", "--config", "/nonexistent.json"],
    ] {
        let out = deltapad(args, &[]);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let out = deltapad(&["analyze", tmp.path().to_str().unwrap()], &[]);
    assert!(!out.status.success());
}
