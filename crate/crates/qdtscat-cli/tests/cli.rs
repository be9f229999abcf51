use qdtscat_cli::output::rows_from_csv;
use std::path::Path;
use std::process::{Command, Output};

const TUNED: &str = "system.c12 = 5.3368e9\n";

fn qdtscat(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qdtscat"));
    c.args(args).env_remove("RUST_LOG");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn config_error_exits_1_with_line_and_key() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "bad.cfg", "# header\nsystem.c6 = 4698\n\nscan.energies = 1, 0.5\n");
    let out = qdtscat(&["scan", "--config", &cfg, "--out", &s(&d.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("scan.energies"), "{err}");
    assert!(!d.path().join("o").join("scan.csv").exists());
}

#[test]
fn unwritable_output_aborts_before_computing() {
    let d = tempfile::tempdir().unwrap();
    let blocker = d.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_cfg(d.path(), "c.cfg", TUNED);
    let started = std::time::Instant::now();
    let out = qdtscat(&["scan", "--config", &cfg, "--out", &s(&blocker.join("sub"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn zero_field_point_gives_the_threshold_cross_section() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.cfg", &format!("{TUNED}scan.fields = 0\nscan.energies = 0.01\noutput.formats = csv\n"));
    let out = qdtscat(&["scan", "--config", &cfg, "--out", &s(d.path())], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows_from_csv(&std::fs::read_to_string(d.path().join("scan.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let a = -369.0f64;
    for r in &rows {
        assert!(r.is_ok() && r.flags.is_empty(), "{r:?}");
        let want = 8.0 * std::f64::consts::PI * a * a;
        assert!((r.sigma_a0sq / want - 1.0).abs() < 0.01, "{} vs {want}", r.sigma_a0sq);
    }
    assert!((rows[0].sigma_a0sq / rows[1].sigma_a0sq - 1.0).abs() < 1e-3);
}

#[test]
fn paired_pipelines_agree_and_warm_cache_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        "c.cfg",
        &format!("{TUNED}scan.fields = 0, 200\nscan.energies = 1\nscan.pipeline = both\nresonance.in_scan = false\n"),
    );
    let cache = s(&d.path().join("cache"));
    let (o1, o2) = (d.path().join("cold"), d.path().join("warm"));
    let cold = qdtscat(&["scan", "--config", &cfg, "--out", &s(&o1), "--cache", &cache], &[("RUST_LOG", "info")]);
    assert_eq!(cold.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&cold.stderr).contains("cached K0"));
    let warm = qdtscat(
        &["scan", "--config", &cfg, "--out", &s(&o2), "--cache", &cache, "--threads", "2"],
        &[("RUST_LOG", "info")],
    );
    assert_eq!(warm.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&warm.stderr).matches("cached K0").count(), 2);
    let mut names: Vec<_> = std::fs::read_dir(&o1).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 4);
    for n in &names {
        assert_eq!(std::fs::read(o1.join(n)).unwrap(), std::fs::read(o2.join(n)).unwrap(), "{n:?}");
    }
    let rows = rows_from_csv(&std::fs::read_to_string(o1.join("scan.csv")).unwrap()).unwrap();
    for f in [0.0, 200.0] {
        let pick = |p: &str| rows.iter().find(|r| r.field_kvcm == f && r.pipeline == p).unwrap().sigma_a0sq;
        let (n, m) = (pick("numerov"), pick("mqdt"));
        assert!((n / m - 1.0).abs() < 0.01, "{f} kV/cm: {n} vs {m}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(o1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pipeline_pairs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["failed"], 0);
}

#[test]
fn corrupt_cache_record_is_recomputed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        "c.cfg",
        &format!("{TUNED}scan.energies = 1\nscan.pipeline = mqdt\noutput.formats = csv\n"),
    );
    let cache = d.path().join("cache");
    let first = qdtscat(&["scan", "--config", &cfg, "--out", &s(&d.path().join("a")), "--cache", &s(&cache)], &[]);
    assert_eq!(first.status.code(), Some(0));
    let rec = std::fs::read_dir(&cache).unwrap().next().unwrap().unwrap().path();
    let mut b = std::fs::read(&rec).unwrap();
    let n = b.len();
    b[n / 2] ^= 1;
    std::fs::write(&rec, b).unwrap();
    let again = qdtscat(&["scan", "--config", &cfg, "--out", &s(&d.path().join("b")), "--cache", &s(&cache)], &[]);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stderr).contains("ignored: checksum mismatch"));
    assert_eq!(
        std::fs::read(d.path().join("a/scan.csv")).unwrap(),
        std::fs::read(d.path().join("b/scan.csv")).unwrap()
    );
}

#[test]
fn partial_and_total_failure_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    // 0.1 K is far outside the real-root range of the n = 6 tail: mqdt fails, numerov does not
    let text = format!("{TUNED}scan.energies = 1, 1e8\nresonance.in_scan = false\noutput.formats = csv\n");
    let cfg = write_cfg(d.path(), "c.cfg", &text);
    let both = qdtscat(&["scan", "--config", &cfg, "--out", &s(&d.path().join("a"))], &[]);
    assert_eq!(both.status.code(), Some(3));
    let rows = rows_from_csv(&std::fs::read_to_string(d.path().join("a/scan.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().filter(|r| !r.is_ok()).count(), 1);
    let cfg = write_cfg(d.path(), "d.cfg", &format!("{TUNED}scan.energies = 1e8\noutput.formats = csv\n"));
    let mqdt = qdtscat(&["scan", "--config", &cfg, "--pipeline", "mqdt", "--out", &s(&d.path().join("b"))], &[]);
    assert_eq!(mqdt.status.code(), Some(2));
}

#[test]
fn selftest_table() {
    let d = tempfile::tempdir().unwrap();
    let out = qdtscat(&["selftest", "--out", &s(d.path())], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(d.path().join("selftest.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<qdtscat_cli::run::SelftestRow> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.status.starts_with("pass")));
    assert!(rows.iter().filter(|r| r.status == "pass-relaxed").all(|r| r.n == 3 && r.l == 2));
}

#[test]
fn resonance_map_even_and_odd() {
    let d = tempfile::tempdir().unwrap();
    let even = write_cfg(d.path(), "e.cfg", &format!("{TUNED}resonance.fields = 540:560:2\n"));
    let out = qdtscat(&["resonances", "--config", &even, "--out", &s(&d.path().join("e"))], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(d.path().join("e/resonances.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("field_kvcm,det_root_energy_au,sigma_peak_a0sq,parity,confidence"));
    let rec: Vec<&str> = lines.collect();
    assert_eq!(rec.len(), 1, "{text}");
    let cols: Vec<&str> = rec[0].split(',').collect();
    let field: f64 = cols[0].parse().unwrap();
    assert!((548.0..552.0).contains(&field));
    assert!(cols[1].parse::<f64>().unwrap() < 0.0);
    assert_eq!(&cols[3..], ["even", "high"]);

    let odd = write_cfg(
        d.path(),
        "o.cfg",
        &format!("{TUNED}numerics.parity = odd\nnumerics.l_max = 3\nresonance.fields = 540:560:2\n"),
    );
    let out = qdtscat(&["resonances", "--config", &odd, "--out", &s(&d.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(d.path().join("o/resonances.csv")).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
}

#[test]
fn tune_reports_the_fitted_wall() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "t.cfg", "system.target_a_sc = -369\ntune.c12_lo = 5.30e9\ntune.c12_hi = 5.37e9\ntune.scan_points = 4\n");
    let out = qdtscat(&["tune", "--config", &cfg, "--out", &s(d.path())], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("system.c12 = "));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("tune.json")).unwrap()).unwrap();
    let a = rep["achieved_a_sc"].as_f64().unwrap();
    assert!((a / -369.0 - 1.0).abs() < 1e-3, "{a}");
    assert!((rep["c12"].as_f64().unwrap() / 5.3368e9 - 1.0).abs() < 1e-4);
}

#[test]
fn bad_flags_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = qdtscat(&["scan", "--seed-noise", "2", "--out", &s(d.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = qdtscat(&["scan", "--threads", "0", "--out", &s(d.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
}
