use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn uslv(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uslv"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn key(text: &str, name: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name} = ")))
        .unwrap_or_else(|| panic!("no {name} in report"))
        .parse()
        .unwrap()
}

#[test]
fn validate_valid_config_reports_nothing() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["validate"], &fixture("valid.toml"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(out.path(), "violations.txt"), "");
}

#[test]
fn calibrate_lv_recovers_bundled_quotes() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["calibrate-lv"], &fixture("valid.toml"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(key(&read(out.path(), "lv_fit.txt"), "max_residual") < 1e-8);
    assert!(read(out.path(), "speed_factors.toml").contains("[[slices]]"));
}

#[test]
fn past_horizon_schedule_names_the_event() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["price"], &fixture("past_horizon.toml"), out.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("t = 2.5"), "{err}");
    assert!(err.contains("category = input"));
}

#[test]
fn missing_config_is_input_error() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["validate"], &out.path().join("absent.toml"), out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(uslv(&["price"], &fixture("valid.toml"), d.path()).status.success());
    }
    assert_eq!(read(a.path(), "price.txt"), read(b.path(), "price.txt"));
}

#[test]
fn oracle_price_agrees_with_uniformization() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(uslv(&["price"], &fixture("valid.toml"), a.path()).status.success());
    assert!(uslv(&["price", "--oracle"], &fixture("valid.toml"), b.path()).status.success());
    let (u, d) = (key(&read(a.path(), "price.txt"), "value"), key(&read(b.path(), "price.txt"), "value"));
    assert!((u - d).abs() < 1e-10, "{u} vs {d}");
}

#[test]
fn curve_fit_reaches_quotes() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["calibrate-curve"], &fixture("curve.toml"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(key(&read(out.path(), "curve_fit.txt"), "max_residual") < 1e-10);
}

#[test]
fn activity_rate_pipeline_runs() {
    let out = tempfile::tempdir().unwrap();
    assert!(uslv(&["calibrate-ar"], &fixture("ar.toml"), out.path()).status.success());
    assert!(read(out.path(), "ar_trace.csv").starts_with("time,marginal_gap"));
    let o = uslv(&["price"], &fixture("ar.toml"), out.path());
    assert!(o.status.success());
    let v = key(&read(out.path(), "price.txt"), "value");
    assert!(v > 0.0 && v < 0.2);
}

#[test]
fn dilaton_pipeline_reprices_quotes() {
    let out = tempfile::tempdir().unwrap();
    let o = uslv(&["calibrate-itc"], &fixture("itc.toml"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for line in read(out.path(), "itc_reprice.csv").lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[2] - f[3]).abs() < 1e-8, "{line}");
    }
    assert!(uslv(&["price"], &fixture("itc.toml"), out.path()).status.success());
}

#[test]
fn infeasible_node_quote_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["itc.toml", "itc_sf.toml"] {
        std::fs::copy(fixture(f), dir.path().join(f)).unwrap();
    }
    // A call worth more than the forward is outside every attainable range.
    let quotes = read(&fixture(""), "itc_quotes.csv");
    let mut lines: Vec<String> = quotes.lines().map(String::from).collect();
    lines[1] = "0.25,0.25,0.85,call,5.0".into();
    std::fs::write(dir.path().join("itc_quotes.csv"), lines.join("\n") + "\n").unwrap();
    let o = uslv(&["calibrate-itc"], &dir.path().join("itc.toml"), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("category = numerical"));
}

#[test]
fn generator_report_lists_no_violations() {
    let out = tempfile::tempdir().unwrap();
    assert!(uslv(&["build-generator"], &fixture("ar.toml"), out.path()).status.success());
    let r = read(out.path(), "generator_report.txt");
    assert!(r.contains("states = 36") && r.contains("violations = 0"), "{r}");
}
