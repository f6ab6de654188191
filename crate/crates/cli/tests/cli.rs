use std::path::Path;
use std::process::{Command, Output};

fn xi4(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xi4"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn green_torus_sum_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = xi4(dir.path(), &["green", "--mode", "torus", "--L", "2", "--N", "3", "--m2", "0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("green.manifest.json"));
    assert!((m["checks"]["sum"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("green.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,x3,x4,value,err\n"));
    assert_eq!(csv.lines().count(), 1 + 8usize.pow(4));
    assert!(!csv.contains('\r'));

    let again = tempfile::tempdir().unwrap();
    xi4(again.path(), &["green", "--mode", "torus", "--L", "2", "--N", "3", "--m2", "0.25"]);
    assert_eq!(csv, std::fs::read_to_string(again.path().join("green.csv")).unwrap());
}

#[test]
fn green_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = xi4(dir.path(), &["green", "--mode", "torus", "--L", "2", "--N", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = xi4(dir.path(), &["green", "--mode", "infinite", "--m2", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = xi4(dir.path(), &["green", "--mode", "torus", "--m2", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn green_infinite_origin() {
    let dir = tempfile::tempdir().unwrap();
    let o = xi4(dir.path(), &["green", "--mode", "infinite", "--x", "0,0,0,0", "--m2", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("green.json"));
    let g0 = v["points"][0]["value"].as_f64().unwrap();
    assert!((g0 - 0.154933).abs() < 1e-6, "{g0}");
}

#[test]
fn suites() {
    let dir = tempfile::tempdir().unwrap();
    let o = xi4(dir.path(), &["suite", "exponent", "--n", "1", "--jm", "1e6"]);
    assert_eq!(o.status.code(), Some(0));
    let r = json(&dir.path().join("suite-exponent.json"));
    assert_eq!(r["pass"], true);
    assert!((r["report"]["gamma_hat"].as_f64().unwrap() - 1.0 / 3.0).abs() < 0.02 / 3.0);

    let o = xi4(dir.path(), &["suite", "moments", "--p", "2", "--m", "0.1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("suite-moments.manifest.json").exists());

    assert_eq!(xi4(dir.path(), &["suite", "nonsense"]).status.code(), Some(2));
    let o = xi4(dir.path(), &["suite", "mart", "--q", "4", "--s", "1.5", "--L", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = xi4(dir.path(), &["suite", "mart", "--q", "4", "--s", "2", "--L", "4", "--samples", "8"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn suite_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // at small g0 the remainder has not reached its 1/log decay on this grid
    let o = xi4(dir.path(), &["suite", "dominance", "--g0", "0.1"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(json(&dir.path().join("suite-dominance.json"))["pass"], false);
}

#[test]
fn mc_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("walk.toml");
    std::fs::write(&cfg, "model = \"wsaw\"\n[wsaw]\nnu = 0.5\nsamples = 20000\nbin = 500\nseed = 3\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(xi4(&a, &["mc", "--config", cfg_s]).status.code(), Some(0));
    assert_eq!(xi4(&b, &["mc", "--config", cfg_s, "--threads", "3"]).status.code(), Some(0));
    for f in ["mc.json", "mc.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let est = json(&a.join("mc.json"));
    assert!((est["estimate"]["chi"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(est["config_hash"].as_str().unwrap().len(), 64);

    std::fs::write(&cfg, "model = \"wsaw\"\n[wsaw]\nnu = 0.0\n").unwrap();
    assert_eq!(xi4(&a, &["mc", "--config", cfg_s]).status.code(), Some(2));
    std::fs::write(&cfg, "model = \"phi4\"\n[phi4]\nsid = 4\n").unwrap();
    let o = xi4(&a, &["mc", "--config", cfg_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sid"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_xi4"))
        .args(["green", "--mode", "torus", "--L", "2", "--N", "1", "--m2", "1"])
        .env("XI4_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("green.csv").exists());
}
