use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/deterministic")
}

fn dupire(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dupire"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

/// Copies the fixture into `dir` with `edit` applied to the config text.
fn edited_fixture(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    for entry in std::fs::read_dir(fixture()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            std::fs::copy(&p, dir.join(p.file_name().unwrap())).unwrap();
        }
    }
    let cfg = dir.join("config.toml");
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, edit(text)).unwrap();
    cfg
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn verify_passes_on_the_fixture() {
    let out = tempfile::tempdir().unwrap();
    let o = dupire(&["verify", "--dump-density"], &fixture().join("config.toml"), out.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(read(out.path().join("verify.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
    assert!(out.path().join("density.csv").exists());
    let manifest = String::from_utf8(read(out.path().join("manifest.toml"))).unwrap();
    assert!(manifest.contains("status = \"ok\""));
    assert!(manifest.contains("name = \"density.csv\""));
}

#[test]
fn calibrations_repeat_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = fixture().join("config.toml");
    for dir in [&a, &b] {
        let o = dupire(&["calibrate-lv"], &cfg, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let o = dupire(&["calibrate-slv", "--paths", "4000"], &cfg, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "local_vol.csv",
        "local_vol_nodes.csv",
        "leverage.csv",
        "leverage_nodes.csv",
        "leverage_report.toml",
        "manifest.toml",
    ] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = fixture().join("config.toml");
    let o = dupire(&["price", "--paths", "3000", "--threads", "1"], &cfg, a.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dupire(&["price", "--paths", "3000", "--threads", "3"], &cfg, b.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(a.path().join("prices.csv")), read(b.path().join("prices.csv")));
}

#[test]
fn seed_override_changes_prices_and_is_recorded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = fixture().join("config.toml");
    assert!(dupire(&["price", "--paths", "2000"], &cfg, a.path()).status.success());
    assert!(dupire(&["price", "--paths", "2000", "--seed", "5"], &cfg, b.path()).status.success());
    assert_ne!(read(a.path().join("prices.csv")), read(b.path().join("prices.csv")));
    let manifest = String::from_utf8(read(b.path().join("manifest.toml"))).unwrap();
    assert!(manifest.contains("seed = 5"), "{manifest}");
    assert!(manifest.contains("paths = 2000"), "{manifest}");
}

#[test]
fn strike_outside_the_surface_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_fixture(dir.path(), |t| t.replace("strikes = [0.8, 0.9, 1.0, 1.1, 1.2]", "strikes = [1.0, 9.0]"));
    let out = dir.path().join("out");
    let o = dupire(&["price"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("strike = 9 is outside"), "{err}");
    assert!(!out.join("prices.csv").exists());
    let manifest = String::from_utf8(read(out.join("manifest.toml"))).unwrap();
    assert!(manifest.contains("status = \"failed\""));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_fixture(dir.path(), |t| t.replace("n_paths = 20000\ndt_max", "n_paths = -3\ndt_max"));
    let o = dupire(&["calibrate-lv"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("calibration.n_paths"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_dupire")).arg("verify").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn inputs_are_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_fixture(dir.path(), |t| t);
    let before: Vec<Vec<u8>> =
        ["config.toml", "model.toml", "quotes.csv"].iter().map(|f| read(dir.path().join(f))).collect();
    let out = dir.path().join("out");
    assert!(dupire(&["build-surface"], &cfg, &out).status.success());
    let after: Vec<Vec<u8>> =
        ["config.toml", "model.toml", "quotes.csv"].iter().map(|f| read(dir.path().join(f))).collect();
    assert_eq!(before, after);
    let surface = String::from_utf8(read(out.join("surface.csv"))).unwrap();
    assert!(surface.starts_with("maturity,log_moneyness,total_variance\n"));
}
