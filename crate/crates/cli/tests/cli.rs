use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn mfkam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfkam"))
        .current_dir(dir)
        .env_remove("MFKAM_WORKERS")
        .args(args)
        .output()
        .expect("the binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn invalid_config_exits_one_with_line_anchor() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "name = \"bad\"\n[grid]\nresolution = 1\n");
    let o = mfkam(tmp.path(), &["--no-cache", "alpha", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml:3:1:"), "{}", stderr(&o));

    let typo = write(tmp.path(), "typo.toml", "name = \"typo\"\n[grid]\nresolutoin = 8\n");
    let o = mfkam(tmp.path(), &["--no-cache", "alpha", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("typo.toml:3:"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_section_and_missing_file_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let pendulum = scenario("pendulum");
    let o = mfkam(tmp.path(), &["--no-cache", "transport", pendulum.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[transport]"), "{}", stderr(&o));

    let o = mfkam(tmp.path(), &["alpha", "nowhere.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn alpha_on_free_scenario_matches_half_c_squared() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mfkam(tmp.path(), &["--no-cache", "--out", "run", "alpha", scenario("free").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("run/alpha");
    let mut reader = csv::Reader::from_path(dir.join("alpha.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (ic, ia) = (col("c"), col("alpha"));
    let mut rows = 0;
    for r in reader.records() {
        let r = r.unwrap();
        let c: f64 = r[ic].parse().unwrap();
        let a: f64 = r[ia].parse().unwrap();
        assert!((a - 0.5 * c * c).abs() <= 1e-3, "alpha({c}) = {a}");
        rows += 1;
    }
    assert_eq!(rows, 4);

    let m = manifest(&dir);
    assert_eq!(m["command"], "alpha");
    assert_eq!(m["scenario"], "free");
    assert_eq!(m["scenario_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["files"][0]["name"], "alpha.csv");
    assert!(m["residuals"]["alpha.max_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let path = scenario("pendulum");
    for out in ["a", "b"] {
        let o = mfkam(tmp.path(), &["--no-cache", "--out", out, "orbit", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["orbit.csv", "measure.csv"] {
        let a = fs::read(tmp.path().join("a/orbit").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b/orbit").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file}");
    }
    let (a, b) = (manifest(&tmp.path().join("a/orbit")), manifest(&tmp.path().join("b/orbit")));
    assert_eq!(a["files"], b["files"]);
    assert_eq!(a["residuals"], b["residuals"]);
}

#[test]
fn verify_prints_a_pass_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let (free, kam) = (scenario("free"), scenario("kam-golden"));
    let o = mfkam(
        tmp.path(),
        &["--no-cache", "--out", "v", "verify", free.to_str().unwrap(), kam.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let first = stdout.lines().next().unwrap();
    assert!(first.starts_with("check") && first.contains("free") && first.contains("kam-golden"));
    assert!(stdout.lines().any(|l| l.starts_with("alpha.max_residual") && l.contains("PASS")));
    assert!(!stdout.contains("FAIL"));
    for name in ["free", "kam-golden"] {
        let dir = tmp.path().join("v").join(name).join("verify");
        assert!(dir.join("verify.csv").exists());
        assert!(dir.join("alpha.csv").exists());
    }
    assert!(tmp.path().join("v/kam-golden/verify/kam.csv").exists());
    assert!(tmp.path().join("v/free/verify/transport.json").exists());
}

#[test]
fn solver_flags_exit_two_and_keep_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(scenario("pendulum")).unwrap() + "\n[value]\nmax_sweeps = 1\n";
    let p = write(tmp.path(), "short.toml", &body);
    let o = mfkam(tmp.path(), &["--no-cache", "--out", "f", "alpha", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no convergence"), "{}", stderr(&o));
    let dir = tmp.path().join("f/alpha");
    assert!(dir.join("alpha.csv").exists());
    assert!(!manifest(&dir)["flags"].as_array().unwrap().is_empty());
}

#[test]
fn kernel_cache_is_reused_unless_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let path = scenario("pendulum");
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["--cache-dir", "cache", "--out", out];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["alpha", path.to_str().unwrap()]);
        let o = mfkam(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        manifest(&tmp.path().join(out).join("alpha"))
    };
    let first = run(&[], "one");
    assert_eq!(first["cache"]["built"], 3);
    assert_eq!(fs::read_dir(tmp.path().join("cache")).unwrap().count(), 3);
    let second = run(&[], "two");
    assert_eq!(second["cache"]["hits"], 3);
    assert_eq!(second["cache"]["built"], 0);
    let third = run(&["--no-cache"], "three");
    assert_eq!(third["cache"]["built"], 3);
    assert_eq!(first["files"], second["files"]);
    assert_eq!(first["files"], third["files"]);
}

#[test]
fn worker_count_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let path = scenario("free");
    let o = Command::new(env!("CARGO_BIN_EXE_mfkam"))
        .current_dir(tmp.path())
        .env("MFKAM_WORKERS", "1")
        .args(["--no-cache", "--out", "w", "alpha", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(manifest(&tmp.path().join("w/alpha"))["workers"], 1);

    let o = Command::new(env!("CARGO_BIN_EXE_mfkam"))
        .current_dir(tmp.path())
        .env("MFKAM_WORKERS", "many")
        .args(["--no-cache", "alpha", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MFKAM_WORKERS"));
}
