//! End-to-end runs of the `subsol` binary.

use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::Command;

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_subsol")).current_dir(dir).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn square_spec() -> Value {
    json!({"dim":2,"window":{"lo":[-1.0,-1.0],"hi":[1.0,1.0]},"h":0.125,"shape":{"op":"all"}})
}

#[test]
fn exhaust_then_verify_round_trip() {
    let dir = workdir("round_trip");
    write(&dir, "sq.json", square_spec());
    let args = ["exhaust", "--domain", "sq.json", "--rho", "const:1", "--emit-cert", "c.json", "--out", "r.json"];
    let (code, _) = run(&dir, &[&args[..], &["--dump-field", "f.csv"]].concat());
    assert_eq!(code, 0);
    let report = read(&dir, "r.json");
    assert_eq!(report["pass"], true);
    assert!(report["conditions"].as_array().unwrap().iter().all(|c| c["min_slack"].as_f64().unwrap() > 0.0));
    let csv = std::fs::read_to_string(dir.join("f.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,phi,Aphi,rho");
    assert_eq!(run(&dir, &["verify", "c.json", "--refine", "2"]).0, 0);

    let first = std::fs::read(dir.join("c.json")).unwrap();
    assert_eq!(run(&dir, &args).0, 0);
    assert_eq!(std::fs::read(dir.join("c.json")).unwrap(), first);
}

#[test]
fn tampered_certificate_fails_verification() {
    let dir = workdir("tampered");
    write(&dir, "sq.json", square_spec());
    assert_eq!(run(&dir, &["exhaust", "--domain", "sq.json", "--emit-cert", "c.json", "--out", "r.json"]).0, 0);
    let mut cert = read(&dir, "c.json");
    cert["conditions"][0]["floor"] = json!({"kind": "const", "value": 1e12});
    write(&dir, "bad.json", cert);
    let (code, out) = run(&dir, &["verify", "bad.json"]);
    assert_eq!(code, 3);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn sealed_start_has_no_exit() {
    let dir = workdir("sealed");
    write(
        &dir,
        "sealed.json",
        json!({"dim":2,"window":{"lo":[-1.0,-1.0],"hi":[1.0,1.0]},"h":0.0625,
        "shape":{"op":"diff","a":{"op":"all"},"b":{"op":"diff",
            "a":{"op":"ball","center":[0.5,0.5],"radius":0.3},"b":{"op":"ball","center":[0.5,0.5],"radius":0.15}}}}),
    );
    let (code, out) = run(&dir, &["chain", "--domain", "sealed.json", "--from", "0.5,0.5"]);
    assert_eq!(code, 2);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["error"], "NoExit");
}

#[test]
fn hull_fills_an_enclosed_hole() {
    let dir = workdir("hull");
    write(&dir, "sq.json", square_spec());
    let ring: Vec<usize> = (5..11)
        .flat_map(|i| (5..11).map(move |j| i + 16 * j))
        .filter(|c| {
            let (i, j) = (c % 16, c / 16);
            !(7..9).contains(&i) || !(7..9).contains(&j)
        })
        .collect();
    write(&dir, "k.json", json!(ring));
    let (code, out) = run(&dir, &["hull", "--domain", "sq.json", "--K", "k.json"]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["count"], 36);
}

#[test]
fn sphere_curvature_from_flags() {
    let dir = workdir("sphere");
    let (code, out) = run(&dir, &["curvature", "--mode", "divisor", "--roots", "0,0,2", "--dump-field", "R.csv"]);
    assert_eq!(code, 0, "{out}");
    let report: Value = serde_json::from_str(&out).unwrap();
    assert!(report["transition"]["max_rel_err"].as_f64().unwrap() <= 1e-9);
    assert!(dir.join("R.csv").exists() && dir.join("R.chart1.csv").exists());
}

#[test]
fn usage_errors_exit_64() {
    let dir = workdir("usage");
    write(&dir, "sq.json", square_spec());
    assert_eq!(run(&dir, &["frobnicate"]).0, 64);
    assert_eq!(run(&dir, &["exhaust"]).0, 64);
    assert_eq!(run(&dir, &["exhaust", "--domain", "missing.json"]).0, 64);
    assert_eq!(run(&dir, &["exhaust", "--domain", "sq.json", "--tol", "0"]).0, 64);
    assert_eq!(run(&dir, &["exhaust", "--domain", "sq.json", "--samples", "0"]).0, 64);
    assert_eq!(run(&dir, &["exhaust", "--domain", "sq.json", "--rho", "const:-1"]).0, 64);
}
