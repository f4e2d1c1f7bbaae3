//! Default-seed end-to-end pipeline shared by the golden and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub const METHODS: [&str; 4] = ["proposed", "kpsm", "issm", "kriging"];

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn step(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_vscat"))
        .arg("--out-dir")
        .arg(dir)
        .arg("--quiet")
        .args(args)
        .env_remove("VSCAT_OUT_DIR")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// gen-scene, gen-truth, sample with L = 20, all four reconstructions and
/// evaluate; returns the evaluation CSV.
pub fn run_pipeline(dir: &Path) -> String {
    let f = |n: &str| dir.join(n).to_string_lossy().into_owned();
    step(dir, &["gen-scene"]);
    step(dir, &["gen-truth", "--scene", &f("scene.json")]);
    step(dir, &["sample", "--scene", &f("scene.json"), "--truth", &f("truth.map.csv"), "--L", "20"]);
    let mut eval = vec!["evaluate".to_string(), "--scene".into(), f("scene.json"), "--truth".into(), f("truth.map.csv")];
    for m in METHODS {
        step(dir, &["reconstruct", "--scene", &f("scene.json"), "--measurements", &f("measurements.csv"), "--method", m]);
        eval.push("--estimate".into());
        eval.push(f(&format!("{m}.map.csv")));
    }
    let eval: Vec<&str> = eval.iter().map(String::as_str).collect();
    step(dir, &eval);
    std::fs::read_to_string(dir.join("evaluation.csv")).unwrap()
}

/// `(label, nmse)` rows of an evaluation CSV.
pub fn parse_evaluation(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let (name, v) = l.split_once(',').unwrap();
            (name.to_string(), v.parse().unwrap())
        })
        .collect()
}
