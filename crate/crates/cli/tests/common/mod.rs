#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TRAIN_SEED: u64 = 42;
pub const TEST_SEED: u64 = 7;

pub fn repo(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(path)
}

pub fn twinforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinforge"))
        .args(args)
        .env("TWINFORGE_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = twinforge(args);
    assert!(
        out.status.success(),
        "twinforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Simulated train and test sets under `root`, plus a pipeline config.
pub struct Scenario {
    pub root: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
}

impl Scenario {
    /// `plant` is a plant TOML path, or the built-in warehouse when `None`.
    pub fn new(root: &Path, plant: Option<&Path>) -> Self {
        let train = root.join("train");
        let test = root.join("test");
        for (dir, seed) in [(&train, TRAIN_SEED), (&test, TEST_SEED)] {
            let seed = seed.to_string();
            let mut args = vec!["simulate", "--seed", &seed, "--out", s(dir)];
            if let Some(p) = plant {
                args.extend(["--config", s(p)]);
            }
            ok(&args);
        }
        let out = root.join("out");
        let config = root.join("pipeline.toml");
        let text = format!(
            "output_dir = {out:?}\n\n[inputs]\nplc = {plc:?}\npositions = {pos:?}\nsignals = {sig:?}\n\
             training_labels = {tl:?}\ntraining_positions = {tp:?}\n",
            out = s(&out),
            plc = s(&repo("fixtures/warehouse_plc.xml")),
            pos = s(&test.join("position.csv")),
            sig = s(&test.join("signals.csv")),
            tl = s(&train.join("ground_truth.json")),
            tp = s(&train.join("position.csv")),
        );
        std::fs::write(&config, text).unwrap();
        Self {
            root: root.to_path_buf(),
            train,
            test,
            config,
            out,
        }
    }

    pub fn truth(&self) -> PathBuf {
        self.test.join("ground_truth.json")
    }

    /// `run` with ground truth into `out`.
    pub fn run_into(&self, out: &Path) -> Output {
        ok(&[
            "run",
            "--config",
            s(&self.config),
            "--out",
            s(out),
            "--ground-truth",
            s(&self.truth()),
        ])
    }

    pub fn report(&self, out: &Path) -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap()
    }
}
