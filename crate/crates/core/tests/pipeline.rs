//! Two seeded runs of the full pipeline produce identical manifests.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run(out: &Path, data: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_reguide"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "11", "--workers", "3"])
        .args(
            args.iter()
                .map(|a| a.replace("{d}", data.to_str().unwrap())),
        )
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

pub const STAGES: [&str; 7] = [
    "gen-data",
    "train-denoiser",
    "train-reward",
    "build-index",
    "sample",
    "eval-retrieval",
    "eval",
];

pub fn pipeline(out: &Path) {
    run(
        out,
        out,
        &["gen-data", "--train", "64", "--val", "32", "--test", "64"],
    );
    run(
        out,
        out,
        &[
            "train-denoiser",
            "--dataset",
            "{d}/train.rgds",
            "--steps",
            "40",
        ],
    );
    run(
        out,
        out,
        &[
            "train-reward",
            "--dataset",
            "{d}/train.rgds",
            "--val",
            "{d}/val.rgds",
            "--epochs",
            "2",
        ],
    );
    run(
        out,
        out,
        &[
            "build-index",
            "--dataset",
            "{d}/train.rgds",
            "--reward-ckpt",
            "{d}/reward.rgck",
        ],
    );
    run(
        out,
        out,
        &[
            "sample",
            "--denoiser-ckpt",
            "{d}/denoiser.rgck",
            "--reward-ckpt",
            "{d}/reward.rgck",
            "--index",
            "{d}/index.rgix",
            "--dataset",
            "{d}/test.rgds",
            "--eta",
            "0.1",
            "--steps",
            "10",
        ],
    );
    run(
        out,
        out,
        &[
            "eval-retrieval",
            "--dataset",
            "{d}/test.rgds",
            "--reward-ckpt",
            "{d}/reward.rgck",
            "--noise-t",
            "500",
        ],
    );
    run(
        out,
        out,
        &[
            "eval",
            "--real",
            "{d}/test.rgds",
            "--generated",
            "{d}",
            "--reward-ckpt",
            "{d}/reward.rgck",
            "--diversity-pairs",
            "20",
        ],
    );
}

#[test]
fn seeded_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for stage in STAGES {
        let name = format!("{stage}.manifest.json");
        let ma = fs::read_to_string(a.path().join(&name)).unwrap();
        assert_eq!(
            ma,
            fs::read_to_string(b.path().join(&name)).unwrap(),
            "{name}"
        );
        let m: serde_json::Value = serde_json::from_str(&ma).unwrap();
        assert_eq!(m["subcommand"], stage);
        assert!(!m["outputs"].as_object().unwrap().is_empty());
    }
}
