//! End-to-end CLI checks: subcommands, exit codes, output files.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedktl"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedktl_cli_{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = r#"{
  "dataset": {"kind": "synthetic", "classes": 3, "dim": 8, "samples_per_class": 16, "cluster_spread": 0.3},
  "clients": 2,
  "partition": {"kind": "dirichlet", "beta": 1.0},
  "palette": [[8]],
  "feature_dim": 8,
  "latent_dim": 4,
  "noise_dim": 6,
  "image_dim": 12,
  "server_epochs": 2,
  "rounds": 2,
  "seeds": [3]
}"#;

#[test]
fn run_produces_outputs_and_exit_zero() {
    let dir = temp_dir("run");
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("rounds.csv").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("config.resolved.json").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn seed_and_ablation_overrides() {
    let dir = temp_dir("overrides");
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9", "--ablation", "-lim"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let resolved = fs::read_to_string(out.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"-lim\""));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"seeds\": [\n    9\n  ]") || summary.contains("\"seeds\":[9]"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_errors_exit_two() {
    let dir = temp_dir("badcfg");
    let cfg = dir.join("bad.json");
    fs::write(&cfg, r#"{"participation": 2.0}"#).unwrap();
    let status = bin().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin().args(["validate", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
    // Missing file is also a config error.
    let status = bin()
        .args(["run", "--config"])
        .arg(dir.join("absent.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn validate_accepts_good_config() {
    let dir = temp_dir("goodcfg");
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let status = bin().args(["validate", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_data_writes_loadable_file() {
    let dir = temp_dir("gendata");
    let out = dir.join("toy.ktld");
    let status = bin()
        .args(["gen-data", "--synthetic", "C=4", "d=6", "per-class=10", "seed=2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let ds = fedktl_core::data::read_dataset_file::<f32>(&out).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.classes(), 4);
    assert_eq!(ds.dim(), 6);

    // A config can point at the file.
    let cfg_path = dir.join("cfg.json");
    fs::write(
        &cfg_path,
        format!(
            r#"{{"dataset": {{"kind": "file", "path": {:?}}}, "clients": 2,
                "partition": {{"kind": "pathological", "classes_per_client": 2}},
                "palette": [[8]], "feature_dim": 8, "latent_dim": 4, "noise_dim": 6,
                "image_dim": 12, "server_epochs": 2, "rounds": 1, "seeds": [1]}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let run_out = dir.join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run_out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_data_rejects_bad_tokens() {
    let dir = temp_dir("gendata_bad");
    let out = dir.join("toy.ktld");
    for args in [
        vec!["gen-data", "--synthetic", "C=4", "d=6"],
        vec!["gen-data", "--synthetic", "C=x", "d=6", "per-class=5"],
        vec!["gen-data", "--synthetic", "C=4", "bogus=1", "d=6", "per-class=5"],
    ] {
        let status = bin().args(&args).arg("--out").arg(&out).status().unwrap();
        assert_eq!(status.code(), Some(2), "args {args:?}");
    }
    fs::remove_dir_all(&dir).unwrap();
}
