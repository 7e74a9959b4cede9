use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn afaseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afaseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Four small phantoms, a two-step training section and a short noise ladder.
fn small_config(dir: &Path, out: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "seed": 11,
  "out_dir": "{out}",
  "manifest": "data_run/data/manifest.json",
  "dataset": {{
    "count": 4,
    "phantom": {{
      "dims": [8, 16, 16],
      "spacing_mm": [2.0, 2.0, 3.0],
      "num_classes": 3,
      "organs": [
        {{"label": 1, "intensity": [0.2, 0.3], "semi_axes_min": [2, 3, 3], "semi_axes_max": [2.5, 4, 4]}},
        {{"label": 2, "intensity": [-0.3, -0.2], "semi_axes_min": [1.5, 2, 2], "semi_axes_max": [2, 3, 3]}}
      ],
      "background_intensity": [0.0, 0.05],
      "texture_noise_std": 0.01
    }}
  }},
  "train": {{
    "iterations": 2,
    "patch_size": [8, 16, 16],
    "patches_per_scan": 2,
    "base_channels": 2,
    "afa": {{}}
  }},
  "sweep": {{"noise_stds": [0.0, 0.01], "window": [8, 16, 16]}}
}}"#
    );
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, text).unwrap();
    path
}

fn gen_data(dir: &Path) {
    let cfg = small_config(dir, "data_run");
    let o = afaseg(&["gen-data", "--config", cfg.to_str().unwrap()], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = afaseg(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 1, "out_dir": "o", "train": {"iterations": 1, "afa": {"epzilon": 0.003}}}"#).unwrap();
    let o = afaseg(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epzilon"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = afaseg(&["train", "--config", "nope.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let cfg = small_config(dir.path(), "eval_run");
    let o = afaseg(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", "missing.ckpt"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline_and_deterministic_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d);
    assert!(d.join("data_run/data/manifest.json").exists());

    let mut ckpts = Vec::new();
    for run in ["run_a", "run_b"] {
        let cfg = small_config(d, run);
        let o = afaseg(&["train", "--config", cfg.to_str().unwrap()], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let log = fs::read_to_string(d.join(run).join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        ckpts.push(fs::read(d.join(run).join("model.ckpt")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);

    let cfg = small_config(d, "run_a");
    let cfg = cfg.to_str().unwrap();
    let ckpt = d.join("run_a/model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = afaseg(&["sweep", "--config", cfg, "--checkpoint", ckpt], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = fs::read_to_string(d.join("run_a/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "sample_id,organ,dsc,hd_mm,noise_std");
    // one test sample, two organs, two noise levels
    assert_eq!(sweep.lines().count(), 1 + 4);

    let o = afaseg(&["eval", "--config", cfg, "--checkpoint", ckpt], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("run_a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    assert_eq!(metrics.lines().skip(1).collect::<Vec<_>>(), sweep.lines().skip(1).take(2).collect::<Vec<_>>());

    let o = afaseg(&["predict", "--config", cfg, "--checkpoint", ckpt], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("run_a/predictions/case_003.vol").exists());

    let csv = d.join("run_a/sweep.csv");
    let csv = csv.to_str().unwrap();
    let o = afaseg(&["compare", csv, csv, "--out-dir", "cmp"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cmp/compare_summary.json")).unwrap()).unwrap();
    for s in summary["per_std"].as_array().unwrap() {
        assert_eq!(s["average"]["improvement"], 0.0);
        assert_eq!(s["average"]["p_value"], 1.0);
        for o in s["organs"].as_array().unwrap() {
            assert_eq!(o["improvement"], 0.0);
            assert_eq!(o["p_value"], 1.0);
        }
    }
}

#[test]
fn grad_check_passes_and_catches_a_corrupted_conv() {
    let dir = tempfile::tempdir().unwrap();
    let ok = afaseg(&["grad-check", "--seeds", "2"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let report = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(report.lines().filter(|l| l.starts_with("conv3d ")).count(), 1);
    let bad = afaseg(&["grad-check", "--seeds", "2", "--fault", "conv3d"], dir.path());
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        afaseg_core::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 3);
}
