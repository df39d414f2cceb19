use std::path::Path;
use std::process::{Command, Output};

use tvsynth_core::tensor_archive::write_archive;
use tvsynth_core::{Dtype, TensorArchive, TensorEntry};

fn tvsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvsynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tvsynth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_checkpoints(dir: &Path) {
    let entry = |name: &str, vals: &[f64]| TensorEntry::new(name, Dtype::F32, vec![vals.len()], vals.to_vec());
    let base = [0.5, -0.25, 1.0, 0.0, 2.0, -1.0, 0.125, 0.75];
    let sft: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, b)| b + 0.125 * (i as f64 - 3.0))
        .collect();
    let rlvr: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, b)| b - 0.0625 * (i % 3) as f64)
        .collect();
    for (file, vals) in [("base", &base[..]), ("sft", &sft), ("rlvr", &rlvr)] {
        write_archive(
            dir.join(format!("{file}.safetensors")),
            &[
                entry("model.layers.0.mlp.up_proj.weight", &vals[..4]),
                entry("model.layers.1.self_attn.q_proj.weight", &vals[4..]),
            ],
            None,
        )
        .unwrap();
    }
}

fn write_run_config(dir: &Path) -> std::path::PathBuf {
    write_checkpoints(dir);
    let pool: String = (0..12)
        .map(|i| format!("{{\"id\":\"q{i:02}\",\"text\":\"compute {i} plus {i}\"}}\n"))
        .collect();
    std::fs::write(dir.join("pool.jsonl"), pool).unwrap();
    let config = serde_json::json!({
        "base": "base.safetensors",
        "sft": "sft.safetensors",
        "rlvr": "rlvr.safetensors",
        "pool": "pool.jsonl",
        "workspace": "ws",
        "n": 4,
        "seed": 7,
        "search": {"tpe": {"n_trials": 12, "n_startup": 4}},
        "backend": {
            "kind": "mock",
            "landscape": {
                "kind": "peaks",
                "peaks": [{"center": [0.8, 1.5], "width": 1.0, "height": 1.0, "perplexity_offset": 0.0}],
                "floor": 0.0,
                "base_perplexity": 2.0,
                "perplexity_slope": 1.0
            },
            "seed": 1,
            "query_spread": 0.4
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert!(tvsynth(&["--help"]).status.success());
    assert!(tvsynth(&["--version"]).status.success());
    assert!(tvsynth(&["analyze", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_one_and_runtime_errors_exit_two() {
    assert_eq!(tvsynth(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tvsynth(&["extract", "--base", "x"]).status.code(), Some(1));
    assert_eq!(
        tvsynth(&["merge", "--base", "b", "--out", "o", "--term", "noequals"])
            .status
            .code(),
        Some(1)
    );
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let out = tvsynth(&[
        "extract",
        "--base",
        s(&missing),
        "--finetuned",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.safetensors"));
}

#[test]
fn extract_sparsify_merge_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_checkpoints(d);
    let tau = d.join("tau.safetensors");
    ok(&[
        "extract",
        "--base",
        s(&d.join("base.safetensors")),
        "--finetuned",
        s(&d.join("sft.safetensors")),
        "--out",
        s(&tau),
    ]);
    let sparse = d.join("sparse.safetensors");
    let stdout = ok(&["sparsify", "--input", s(&tau), "--out", s(&sparse), "--retain", "0.5"]);
    assert!(stdout.contains("kept 4 of 8"), "{stdout}");

    // base + 1.0 * (sft - base) reproduces sft
    let merged = d.join("merged.safetensors");
    let term = format!("{}=1.0", s(&tau));
    ok(&[
        "merge",
        "--base",
        s(&d.join("base.safetensors")),
        "--term",
        &term,
        "--out",
        s(&merged),
    ]);
    let got = TensorArchive::open(&merged).unwrap().read_all().unwrap();
    let want = TensorArchive::open(d.join("sft.safetensors"))
        .unwrap()
        .read_all()
        .unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.values, w.values);
        assert_eq!(g.meta.dtype, Dtype::F32);
    }

    let norms = ok(&["analyze", "norms", "--tv", s(&tau)]);
    assert_eq!(norms.lines().count(), 4, "{norms}");
    let csv = d.join("modules.csv");
    ok(&[
        "analyze",
        "modules",
        "--tv",
        s(&tau),
        "--retain",
        "0.5",
        "--out",
        s(&csv),
    ]);
    assert!(std::fs::read_to_string(&csv).unwrap().to_lowercase().contains("mlp"));
    let sweep = ok(&[
        "analyze",
        "sweep",
        "--a",
        s(&tau),
        "--b",
        s(&sparse),
        "--retain-a",
        "1.0,0.5",
    ]);
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
}

#[test]
fn stopped_and_resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path());
    let c = s(&config);

    let full = ok(&["run", "--config", c, "--set", "workspace=\"ws_full\""]);
    assert!(full.contains("status: completed"), "{full}");

    let stopped = ok(&["run", "--config", c, "--stop-after", "5"]);
    assert!(stopped.contains("stopped after 5 trials"), "{stopped}");
    // a different config must not resume into this workspace
    assert_eq!(
        tvsynth(&["run", "--config", c, "--resume", "--set", "seed=8"])
            .status
            .code(),
        Some(2)
    );
    let resumed = ok(&["run", "--config", c, "--resume"]);
    assert!(resumed.contains("status: completed"), "{resumed}");

    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("ws/merged.safetensors"), read("ws_full/merged.safetensors"));
    assert_eq!(read("ws/trials.jsonl"), read("ws_full/trials.jsonl"));

    let report = ok(&["report", s(&dir.path().join("ws"))]);
    assert!(report.contains("coefficients: lambda_sft="), "{report}");
}

#[test]
fn select_data_and_search_write_workspace_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path());
    let out = ok(&["select-data", "--config", s(&config)]);
    assert!(out.starts_with("selected 4 queries"), "{out}");
    assert!(dir.path().join("ws/adaptation_set.json").is_file());

    ok(&["search", "--config", s(&config), "--set", "workspace=\"ws2\""]);
    let ws2 = dir.path().join("ws2");
    assert!(ws2.join("search_result.json").is_file());
    assert!(!ws2.join("merged.safetensors").exists());
}
