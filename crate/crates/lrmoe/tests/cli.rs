//! Command-line surface: exit codes, config override plumbing, snapshot
//! writing, seed precedence, and reproducibility of metrics logs.

use std::path::Path;

use lrmoe::cli::run;

fn args(parts: &[&str]) -> Vec<String> {
    std::iter::once("lrmoe")
        .chain(parts.iter().copied())
        .map(String::from)
        .collect()
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn small_corpus_config() -> serde_json::Value {
    serde_json::json!({
        "languages": 2,
        "vocab_per_language": 4,
        "feature_dim": 8,
        "margin": 1.0,
        "token_scale": 1.0,
        "noise_sigma": 0.2,
        "frames_per_token": [8, 10],
        "tokens_per_utterance": [2, 4],
        "train_utterances": 40,
        "eval_mono_per_language": 4,
        "eval_cs_utterances": 6,
        "code_switch_fraction": 0.4,
        "seed": 5
    })
}

fn train_config(data_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "model": {
            "variant": "flr_moe",
            "layers": 2,
            "shared_layers": 1,
            "d": 16,
            "heads": 2,
            "d_ff": 32,
            "languages": 2,
            "vocab_sizes": [4, 4],
            "feature_dim": 8,
            "frontend": "conv1d",
            "lambda_lid": 0.3,
            "lambda_ctc": 0.3,
            "smoe_experts": 4,
            "seed": 3
        },
        "train": {
            "epochs": 1,
            "batch_size": 8,
            "warmup_steps": 10,
            "seed": 3
        },
        "data": {
            "train": data_dir.join("train.jsonl"),
            "eval": [data_dir.join("eval_cs.jsonl")]
        }
    })
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    assert_eq!(run(args(&["--help"])), 0);
    for sub in ["gen-corpus", "train", "eval", "analyze-cost", "inspect-routing"] {
        assert_eq!(run(args(&[sub, "--help"])), 0, "{sub} --help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(args(&["gen-corpus", "--bogus"])), 1);
    assert_eq!(run(args(&["no-such-subcommand"])), 1);
}

#[test]
fn gen_corpus_writes_splits_manifest_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corpus.json");
    write_json(&cfg, small_corpus_config());
    let out = dir.path().join("data");
    let code = run(args(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    for file in [
        "train.jsonl",
        "eval_mono_1.jsonl",
        "eval_mono_2.jsonl",
        "eval_cs.jsonl",
        "manifest.json",
        "resolved_config.json",
    ] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"]["train"]["utterances"], 40);
}

#[test]
fn unknown_config_key_is_rejected_not_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corpus.json");
    let mut bad = small_corpus_config();
    bad["no_such_knob"] = serde_json::json!(1);
    write_json(&cfg, bad);
    let code = run(args(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn dot_path_override_reaches_nested_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corpus.json");
    write_json(&cfg, small_corpus_config());
    let out = dir.path().join("data");
    let code = run(args(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train_utterances=12",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(snapshot["train_utterances"], 12);
}

#[test]
fn invalid_model_invariant_exits_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    // corpus first
    let corpus_cfg = dir.path().join("corpus.json");
    write_json(&corpus_cfg, small_corpus_config());
    let data = dir.path().join("data");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ])),
        0
    );

    let train_cfg_path = dir.path().join("train.json");
    write_json(&train_cfg_path, train_config(&data));
    // shared_layers > layers violates the config invariant
    let code = run(args(&[
        "train",
        "--config",
        train_cfg_path.to_str().unwrap(),
        "--set",
        "model.shared_layers=5",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn train_eval_and_inspect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_cfg = dir.path().join("corpus.json");
    write_json(&corpus_cfg, small_corpus_config());
    let data = dir.path().join("data");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ])),
        0
    );

    let train_cfg_path = dir.path().join("train.json");
    write_json(&train_cfg_path, train_config(&data));
    let run_dir = dir.path().join("run");
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            train_cfg_path.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ])),
        0
    );
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("metrics.jsonl").exists());
    assert!(run_dir.join("eval_report.json").exists());

    let eval_dir = dir.path().join("eval");
    assert_eq!(
        run(args(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.join("eval_mono_1.jsonl").to_str().unwrap(),
            data.join("eval_cs.jsonl").to_str().unwrap(),
            "--beam",
            "4",
            "--out",
            eval_dir.to_str().unwrap(),
        ])),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["splits"].as_array().unwrap().len(), 2);

    let inspect_dir = dir.path().join("routing");
    assert_eq!(
        run(args(&[
            "inspect-routing",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.join("eval_cs.jsonl").to_str().unwrap(),
            "--out",
            inspect_dir.to_str().unwrap(),
        ])),
        0
    );
    let dumped: Vec<_> = std::fs::read_dir(&inspect_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert!(dumped.iter().any(|f| f.starts_with("routing_") && f.ends_with(".jsonl")));
    assert!(dumped.iter().any(|f| f.starts_with("routing_") && f.ends_with(".txt")));
}

#[test]
fn identical_configs_and_seeds_reproduce_metrics_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_cfg = dir.path().join("corpus.json");
    write_json(&corpus_cfg, small_corpus_config());
    let data = dir.path().join("data");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ])),
        0
    );
    let train_cfg_path = dir.path().join("train.json");
    let mut cfg = train_config(&data);
    cfg["data"]["eval"] = serde_json::json!([]);
    write_json(&train_cfg_path, cfg);

    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(
            run(args(&[
                "train",
                "--config",
                train_cfg_path.to_str().unwrap(),
                "--seed",
                "9",
                "--out",
                out.to_str().unwrap(),
            ])),
            0
        );
        logs.push(std::fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1], "metrics logs diverged");
}

#[test]
fn seed_precedence_flag_beats_env_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_cfg = dir.path().join("corpus.json");
    write_json(&corpus_cfg, small_corpus_config()); // config seed = 5

    let snapshot_seed = |out: &Path| -> u64 {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap())
                .unwrap();
        v["seed"].as_u64().unwrap()
    };

    // env only
    std::env::set_var("LRMOE_SEED", "77");
    let out_env = dir.path().join("env");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--out",
            out_env.to_str().unwrap(),
        ])),
        0
    );
    // flag beats env
    let out_flag = dir.path().join("flag");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--seed",
            "99",
            "--out",
            out_flag.to_str().unwrap(),
        ])),
        0
    );
    std::env::remove_var("LRMOE_SEED");
    // config only
    let out_cfg = dir.path().join("cfg");
    assert_eq!(
        run(args(&[
            "gen-corpus",
            "--config",
            corpus_cfg.to_str().unwrap(),
            "--out",
            out_cfg.to_str().unwrap(),
        ])),
        0
    );

    assert_eq!(snapshot_seed(&out_env), 77);
    assert_eq!(snapshot_seed(&out_flag), 99);
    assert_eq!(snapshot_seed(&out_cfg), 5);
}

#[test]
fn analyze_cost_prints_comparison_rows() {
    // smoke: exits cleanly and writes the JSON report
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost.json");
    let code = run(args(&[
        "analyze-cost",
        "--variant",
        "flr_moe",
        "--languages",
        "8",
        "--paper-dims",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    for expected in ["vallina", "flr_moe", "lae", "multi_encoder"] {
        assert!(names.contains(&expected), "missing {expected} row");
    }
}
