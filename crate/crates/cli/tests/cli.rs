use std::path::Path;
use std::process::{Command, Output};

fn c2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2r"))
        .args(args)
        .env_remove("C2R_DATA_ROOT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_command() {
    let o = c2r(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["gen-data", "train", "sample", "eval", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let o = c2r(&["train", "--stage", "1", "--config", "x.json", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));
    assert_eq!(c2r(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(c2r(&["train", "--stage", "3", "--config", "x.json"]).status.code(), Some(2));
    let o = c2r(&[
        "sample", "--ckpt", "a", "--control", "none", "--prompt", "p", "--guidance", "xyz", "--out", "o",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"p_real": 1.5}"#).unwrap();
    let o = c2r(&["train", "--stage", "2", "--config", &s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p_real"), "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"model": {"dit": {"depth": 4}}}"#).unwrap();
    let o = c2r(&["train", "--stage", "1", "--config", &s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.dit.depth"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = c2r(&["eval", "--ckpt", &s(&missing), "--controls", ".", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "").unwrap();
    let o = c2r(&["ablate", "--axis", "heads", "--config", &s(&cfg), "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing prerequisite"), "{}", stderr(&o));
}

#[test]
fn gen_data_defaults_to_the_data_root_variable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let o = Command::new(env!("CARGO_BIN_EXE_c2r"))
        .args(["gen-data", "--real", "3", "--pairs", "2", "--resolution", "16x16", "--frames", "4"])
        .env("C2R_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("corpus.json").is_file());
    assert!(root.join("pairs/pair_00001/coarse/meta.json").is_file());
    assert_eq!(c2r(&["gen-data", "--real", "1"]).status.code(), Some(2));
}

const MODEL: &str = r#""model": {"frames": 4, "height": 16, "width": 16, "feature_patch": 4,
    "dit": {"blocks": 3, "width": 16, "heads": 2, "patch": 2, "mlp_ratio": 2, "text_len": 24},
    "text_heads": 2, "feature_channels": 8, "adapter_hidden": 8}"#;

#[test]
fn short_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = c2r(&[
        "gen-data", "--out", &s(&data), "--real", "8", "--pairs", "3", "--seed", "1", "--resolution", "16x16",
        "--frames", "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let run1 = d.join("run1");
    let cfg1 = d.join("s1.json");
    std::fs::write(
        &cfg1,
        format!(
            r#"{{"steps": 4, "batch_size": 2, "log_every": 1, "run_dir": "{}", "data": {{"root": "{}", "heldout": 2}}, {MODEL}}}"#,
            s(&run1),
            s(&data)
        ),
    )
    .unwrap();
    let o = c2r(&["train", "--stage", "1", "--config", &s(&cfg1)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck1 = run1.join("checkpoints/stage1_final.ckpt");
    assert!(ck1.is_file());
    for f in ["config.json", "logs.jsonl", "checkpoints", "samples", "reports"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let logs = std::fs::read_to_string(run1.join("logs.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(logs.lines().next().unwrap()).unwrap();
    for k in ["step", "loss", "lr", "real_fraction", "wall_time"] {
        assert!(first.get(k).is_some(), "log record lacks {k}");
    }

    let run2 = d.join("run2");
    let cfg2 = d.join("s2.json");
    std::fs::write(
        &cfg2,
        format!(
            r#"{{"steps": 4, "batch_size": 2, "preset": "50real", "run_dir": "{}", "init_checkpoint": "{}",
                "data": {{"root": "{}", "heldout": 2}}, {MODEL}}}"#,
            s(&run2),
            s(&ck1),
            s(&data)
        ),
    )
    .unwrap();
    let o = c2r(&["train", "--stage", "2", "--config", &s(&cfg2)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck2 = run2.join("checkpoints/stage2_final.ckpt");
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run2.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["p_real"], 0.5);

    let out = run2.join("samples/s0");
    let control = data.join("pairs/pair_00000/coarse");
    let o = c2r(&[
        "sample", "--ckpt", &s(&ck2), "--control", &s(&control), "--prompt", "a red circle moving right",
        "--steps", "3", "--guidance", "apg", "--w", "2", "--seed", "5", "--out", &s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["domain"], "generated");

    let report = run2.join("reports/eval.json");
    let o = c2r(&[
        "eval", "--ckpt", &s(&ck2), "--controls", &s(&data), "--out", &s(&report), "--steps", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["controlled"]["rows"].as_array().unwrap().len(), 3);

    let abl = d.join("ablate");
    let o = c2r(&[
        "ablate", "--axis", "heads", "--config", &s(&cfg2), "--out", &s(&abl), "--steps", "2", "--seeds", "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for ext in ["csv", "json", "svg"] {
        assert!(abl.join(format!("reports/ablation_heads.{ext}")).is_file(), "{ext}");
    }
}
