use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netop_core::netsim::NetworkState;
use serde_json::Value;
use tempfile::TempDir;

fn netop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netop"))
        .args(args)
        .env_remove("NETOP_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The JSON report on the last stdout line.
fn report(o: &Output) -> Value {
    let out = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(out.lines().last().expect("stdout has a report")).expect("report is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Desk pools with a training budget of a few seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "schema": "netop-config-1",
        "sim": {"device_min": 4, "device_max": 6, "subnet_pool_size": 8, "address_pool_size": 8},
        "train": {
            "hidden_sizes": [16, 16],
            "input_octaves": 2,
            "batch_size": 16,
            "buffer_capacity": 2000,
            "warmup_steps": 100,
            "phase1_steps": 200,
            "phase2_max_steps": 100,
            "validation_interval": 50,
            "validation_networks": 5,
            "log_interval": 25,
            "epsilon_decay_steps": 300
        },
        "evaluation": {"networks": 10, "seed": 77}
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_writes_valid_deterministic_files() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = netop(&["generate", "--seed", "4", "--count", "3", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["net-4-0.json", "net-4-1.json", "net-4-2.json"]);
    for name in names {
        let text = fs::read_to_string(a.join(&name)).unwrap();
        NetworkState::from_json(&text).unwrap();
        assert_eq!(text.as_bytes(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn generate_covers_every_fault_kind() {
    let dir = TempDir::new().unwrap();
    let o = netop(&["generate", "--seed", "0", "--count", "100", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    let r = report(&o);
    assert_eq!(r["schema"], "netop-generate-1");
    let hist = r["fault_kind_histogram"].as_object().unwrap();
    assert_eq!(hist.len(), 6);
    assert!(hist.values().all(|v| v.as_u64().unwrap() > 0), "{hist:?}");
}

#[test]
fn generate_seed_comes_from_environment_unless_flagged() {
    let dir = TempDir::new().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["generate", "--count", "1", "--out", p(dir.path())];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_netop")).args(&args).env("NETOP_SEED", "9").output().unwrap()
    };
    assert_eq!(code(&run(&[])), 0);
    assert!(dir.path().join("net-9-0.json").exists());
    assert_eq!(code(&run(&["--seed", "3"])), 0);
    assert!(dir.path().join("net-3-0.json").exists());
}

#[test]
fn generate_into_unwritable_path_is_a_path_error() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    let o = netop(&["generate", "--count", "1", "--out", p(&file.join("sub"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_check_passes_fails_and_handles_zero() {
    let o = netop(&["oracle-check", "--count", "1000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&o);
    assert_eq!(r["passed"], true);
    assert_eq!(r["count"], 1000);

    let o = netop(&["oracle-check", "--count", "5", "--corrupt-action-table"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("design seed"), "{}", stderr(&o));

    let o = netop(&["oracle-check", "--count", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(report(&o)["count"], 0);
}

#[test]
fn bad_config_field_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": -1}}"#).unwrap();
    let o = netop(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));

    fs::write(&cfg, r#"{"sim": {"devices": 5}}"#).unwrap();
    let o = netop(&["oracle-check", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("devices"), "{}", stderr(&o));

    let o = netop(&["oracle-check", "--config", p(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_resume_inspect_evaluate_report() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("m.ckpt");
    let o = netop(&["train", "--config", p(&cfg), "--out", p(&out), "--quiet"]);
    // A 300-step budget cannot reach perfect validation.
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("final accuracy"));
    let r = report(&o);
    assert_eq!(r["schema"], "netop-train-report-1");
    assert_eq!(r["converged"], false);
    let phase1 = dir.path().join("m.phase1.ckpt");
    assert!(phase1.exists() && out.exists());

    // The metrics log is JSON lines with the metrics schema.
    let metrics = dir.path().join("m.metrics.jsonl");
    let text = fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().count() > 5);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema"], "netop-metrics-1");
    }

    // Resuming from the phase-boundary checkpoint reproduces the final one.
    let resumed = dir.path().join("r.ckpt");
    let o = netop(&["train", "--config", p(&cfg), "--out", p(&resumed), "--resume", p(&phase1), "-q"]);
    assert_eq!(code(&o), 3);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&resumed).unwrap());

    let o = netop(&["inspect", "--model", p(&out)]);
    assert_eq!(code(&o), 0);
    let meta: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(meta["quantiles"], 7);
    assert_eq!(meta["actions"], 104);
    assert_eq!(meta["schema"], "netop-ckpt-1");
    assert_eq!(meta["phase"], 2);

    let o = netop(&["evaluate", "--model", p(&out), "--config", p(&cfg), "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&o);
    assert_eq!(r["schema"], "netop-eval-report-1");
    assert_eq!(r["seed"], 77);
    assert_eq!(r["accuracy"]["networks"], 10);
    let o = netop(&["evaluate", "--model", p(&out), "--config", p(&cfg), "--require-perfect"]);
    assert_eq!(code(&o), 1);

    let o = netop(&["evaluate", "--model", p(&out), "--networks", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(report(&o)["accuracy"]["networks"], 0);

    let o = netop(&["report", "--metrics", p(&metrics)]);
    assert_eq!(code(&o), 0);
    assert_eq!(report(&o)["phases"].as_array().unwrap().len(), 2);

    let trace = dir.path().join("trace.jsonl");
    let o = netop(&["trace", "--model", p(&out), "--config", p(&cfg), "--out", p(&trace)]);
    assert_eq!(code(&o), 0);
    let first: Value = serde_json::from_str(fs::read_to_string(&trace).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["schema"], "netop-trace-1");
}

#[test]
fn training_twice_is_bit_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    for out in [&a, &b] {
        netop(&["train", "--config", p(&cfg), "--out", p(out), "-q"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("b.metrics.jsonl")).unwrap()
    );
}

#[test]
fn checkpoint_errors_exit_4() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let good = dir.path().join("m.ckpt");
    netop(&["train", "--config", p(&cfg), "--out", p(&good), "-q"]);
    let bytes = fs::read(&good).unwrap();

    let truncated = dir.path().join("t.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&netop(&["inspect", "--model", p(&truncated)])), 4);

    let magic = dir.path().join("x.ckpt");
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"NOTACKPT");
    fs::write(&magic, &bad).unwrap();
    assert_eq!(code(&netop(&["inspect", "--model", p(&magic)])), 4);
    assert_eq!(code(&netop(&["evaluate", "--model", p(&magic)])), 4);

    // Same-length edit of the stored vocabulary hash.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"vocab_hash\":\"").unwrap() + 14;
    let mut foreign = bytes.clone();
    foreign[at] = if foreign[at] == b'0' { b'1' } else { b'0' };
    let foreign_path = dir.path().join("v.ckpt");
    fs::write(&foreign_path, &foreign).unwrap();
    assert_eq!(code(&netop(&["inspect", "--model", p(&foreign_path)])), 0);
    let o = netop(&["evaluate", "--model", p(&foreign_path), "--networks", "1"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
}

#[test]
fn config_and_vocab_outputs_are_json() {
    for args in [&["config"][..], &["config", "--desk"], &["vocab"]] {
        let o = netop(args);
        assert_eq!(code(&o), 0);
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(v["schema"].as_str().unwrap().starts_with("netop-"));
    }
}
