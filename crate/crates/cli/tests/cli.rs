use std::path::Path;
use std::process::{Command, Output};

fn ltclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltclip"))
        .args(args)
        .output()
        .expect("spawn ltclip")
}

fn ok(args: &[&str]) -> String {
    let out = ltclip(args);
    assert!(
        out.status.success(),
        "ltclip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "epochs_a = 3\nepochs_b = 2\nbatch_size = 16\n{extra}\n\
             [dataset]\nsource = \"synthetic\"\nclasses = 5\nn_max = 40\nrho = 10.0\ndim = 4\ntest_per_class = 6\nseed = 1\n\
             [model]\nhidden = [8]\nvisual_out = 6\nembed_dim = 4\ntext_out = 6\njoint_dim = 5\n"
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn json_lines(s: &str) -> Vec<serde_json::Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_data_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.ltds");
    let data = data.to_str().unwrap();
    let summary = ok(&[
        "gen-data", "--kind", "exp", "--classes", "5", "--n-max", "40", "--rho", "10", "--dim", "4", "--seed", "1",
        "--test-per-class", "6", "--out", data,
    ]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["class_counts"][0], 40);
    assert_eq!(summary["class_counts"][4], 4);

    // the config's synthetic settings match the generated file, so eval sees the same test split
    let cfg = small_config(dir.path(), "");
    let ck = dir.path().join("m.ltck");
    let log = dir.path().join("log.jsonl");
    let trained: serde_json::Value = serde_json::from_str(&ok(&[
        "train",
        "--config",
        &cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]))
    .unwrap();
    let records = json_lines(&std::fs::read_to_string(&log).unwrap());
    assert_eq!(records.len(), 5);
    assert_eq!(records[0]["phase"], "a");
    assert_eq!(records[4]["phase"], "b");

    let evaluated: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data])).unwrap();
    assert_eq!(evaluated["overall"], trained["overall"]);
    assert_eq!(evaluated["n_eval"]["many"].as_u64().unwrap()
        + evaluated["n_eval"]["medium"].as_u64().unwrap()
        + evaluated["n_eval"]["few"].as_u64().unwrap(), 30);
}

#[test]
fn eval_lambda_override_needs_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let ck = dir.path().join("a.ltck");
    ok(&["train", "--config", &cfg, "--mode", "phase_a_only", "--checkpoint", ck.to_str().unwrap(), "--log",
        dir.path().join("l").to_str().unwrap()]);
    let data = dir.path().join("d.ltds");
    ok(&["gen-data", "--kind", "pareto", "--classes", "5", "--n-max", "40", "--dim", "4", "--out", data.to_str().unwrap()]);
    let out = ltclip(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--lambda", "0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no adapter"));
}

#[test]
fn sweep_lambda_rows_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let rows = json_lines(&ok(&["sweep-lambda", "--config", &cfg, "--values", "0,0.2,1.0"]));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["lambda"], 0.2);
    let table = ok(&["sweep-lambda", "--config", &cfg, "--values", "0,1", "--format", "table"]);
    assert_eq!(table.lines().count(), 4);
    assert!(table.starts_with("lambda"));
}

#[test]
fn ablate_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let rows = json_lines(&ok(&["ablate", "--config", &cfg, "--axes", "balance_phase_a,balance_phase_b"]));
    assert_eq!(rows.len(), 4);
    assert_eq!(json_lines(&ok(&["ablate", "--config", &cfg])).len(), 1);
    let out = ltclip(&["ablate", "--config", &cfg, "--axes", "sampler=uniformish"]);
    assert!(!out.status.success());
}

#[test]
fn training_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let mut bytes = Vec::new();
    for i in 0..2 {
        let ck = dir.path().join(format!("{i}.ltck"));
        let log = dir.path().join(format!("{i}.jsonl"));
        ok(&["train", "--config", &cfg, "--seed", "9", "--checkpoint", ck.to_str().unwrap(), "--log", log.to_str().unwrap()]);
        bytes.push((std::fs::read(ck).unwrap(), std::fs::read(log).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn bad_inputs_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "learning_rate = 0.1");
    let out = ltclip(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let junk = dir.path().join("junk.ltck");
    std::fs::write(&junk, b"LTCK\x02\0\0\0").unwrap();
    let out = ltclip(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", "missing.ltds"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let out = ltclip(&["gen-data", "--kind", "exp", "--classes", "3", "--n-max", "10", "--rho", "0.5", "--dim", "2",
        "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
}
