use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use janus_cli::{content_hash, Cli};

fn janus(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_janus"))
        .args(args)
        .current_dir(cwd)
        .env_remove("JANUS_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[model]
d_model = 8
n_layers = 1
n_experts = 2
n_heads = 2
[train]
steps = 12
batch_size = 4
seq_len = 16
checkpoint_every = 6
[data]
corpus = "markov3"
records = 4
test_records = 2
record_len = 256
[eval]
eval_every = 6
[finetune]
epochs = 2
"#;

#[test]
fn every_flag_is_documented_in_help() {
    let root = Cli::command();
    for sub in root.get_subcommands() {
        let name = sub.get_name().to_string();
        let tmp = tempfile::tempdir().unwrap();
        let out = janus(&[&name, "--help"], tmp.path());
        assert!(out.status.success(), "{name} --help failed");
        let help = stdout(&out);
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{name}: --{long} missing from help");
                if long != "help" && long != "version" {
                    assert!(arg.get_help().is_some() || arg.is_positional(), "{name}: --{long} has no description");
                }
            }
        }
        assert!(sub.get_about().is_some(), "{name} has no summary");
    }
}

#[test]
fn exit_codes_separate_usage_from_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(janus(&["no-such-command"], d).status.code(), Some(2));
    assert_eq!(janus(&["audit-params", "--override", "train.stepz=1", "--out", "a"], d).status.code(), Some(2));
    assert_eq!(janus(&["eval", "--checkpoint", "missing.jnsc", "--out", "b"], d).status.code(), Some(2));
    assert_eq!(janus(&["leakage-check", "--T", "8", "--gap", "1", "--out", "c"], d).status.code(), Some(1));
    assert_eq!(janus(&["leakage-check", "--T", "8", "--out", "c"], d).status.code(), Some(0));
    assert_eq!(janus(&["--help"], d).status.code(), Some(0));
}

#[test]
fn leakage_check_reports_the_margin() {
    let tmp = tempfile::tempdir().unwrap();
    let out = janus(&["leakage-check", "--T", "9", "--seed", "2", "--precision", "f64", "--out", "o"], tmp.path());
    assert!(out.status.success());
    let line = stdout(&out);
    assert!(line.contains("T=9 seed=2") && line.contains("≤ 1e-10"), "{line}");
}

#[test]
fn mask_dump_prints_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = janus(&["mask-dump", "--T", "3", "--out", "o"], tmp.path());
    assert!(out.status.success());
    let grid = stdout(&out);
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows.len(), 6);
    // forward row 0 sees itself and backward positions 2..
    assert_eq!(rows[0], "1 0 0 0 0 1");
    // backward row at position 2 sees forward positions ..0 and itself onward
    assert_eq!(rows[5], "1 0 0 0 0 1");
}

#[test]
fn grad_check_passes_on_the_micro_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = janus(&["grad-check", "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", stdout(&out));
    let tight = janus(&["grad-check", "--tol", "1e-30", "--out", "o"], tmp.path());
    assert_eq!(tight.status.code(), Some(1));
}

#[test]
fn manifest_hashes_inputs_and_config_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let out = janus(&["audit-params", "--config", "tiny.toml", "--seed", "5", "--out", "run"], d);
    assert!(out.status.success());
    let manifest: toml::Table = fs::read_to_string(d.join("run/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["command"].as_str(), Some("audit-params"));
    assert_eq!(manifest["seed"].as_integer(), Some(5));
    let inputs = manifest["inputs"].as_array().unwrap();
    let tiny = inputs.iter().find(|i| i["path"].as_str() == Some("tiny.toml")).unwrap();
    assert_eq!(tiny["sha256"].as_str().unwrap(), content_hash(TINY.as_bytes()));
    let again = janus(&["audit-params", "--config", "run/config.toml", "--out", "run2"], d);
    assert!(again.status.success());
    assert_eq!(stdout(&out), stdout(&again));
}

#[test]
fn content_hash_matches_git_blob_layout() {
    // git hash-object uses the same header with SHA-1; this is its SHA-256 form
    assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
}

#[test]
fn pipeline_pretrain_resume_eval_finetune_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert!(janus(&["pretrain", "--config", "tiny.toml", "--out", "a"], d).status.success());
    assert!(janus(&["pretrain", "--config", "tiny.toml", "--out", "b"], d).status.success());
    let fa = fs::read(d.join("a/checkpoints/final.jnsc")).unwrap();
    assert_eq!(fa, fs::read(d.join("b/checkpoints/final.jnsc")).unwrap());
    assert!(janus(&["pretrain", "--resume", "a/checkpoints/step_6.jnsc", "--out", "r"], d).status.success());
    assert_eq!(fa, fs::read(d.join("r/checkpoints/final.jnsc")).unwrap());

    let ev = janus(&["eval", "--checkpoint", "a/checkpoints/final.jnsc", "--out", "e"], d);
    assert!(ev.status.success());
    let csv = fs::read_to_string(d.join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("model_id,"), "{csv}");

    let mut tsv = String::new();
    for i in 0..40 {
        let body: String = (0..12).map(|k| ['A', 'C', 'G', 'T'][(i * 5 + k * 3 + k * k) % 4]).collect();
        let (seq, label) =
            if i % 2 == 0 { (body, "absent") } else { (format!("{}GATA{}", &body[..4], &body[8..]), "present") };
        tsv.push_str(&format!("{seq}\t{label}\n"));
    }
    fs::write(d.join("task.tsv"), tsv).unwrap();
    let ft = janus(
        &[
            "finetune",
            "--checkpoint",
            "a/checkpoints/final.jnsc",
            "--data",
            "task.tsv",
            "--config",
            "tiny.toml",
            "--out",
            "f",
        ],
        d,
    );
    assert!(ft.status.success(), "{}", String::from_utf8_lossy(&ft.stderr));
    let ev = janus(&["eval", "--checkpoint", "f/classifier.jnsc", "--data", "task.tsv", "--out", "g"], d);
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("over 40 sequences"));

    let cmp = janus(&["compare", "--config", "tiny.toml", "--out", "c"], d);
    assert!(cmp.status.success());
    let curves = fs::read_to_string(d.join("c/curves.csv")).unwrap();
    let steps: Vec<&str> = curves.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "6", "12"]);
}

#[test]
fn rerun_from_snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let first =
        janus(&["pretrain", "--config", "tiny.toml", "--override", "train.steps=10", "--seed", "4", "--out", "a"], d);
    assert!(first.status.success());
    let metrics = fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11, "{metrics}");
    let again = janus(&["pretrain", "--config", "a/config.toml", "--out", "b"], d);
    assert!(again.status.success());
    assert_eq!(
        fs::read(d.join("a/checkpoints/final.jnsc")).unwrap(),
        fs::read(d.join("b/checkpoints/final.jnsc")).unwrap()
    );
}
