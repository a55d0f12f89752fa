//! End-to-end pipeline smoke test: a miniature experiment runs through
//! every stage, caching makes reruns no-ops, and the exit-code contract
//! holds for config errors, missing prerequisites, and corrupt artifacts.

use std::path::Path;
use std::process::Command;

const SMOKE_CONFIG: &str = r#"
seeds = [0]
horizons = [1]

[rules]
set = "list"
list = [0, 30, 110]

[simulate]
width = 64
steps = 80
density = 0.5
seed = 7

[complexity]
grid_width = 64
grid_steps = 100
lyapunov_width = 32
lyapunov_trials = 4
lyapunov_steps = 50
krylov_width = 8
krylov_horizon = 8
seed = 0

[pretrain]
samples = 32
sim_width = 64
sim_steps = 100
t_len = 8
x_len = 16
density = 0.5

[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
dropout = 0.0

[train]
lr = 0.001
batch_size = 16
max_epochs = 2
patience = 5
val_frac = 0.1

[finetune]
lr = 0.001
batch_size = 8
max_epochs = 2
val_frac = 0.25
threshold = 0.8
accuracy = "per_cell"

[tasks.easy]
sequences = 8
seq_len = 4
seed = 101

[tasks.hard]
sequences = 8
seq_len = 4
seed = 202

[analysis]
attention_k = 4
probe_samples = 16
cka_mode = "activation"
"#;

fn ecalab(config: &Path, out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ecalab"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &std::process::Output, stage: &str) {
    assert!(
        out.status.success(),
        "{stage} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_caching_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ecalab.toml");
    std::fs::write(&config, SMOKE_CONFIG).unwrap();
    let out = dir.path().join("run");

    for stage in [
        "simulate",
        "complexity",
        "gen",
        "train",
        "finetune",
        "analyze",
        "report",
    ] {
        assert_ok(&ecalab(&config, &out, &[stage]), stage);
    }

    // expected artifacts exist
    for rel in [
        "grids/rule000.ecg",
        "complexity.json",
        "data/pretrain_rule030_h1.eds",
        "data/easy.eds",
        "data/hard.eds",
        "models/rule110_h1_s0.eck",
        "results/rule030_h1.json",
        "analysis/results.csv",
        "analysis/correlations.json",
        "analysis/attention.csv",
        "analysis/cka.csv",
        "analysis/mds.csv",
        "analysis/class_summary.csv",
        "report/summary.md",
    ] {
        assert!(out.join(rel).exists(), "missing artifact {rel}");
    }
    let results = std::fs::read_to_string(out.join("analysis/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3, "one row per rule");

    // rerun with unchanged config: every stage reports a cache hit
    for stage in ["simulate", "gen", "train", "analyze"] {
        let rerun = ecalab(&config, &out, &[stage]);
        assert_ok(&rerun, stage);
        let stderr = String::from_utf8_lossy(&rerun.stderr);
        assert!(
            stderr.contains("cached, skipping"),
            "{stage} rerun was not cached: {stderr}"
        );
    }

    // corrupting a dataset invalidates the cache and fails before training
    let ds_path = out.join("data/pretrain_rule000_h1.eds");
    let mut bytes = std::fs::read(&ds_path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&ds_path, &bytes).unwrap();
    let corrupt = ecalab(&config, &out, &["train"]);
    assert_eq!(corrupt.status.code(), Some(4), "corrupt dataset must fail");

    // missing prerequisite: training in a fresh directory names the producer
    let fresh = dir.path().join("fresh");
    let missing = ecalab(&config, &fresh, &["train"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&missing.stderr).contains("ecalab gen"),
        "error must name the producing command"
    );

    // config error
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "horizons = [7]\n").unwrap();
    let invalid = ecalab(&bad, &out, &["simulate"]);
    assert_eq!(invalid.status.code(), Some(2));
}

#[test]
fn config_init_writes_parsable_template() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ecalab.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_ecalab"))
        .args(["config-init", "--path"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(path.exists());

    // refuses to overwrite without --force
    let again = Command::new(env!("CARGO_BIN_EXE_ecalab"))
        .args(["config-init", "--path"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(2));
}
