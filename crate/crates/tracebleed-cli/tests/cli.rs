//! End-to-end checks of the staged pipeline: dependency ordering,
//! validation failures, the full simgen-to-report path, and rerun
//! determinism of artifacts.

use std::path::{Path, PathBuf};
use std::process::Command;

use tracebleed_cli::{run_stage, CliError, Config, Stage};

/// Small three-group scenario plus quick model settings, as a config file.
fn smoke_config_toml() -> String {
    let scenario = tracebleed::simgen::three_group_scenario(&tracebleed::simgen::ThreeGroupSpec {
        n_sites: 8,
        loads_per_site: 6,
        group_a: 3,
        group_b: 2,
        group_c: 2,
        session_rate: 1.0,
        target_packets: 12_000,
        gap_s: 5.0,
        drift_iat_scale: 1.1,
        drift_len_jitter: 0.02,
        seed: 77,
    })
    .unwrap();
    let mut simgen_wrapper = toml::Table::new();
    simgen_wrapper.insert(
        "simgen".to_string(),
        toml::Value::try_from(&scenario).unwrap(),
    );
    let scenario_toml = toml::to_string(&simgen_wrapper).unwrap();
    format!(
        r#"
{scenario_toml}

[run]
seed = 77

[chunk]
stride_divisor = 5
min_chunks_per_source = 5

[train]
epochs = 2
batch_sources = 4
chunks_per_source = 2
learning_rate = 3e-3

[encoder]
latent_dim = 16
num_attention_layers = 1
num_heads = 2
flow_embed_dim = 16
traffic_embed_dim = 16

[baseline]
df_epochs = 3
df_input_len = 32

[synthetic]
leaky_multiplier = 1
leaky_jitter = 0.1

[defense]
rounds = 1
steps_per_round = 4

[sweep]
multipliers = [1, 2]
"#
    )
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, smoke_config_toml()).unwrap();
    path
}

fn load_config(path: &Path) -> Config {
    Config::load(path, &[]).unwrap()
}

#[test]
fn attack_before_calibrate_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&write_config(dir.path()));
    let err = run_stage(Stage::Attack, &config, Some(dir.path())).unwrap_err();
    match err {
        CliError::Dependency { run_first, .. } => {
            assert_eq!(run_first, "calibrate");
        }
        other => panic!("expected dependency error, got {other}"),
    }
}

#[test]
fn split_without_a_trace_names_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&write_config(dir.path()));
    let err = run_stage(Stage::Split, &config, Some(dir.path())).unwrap_err();
    match err {
        CliError::Dependency { run_first, .. } => assert!(run_first.contains("ingest")),
        other => panic!("expected dependency error, got {other}"),
    }
}

#[test]
fn empty_sweep_multipliers_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let config = Config::load(&path, &["sweep.multipliers=[]".into()]).unwrap();
    let err = run_stage(Stage::Sweep, &config, Some(dir.path())).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)), "{err}");
}

#[test]
fn dependency_exit_code_is_three_via_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let output = Command::new(env!("CARGO_BIN_EXE_tracebleed"))
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
            "attack",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("calibrate"), "stderr: {stderr}");
}

#[test]
fn bad_config_exit_code_is_two_via_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[run]\nnope = 1\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_tracebleed"))
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
            "split",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn full_pipeline_smoke_runs_and_completes_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&write_config(dir.path()));
    let stages = [
        Stage::Simgen,
        Stage::Split,
        Stage::Chunk,
        Stage::Train,
        Stage::Calibrate,
        Stage::Attack,
        Stage::Fidelity,
        Stage::Defend,
        Stage::Sweep,
        Stage::Report,
    ];
    let mut run_dir = PathBuf::new();
    for stage in stages {
        run_dir = run_stage(stage, &config, Some(dir.path()))
            .unwrap_or_else(|e| panic!("stage {} failed: {e}", stage.name()));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    let recorded = manifest["stages"].as_object().unwrap();
    for stage in stages {
        assert!(
            recorded.contains_key(stage.name()),
            "manifest missing stage {}",
            stage.name()
        );
    }
    for artifact in [
        "trace.csv",
        "split/t.csv",
        "chunks/t/manifest.json",
        "model/params.bin",
        "calibration.json",
        "attack_report.json",
        "baseline_random.json",
        "baseline_df.json",
        "fidelity_report.json",
        "defended.csv",
        "defense_report.json",
        "sweep_report.json",
        "report/comparison.csv",
        "report/summary.txt",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn reruns_reproduce_bit_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&write_config(dir.path()));
    let stages = [Stage::Simgen, Stage::Split, Stage::Chunk, Stage::Train];
    let mut run_dir = PathBuf::new();
    for stage in stages {
        run_dir = run_stage(stage, &config, Some(dir.path())).unwrap();
    }
    let files = ["trace.csv", "split/t.csv", "model/params.bin", "training_log.jsonl"];
    let digest =
        |f: &str| tracebleed_cli::manifest::file_digest(&run_dir.join(f)).unwrap();
    let before: Vec<String> = files.iter().map(|f| digest(f)).collect();
    for stage in stages {
        run_stage(stage, &config, Some(dir.path())).unwrap();
    }
    let after: Vec<String> = files.iter().map(|f| digest(f)).collect();
    assert_eq!(before, after, "stage reruns must reproduce artifacts bit-exactly");
}
