//! Stage orchestration: each stage validates its upstream artifacts,
//! executes one pipeline step, writes artifacts under the run directory,
//! and records digests in the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tracebleed::attack::{self, AttackReport, CalibrationResult, UnsureMode};
use tracebleed::baselines;
use tracebleed::chunk::{self, ChunkSet};
use tracebleed::defense::{self, DefenseEval};
use tracebleed::encoder::{self, TrafficEncoder};
use tracebleed::fidelity;
use tracebleed::simgen;
use tracebleed::trace::{self, SyntheticTrace, Trace};
use tracebleed::trainer;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{artifact_digest, RunManifest, StageEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Ingest,
    Simgen,
    Split,
    Chunk,
    Train,
    Calibrate,
    Attack,
    Fidelity,
    Defend,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Simgen => "simgen",
            Stage::Split => "split",
            Stage::Chunk => "chunk",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Attack => "attack",
            Stage::Fidelity => "fidelity",
            Stage::Defend => "defend",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

/// Executes one stage, updating the run manifest. Returns the run directory.
pub fn run_stage(stage: Stage, config: &Config, out_root: Option<&Path>) -> CliResult<PathBuf> {
    let run_dir = config.run_dir(out_root);
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::Runtime(format!("creating {run_dir:?}: {e}")))?;
    let mut manifest =
        RunManifest::load_or_new(&run_dir, &config.hash(), &config.canonical_json())?;
    let started = Instant::now();
    let io = match stage {
        Stage::Ingest => stage_ingest(config, &run_dir)?,
        Stage::Simgen => stage_simgen(config, &run_dir)?,
        Stage::Split => stage_split(config, &run_dir)?,
        Stage::Chunk => stage_chunk(config, &run_dir)?,
        Stage::Train => stage_train(config, &run_dir)?,
        Stage::Calibrate => stage_calibrate(config, &run_dir)?,
        Stage::Attack => stage_attack(config, &run_dir)?,
        Stage::Fidelity => stage_fidelity(config, &run_dir)?,
        Stage::Defend => stage_defend(config, &run_dir)?,
        Stage::Sweep => stage_sweep(config, &run_dir)?,
        Stage::Report => stage_report(config, &run_dir)?,
    };
    let mut entry = StageEntry {
        seed: config.run.seed,
        wall_s: started.elapsed().as_secs_f64(),
        completed_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        ..StageEntry::default()
    };
    for (name, path) in io.inputs {
        entry.inputs.insert(name, artifact_digest(&path)?);
    }
    for (name, path) in io.outputs {
        entry.outputs.insert(name, artifact_digest(&path)?);
    }
    manifest.record_stage(stage.name(), entry);
    manifest.save(&run_dir)?;
    Ok(run_dir)
}

struct StageIo {
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

fn require(path: PathBuf, run_first: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Dependency {
            missing: path.to_string_lossy().into_owned(),
            run_first: run_first.into(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))
}

/// Strips volatile keys (wall-clock fields) from a serialized report so
/// artifacts stay bit-reproducible; timings live in the manifest.
fn scrub_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_s");
            for (_, v) in map.iter_mut() {
                scrub_volatile(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                scrub_volatile(v);
            }
        }
        _ => {}
    }
}

fn write_scrubbed_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    scrub_volatile(&mut v);
    let text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))?;
    Ok(())
}

// --- individual stages -------------------------------------------------------

fn stage_ingest(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let input = config.ingest.input.as_ref().ok_or_else(|| {
        CliError::Validation("ingest.input is required for the ingest stage".into())
    })?;
    let input_path = PathBuf::from(input);
    if !input_path.exists() {
        return Err(CliError::Validation(format!("input {input:?} does not exist")));
    }
    let out = run_dir.join("trace.csv");
    let report_path = run_dir.join("ingest_report.json");
    let is_pcap = input.ends_with(".pcap") || input.ends_with(".cap");
    if is_pcap {
        let mut filter: BTreeSet<trace::Protocol> = BTreeSet::new();
        for name in &config.ingest.proto_filter {
            filter.insert(name.parse().map_err(CliError::Validation)?);
        }
        if filter.is_empty() {
            filter.insert(trace::Protocol::Tcp);
        }
        let (parsed, report) = tracebleed::pcap::ingest_pcap(&input_path, &filter)?;
        trace::export_csv(&parsed, &out)?;
        write_json(&report_path, &report)?;
    } else {
        let parsed = trace::ingest_csv(&input_path)?;
        trace::export_csv(&parsed, &out)?;
        write_json(&report_path, &serde_json::json!({"format": "csv", "kept": parsed.len()}))?;
    }
    Ok(StageIo {
        inputs: vec![("input".into(), input_path)],
        outputs: vec![
            ("trace.csv".into(), out),
            ("ingest_report.json".into(), report_path),
        ],
    })
}

fn stage_simgen(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let spec = config.simgen.as_ref().ok_or_else(|| {
        CliError::Validation("a [simgen] scenario section is required for the simgen stage".into())
    })?;
    let (scenario_trace, users) = simgen::build_scenario(spec)?;
    let out = run_dir.join("trace.csv");
    trace::export_csv(&scenario_trace, &out)?;
    let descriptor = run_dir.join("scenario.json");
    write_json(
        &descriptor,
        &serde_json::json!({ "scenario": spec, "users": users }),
    )?;
    Ok(StageIo {
        inputs: vec![],
        outputs: vec![
            ("trace.csv".into(), out),
            ("scenario.json".into(), descriptor),
        ],
    })
}

fn stage_split(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let trace_path = require(run_dir.join("trace.csv"), "ingest (or simgen)")?;
    let full = trace::ingest_csv(&trace_path)?;
    let split = trace::split_by_time(&full, config.split.r_rd, config.split.r_tv)?;
    let dir = run_dir.join("split");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let (t, v, d) = (dir.join("t.csv"), dir.join("v.csv"), dir.join("d.csv"));
    trace::export_csv(&split.t, &t)?;
    trace::export_csv(&split.v, &v)?;
    trace::export_csv(&split.d, &d)?;
    Ok(StageIo {
        inputs: vec![("trace.csv".into(), trace_path)],
        outputs: vec![
            ("split/t.csv".into(), t),
            ("split/v.csv".into(), v),
            ("split/d.csv".into(), d),
        ],
    })
}

fn stage_chunk(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let d_path = require(run_dir.join("split/d.csv"), "split")?;
    let t_path = run_dir.join("split/t.csv");
    let v_path = run_dir.join("split/v.csv");
    let trace_d = trace::ingest_csv(&d_path)?;
    let derived = chunk::default_config(&trace_d)?;
    let chunk_cfg = config.chunk_config(derived.window_us);
    let mut outputs = Vec::new();
    for (name, path) in [("t", &t_path), ("v", &v_path), ("d", &d_path)] {
        let part = trace::ingest_csv(path)?;
        let set = chunk::chunk(&part, &chunk_cfg)?;
        let out_dir = run_dir.join("chunks").join(name);
        if out_dir.exists() {
            std::fs::remove_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        chunk::save_chunkset(&set, &out_dir)?;
        outputs.push((format!("chunks/{name}"), out_dir));
    }
    Ok(StageIo {
        inputs: vec![
            ("split/t.csv".into(), t_path),
            ("split/v.csv".into(), v_path),
            ("split/d.csv".into(), d_path),
        ],
        outputs,
    })
}

fn load_chunks(run_dir: &Path, name: &str) -> CliResult<ChunkSet> {
    let dir = require(run_dir.join("chunks").join(name), "chunk")?;
    Ok(chunk::load_chunkset(&dir)?)
}

fn stage_train(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let chunks_t_dir = require(run_dir.join("chunks/t"), "chunk")?;
    let raw_t = chunk::load_chunkset(&chunks_t_dir)?;
    let (norm_t, stats) = encoder::normalize_features(&raw_t)?;
    let norm_v = match load_chunks(run_dir, "v") {
        Ok(raw_v) => Some(encoder::apply_norm_stats(&raw_v, &stats)?),
        Err(_) => None,
    };
    let outcome = trainer::train(
        &norm_t,
        norm_v.as_ref(),
        config.encoder_config(),
        &config.train_config(),
    )?;
    let mut model = outcome.model;
    model.norm_stats = Some(stats);
    let model_dir = run_dir.join("model");
    encoder::save_checkpoint(&model, &model_dir)?;
    // Training log: one JSON line per epoch, no wall-clock fields.
    let log_path = run_dir.join("training_log.jsonl");
    let mut lines = String::new();
    for e in &outcome.log {
        let line = serde_json::json!({
            "epoch": e.epoch,
            "mean_loss": e.mean_loss,
            "val_separation": e.val_separation,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    std::fs::write(&log_path, lines).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(StageIo {
        inputs: vec![("chunks/t".into(), chunks_t_dir)],
        outputs: vec![
            ("model".into(), model_dir),
            ("training_log.jsonl".into(), log_path),
        ],
    })
}

fn load_model(run_dir: &Path) -> CliResult<TrafficEncoder> {
    let dir = require(run_dir.join("model"), "train")?;
    Ok(encoder::load_checkpoint(&dir)?)
}

fn stats_of(model: &TrafficEncoder) -> CliResult<encoder::NormalizationStats> {
    model.norm_stats.ok_or_else(|| {
        CliError::Runtime("checkpoint carries no normalization statistics".into())
    })
}

fn stage_calibrate(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let model = load_model(run_dir)?;
    let stats = stats_of(&model)?;
    let raw_t = load_chunks(run_dir, "t")?;
    let raw_v = load_chunks(run_dir, "v")?;
    let norm_t = encoder::apply_norm_stats(&raw_t, &stats)?;
    let norm_v = encoder::apply_norm_stats(&raw_v, &stats)?;
    let (calib, records) =
        attack::calibrate(&model, &norm_t, &norm_v, config.attack.significance)?;
    let calib_path = run_dir.join("calibration.json");
    write_json(&calib_path, &calib)?;
    let dist_path = run_dir.join("calibration_distances.csv");
    attack::export_distances_csv(&records, &dist_path)?;
    Ok(StageIo {
        inputs: vec![
            ("model".into(), run_dir.join("model")),
            ("chunks/t".into(), run_dir.join("chunks/t")),
            ("chunks/v".into(), run_dir.join("chunks/v")),
        ],
        outputs: vec![
            ("calibration.json".into(), calib_path),
            ("calibration_distances.csv".into(), dist_path),
        ],
    })
}

/// Ground truth over the attacker's training sources: IN when the source
/// has at least one packet in the target partition D.
fn ground_truth(chunks_t: &ChunkSet, trace_d: &Trace) -> BTreeMap<Ipv4Addr, bool> {
    let d_sources: BTreeSet<Ipv4Addr> = trace_d.packets().iter().map(|p| p.src_ip).collect();
    chunks_t
        .source_index
        .keys()
        .map(|s| (*s, d_sources.contains(s)))
        .collect()
}

/// Materializes the configured synthetic trace under the run directory and
/// returns it with its metadata path.
fn materialize_synthetic(config: &Config, run_dir: &Path) -> CliResult<(SyntheticTrace, PathBuf)> {
    let out = run_dir.join("synthetic.csv");
    let meta_path = run_dir.join("synthetic_meta.json");
    match config.synthetic.source.as_str() {
        "file" => {
            let src = config.synthetic.path.as_ref().expect("validated");
            let src_path = PathBuf::from(src);
            if !src_path.exists() {
                return Err(CliError::Validation(format!(
                    "synthetic.path {src:?} does not exist"
                )));
            }
            let parsed = trace::ingest_csv(&src_path)?;
            trace::export_csv(&parsed, &out)?;
            let synth = SyntheticTrace {
                trace: parsed,
                volume_multiplier: config.synthetic.leaky_multiplier.max(1) as f64,
            };
            write_json(
                &meta_path,
                &serde_json::json!({
                    "source": "file",
                    "path": src,
                    "volume_multiplier": synth.volume_multiplier,
                }),
            )?;
            Ok((synth, out))
        }
        "leaky" => {
            let d_path = require(run_dir.join("split/d.csv"), "split")?;
            let trace_d = trace::ingest_csv(&d_path)?;
            let synth = simgen::leaky_synthetic(
                &trace_d,
                config.synthetic.leaky_multiplier,
                config.synthetic.leaky_jitter,
                config.run.seed,
            )?;
            trace::export_csv(&synth.trace, &out)?;
            write_json(
                &meta_path,
                &serde_json::json!({
                    "source": "leaky",
                    "volume_multiplier": synth.volume_multiplier,
                    "jitter": config.synthetic.leaky_jitter,
                }),
            )?;
            Ok((synth, out))
        }
        other => Err(CliError::Validation(format!(
            "unknown synthetic.source {other:?}"
        ))),
    }
}

fn unsure_mode(config: &Config) -> UnsureMode {
    if config.attack.unsure == "majority_vote" {
        UnsureMode::MajorityVote
    } else {
        UnsureMode::Keep
    }
}

fn stage_attack(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let calib_path = require(run_dir.join("calibration.json"), "calibrate")?;
    let calib: CalibrationResult = read_json(&calib_path)?;
    let model = load_model(run_dir)?;
    let stats = stats_of(&model)?;
    let raw_t = load_chunks(run_dir, "t")?;
    let norm_t = encoder::apply_norm_stats(&raw_t, &stats)?;
    let d_path = require(run_dir.join("split/d.csv"), "split")?;
    let trace_d = trace::ingest_csv(&d_path)?;

    let mut inputs = vec![
        ("calibration.json".into(), calib_path),
        ("model".into(), run_dir.join("model")),
        ("chunks/t".into(), run_dir.join("chunks/t")),
    ];
    // Target: raw D chunks, or the synthetic trace chunked with the same
    // window configuration.
    let chunks_d = load_chunks(run_dir, "d")?;
    let chunk_cfg = chunks_d.config;
    let target_norm = if config.attack.target_synthetic {
        let (synth, synth_path) = materialize_synthetic(config, run_dir)?;
        inputs.push(("synthetic.csv".into(), synth_path));
        let raw = chunk::chunk_synthetic(&synth, &chunk_cfg)?;
        encoder::apply_norm_stats(&raw, &stats)?
    } else {
        inputs.push(("chunks/d".into(), run_dir.join("chunks/d")));
        encoder::apply_norm_stats(&chunks_d, &stats)?
    };

    let truth = ground_truth(&raw_t, &trace_d);
    let truth_path = run_dir.join("ground_truth.json");
    write_json(&truth_path, &truth)?;

    let records = attack::min_distances(&model, &norm_t, &target_norm)
        .map_err(|e| CliError::Runtime(format!("distance computation: {e}")))?;
    let verdicts = attack::infer_from_distances(&records, &norm_t, &calib)?;
    let verdicts = attack::resolve_unsure(verdicts, unsure_mode(config));
    let mut report = attack::score(&verdicts, &truth)?;
    let true_in: BTreeSet<Ipv4Addr> = truth
        .iter()
        .filter(|(_, v)| **v)
        .map(|(k, _)| *k)
        .collect();
    if !true_in.is_empty() {
        if let Ok(topk) =
            attack::topk_hit(&model, &norm_t, &target_norm, &config.attack.ks, &true_in)
        {
            report.topk = topk.rates;
        }
    }
    report.inter_intra_ratio = trainer::evaluate_separation(&model, &target_norm).ok();

    let report_path = run_dir.join("attack_report.json");
    write_json(&report_path, &report)?;
    let dist_path = run_dir.join("attack_distances.csv");
    attack::export_distances_csv(&records, &dist_path)?;
    let random_path = run_dir.join("baseline_random.json");
    write_json(&random_path, &attack::random_guess_baseline(&truth, config.run.seed))?;

    let mut outputs = vec![
        ("attack_report.json".to_string(), report_path),
        ("attack_distances.csv".to_string(), dist_path),
        ("baseline_random.json".to_string(), random_path),
        ("ground_truth.json".to_string(), truth_path),
    ];

    if config.baseline.df_enabled {
        let t_path = require(run_dir.join("split/t.csv"), "split")?;
        let trace_t = trace::ingest_csv(&t_path)?;
        let df_model = baselines::df_train(&trace_t, &config.df_config())?;
        let inference = baselines::df_infer(&df_model, &trace_d)?;
        let df_report = baselines::df_attack_report(&df_model, &inference, &truth)?;
        let df_path = run_dir.join("baseline_df.json");
        write_json(&df_path, &df_report)?;
        outputs.push(("baseline_df.json".to_string(), df_path));
    }

    Ok(StageIo { inputs, outputs })
}

fn stage_fidelity(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let d_path = require(run_dir.join("split/d.csv"), "split")?;
    let real = trace::ingest_csv(&d_path)?;
    let (synth, synth_path) = materialize_synthetic(config, run_dir)?;
    let mut named: Vec<(String, SyntheticTrace)> = vec![("synthetic".into(), synth)];
    for entry in &config.fidelity.synthetic_files {
        let (name, path) = entry.split_once('=').ok_or_else(|| {
            CliError::Validation(format!(
                "fidelity.synthetic_files entry {entry:?} is not name=path"
            ))
        })?;
        let parsed = trace::ingest_csv(Path::new(path))?;
        named.push((
            name.to_string(),
            SyntheticTrace {
                trace: parsed,
                volume_multiplier: 1.0,
            },
        ));
    }
    let refs: Vec<(String, &SyntheticTrace)> =
        named.iter().map(|(n, s)| (n.clone(), s)).collect();
    let reports = fidelity::fidelity_report(&real, &refs, config.fidelity.include_protocol)?;
    let json_path = run_dir.join("fidelity_report.json");
    write_json(&json_path, &reports)?;
    let csv_path = run_dir.join("fidelity.csv");
    std::fs::write(&csv_path, fidelity::fidelity_csv(&reports)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(StageIo {
        inputs: vec![
            ("split/d.csv".into(), d_path),
            ("synthetic.csv".into(), synth_path),
        ],
        outputs: vec![
            ("fidelity_report.json".into(), json_path),
            ("fidelity.csv".into(), csv_path),
        ],
    })
}

fn stage_defend(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let calib_path = require(run_dir.join("calibration.json"), "calibrate")?;
    let calib: CalibrationResult = read_json(&calib_path)?;
    let model = load_model(run_dir)?;
    let chunks_d = load_chunks(run_dir, "d")?;
    let raw_t = load_chunks(run_dir, "t")?;
    let d_path = require(run_dir.join("split/d.csv"), "split")?;
    let trace_d = trace::ingest_csv(&d_path)?;
    let (synth, synth_path) = materialize_synthetic(config, run_dir)?;
    let truth = ground_truth(&raw_t, &trace_d);
    let chunk_cfg = chunks_d.config;
    let eval = DefenseEval {
        probe_t: &raw_t,
        ground_truth: &truth,
        real_trace: Some(&trace_d),
    };
    let (obfuscated, report) = defense::tracepatch(
        &model,
        &calib,
        &synth,
        &chunks_d,
        &chunk_cfg,
        &config.defense_config(),
        Some(&eval),
    )?;
    let defended_path = run_dir.join("defended.csv");
    trace::export_csv(&obfuscated.trace, &defended_path)?;
    let report_path = run_dir.join("defense_report.json");
    write_scrubbed_json(&report_path, &report)?;
    Ok(StageIo {
        inputs: vec![
            ("calibration.json".into(), calib_path),
            ("model".into(), run_dir.join("model")),
            ("chunks/d".into(), run_dir.join("chunks/d")),
            ("synthetic.csv".into(), synth_path),
        ],
        outputs: vec![
            ("defended.csv".into(), defended_path),
            ("defense_report.json".into(), report_path),
        ],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub multiplier: usize,
    pub skipped: bool,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1_defended: Option<f64>,
}

fn stage_sweep(config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    if config.sweep.multipliers.is_empty() {
        return Err(CliError::Validation(
            "sweep.multipliers must not be empty".into(),
        ));
    }
    let calib_path = require(run_dir.join("calibration.json"), "calibrate")?;
    let calib: CalibrationResult = read_json(&calib_path)?;
    let model = load_model(run_dir)?;
    let stats = stats_of(&model)?;
    let raw_t = load_chunks(run_dir, "t")?;
    let norm_t = encoder::apply_norm_stats(&raw_t, &stats)?;
    let chunks_d = load_chunks(run_dir, "d")?;
    let chunk_cfg = chunks_d.config;
    let d_path = require(run_dir.join("split/d.csv"), "split")?;
    let trace_d = trace::ingest_csv(&d_path)?;
    let truth = ground_truth(&raw_t, &trace_d);

    let mut rows = Vec::new();
    for &m in &config.sweep.multipliers {
        let synth = match config.synthetic.source.as_str() {
            "file" => {
                let pattern = config.synthetic.path.as_ref().expect("validated");
                let path = pattern.replace("{mult}", &m.to_string());
                let p = PathBuf::from(&path);
                if !p.exists() {
                    log::warn!("sweep: synthetic for {m}x missing at {path}; skipped");
                    rows.push(SweepRow {
                        multiplier: m,
                        skipped: true,
                        f1: None,
                        precision: None,
                        recall: None,
                        f1_defended: None,
                    });
                    continue;
                }
                SyntheticTrace {
                    trace: trace::ingest_csv(&p)?,
                    volume_multiplier: m as f64,
                }
            }
            _ => simgen::leaky_synthetic(
                &trace_d,
                m,
                config.synthetic.leaky_jitter,
                config.run.seed,
            )?,
        };
        let raw_chunks = chunk::chunk_synthetic(&synth, &chunk_cfg)?;
        let target = encoder::apply_norm_stats(&raw_chunks, &stats)?;
        let verdicts = attack::infer_membership(&model, &calib, &norm_t, &target)?;
        let verdicts = attack::resolve_unsure(verdicts, unsure_mode(config));
        let report = attack::score(&verdicts, &truth)?;
        let f1_defended = if config.sweep.defend {
            let mut dcfg = config.defense_config();
            dcfg.rounds = config.sweep.defense_rounds;
            let eval = DefenseEval {
                probe_t: &raw_t,
                ground_truth: &truth,
                real_trace: None,
            };
            let (_, dreport) = defense::tracepatch(
                &model,
                &calib,
                &synth,
                &chunks_d,
                &chunk_cfg,
                &dcfg,
                Some(&eval),
            )?;
            dreport.rounds.iter().rev().find_map(|r| r.f1)
        } else {
            None
        };
        rows.push(SweepRow {
            multiplier: m,
            skipped: false,
            f1: Some(report.f1),
            precision: Some(report.precision),
            recall: Some(report.recall),
            f1_defended,
        });
    }
    let json_path = run_dir.join("sweep_report.json");
    write_json(&json_path, &rows)?;
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_path = report_dir.join("f1_vs_volume.csv");
    let mut csv = String::from("multiplier,f1,precision,recall,f1_defended,skipped\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.multiplier,
            r.f1.map(|v| v.to_string()).unwrap_or_default(),
            r.precision.map(|v| v.to_string()).unwrap_or_default(),
            r.recall.map(|v| v.to_string()).unwrap_or_default(),
            r.f1_defended.map(|v| v.to_string()).unwrap_or_default(),
            r.skipped
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(StageIo {
        inputs: vec![
            ("calibration.json".into(), calib_path),
            ("model".into(), run_dir.join("model")),
            ("chunks/t".into(), run_dir.join("chunks/t")),
            ("split/d.csv".into(), d_path),
        ],
        outputs: vec![
            ("sweep_report.json".into(), json_path),
            ("report/f1_vs_volume.csv".into(), csv_path),
        ],
    })
}

fn stage_report(_config: &Config, run_dir: &Path) -> CliResult<StageIo> {
    let attack_path = require(run_dir.join("attack_report.json"), "attack")?;
    let attack_report: AttackReport = read_json(&attack_path)?;
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut rows: Vec<(String, AttackReport)> = vec![("tracebleed".into(), attack_report)];
    if let Ok(r) = read_json::<AttackReport>(&run_dir.join("baseline_random.json")) {
        rows.push(("random_guess".into(), r));
    }
    if let Ok(r) = read_json::<AttackReport>(&run_dir.join("baseline_df.json")) {
        rows.push(("deep_fingerprinting".into(), r));
    }
    let cmp_path = report_dir.join("comparison.csv");
    let mut csv = String::from("attacker,precision,recall,f1,confident_ratio,top1,top3,top10\n");
    for (name, r) in &rows {
        let topk = |k: usize| {
            r.topk
                .get(&k)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            r.precision,
            r.recall,
            r.f1,
            r.confident_ratio,
            topk(1),
            topk(3),
            topk(10)
        ));
    }
    std::fs::write(&cmp_path, &csv).map_err(|e| CliError::Runtime(e.to_string()))?;

    // F1-versus-fidelity scatter data, when both sides exist.
    let scatter_path = report_dir.join("f1_vs_fidelity.csv");
    let mut scatter = String::from("series,mean_fidelity,f1\n");
    if let Ok(gens) =
        read_json::<Vec<fidelity::GeneratorFidelity>>(&run_dir.join("fidelity_report.json"))
    {
        let f1 = rows[0].1.f1;
        for g in &gens {
            if let Some(rep) = &g.report {
                scatter.push_str(&format!("{},{},{}\n", g.name, rep.mean_fidelity, f1));
            }
        }
    }
    if let Ok(dreport) =
        read_json::<serde_json::Value>(&run_dir.join("defense_report.json"))
    {
        let before = dreport
            .get("mean_fidelity_before")
            .and_then(|v| v.as_f64());
        let after = dreport.get("mean_fidelity_after").and_then(|v| v.as_f64());
        let f1_before = dreport.get("f1_before").and_then(|v| v.as_f64());
        let f1_after = dreport
            .get("rounds")
            .and_then(|r| r.as_array())
            .and_then(|rounds| rounds.iter().rev().find_map(|r| r.get("f1")?.as_f64()));
        if let (Some(b), Some(fb)) = (before, f1_before) {
            scatter.push_str(&format!("pre_defense,{b},{fb}\n"));
        }
        if let (Some(a), Some(fa)) = (after, f1_after) {
            scatter.push_str(&format!("post_defense,{a},{fa}\n"));
        }
    }
    std::fs::write(&scatter_path, &scatter).map_err(|e| CliError::Runtime(e.to_string()))?;

    // Human-readable summary.
    let summary_path = report_dir.join("summary.txt");
    let mut text = String::new();
    text.push_str(&format!(
        "{:<22} {:>9} {:>9} {:>9} {:>10}\n",
        "attacker", "precision", "recall", "f1", "confident"
    ));
    for (name, r) in &rows {
        text.push_str(&format!(
            "{:<22} {:>9.3} {:>9.3} {:>9.3} {:>10.3}\n",
            name, r.precision, r.recall, r.f1, r.confident_ratio
        ));
    }
    std::fs::write(&summary_path, &text).map_err(|e| CliError::Runtime(e.to_string()))?;

    Ok(StageIo {
        inputs: vec![("attack_report.json".into(), attack_path)],
        outputs: vec![
            ("report/comparison.csv".into(), cmp_path),
            ("report/f1_vs_fidelity.csv".into(), scatter_path),
            ("report/summary.txt".into(), summary_path),
        ],
    })
}
