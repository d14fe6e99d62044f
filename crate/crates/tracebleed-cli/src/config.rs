//! Pipeline configuration: one TOML file with per-stage sections. CLI
//! `--set dotted.key=value` overrides are applied to the parsed tree before
//! deserialization, and the canonical serialized form is hashed to key the
//! run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub ingest: IngestSection,
    pub split: SplitSection,
    pub chunk: ChunkSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub baseline: BaselineSection,
    pub fidelity: FidelitySection,
    pub defense: DefenseSection,
    pub simgen: Option<tracebleed::simgen::ScenarioSpec>,
    pub synthetic: SyntheticSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run: RunSection::default(),
            ingest: IngestSection::default(),
            split: SplitSection::default(),
            chunk: ChunkSection::default(),
            encoder: EncoderSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            baseline: BaselineSection::default(),
            fidelity: FidelitySection::default(),
            defense: DefenseSection::default(),
            simgen: None,
            synthetic: SyntheticSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: String,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: "runs".into(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Input capture: `.pcap` or `.csv` by extension.
    pub input: Option<String>,
    pub proto_filter: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub r_rd: f64,
    pub r_tv: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            r_rd: tracebleed::trace::DEFAULT_R_RD,
            r_tv: tracebleed::trace::DEFAULT_R_TV,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSection {
    /// Window in seconds; 0 derives a tenth of the target duration.
    pub window_s: f64,
    /// Stride in seconds; 0 derives window / stride_divisor.
    pub stride_s: f64,
    pub stride_divisor: i64,
    pub min_active_flows: usize,
    pub min_packets_per_flow: usize,
    pub min_chunks_per_source: usize,
    pub max_flows_per_chunk: usize,
    pub max_packets_per_flow: usize,
}

impl Default for ChunkSection {
    fn default() -> Self {
        ChunkSection {
            window_s: 0.0,
            stride_s: 0.0,
            stride_divisor: 10,
            min_active_flows: tracebleed::chunk::DEFAULT_MIN_ACTIVE_FLOWS,
            min_packets_per_flow: tracebleed::chunk::DEFAULT_MIN_PACKETS_PER_FLOW,
            min_chunks_per_source: tracebleed::chunk::DEFAULT_MIN_CHUNKS_PER_SOURCE,
            max_flows_per_chunk: tracebleed::chunk::DEFAULT_MAX_FLOWS_PER_CHUNK,
            max_packets_per_flow: tracebleed::chunk::DEFAULT_MAX_PACKETS_PER_FLOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub latent_dim: usize,
    pub num_attention_layers: usize,
    pub num_heads: usize,
    pub flow_embed_dim: usize,
    pub traffic_embed_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = tracebleed::encoder::EncoderConfig::default();
        EncoderSection {
            latent_dim: d.latent_dim,
            num_attention_layers: d.num_attention_layers,
            num_heads: d.num_heads,
            flow_embed_dim: d.flow_embed_dim,
            traffic_embed_dim: d.traffic_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_sources: usize,
    pub chunks_per_source: usize,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = tracebleed::trainer::TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_sources: d.batch_sources,
            chunks_per_source: d.chunks_per_source,
            temperature: d.temperature,
            focal_gamma: d.focal_gamma,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub significance: f64,
    pub ks: Vec<usize>,
    /// "keep" or "majority_vote".
    pub unsure: String,
    /// Attack the synthetic trace instead of raw D when true.
    pub target_synthetic: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            significance: tracebleed::attack::DEFAULT_SIGNIFICANCE,
            ks: vec![1, 3, 10],
            unsure: "keep".into(),
            target_synthetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub df_enabled: bool,
    pub df_input_len: usize,
    pub df_epochs: usize,
    pub df_learning_rate: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = tracebleed::baselines::DfConfig::default();
        BaselineSection {
            df_enabled: true,
            df_input_len: d.input_len,
            df_epochs: d.epochs,
            df_learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FidelitySection {
    /// Extra named synthetic traces: "name=path.csv".
    pub synthetic_files: Vec<String>,
    pub include_protocol: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub rounds: usize,
    pub step_size: f64,
    pub steps_per_round: usize,
    pub epsilon_iat: f64,
    pub epsilon_len: f64,
    pub duration_tolerance: f64,
    pub len_min: u32,
    pub len_max: u32,
    pub direction_balance: bool,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let d = tracebleed::defense::DefenseConfig::default();
        DefenseSection {
            rounds: d.rounds,
            step_size: d.step_size,
            steps_per_round: d.steps_per_round,
            epsilon_iat: d.epsilon_iat,
            epsilon_len: d.epsilon_len,
            duration_tolerance: d.duration_tolerance,
            len_min: d.len_bounds.0,
            len_max: d.len_bounds.1,
            direction_balance: d.direction_balance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// "file" reads `path`; "leaky" derives copies of D with jitter.
    pub source: String,
    pub path: Option<String>,
    pub leaky_multiplier: usize,
    pub leaky_jitter: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            source: "leaky".into(),
            path: None,
            leaky_multiplier: 1,
            leaky_jitter: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub multipliers: Vec<usize>,
    pub defend: bool,
    /// Override of defense rounds for the sweep (it runs once per volume).
    pub defense_rounds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            multipliers: vec![1, 4, 10],
            defend: false,
            defense_rounds: 2,
        }
    }
}

impl Config {
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {path:?}: {e}")))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> CliResult<Config> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Validation(format!("config schema violation: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.split.r_rd > 0.0 && self.split.r_rd < 1.0) {
            return Err(CliError::Validation(format!(
                "split.r_rd must lie in (0,1), got {}",
                self.split.r_rd
            )));
        }
        if !(self.split.r_tv > 0.0 && self.split.r_tv < 1.0) {
            return Err(CliError::Validation(format!(
                "split.r_tv must lie in (0,1), got {}",
                self.split.r_tv
            )));
        }
        if self.attack.unsure != "keep" && self.attack.unsure != "majority_vote" {
            return Err(CliError::Validation(format!(
                "attack.unsure must be \"keep\" or \"majority_vote\", got {:?}",
                self.attack.unsure
            )));
        }
        match self.synthetic.source.as_str() {
            "file" => {
                if self.synthetic.path.is_none() {
                    return Err(CliError::Validation(
                        "synthetic.source = \"file\" requires synthetic.path".into(),
                    ));
                }
            }
            "leaky" => {}
            other => {
                return Err(CliError::Validation(format!(
                    "synthetic.source must be \"file\" or \"leaky\", got {other:?}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialized form: field order is fixed by the struct, so
    /// the hash is stable across reruns.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn run_dir(&self, root_override: Option<&Path>) -> PathBuf {
        let root = root_override
            .map(|p| p.to_path_buf())
            .or_else(|| std::env::var("TRACEBLEED_CACHE_DIR").ok().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&self.run.out_dir));
        root.join(format!("run-{}", self.hash()))
    }

    pub fn chunk_config(&self, derived_window_us: i64) -> tracebleed::chunk::ChunkConfig {
        let window_us = if self.chunk.window_s > 0.0 {
            (self.chunk.window_s * 1e6) as i64
        } else {
            derived_window_us
        };
        let stride_us = if self.chunk.stride_s > 0.0 {
            (self.chunk.stride_s * 1e6) as i64
        } else {
            (window_us / self.chunk.stride_divisor.max(1)).max(1)
        };
        tracebleed::chunk::ChunkConfig {
            window_us,
            stride_us,
            min_active_flows: self.chunk.min_active_flows,
            min_packets_per_flow: self.chunk.min_packets_per_flow,
            min_chunks_per_source: self.chunk.min_chunks_per_source,
            max_flows_per_chunk: self.chunk.max_flows_per_chunk,
            max_packets_per_flow: self.chunk.max_packets_per_flow,
        }
    }

    pub fn encoder_config(&self) -> tracebleed::encoder::EncoderConfig {
        tracebleed::encoder::EncoderConfig {
            feature_dim: 2,
            latent_dim: self.encoder.latent_dim,
            num_attention_layers: self.encoder.num_attention_layers,
            num_heads: self.encoder.num_heads,
            flow_embed_dim: self.encoder.flow_embed_dim,
            traffic_embed_dim: self.encoder.traffic_embed_dim,
            max_positions: self.chunk.max_packets_per_flow,
        }
    }

    pub fn train_config(&self) -> tracebleed::trainer::TrainConfig {
        tracebleed::trainer::TrainConfig {
            epochs: self.train.epochs,
            batch_sources: self.train.batch_sources,
            chunks_per_source: self.train.chunks_per_source,
            temperature: self.train.temperature,
            focal_gamma: self.train.focal_gamma,
            learning_rate: self.train.learning_rate,
            seed: self.run.seed,
        }
    }

    pub fn defense_config(&self) -> tracebleed::defense::DefenseConfig {
        tracebleed::defense::DefenseConfig {
            rounds: self.defense.rounds,
            step_size: self.defense.step_size,
            steps_per_round: self.defense.steps_per_round,
            epsilon_iat: self.defense.epsilon_iat,
            epsilon_len: self.defense.epsilon_len,
            duration_tolerance: self.defense.duration_tolerance,
            len_bounds: (self.defense.len_min, self.defense.len_max),
            direction_balance: self.defense.direction_balance,
        }
    }

    pub fn df_config(&self) -> tracebleed::baselines::DfConfig {
        tracebleed::baselines::DfConfig {
            input_len: self.baseline.df_input_len,
            epochs: self.baseline.df_epochs,
            learning_rate: self.baseline.df_learning_rate,
            seed: self.run.seed,
            ..tracebleed::baselines::DfConfig::default()
        }
    }
}

/// Applies one `dotted.key=value` override to the parsed TOML tree. The
/// value is parsed as a TOML literal, falling back to a string.
fn apply_override(table: &mut toml::Table, entry: &str) -> CliResult<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {entry:?} is not key=value")))?;
    // Parse the literal through a synthetic document so numbers, booleans,
    // and arrays come out typed; anything unparseable stays a string.
    let value: toml::Value = format!("v = {raw_value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut cursor = table;
    for key in &keys[..keys.len() - 1] {
        cursor = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Validation(format!("override path {path:?} crosses a non-table"))
            })?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_stably() {
        let a = Config::from_toml_str("", &[]).unwrap();
        let b = Config::from_toml_str("", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_change_the_hash_and_the_value() {
        let base = Config::from_toml_str("", &[]).unwrap();
        let tweaked = Config::from_toml_str("", &["run.seed=7".into()]).unwrap();
        assert_eq!(tweaked.run.seed, 7);
        assert_ne!(base.hash(), tweaked.hash());
    }

    #[test]
    fn unknown_keys_are_schema_violations() {
        let err = Config::from_toml_str("[run]\nbogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
    }

    #[test]
    fn string_values_fall_back_cleanly() {
        let cfg =
            Config::from_toml_str("", &["synthetic.source=file".into(), "synthetic.path=x.csv".into()])
                .unwrap();
        assert_eq!(cfg.synthetic.source, "file");
        assert_eq!(cfg.synthetic.path.as_deref(), Some("x.csv"));
    }
}
