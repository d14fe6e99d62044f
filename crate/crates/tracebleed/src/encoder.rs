//! The traffic encoder: a differentiable model mapping a chunk of flows to
//! a unit-norm embedding, plus the embedding-space distance and feature
//! normalization.
//!
//! Per flow: packet features are projected into the latent space, a learned
//! positional encoding is added, a stack of self-attention encoder layers
//! models intra-flow structure, and mean pooling plus a projection yields
//! the flow embedding. The aggregator averages flow embeddings and applies
//! a linear layer with L2 normalization to produce the traffic embedding.
//!
//! Two forward paths exist on purpose: a plain evaluation path used for
//! inference and a tape path used wherever gradients are needed. Tests
//! assert they agree.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_normalize_rows, layer_norm_normalize, softmax_rows, Tape, VarId};
use crate::chunk::{Chunk, ChunkSet, Flow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub num_attention_layers: usize,
    pub num_heads: usize,
    pub flow_embed_dim: usize,
    pub traffic_embed_dim: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 2,
            latent_dim: 64,
            num_attention_layers: 2,
            num_heads: 4,
            flow_embed_dim: 64,
            traffic_embed_dim: 64,
            max_positions: 256,
        }
    }
}

impl EncoderConfig {
    /// A deliberately small configuration for gradient checks and quick tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            feature_dim: 2,
            latent_dim: 8,
            num_attention_layers: 1,
            num_heads: 1,
            flow_embed_dim: 6,
            traffic_embed_dim: 5,
            max_positions: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_heads == 0 || self.latent_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be a positive multiple of num_heads {}",
                self.latent_dim, self.num_heads
            )));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("num_attention_layers", self.num_attention_layers),
            ("flow_embed_dim", self.flow_embed_dim),
            ("traffic_embed_dim", self.traffic_embed_dim),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        self.latent_dim * 2
    }
}

/// Named parameter arrays. Biases and norm gains are stored as 1 x d rows.
pub type Parameters = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficEncoder {
    pub config: EncoderConfig,
    pub params: Parameters,
    pub version: u32,
    /// Feature normalization fitted on the attacker training set; carried
    /// with the model so every consumer normalizes identically.
    pub norm_stats: Option<NormalizationStats>,
}

impl TrafficEncoder {
    /// Fresh model with Xavier-uniform weights, zero biases, and a
    /// small-random positional table.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let d = config.latent_dim;
        let xavier = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Array2<f64> {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        params.insert("input.w".into(), xavier(config.feature_dim, d, &mut rng));
        params.insert("input.b".into(), Array2::zeros((1, d)));
        // Small random positional init: packet order must influence the
        // embedding from the very first forward pass.
        let pos = Array2::from_shape_fn((config.max_positions, d), |_| {
            rng.random_range(-0.02..0.02)
        });
        params.insert("pos.table".into(), pos);
        for l in 0..config.num_attention_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("layer{l}.attn.{name}"), xavier(d, d, &mut rng));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("layer{l}.attn.{name}"), Array2::zeros((1, d)));
            }
            params.insert(format!("layer{l}.ln1.gamma"), Array2::ones((1, d)));
            params.insert(format!("layer{l}.ln1.beta"), Array2::zeros((1, d)));
            params.insert(
                format!("layer{l}.ffn.w1"),
                xavier(d, config.ffn_dim(), &mut rng),
            );
            params.insert(
                format!("layer{l}.ffn.b1"),
                Array2::zeros((1, config.ffn_dim())),
            );
            params.insert(
                format!("layer{l}.ffn.w2"),
                xavier(config.ffn_dim(), d, &mut rng),
            );
            params.insert(format!("layer{l}.ffn.b2"), Array2::zeros((1, d)));
            params.insert(format!("layer{l}.ln2.gamma"), Array2::ones((1, d)));
            params.insert(format!("layer{l}.ln2.beta"), Array2::zeros((1, d)));
        }
        params.insert(
            "flow_proj.w".into(),
            xavier(d, config.flow_embed_dim, &mut rng),
        );
        params.insert(
            "flow_proj.b".into(),
            Array2::zeros((1, config.flow_embed_dim)),
        );
        params.insert(
            "agg.w".into(),
            xavier(config.flow_embed_dim, config.traffic_embed_dim, &mut rng),
        );
        params.insert("agg.b".into(), Array2::zeros((1, config.traffic_embed_dim)));
        Ok(TrafficEncoder {
            config,
            params,
            version: 1,
            norm_stats: None,
        })
    }

    fn p(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// A unit-norm traffic embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

pub const UNIT_NORM_TOL: f64 = 1e-6;

impl Embedding {
    pub fn new(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Input(format!(
                "embedding norm {norm} deviates from 1 by more than {UNIT_NORM_TOL}"
            )));
        }
        Ok(Embedding(v))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Embedding-space distance `1 - cos(a, b)`, in [0, 2]. Inputs must be
/// unit-norm.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    for (name, e) in [("a", a), ("b", b)] {
        let norm = e.0.dot(&e.0).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Input(format!(
                "distance input {name} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(distance_unchecked(a, b))
}

/// Same as [`distance`] without the norm check; embeddings constructed via
/// [`Embedding::new`] already carry the invariant.
pub fn distance_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    (1.0 - a.dot(b)).clamp(0.0, 2.0)
}

// --- plain forward ----------------------------------------------------------

pub(crate) fn flow_features(flow: &Flow) -> Array2<f64> {
    let n = flow.len();
    let mut x = Array2::zeros((n, 2));
    for i in 0..n {
        x[[i, 0]] = flow.iat_us[i];
        x[[i, 1]] = flow.pkt_len[i];
    }
    x
}

/// Maps one flow (already normalized features) to its flow embedding.
pub fn encode_flow(model: &TrafficEncoder, flow: &Flow) -> Result<Array1<f64>> {
    let x = flow_features(flow);
    encode_flow_matrix(model, &x)
}

pub(crate) fn encode_flow_matrix(model: &TrafficEncoder, x: &Array2<f64>) -> Result<Array1<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Input("cannot encode an empty flow".into()));
    }
    if n > model.config.max_positions {
        return Err(Error::Input(format!(
            "flow has {n} packets, beyond max_positions {}; truncate first",
            model.config.max_positions
        )));
    }
    let cfg = &model.config;
    let mut h = x.dot(model.p("input.w")) + model.p("input.b");
    h += &model.p("pos.table").slice(ndarray::s![..n, ..]);
    for l in 0..cfg.num_attention_layers {
        h = encoder_layer_plain(model, l, &h);
    }
    let pooled = h.mean_axis(Axis(0)).expect("non-empty flow");
    let pooled = pooled.insert_axis(Axis(0));
    let out = pooled.dot(model.p("flow_proj.w")) + model.p("flow_proj.b");
    Ok(out.row(0).to_owned())
}

fn encoder_layer_plain(model: &TrafficEncoder, l: usize, h: &Array2<f64>) -> Array2<f64> {
    let cfg = &model.config;
    let d = cfg.latent_dim;
    let dh = d / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h.dot(model.p(&format!("layer{l}.attn.wq"))) + model.p(&format!("layer{l}.attn.bq"));
    let k = h.dot(model.p(&format!("layer{l}.attn.wk"))) + model.p(&format!("layer{l}.attn.bk"));
    let v = h.dot(model.p(&format!("layer{l}.attn.wv"))) + model.p(&format!("layer{l}.attn.bv"));
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let cols = ndarray::s![.., head * dh..(head + 1) * dh];
        let qh = q.slice(cols).to_owned();
        let kh = k.slice(cols).to_owned();
        let vh = v.slice(cols).to_owned();
        let scores = qh.dot(&kh.t()).mapv(|s| s * scale);
        let attn = softmax_rows(&scores);
        heads.push(attn.dot(&vh));
    }
    let views: Vec<_> = heads.iter().map(|m| m.view()).collect();
    let concat = ndarray::concatenate(Axis(1), &views).expect("head concat");
    let o = concat.dot(model.p(&format!("layer{l}.attn.wo")))
        + model.p(&format!("layer{l}.attn.bo"));
    let res1 = h + &o;
    let n1 = layer_norm_normalize(&res1) * model.p(&format!("layer{l}.ln1.gamma"))
        + model.p(&format!("layer{l}.ln1.beta"));
    let f1 = (n1.dot(model.p(&format!("layer{l}.ffn.w1"))) + model.p(&format!("layer{l}.ffn.b1")))
        .mapv(|x| x.max(0.0));
    let f2 = f1.dot(model.p(&format!("layer{l}.ffn.w2"))) + model.p(&format!("layer{l}.ffn.b2"));
    let res2 = &n1 + &f2;
    layer_norm_normalize(&res2) * model.p(&format!("layer{l}.ln2.gamma"))
        + model.p(&format!("layer{l}.ln2.beta"))
}

/// Maps a chunk to its unit-norm traffic embedding: mean over flow
/// embeddings, linear projection, L2 normalization.
pub fn encode_chunk(model: &TrafficEncoder, chunk: &Chunk) -> Result<Embedding> {
    if chunk.flows.is_empty() {
        return Err(Error::Input("cannot encode a chunk with no flows".into()));
    }
    let fe = model.config.flow_embed_dim;
    let mut mean = Array1::<f64>::zeros(fe);
    for flow in &chunk.flows {
        mean += &encode_flow(model, flow)?;
    }
    mean /= chunk.flows.len() as f64;
    let agg = mean.insert_axis(Axis(0)).dot(model.p("agg.w")) + model.p("agg.b");
    let unit = l2_normalize_rows(&agg);
    Embedding::new(unit.row(0).to_owned())
}

/// Encodes every chunk of a set in parallel (order-preserving). Chunks must
/// be feature-normalized first.
pub fn embed_chunkset(model: &TrafficEncoder, set: &ChunkSet) -> Result<Vec<Embedding>> {
    if !set.normalized {
        return Err(Error::Input(
            "chunk set must be feature-normalized before encoding".into(),
        ));
    }
    use rayon::prelude::*;
    set.chunks
        .par_iter()
        .map(|c| encode_chunk(model, c))
        .collect()
}

// --- tape forward -----------------------------------------------------------

/// Parameter leaves registered on a tape, so the same forward definition
/// serves training (gradients w.r.t. parameters) and perturbation search
/// (gradients w.r.t. inputs).
pub struct TapeModel {
    pub config: EncoderConfig,
    pub vars: BTreeMap<String, VarId>,
}

impl TapeModel {
    pub fn register(tape: &mut Tape, model: &TrafficEncoder) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        TapeModel {
            config: model.config,
            vars,
        }
    }

    fn v(&self, name: &str) -> VarId {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Tape counterpart of [`encode_flow`]; `x` is an n x feature_dim leaf.
    pub fn flow_embedding(&self, tape: &mut Tape, x: VarId) -> VarId {
        let n = tape.value(x).nrows();
        let cfg = &self.config;
        let proj = tape.matmul(x, self.v("input.w"));
        let proj = tape.add_row(proj, self.v("input.b"));
        let pos = tape.gather_rows(self.v("pos.table"), (0..n).collect());
        let mut h = tape.add(proj, pos);
        for l in 0..cfg.num_attention_layers {
            h = self.encoder_layer(tape, l, h);
        }
        let pooled = tape.mean_rows(h);
        let out = tape.matmul(pooled, self.v("flow_proj.w"));
        tape.add_row(out, self.v("flow_proj.b"))
    }

    fn encoder_layer(&self, tape: &mut Tape, l: usize, h: VarId) -> VarId {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let dh = d / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(h, self.v(&format!("layer{l}.attn.wq")));
        let q = tape.add_row(q, self.v(&format!("layer{l}.attn.bq")));
        let k = tape.matmul(h, self.v(&format!("layer{l}.attn.wk")));
        let k = tape.add_row(k, self.v(&format!("layer{l}.attn.bk")));
        let v = tape.matmul(h, self.v(&format!("layer{l}.attn.wv")));
        let v = tape.add_row(v, self.v(&format!("layer{l}.attn.bv")));
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.affine(scores, scale, 0.0);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(heads);
        let o = tape.matmul(concat, self.v(&format!("layer{l}.attn.wo")));
        let o = tape.add_row(o, self.v(&format!("layer{l}.attn.bo")));
        let res1 = tape.add(h, o);
        let n1 = tape.layer_norm_rows(
            res1,
            self.v(&format!("layer{l}.ln1.gamma")),
            self.v(&format!("layer{l}.ln1.beta")),
        );
        let f1 = tape.matmul(n1, self.v(&format!("layer{l}.ffn.w1")));
        let f1 = tape.add_row(f1, self.v(&format!("layer{l}.ffn.b1")));
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, self.v(&format!("layer{l}.ffn.w2")));
        let f2 = tape.add_row(f2, self.v(&format!("layer{l}.ffn.b2")));
        let res2 = tape.add(n1, f2);
        tape.layer_norm_rows(
            res2,
            self.v(&format!("layer{l}.ln2.gamma")),
            self.v(&format!("layer{l}.ln2.beta")),
        )
    }

    /// Tape counterpart of [`encode_chunk`] over per-flow feature leaves.
    pub fn chunk_embedding(&self, tape: &mut Tape, flow_leaves: &[VarId]) -> VarId {
        assert!(!flow_leaves.is_empty(), "chunk must have flows");
        let embs: Vec<VarId> = flow_leaves
            .iter()
            .map(|&x| self.flow_embedding(tape, x))
            .collect();
        let stacked = tape.stack_rows(embs);
        let mean = tape.mean_rows(stacked);
        let agg = tape.matmul(mean, self.v("agg.w"));
        let agg = tape.add_row(agg, self.v("agg.b"));
        tape.l2_normalize_rows(agg)
    }
}

/// Registers a chunk's flow features as tape leaves.
pub fn chunk_feature_leaves(tape: &mut Tape, chunk: &Chunk) -> Vec<VarId> {
    chunk
        .flows
        .iter()
        .map(|f| tape.leaf(flow_features(f)))
        .collect()
}

// --- feature normalization --------------------------------------------------

/// Feature scaling fitted on the attacker training set: inter-arrival times
/// are log-compressed then z-scored, packet lengths z-scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub iat_mean: f64,
    pub iat_std: f64,
    pub len_mean: f64,
    pub len_std: f64,
    pub variance_floored: bool,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

impl NormalizationStats {
    pub fn normalize_iat(&self, iat_us: f64) -> f64 {
        ((1.0 + iat_us).ln() - self.iat_mean) / self.iat_std
    }

    pub fn normalize_len(&self, len: f64) -> f64 {
        (len - self.len_mean) / self.len_std
    }

    /// d(normalized)/d(raw) for the inter-arrival feature at `iat_us`.
    pub fn iat_jacobian(&self, iat_us: f64) -> f64 {
        1.0 / ((1.0 + iat_us) * self.iat_std)
    }

    /// d(normalized)/d(raw) for the length feature.
    pub fn len_jacobian(&self) -> f64 {
        1.0 / self.len_std
    }
}

/// Fits normalization statistics over every packet feature in the set.
pub fn compute_norm_stats(set: &ChunkSet) -> Result<NormalizationStats> {
    if set.chunks.is_empty() {
        return Err(Error::Input(
            "cannot fit normalization on an empty chunk set".into(),
        ));
    }
    if set.normalized {
        return Err(Error::Input(
            "chunk set is already normalized; fit on raw features".into(),
        ));
    }
    let mut iat = OnlineMoments::default();
    let mut len = OnlineMoments::default();
    for c in &set.chunks {
        for f in &c.flows {
            for i in 0..f.len() {
                iat.push((1.0 + f.iat_us[i]).ln());
                len.push(f.pkt_len[i]);
            }
        }
    }
    let mut floored = false;
    let mut std_of = |m: &OnlineMoments| -> f64 {
        let var = m.variance();
        if var < VARIANCE_FLOOR {
            floored = true;
            VARIANCE_FLOOR.sqrt()
        } else {
            var.sqrt()
        }
    };
    let iat_std = std_of(&iat);
    let len_std = std_of(&len);
    if floored {
        log::warn!("feature variance below {VARIANCE_FLOOR}; flooring");
    }
    Ok(NormalizationStats {
        iat_mean: iat.mean(),
        iat_std,
        len_mean: len.mean(),
        len_std,
        variance_floored: floored,
    })
}

/// Applies stored statistics, producing a normalized copy. Errors if the
/// set was normalized before: the transform is deliberately not idempotent
/// and the pipeline applies it exactly once.
pub fn apply_norm_stats(set: &ChunkSet, stats: &NormalizationStats) -> Result<ChunkSet> {
    if set.normalized {
        return Err(Error::Input(
            "chunk set already normalized; refusing to normalize twice".into(),
        ));
    }
    let mut out = set.clone();
    for c in &mut out.chunks {
        for f in &mut c.flows {
            for v in &mut f.iat_us {
                *v = stats.normalize_iat(*v);
            }
            for v in &mut f.pkt_len {
                *v = stats.normalize_len(*v);
            }
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Fits statistics on `set` and applies them: the one-call form used for
/// the attacker training set. Reuse the returned stats verbatim for the
/// validation, target, and synthetic sets.
pub fn normalize_features(set: &ChunkSet) -> Result<(ChunkSet, NormalizationStats)> {
    let stats = compute_norm_stats(set)?;
    let out = apply_norm_stats(set, &stats)?;
    Ok((out, stats))
}

#[derive(Default)]
struct OnlineMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl OnlineMoments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

// --- checkpoints -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: EncoderConfig,
    norm_stats: Option<NormalizationStats>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

const PARAMS_MAGIC: &[u8; 4] = b"TBP1";

/// Writes a checkpoint directory: `manifest.json` plus `params.bin`, a raw
/// little-endian f64 container in manifest order.
pub fn save_checkpoint(model: &TrafficEncoder, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays: Vec<ArrayEntry> = model
        .params
        .iter()
        .map(|(name, a)| ArrayEntry {
            name: name.clone(),
            rows: a.nrows(),
            cols: a.ncols(),
        })
        .collect();
    let manifest = CheckpointManifest {
        version: model.version,
        config: model.config,
        norm_stats: model.norm_stats,
        arrays,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join("params.bin");
    let file = std::fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut w = std::io::BufWriter::new(file);
    let total: usize = model.params.values().map(|a| a.len()).sum();
    w.write_all(PARAMS_MAGIC)
        .and_then(|_| w.write_all(&(total as u64).to_le_bytes()))
        .map_err(|e| Error::io(&bpath, e))?;
    for a in model.params.values() {
        for &v in a.iter() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&bpath, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrafficEncoder> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let bpath = dir.join("params.bin");
    let file = std::fs::File::open(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    let mut count = [0u8; 8];
    r.read_exact(&mut magic)
        .and_then(|_| r.read_exact(&mut count))
        .map_err(|e| Error::io(&bpath, e))?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Serialize("bad parameter container magic".into()));
    }
    let total = u64::from_le_bytes(count) as usize;
    let expected: usize = manifest.arrays.iter().map(|a| a.rows * a.cols).sum();
    if total != expected {
        return Err(Error::Serialize(format!(
            "parameter container holds {total} values, manifest expects {expected}"
        )));
    }
    let mut params = Parameters::new();
    for entry in &manifest.arrays {
        let mut data = vec![0f64; entry.rows * entry.cols];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| Error::io(&bpath, e))?;
            *v = f64::from_le_bytes(buf);
        }
        let array = Array2::from_shape_vec((entry.rows, entry.cols), data)
            .map_err(|e| Error::Serialize(e.to_string()))?;
        params.insert(entry.name.clone(), array);
    }
    let model = TrafficEncoder {
        config: manifest.config,
        params,
        version: manifest.version,
        norm_stats: manifest.norm_stats,
    };
    model.config.validate()?;
    Ok(model)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::chunk::FlowKey;
    use std::net::Ipv4Addr;

    pub fn test_flow(port: u16, features: &[(f64, f64)]) -> Flow {
        Flow {
            key: FlowKey {
                src_ip: Ipv4Addr::new(10, 0, 0, 1),
                dst_ip: Ipv4Addr::new(192, 0, 2, 1),
                src_port: 40000,
                dst_port: port,
                protocol: crate::trace::Protocol::Tcp,
            },
            iat_us: features.iter().map(|f| f.0).collect(),
            pkt_len: features.iter().map(|f| f.1).collect(),
            pkt_indices: (0..features.len()).collect(),
        }
    }

    pub fn random_chunk(seed: u64, flows: usize, pkts: usize) -> Chunk {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let flows = (0..flows)
            .map(|f| {
                let feats: Vec<(f64, f64)> = (0..pkts)
                    .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
                test_flow(1000 + f as u16, &feats)
            })
            .collect();
        Chunk {
            source: Ipv4Addr::new(10, 0, 0, 1),
            window_index: 0,
            window_start_us: 0,
            flows,
        }
    }
}
