//! Trains the traffic encoder with prototype-based contrastive learning.
//!
//! Batches are episodic: a handful of sources is drawn uniformly (so chunk
//! draws are balanced regardless of how many chunks each source has), a few
//! chunks per source are encoded, prototypes are recomputed from the batch,
//! and a focal-weighted softmax over embedding-prototype similarities is
//! minimized with plain SGD. Everything is deterministic under the config
//! seed.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::chunk::ChunkSet;
use crate::encoder::{
    chunk_feature_leaves, distance_unchecked, embed_chunkset, encode_chunk, Embedding,
    EncoderConfig, TapeModel, TrafficEncoder,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_sources: usize,
    pub chunks_per_source: usize,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_sources: 16,
            chunks_per_source: 4,
            temperature: 0.1,
            focal_gamma: 2.0,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sources < 2 {
            return Err(Error::Config("batch_sources must be >= 2".into()));
        }
        if self.chunks_per_source < 1 {
            return Err(Error::Config("chunks_per_source must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-source unit-norm prototype embeddings.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub prototypes: BTreeMap<Ipv4Addr, Embedding>,
}

/// Prototype of each requested source: the L2-normalized mean of its chunk
/// embeddings within `chunkset`.
pub fn compute_prototypes(
    model: &TrafficEncoder,
    chunkset: &ChunkSet,
    sources: &[Ipv4Addr],
) -> Result<PrototypeSet> {
    let mut prototypes = BTreeMap::new();
    for src in sources {
        let idxs = chunkset
            .source_index
            .get(src)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Input(format!("source {src} has no chunks")))?;
        let dim = model.config.traffic_embed_dim;
        let mut mean = ndarray::Array1::<f64>::zeros(dim);
        for &i in idxs {
            mean += &encode_chunk(model, &chunkset.chunks[i])?.values().view();
        }
        mean /= idxs.len() as f64;
        prototypes.insert(*src, normalize_mean(mean)?);
    }
    Ok(PrototypeSet { prototypes })
}

fn normalize_mean(mean: ndarray::Array1<f64>) -> Result<Embedding> {
    let norm = mean.dot(&mean).sqrt();
    if norm < 1e-12 {
        return Err(Error::Training(
            "prototype mean collapsed to the zero vector".into(),
        ));
    }
    Embedding::new(mean / norm)
}

/// Focal-weighted prototype contrastive loss.
///
/// For each chunk, `p` is the softmax over sources of the scaled
/// similarity to each prototype; the chunk contributes
/// `-(1 - p_true)^gamma * ln(p_true)`. With `gamma = 0` this is exactly the
/// mean cross-entropy over prototype logits.
pub fn prototype_focal_loss(
    embeddings: &[(Ipv4Addr, Embedding)],
    prototypes: &PrototypeSet,
    temperature: f64,
    focal_gamma: f64,
) -> Result<f64> {
    if prototypes.prototypes.len() < 2 {
        return Err(Error::Training(
            "need at least 2 source prototypes (no negatives otherwise)".into(),
        ));
    }
    let sources: Vec<&Ipv4Addr> = prototypes.prototypes.keys().collect();
    let mut total = 0.0;
    for (src, emb) in embeddings {
        let class = sources
            .iter()
            .position(|s| *s == src)
            .ok_or_else(|| Error::Training(format!("no prototype for source {src}")))?;
        let logits: Vec<f64> = sources
            .iter()
            .map(|s| emb.dot(&prototypes.prototypes[s]) / temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let p_true = (logits[class] - max).exp() / denom;
        total += -(1.0 - p_true).powf(focal_gamma) * p_true.ln();
    }
    Ok(total / embeddings.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_separation: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrafficEncoder,
    pub log: Vec<EpochLog>,
    /// Epoch whose checkpoint was returned (best validation separation).
    pub best_epoch: Option<usize>,
}

/// Trains a fresh encoder on `chunkset_t` (already feature-normalized).
///
/// When `chunkset_v` is given, the checkpoint with the best inter/intra
/// separation on it is returned; otherwise the final epoch wins. With
/// `epochs = 0` the initialized model is returned unchanged.
pub fn train(
    chunkset_t: &ChunkSet,
    chunkset_v: Option<&ChunkSet>,
    encoder_config: EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !chunkset_t.normalized {
        return Err(Error::Training(
            "training chunk set must be feature-normalized".into(),
        ));
    }
    let sources: Vec<Ipv4Addr> = chunkset_t.source_index.keys().copied().collect();
    if sources.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 sources to train, found {}",
            sources.len()
        )));
    }
    let mut model = TrafficEncoder::init(encoder_config, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_chunks = chunkset_t.len();
    let batch_chunks = config.batch_sources * config.chunks_per_source;
    let batches_per_epoch = (total_chunks / batch_chunks).max(1);

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, crate::encoder::Parameters)> = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for batch_idx in 0..batches_per_epoch {
            let batch = sample_batch(chunkset_t, &sources, config, &mut rng);
            let loss = train_step(&mut model, chunkset_t, &batch, config)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss;
        }
        let mean_loss = loss_sum / batches_per_epoch as f64;
        let val_separation = chunkset_v.and_then(|v| evaluate_separation(&model, v).ok());
        if let Some(ratio) = val_separation {
            let improved = best.as_ref().map(|(b, _, _)| ratio > *b).unwrap_or(true);
            if improved {
                best = Some((ratio, epoch, model.params.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            mean_loss,
            val_separation,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }
    let mut best_epoch = None;
    if let Some((_, epoch, params)) = best {
        model.params = params;
        best_epoch = Some(epoch);
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}

/// (source, chunk index) pairs for one episodic batch. Sources are drawn
/// uniformly without replacement, which equalizes expected chunk draws per
/// source; chunks are drawn without replacement where possible.
fn sample_batch(
    chunkset: &ChunkSet,
    sources: &[Ipv4Addr],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(Ipv4Addr, usize)> {
    let k = config.batch_sources.min(sources.len());
    let mut pool: Vec<Ipv4Addr> = sources.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    pool.sort_unstable();
    let mut batch = Vec::with_capacity(k * config.chunks_per_source);
    for src in pool {
        let idxs = &chunkset.source_index[&src];
        if idxs.len() >= config.chunks_per_source {
            let mut own: Vec<usize> = idxs.clone();
            own.shuffle(rng);
            for &i in own.iter().take(config.chunks_per_source) {
                batch.push((src, i));
            }
        } else {
            for _ in 0..config.chunks_per_source {
                batch.push((src, idxs[rng.random_range(0..idxs.len())]));
            }
        }
    }
    batch
}

/// One SGD step on the focal prototype loss over a batch; returns the loss.
fn train_step(
    model: &mut TrafficEncoder,
    chunkset: &ChunkSet,
    batch: &[(Ipv4Addr, usize)],
    config: &TrainConfig,
) -> Result<f64> {
    let (loss_value, grads) = batch_gradients(model, chunkset, batch, config)?;
    for (name, g) in grads {
        let p = model.params.get_mut(&name).expect("registered parameter");
        p.scaled_add(-config.learning_rate, &g);
    }
    Ok(loss_value)
}

/// Focal prototype loss of a batch plus the analytic parameter gradients
/// (tape route).
pub fn batch_gradients(
    model: &TrafficEncoder,
    chunkset: &ChunkSet,
    batch: &[(Ipv4Addr, usize)],
    config: &TrainConfig,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut tape = Tape::new();
    let tm = TapeModel::register(&mut tape, model);
    let mut embs = Vec::with_capacity(batch.len());
    for &(_, chunk_idx) in batch {
        let leaves = chunk_feature_leaves(&mut tape, &chunkset.chunks[chunk_idx]);
        embs.push(tm.chunk_embedding(&mut tape, &leaves));
    }
    let stacked = tape.stack_rows(embs);

    // In-batch prototypes over the batch's sources, in sorted order.
    let mut by_source: BTreeMap<Ipv4Addr, Vec<usize>> = BTreeMap::new();
    for (row, &(src, _)) in batch.iter().enumerate() {
        by_source.entry(src).or_default().push(row);
    }
    if by_source.len() < 2 {
        return Err(Error::Training(
            "batch holds a single source; no negatives to contrast against".into(),
        ));
    }
    let class_of: BTreeMap<Ipv4Addr, usize> = by_source
        .keys()
        .enumerate()
        .map(|(i, s)| (*s, i))
        .collect();
    let protos: Vec<_> = by_source
        .values()
        .map(|rows| {
            let gathered = tape.gather_rows(stacked, rows.clone());
            let mean = tape.mean_rows(gathered);
            tape.l2_normalize_rows(mean)
        })
        .collect();
    let proto_matrix = tape.stack_rows(protos);

    let logits = tape.matmul_nt(stacked, proto_matrix);
    let scaled = tape.affine(logits, 1.0 / config.temperature, 0.0);
    let probs = tape.softmax_rows(scaled);
    let idx: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .map(|(row, (src, _))| (row, class_of[src]))
        .collect();
    let p_true = tape.gather_elems(probs, idx);
    let one_minus = tape.affine(p_true, -1.0, 1.0);
    let weight = tape.pow_const(one_minus, config.focal_gamma);
    let log_p = tape.ln(p_true);
    let weighted = tape.mul(weight, log_p);
    let sum = tape.sum_all(weighted);
    let loss = tape.affine(sum, -1.0 / batch.len() as f64, 0.0);
    let loss_value = tape.value(loss)[[0, 0]];

    let grads = tape.backward(loss);
    let out = tm
        .vars
        .iter()
        .map(|(name, var)| (name.clone(), grads.get(*var, &tape)))
        .collect();
    Ok((loss_value, out))
}

/// The same batch loss evaluated through the plain (tape-free) forward
/// path: chunk embeddings, in-batch prototypes, focal weighting. Serves as
/// the independent route for finite-difference gradient checks.
pub fn batch_loss_plain(
    model: &TrafficEncoder,
    chunkset: &ChunkSet,
    batch: &[(Ipv4Addr, usize)],
    config: &TrainConfig,
) -> Result<f64> {
    let mut labeled = Vec::with_capacity(batch.len());
    for &(src, chunk_idx) in batch {
        labeled.push((src, encode_chunk(model, &chunkset.chunks[chunk_idx])?));
    }
    let mut by_source: BTreeMap<Ipv4Addr, Vec<usize>> = BTreeMap::new();
    for (row, &(src, _)) in batch.iter().enumerate() {
        by_source.entry(src).or_default().push(row);
    }
    let mut prototypes = BTreeMap::new();
    for (src, rows) in &by_source {
        let dim = model.config.traffic_embed_dim;
        let mut mean = ndarray::Array1::<f64>::zeros(dim);
        for &r in rows {
            mean += &labeled[r].1.values().view();
        }
        mean /= rows.len() as f64;
        prototypes.insert(*src, normalize_mean(mean)?);
    }
    prototype_focal_loss(
        &labeled,
        &PrototypeSet { prototypes },
        config.temperature,
        config.focal_gamma,
    )
}

/// Ratio cap applied when a chunk's same-source spread is exactly zero but
/// other sources are separated.
pub const MAX_SEPARATION_RATIO: f64 = 1e6;

/// Mean over chunks of (mean distance to other sources' chunks) / (mean
/// distance to same-source chunks). Sources with a single chunk are
/// excluded; both-zero means degrade to ratio 1.
pub fn evaluate_separation(model: &TrafficEncoder, chunkset: &ChunkSet) -> Result<f64> {
    if chunkset.source_index.len() < 2 {
        return Err(Error::Input("separation needs at least 2 sources".into()));
    }
    let embeddings = embed_chunkset(model, chunkset)?;
    let labels: Vec<Ipv4Addr> = chunkset.chunks.iter().map(|c| c.source).collect();
    separation_from_embeddings(&embeddings, &labels)
}

/// Separation ratio over precomputed embeddings; shared with the report
/// pipeline, which already holds embeddings.
pub fn separation_from_embeddings(embeddings: &[Embedding], labels: &[Ipv4Addr]) -> Result<f64> {
    let mut counts: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    let mut ratios = Vec::new();
    for (i, emb) in embeddings.iter().enumerate() {
        if counts[&labels[i]] < 2 {
            continue;
        }
        let mut intra_sum = 0.0;
        let mut intra_n = 0usize;
        let mut inter_sum = 0.0;
        let mut inter_n = 0usize;
        for (j, other) in embeddings.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = distance_unchecked(emb, other);
            if labels[j] == labels[i] {
                intra_sum += d;
                intra_n += 1;
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
        if inter_n == 0 {
            continue;
        }
        let intra = intra_sum / intra_n as f64;
        let inter = inter_sum / inter_n as f64;
        let ratio = if intra == 0.0 && inter == 0.0 {
            1.0
        } else if intra == 0.0 {
            MAX_SEPARATION_RATIO
        } else {
            (inter / intra).min(MAX_SEPARATION_RATIO)
        };
        ratios.push(ratio);
    }
    if ratios.is_empty() {
        return Err(Error::Input(
            "every source had fewer than 2 chunks; separation undefined".into(),
        ));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}
