//! Membership-inference calibration and inference: per-chunk CLOSE/FAR
//! decisions against a candidate chunk set, exact binomial aggregation to
//! IN/OUT/UNSURE per source, and the attack-quality metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::chunk::ChunkSet;
use crate::encoder::{distance_unchecked, embed_chunkset, Embedding, TrafficEncoder};
use crate::error::{Error, Result};

pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub prior_close: f64,
    pub significance: f64,
    pub validation_accuracy: f64,
}

/// Minimum embedding distance from one probe chunk to any candidate chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub source: Ipv4Addr,
    /// Index of the probe chunk within its chunk set.
    pub chunk_index: usize,
    pub min_distance: f64,
    pub nearest_source: Ipv4Addr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    In,
    Out,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipVerdict {
    pub source: Ipv4Addr,
    pub verdict: Verdict,
    pub n_chunks: usize,
    pub n_close: usize,
    pub p_value_close: f64,
    pub p_value_far: f64,
    /// Both tails significant (possible under extreme priors); the CLOSE
    /// test wins and the conflict is surfaced here.
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSourceOutcome {
    pub source: Ipv4Addr,
    pub verdict: Verdict,
    pub n_chunks: usize,
    pub n_close: usize,
    pub p_value_close: f64,
    pub p_value_far: f64,
    pub conflict: bool,
    pub truth_in: Option<bool>,
}

/// The uniform attack report every attacker in the toolkit emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confident_ratio: f64,
    pub topk: BTreeMap<usize, f64>,
    pub inter_intra_ratio: Option<f64>,
    pub per_source: Vec<PerSourceOutcome>,
    /// No source was predicted IN; precision is reported as 0 by definition.
    pub zero_predicted_in: bool,
    /// How the FAR-test prior was derived (the complement of the CLOSE prior).
    pub far_prior_note: String,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

// --- distances ----------------------------------------------------------------

/// For every probe chunk, the minimum embedding distance over all candidate
/// chunks (regardless of candidate source) plus the arg-min source.
pub fn min_distances(
    model: &TrafficEncoder,
    probe: &ChunkSet,
    candidates: &ChunkSet,
) -> Result<Vec<DistanceRecord>> {
    if candidates.is_empty() {
        return Err(Error::Input("candidate chunk set is empty".into()));
    }
    let probe_embs = embed_chunkset(model, probe)?;
    let cand_embs = embed_chunkset(model, candidates)?;
    let probe_sources: Vec<Ipv4Addr> = probe.chunks.iter().map(|c| c.source).collect();
    let cand_sources: Vec<Ipv4Addr> = candidates.chunks.iter().map(|c| c.source).collect();
    Ok(min_distances_from_embeddings(
        &probe_embs,
        &probe_sources,
        &cand_embs,
        &cand_sources,
    ))
}

/// Distance records over precomputed embeddings, parallel over probe chunks.
pub fn min_distances_from_embeddings(
    probe_embs: &[Embedding],
    probe_sources: &[Ipv4Addr],
    cand_embs: &[Embedding],
    cand_sources: &[Ipv4Addr],
) -> Vec<DistanceRecord> {
    use rayon::prelude::*;
    assert!(!cand_embs.is_empty(), "candidates must be non-empty");
    probe_embs
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut best = f64::INFINITY;
            let mut best_j = 0usize;
            for (j, c) in cand_embs.iter().enumerate() {
                let d = distance_unchecked(e, c);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            DistanceRecord {
                source: probe_sources[i],
                chunk_index: i,
                min_distance: best,
                nearest_source: cand_sources[best_j],
            }
        })
        .collect()
}

/// Writes distance records as CSV for density plotting.
pub fn export_distances_csv(records: &[DistanceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialize(e.to_string()))?;
    w.write_record(["source", "chunk_index", "min_distance", "nearest_source"])
        .map_err(|e| Error::Serialize(e.to_string()))?;
    for r in records {
        w.write_record([
            r.source.to_string(),
            r.chunk_index.to_string(),
            format!("{:.17e}", r.min_distance),
            r.nearest_source.to_string(),
        ])
        .map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// --- calibration ---------------------------------------------------------------

/// Chooses the decision threshold on (distance, is_close_truth) pairs:
/// candidates are the midpoints between consecutive sorted distances plus
/// the extremes of the distance range; the candidate maximizing labeling
/// accuracy wins, smallest on ties. A chunk is predicted CLOSE when its
/// distance falls strictly below the threshold.
pub fn calibrate_from_distances(
    labeled: &[(f64, bool)],
    significance: f64,
    prior_close: f64,
) -> Result<CalibrationResult> {
    if labeled.is_empty() {
        return Err(Error::Calibration("no labeled distances".into()));
    }
    let n_close = labeled.iter().filter(|(_, c)| *c).count();
    if n_close == 0 || n_close == labeled.len() {
        return Err(Error::Calibration(
            "ground truth is all-CLOSE or all-FAR; threshold is unidentifiable".into(),
        ));
    }
    let mut dists: Vec<f64> = labeled.iter().map(|(d, _)| *d).collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.dedup();
    let mut candidates = Vec::with_capacity(dists.len() + 2);
    candidates.push(0.0);
    for w in dists.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(2.0);
    let mut best = (0usize, f64::INFINITY); // (correct, threshold)
    for &th in &candidates {
        let correct = labeled
            .iter()
            .filter(|(d, is_close)| (*d < th) == *is_close)
            .count();
        if correct > best.0 || (correct == best.0 && th < best.1) {
            best = (correct, th);
        }
    }
    Ok(CalibrationResult {
        threshold: best.1,
        prior_close,
        significance,
        validation_accuracy: best.0 as f64 / labeled.len() as f64,
    })
}

/// Calibrates against the validation set: every training chunk is labeled
/// CLOSE when its source also appears in validation, FAR otherwise; the
/// threshold maximizing that labeling's accuracy is chosen, and the CLOSE
/// prior is the fraction of training sources present in validation.
pub fn calibrate(
    model: &TrafficEncoder,
    chunks_t: &ChunkSet,
    chunks_v: &ChunkSet,
    significance: f64,
) -> Result<(CalibrationResult, Vec<DistanceRecord>)> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Calibration(format!(
            "significance must lie in (0,1), got {significance}"
        )));
    }
    let v_sources: BTreeSet<Ipv4Addr> = chunks_v.source_index.keys().copied().collect();
    let t_sources: Vec<Ipv4Addr> = chunks_t.source_index.keys().copied().collect();
    let shared = t_sources.iter().filter(|s| v_sources.contains(s)).count();
    if shared == 0 || shared == t_sources.len() {
        return Err(Error::Calibration(format!(
            "training and validation must share some sources and differ in others \
             (shared {shared} of {})",
            t_sources.len()
        )));
    }
    let prior_close = shared as f64 / t_sources.len() as f64;
    let records = min_distances(model, chunks_t, chunks_v)?;
    let labeled: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.min_distance, v_sources.contains(&r.source)))
        .collect();
    let calib = calibrate_from_distances(&labeled, significance, prior_close)?;
    Ok((calib, records))
}

// --- binomial inference ----------------------------------------------------------

/// Exact upper tail P[X >= k] for X ~ Binomial(n, p).
pub fn binomial_tail_geq(k: usize, n: usize, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("binomial p {p} outside [0,1]")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if k > n {
        return Ok(0.0);
    }
    let dist = Binomial::new(p, n as u64).map_err(|e| Error::Input(e.to_string()))?;
    Ok(dist.sf((k - 1) as u64))
}

/// Verdict for one source given its chunk counts: the CLOSE tail is tested
/// first at the calibrated prior, then the FAR tail at the complementary
/// prior; neither significant means UNSURE.
pub fn verdict_from_counts(
    n_chunks: usize,
    n_close: usize,
    calib: &CalibrationResult,
) -> Result<(Verdict, f64, f64, bool)> {
    let p_close = binomial_tail_geq(n_close, n_chunks, calib.prior_close)?;
    let p_far = binomial_tail_geq(n_chunks - n_close, n_chunks, 1.0 - calib.prior_close)?;
    let close_hit = p_close < calib.significance;
    let far_hit = p_far < calib.significance;
    let verdict = if close_hit {
        Verdict::In
    } else if far_hit {
        Verdict::Out
    } else {
        Verdict::Unsure
    };
    Ok((verdict, p_close, p_far, close_hit && far_hit))
}

/// Runs membership inference: per training-set source, counts how many of
/// its chunks land within the threshold of any target chunk and aggregates
/// with one-sided exact binomial tests.
pub fn infer_membership(
    model: &TrafficEncoder,
    calib: &CalibrationResult,
    chunks_t: &ChunkSet,
    target: &ChunkSet,
) -> Result<Vec<MembershipVerdict>> {
    let records = min_distances(model, chunks_t, target)?;
    infer_from_distances(&records, chunks_t, calib)
}

/// Inference core over precomputed distance records.
pub fn infer_from_distances(
    records: &[DistanceRecord],
    chunks_t: &ChunkSet,
    calib: &CalibrationResult,
) -> Result<Vec<MembershipVerdict>> {
    let mut verdicts = Vec::new();
    for (source, idxs) in &chunks_t.source_index {
        if idxs.is_empty() {
            log::warn!("source {source} has no chunks in the probe set; skipped");
            continue;
        }
        let n_chunks = idxs.len();
        let n_close = idxs
            .iter()
            .filter(|&&i| records[i].min_distance < calib.threshold)
            .count();
        let (verdict, p_close, p_far, conflict) = verdict_from_counts(n_chunks, n_close, calib)?;
        verdicts.push(MembershipVerdict {
            source: *source,
            verdict,
            n_chunks,
            n_close,
            p_value_close: p_close,
            p_value_far: p_far,
            conflict,
        });
    }
    Ok(verdicts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnsureMode {
    Keep,
    MajorityVote,
}

/// Optionally overrides UNSURE verdicts by majority vote: more than half
/// the chunks CLOSE means IN, otherwise OUT (exact half goes OUT).
pub fn resolve_unsure(
    mut verdicts: Vec<MembershipVerdict>,
    mode: UnsureMode,
) -> Vec<MembershipVerdict> {
    if mode == UnsureMode::Keep {
        return verdicts;
    }
    for v in &mut verdicts {
        if v.verdict == Verdict::Unsure {
            v.verdict = if 2 * v.n_close > v.n_chunks {
                Verdict::In
            } else {
                Verdict::Out
            };
        }
    }
    verdicts
}

// --- scoring -----------------------------------------------------------------

/// Scores verdicts against ground truth. UNSURE sources are excluded from
/// precision/recall (resolve them first to include them) but count against
/// the confident ratio.
pub fn score(
    verdicts: &[MembershipVerdict],
    ground_truth: &BTreeMap<Ipv4Addr, bool>,
) -> Result<AttackReport> {
    for v in verdicts {
        if !ground_truth.contains_key(&v.source) {
            return Err(Error::Input(format!(
                "ground truth missing source {}",
                v.source
            )));
        }
    }
    let scored: Vec<&MembershipVerdict> = verdicts
        .iter()
        .filter(|v| v.verdict != Verdict::Unsure)
        .collect();
    let predicted_in: Vec<&&MembershipVerdict> = scored
        .iter()
        .filter(|v| v.verdict == Verdict::In)
        .collect();
    let correct_in = predicted_in
        .iter()
        .filter(|v| ground_truth[&v.source])
        .count();
    let true_in_scored = scored.iter().filter(|v| ground_truth[&v.source]).count();
    let zero_predicted_in = predicted_in.is_empty();
    let precision = if zero_predicted_in {
        0.0
    } else {
        correct_in as f64 / predicted_in.len() as f64
    };
    let recall = if true_in_scored == 0 {
        0.0
    } else {
        correct_in as f64 / true_in_scored as f64
    };
    let confident_ratio = if verdicts.is_empty() {
        0.0
    } else {
        scored.len() as f64 / verdicts.len() as f64
    };
    let per_source = verdicts
        .iter()
        .map(|v| PerSourceOutcome {
            source: v.source,
            verdict: v.verdict,
            n_chunks: v.n_chunks,
            n_close: v.n_close,
            p_value_close: v.p_value_close,
            p_value_far: v.p_value_far,
            conflict: v.conflict,
            truth_in: ground_truth.get(&v.source).copied(),
        })
        .collect();
    Ok(AttackReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        confident_ratio,
        topk: BTreeMap::new(),
        inter_intra_ratio: None,
        per_source,
        zero_predicted_in,
        far_prior_note: "far test prior = 1 - prior_close".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkResult {
    pub rates: BTreeMap<usize, f64>,
    /// Requested k values larger than the candidate count, clamped to it.
    pub clamped: Vec<usize>,
}

/// Fraction of truly-IN probe chunks whose k nearest target chunks include
/// one from the same source.
pub fn topk_hit(
    model: &TrafficEncoder,
    probe: &ChunkSet,
    target: &ChunkSet,
    ks: &[usize],
    true_in: &BTreeSet<Ipv4Addr>,
) -> Result<TopkResult> {
    if target.is_empty() {
        return Err(Error::Input("target chunk set is empty".into()));
    }
    let probe_embs = embed_chunkset(model, probe)?;
    let target_embs = embed_chunkset(model, target)?;
    let target_sources: Vec<Ipv4Addr> = target.chunks.iter().map(|c| c.source).collect();
    let mut rates = BTreeMap::new();
    let mut clamped = Vec::new();
    let probe_idx: Vec<usize> = probe
        .chunks
        .iter()
        .enumerate()
        .filter(|(_, c)| true_in.contains(&c.source))
        .map(|(i, _)| i)
        .collect();
    if probe_idx.is_empty() {
        return Err(Error::Input(
            "no probe chunks belong to a truly-IN source".into(),
        ));
    }
    for &k_req in ks {
        let k = if k_req > target_embs.len() {
            log::warn!(
                "top-k {k_req} larger than candidate count {}; clamping",
                target_embs.len()
            );
            clamped.push(k_req);
            target_embs.len()
        } else {
            k_req
        };
        let mut hits = 0usize;
        for &i in &probe_idx {
            let src = probe.chunks[i].source;
            let mut dists: Vec<(f64, usize)> = target_embs
                .iter()
                .enumerate()
                .map(|(j, t)| (distance_unchecked(&probe_embs[i], t), j))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if dists[..k].iter().any(|(_, j)| target_sources[*j] == src) {
                hits += 1;
            }
        }
        rates.insert(k_req, hits as f64 / probe_idx.len() as f64);
    }
    Ok(TopkResult { rates, clamped })
}

/// Expected-value random-guess report: guessing IN with probability one half
/// yields precision |true IN| / |sources| and recall 1/2. The seed parameter
/// is accepted for interface uniformity; the expectation is deterministic.
pub fn random_guess_baseline(ground_truth: &BTreeMap<Ipv4Addr, bool>, _seed: u64) -> AttackReport {
    let total = ground_truth.len();
    let true_in = ground_truth.values().filter(|v| **v).count();
    let precision = if total == 0 {
        0.0
    } else {
        true_in as f64 / total as f64
    };
    let recall = 0.5;
    AttackReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        confident_ratio: 1.0,
        topk: BTreeMap::new(),
        inter_intra_ratio: None,
        per_source: Vec::new(),
        zero_predicted_in: total == 0,
        far_prior_note: "expected-value random guess".into(),
    }
}
