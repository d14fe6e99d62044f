//! Obfuscates a synthetic trace so the membership attack degrades to
//! random-guess quality while bounded constraint repair preserves fidelity.
//!
//! Each round: re-chunk the working trace, find chunks whose embedding
//! lands within the calibrated threshold of a reference chunk, run
//! projected-gradient ascent on the embedding distance to the matched
//! reference, repair the suggested features under linear constraints
//! (nonnegative gaps, bounded per-flow duration change, bounded integer
//! lengths), balance per-source speed-up/slow-down directions, and write
//! the repaired features back to packet timestamps and lengths. Repairs
//! apply window-by-window in ascending window order; later windows read
//! already-perturbed packets.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{self, CalibrationResult};
use crate::chunk::{chunk_synthetic, ChunkConfig, ChunkSet, Flow, FlowKey};
use crate::encoder::{
    apply_norm_stats, distance_unchecked, embed_chunkset, Embedding,
    NormalizationStats, TapeModel, TrafficEncoder,
};
use crate::error::{Error, Result};
use crate::fidelity;
use crate::trace::{PacketRecord, SyntheticTrace, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub rounds: usize,
    /// Per-step travel as a fraction of the projection box.
    pub step_size: f64,
    pub steps_per_round: usize,
    /// Max relative per-packet gap perturbation.
    pub epsilon_iat: f64,
    /// Max absolute packet-length perturbation in bytes.
    pub epsilon_len: f64,
    /// Relative bound on per-flow duration change per repair.
    pub duration_tolerance: f64,
    pub len_bounds: (u32, u32),
    /// Alternate net speed-up/slow-down across sources.
    pub direction_balance: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            rounds: 5,
            step_size: 0.25,
            steps_per_round: 20,
            epsilon_iat: 0.5,
            epsilon_len: 120.0,
            duration_tolerance: 0.05,
            len_bounds: (40, 1500),
            direction_balance: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.duration_tolerance) {
            return Err(Error::Config("duration_tolerance must lie in [0, 1)".into()));
        }
        if self.step_size <= 0.0 || self.steps_per_round < 1 {
            return Err(Error::Config("step_size and steps_per_round must be positive".into()));
        }
        if self.epsilon_iat < 0.0 || self.epsilon_len < 0.0 {
            return Err(Error::Config("epsilon bounds must be nonnegative".into()));
        }
        if self.len_bounds.0 < 1 || self.len_bounds.0 > self.len_bounds.1 {
            return Err(Error::Config("len_bounds must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// A synthetic chunk whose embedding sits within the calibrated threshold
/// of some reference chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerableChunk {
    pub chunk_idx: usize,
    pub min_distance: f64,
    pub matched_source: Ipv4Addr,
    pub matched_ref_idx: usize,
}

/// Synthetic chunks closer than the threshold to any reference chunk.
pub fn find_vulnerable(
    model: &TrafficEncoder,
    calib: &CalibrationResult,
    synth_chunks: &ChunkSet,
    reference_chunks: &ChunkSet,
) -> Result<Vec<VulnerableChunk>> {
    let synth_embs = embed_chunkset(model, synth_chunks)?;
    let ref_embs = embed_chunkset(model, reference_chunks)?;
    let ref_sources: Vec<Ipv4Addr> = reference_chunks.chunks.iter().map(|c| c.source).collect();
    Ok(find_vulnerable_from_embeddings(
        &synth_embs,
        &ref_embs,
        &ref_sources,
        calib.threshold,
    ))
}

pub fn find_vulnerable_from_embeddings(
    synth_embs: &[Embedding],
    ref_embs: &[Embedding],
    ref_sources: &[Ipv4Addr],
    threshold: f64,
) -> Vec<VulnerableChunk> {
    let mut out = Vec::new();
    for (i, e) in synth_embs.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for (j, r) in ref_embs.iter().enumerate() {
            let d = distance_unchecked(e, r);
            if d < best {
                best = d;
                best_j = j;
            }
        }
        if best < threshold {
            out.push(VulnerableChunk {
                chunk_idx: i,
                min_distance: best,
                matched_source: ref_sources[best_j],
                matched_ref_idx: best_j,
            });
        }
    }
    out
}

/// Suggested raw-feature perturbation for one flow of a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSuggestion {
    pub key: FlowKey,
    pub iat_delta: Vec<f64>,
    pub len_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbOutcome {
    pub suggestions: Vec<FlowSuggestion>,
    pub objective_start: f64,
    pub objective_end: f64,
    pub aborted_nonfinite: bool,
}

/// Projected-gradient ascent on the embedding distance between the
/// perturbed chunk and the matched reference embedding. Operates on raw
/// feature space, chaining gradients through the stored normalization;
/// every step projects back into the epsilon box. The first gap of each
/// flow is pinned at zero by the relative box.
pub fn adversarial_perturb(
    model: &TrafficEncoder,
    stats: &NormalizationStats,
    chunk_raw: &crate::chunk::Chunk,
    matched: &Embedding,
    config: &DefenseConfig,
) -> Result<PerturbOutcome> {
    config.validate()?;
    let orig: Vec<(Vec<f64>, Vec<f64>)> = chunk_raw
        .flows
        .iter()
        .map(|f| (f.iat_us.clone(), f.pkt_len.clone()))
        .collect();
    let mut cur = orig.clone();
    let mut objective_start = None;
    let mut objective_end = 0.0;
    for _ in 0..config.steps_per_round {
        let mut tape = crate::autodiff::Tape::new();
        let tm = TapeModel::register(&mut tape, model);
        let mut leaves = Vec::with_capacity(cur.len());
        for (iat, len) in &cur {
            let mut x = ndarray::Array2::zeros((iat.len(), 2));
            for i in 0..iat.len() {
                x[[i, 0]] = stats.normalize_iat(iat[i]);
                x[[i, 1]] = stats.normalize_len(len[i]);
            }
            leaves.push(tape.leaf(x));
        }
        let emb = tm.chunk_embedding(&mut tape, &leaves);
        let matched_leaf = tape.leaf(
            matched
                .values()
                .clone()
                .insert_axis(ndarray::Axis(0)),
        );
        let prod = tape.mul(emb, matched_leaf);
        let s = tape.sum_all(prod);
        let objective = tape.affine(s, -1.0, 1.0);
        let value = tape.value(objective)[[0, 0]];
        if objective_start.is_none() {
            objective_start = Some(value);
        }
        objective_end = value;
        let grads = tape.backward(objective);
        let mut nonfinite = false;
        for (f, &leaf) in leaves.iter().enumerate() {
            let g = grads.get(leaf, &tape);
            if g.iter().any(|v| !v.is_finite()) {
                nonfinite = true;
                break;
            }
            let (iat, len) = &mut cur[f];
            let (orig_iat, orig_len) = &orig[f];
            for i in 0..iat.len() {
                let g_iat = g[[i, 0]] * stats.iat_jacobian(iat[i]);
                let g_len = g[[i, 1]] * stats.len_jacobian();
                let iat_radius = config.epsilon_iat * orig_iat[i];
                iat[i] += config.step_size * iat_radius * g_iat.signum_or_zero();
                iat[i] = iat[i]
                    .clamp(orig_iat[i] - iat_radius, orig_iat[i] + iat_radius)
                    .max(0.0);
                len[i] += config.step_size * config.epsilon_len * g_len.signum_or_zero();
                len[i] = len[i].clamp(
                    orig_len[i] - config.epsilon_len,
                    orig_len[i] + config.epsilon_len,
                );
            }
        }
        if nonfinite {
            log::warn!(
                "non-finite gradient while perturbing chunk (source {}, window {}); aborted",
                chunk_raw.source,
                chunk_raw.window_index
            );
            return Ok(PerturbOutcome {
                suggestions: Vec::new(),
                objective_start: objective_start.unwrap_or(0.0),
                objective_end,
                aborted_nonfinite: true,
            });
        }
    }
    let suggestions = chunk_raw
        .flows
        .iter()
        .zip(&cur)
        .zip(&orig)
        .map(|((flow, cur_f), orig_f)| FlowSuggestion {
            key: flow.key,
            iat_delta: cur_f.0.iter().zip(&orig_f.0).map(|(c, o)| c - o).collect(),
            len_delta: cur_f.1.iter().zip(&orig_f.1).map(|(c, o)| c - o).collect(),
        })
        .collect();
    Ok(PerturbOutcome {
        suggestions,
        objective_start: objective_start.unwrap_or(0.0),
        objective_end,
        aborted_nonfinite: false,
    })
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub iat: Vec<f64>,
    pub len: Vec<u32>,
    /// L1 distance between the adversarial suggestion and the repaired
    /// features (the compromise the constraints forced).
    pub objective_gap: f64,
    pub feasible: bool,
    pub sum_window: (f64, f64),
}

/// Repairs suggested features under the fidelity constraints: gaps stay
/// nonnegative, their sum stays inside `sum_window` (defaults to the
/// duration tolerance around the original sum), and lengths round to
/// integers inside the byte bounds. Minimizes the L1 distance to the
/// suggestion; ties are broken by honoring the largest suggested
/// deviations maximally, compensating on the least-deviant gaps first.
pub fn constraint_repair(
    original: &Flow,
    suggested_iat: &[f64],
    suggested_len: &[f64],
    config: &DefenseConfig,
    sum_window: Option<(f64, f64)>,
) -> Result<RepairOutcome> {
    let n = original.len();
    if suggested_iat.len() != n || suggested_len.len() != n {
        return Err(Error::Input(format!(
            "suggestion has {} gaps / {} lengths for a {n}-packet flow",
            suggested_iat.len(),
            suggested_len.len()
        )));
    }
    let orig_sum: f64 = original.iat_us.iter().sum();
    let (lo, hi) = sum_window.unwrap_or((
        orig_sum * (1.0 - config.duration_tolerance),
        orig_sum * (1.0 + config.duration_tolerance),
    ));

    // Lengths are separable: round toward the suggestion, clamp to bounds.
    let mut len_gap = 0.0;
    let len: Vec<u32> = suggested_len
        .iter()
        .map(|&s| {
            let v = (s.round() as i64).clamp(config.len_bounds.0 as i64, config.len_bounds.1 as i64)
                as u32;
            len_gap += (v as f64 - s).abs();
            v
        })
        .collect();

    // Gaps: project onto { x >= 0, lo <= sum x <= hi }.
    let mut x: Vec<f64> = suggested_iat.iter().map(|&s| s.max(0.0)).collect();
    let mut iat_gap: f64 = suggested_iat.iter().map(|&s| (-s).max(0.0)).sum();
    let total: f64 = x.iter().sum();
    // Adjustment order: least-deviant coordinates move first, so the
    // strongest adversarial suggestions survive.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = (suggested_iat[a] - original.iat_us[a]).abs();
        let db = (suggested_iat[b] - original.iat_us[b]).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    if total > hi {
        let mut excess = total - hi;
        for &i in &order {
            if excess <= 0.0 {
                break;
            }
            let take = x[i].min(excess);
            x[i] -= take;
            excess -= take;
            iat_gap += take;
        }
    } else if total < lo {
        let deficit = lo - total;
        // Any allocation costs the same in L1; spread evenly to keep single
        // gaps from ballooning.
        let share = deficit / n as f64;
        for v in &mut x {
            *v += share;
        }
        iat_gap += deficit;
    }
    Ok(RepairOutcome {
        iat: x,
        len,
        objective_gap: iat_gap + len_gap,
        feasible: true,
        sum_window: (lo, hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionTarget {
    SlowDown,
    SpeedUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlan {
    pub source: Ipv4Addr,
    /// Net duration change the adversarial suggestions ask for.
    pub planned_delta: f64,
    /// Total original duration of the flows scheduled for repair.
    pub original_duration: f64,
    pub assigned: Option<DirectionTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    pub plans: Vec<SourcePlan>,
    pub signed_sum_bound: f64,
    /// Estimated |signed sum| exceeded the bound (reported, not fatal).
    pub violated: bool,
    pub skipped_single_source: bool,
}

/// Assigns alternating net-direction targets so per-source duration deltas
/// cancel across the dataset: sources are processed by decreasing planned
/// magnitude and each one is pushed against the running signed sum.
pub fn balance_directions(mut plans: Vec<SourcePlan>, config: &DefenseConfig) -> BalanceOutcome {
    let bound =
        config.duration_tolerance * plans.iter().map(|p| p.original_duration).sum::<f64>();
    if plans.len() < 2 {
        log::warn!("direction balancing skipped: fewer than 2 sources scheduled");
        return BalanceOutcome {
            plans,
            signed_sum_bound: bound,
            violated: false,
            skipped_single_source: true,
        };
    }
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by(|&a, &b| {
        plans[b]
            .planned_delta
            .abs()
            .partial_cmp(&plans[a].planned_delta.abs())
            .unwrap()
            .then(plans[a].source.cmp(&plans[b].source))
    });
    let mut running = 0.0;
    for idx in order {
        let plan = &mut plans[idx];
        let dir = if running > 0.0 {
            DirectionTarget::SpeedUp
        } else if running < 0.0 {
            DirectionTarget::SlowDown
        } else if plan.planned_delta >= 0.0 {
            DirectionTarget::SlowDown
        } else {
            DirectionTarget::SpeedUp
        };
        let cap = config.duration_tolerance * plan.original_duration;
        let achieved = match dir {
            DirectionTarget::SlowDown => plan.planned_delta.clamp(0.0, cap),
            DirectionTarget::SpeedUp => plan.planned_delta.clamp(-cap, 0.0),
        };
        running += achieved;
        plan.assigned = Some(dir);
    }
    BalanceOutcome {
        violated: running.abs() > bound + 1e-9,
        plans,
        signed_sum_bound: bound,
        skipped_single_source: false,
    }
}

fn direction_window(
    orig_sum: f64,
    dir: Option<DirectionTarget>,
    tolerance: f64,
) -> (f64, f64) {
    match dir {
        Some(DirectionTarget::SlowDown) => (orig_sum, orig_sum * (1.0 + tolerance)),
        Some(DirectionTarget::SpeedUp) => (orig_sum * (1.0 - tolerance), orig_sum),
        None => (orig_sum * (1.0 - tolerance), orig_sum * (1.0 + tolerance)),
    }
}

/// Optional evaluation context: lets the round loop report the attack F1
/// and fidelity deltas after every round.
pub struct DefenseEval<'a> {
    pub probe_t: &'a ChunkSet,
    pub ground_truth: &'a BTreeMap<Ipv4Addr, bool>,
    pub real_trace: Option<&'a Trace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub vulnerable_count: usize,
    pub perturbed_sources: usize,
    pub repaired_flows: usize,
    pub constraint_violations: usize,
    pub balance_violated: bool,
    pub f1: Option<f64>,
    /// Relative change of mean fidelity versus the pre-defense synthetic.
    pub mean_fidelity_delta: Option<f64>,
    /// Absolute change on the shared-normalization [0,1] fidelity scale.
    pub mean_fidelity_delta_abs: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub rounds: Vec<RoundReport>,
    pub f1_before: Option<f64>,
    pub mean_fidelity_before: Option<f64>,
    pub mean_fidelity_after: Option<f64>,
    pub early_exit_round: Option<usize>,
    /// A later round measured a higher F1 than an earlier one.
    pub non_monotone_f1: bool,
    pub overlap_policy: String,
}

/// Runs the full obfuscation loop and returns the obfuscated trace plus a
/// per-round report.
pub fn tracepatch(
    model: &TrafficEncoder,
    calib: &CalibrationResult,
    synth: &SyntheticTrace,
    reference_chunks: &ChunkSet,
    chunk_cfg: &ChunkConfig,
    config: &DefenseConfig,
    eval: Option<&DefenseEval<'_>>,
) -> Result<(SyntheticTrace, DefenseReport)> {
    config.validate()?;
    let stats = model.norm_stats.ok_or_else(|| {
        Error::Input("model carries no normalization statistics; train it first".into())
    })?;
    let ref_norm;
    let reference = if reference_chunks.normalized {
        reference_chunks
    } else {
        ref_norm = apply_norm_stats(reference_chunks, &stats)?;
        &ref_norm
    };
    let ref_embs = embed_chunkset(model, reference)?;
    let ref_sources: Vec<Ipv4Addr> = reference.chunks.iter().map(|c| c.source).collect();

    let probe_norm = match eval {
        Some(e) if !e.probe_t.normalized => Some(apply_norm_stats(e.probe_t, &stats)?),
        _ => None,
    };

    // Fidelity is measured with the pre-defense and current traces as a
    // shared generator set, so the min-max normalization is comparable and
    // the relative change is meaningful.
    let fidelity_pair = |trace: &Trace| -> Result<Option<(f64, f64)>> {
        match eval.and_then(|e| e.real_trace) {
            Some(real) => {
                let before_view = SyntheticTrace {
                    trace: synth.trace.clone(),
                    volume_multiplier: synth.volume_multiplier,
                };
                let after_view = SyntheticTrace {
                    trace: trace.clone(),
                    volume_multiplier: synth.volume_multiplier,
                };
                let reports = fidelity::fidelity_report(
                    real,
                    &[("before".into(), &before_view), ("after".into(), &after_view)],
                    false,
                )?;
                match (&reports[0].report, &reports[1].report) {
                    (Some(b), Some(a)) => Ok(Some((b.mean_fidelity, a.mean_fidelity))),
                    _ => Ok(None),
                }
            }
            None => Ok(None),
        }
    };
    let attack_f1 = |chunks_norm: &ChunkSet| -> Result<Option<f64>> {
        match (eval, &probe_norm) {
            (Some(e), probe) => {
                let probe_set = probe.as_ref().unwrap_or(e.probe_t);
                if chunks_norm.is_empty() {
                    return Ok(None);
                }
                let verdicts = attack::infer_membership(model, calib, probe_set, chunks_norm)?;
                Ok(Some(attack::score(&verdicts, e.ground_truth)?.f1))
            }
            _ => Ok(None),
        }
    };

    let mut working: Vec<PacketRecord> = synth.trace.packets().to_vec();
    let mut report = DefenseReport {
        rounds: Vec::new(),
        f1_before: None,
        mean_fidelity_before: None,
        mean_fidelity_after: None,
        early_exit_round: None,
        non_monotone_f1: false,
        overlap_policy: "repairs apply in ascending window order; later windows read \
                         already-perturbed packets"
            .into(),
    };
    if let Some((before, _)) = fidelity_pair(&synth.trace)? {
        report.mean_fidelity_before = Some(before);
    }

    // Chunk + embed the current working trace.
    let chunk_and_embed = |packets: &[PacketRecord]| -> Result<(ChunkSet, ChunkSet, Vec<Embedding>)> {
        let trace = Trace::from_packets(packets.to_vec(), synth.trace.label.clone());
        let view = SyntheticTrace {
            trace,
            volume_multiplier: synth.volume_multiplier,
        };
        let raw = chunk_synthetic(&view, chunk_cfg)?;
        let norm = apply_norm_stats(&raw, &stats)?;
        let embs = embed_chunkset(model, &norm)?;
        Ok((raw, norm, embs))
    };

    let (mut cur_raw, mut cur_norm, mut cur_embs) = chunk_and_embed(&working)?;
    report.f1_before = attack_f1(&cur_norm)?;

    for round in 0..config.rounds {
        let started = Instant::now();
        let vulnerable =
            find_vulnerable_from_embeddings(&cur_embs, &ref_embs, &ref_sources, calib.threshold);
        if vulnerable.is_empty() {
            report.early_exit_round = Some(round);
            report.rounds.push(RoundReport {
                round,
                vulnerable_count: 0,
                perturbed_sources: 0,
                repaired_flows: 0,
                constraint_violations: 0,
                balance_violated: false,
                f1: report
                    .rounds
                    .last()
                    .and_then(|r| r.f1)
                    .or(report.f1_before),
                mean_fidelity_delta: None,
                mean_fidelity_delta_abs: None,
                wall_s: started.elapsed().as_secs_f64(),
            });
            break;
        }

        // Phase 1: adversarial suggestions from the round-start snapshot.
        use rayon::prelude::*;
        let outcomes: Vec<(usize, PerturbOutcome)> = vulnerable
            .par_iter()
            .map(|v| {
                let chunk = &cur_raw.chunks[v.chunk_idx];
                let matched = &ref_embs[v.matched_ref_idx];
                adversarial_perturb(model, &stats, chunk, matched, config)
                    .map(|o| (v.chunk_idx, o))
            })
            .collect::<Result<Vec<_>>>()?;

        // Phase 2: per-source direction targets from the planned deltas.
        let mut per_source: BTreeMap<Ipv4Addr, (f64, f64)> = BTreeMap::new();
        for (chunk_idx, outcome) in &outcomes {
            if outcome.aborted_nonfinite {
                continue;
            }
            let chunk = &cur_raw.chunks[*chunk_idx];
            let entry = per_source.entry(chunk.source).or_insert((0.0, 0.0));
            for (flow, s) in chunk.flows.iter().zip(&outcome.suggestions) {
                entry.0 += s.iat_delta.iter().sum::<f64>();
                entry.1 += flow.iat_us.iter().sum::<f64>();
            }
        }
        let plans: Vec<SourcePlan> = per_source
            .iter()
            .map(|(src, (delta, dur))| SourcePlan {
                source: *src,
                planned_delta: *delta,
                original_duration: *dur,
                assigned: None,
            })
            .collect();
        let balance = if config.direction_balance {
            balance_directions(plans, config)
        } else {
            BalanceOutcome {
                plans,
                signed_sum_bound: f64::INFINITY,
                violated: false,
                skipped_single_source: false,
            }
        };
        let direction_of: BTreeMap<Ipv4Addr, Option<DirectionTarget>> = balance
            .plans
            .iter()
            .map(|p| (p.source, p.assigned))
            .collect();

        // Phase 3: repair and write back, ascending (window, source). Each
        // chunk re-reads its packets so earlier repairs are observed.
        let mut ordered: Vec<(usize, &PerturbOutcome)> = outcomes
            .iter()
            .filter(|(_, o)| !o.aborted_nonfinite)
            .map(|(i, o)| (*i, o))
            .collect();
        ordered.sort_by(|a, b| {
            let ca = &cur_raw.chunks[a.0];
            let cb = &cur_raw.chunks[b.0];
            ca.window_index
                .cmp(&cb.window_index)
                .then(ca.source.cmp(&cb.source))
        });
        let mut repaired_flows = 0usize;
        let mut violations = 0usize;
        let mut touched_sources: std::collections::BTreeSet<Ipv4Addr> = Default::default();
        for (chunk_idx, outcome) in ordered {
            let chunk = &cur_raw.chunks[chunk_idx];
            touched_sources.insert(chunk.source);
            let dir = direction_of.get(&chunk.source).copied().flatten();
            let window_end = chunk.window_start_us + chunk_cfg.window_us;
            let suggestions: BTreeMap<FlowKey, &FlowSuggestion> =
                outcome.suggestions.iter().map(|s| (s.key, s)).collect();
            // Re-extract this (window, source) grouping from the live packets.
            let mut flows_now: BTreeMap<FlowKey, Vec<usize>> = BTreeMap::new();
            for (i, p) in working.iter().enumerate() {
                if p.src_ip == chunk.source
                    && p.ts_us >= chunk.window_start_us
                    && p.ts_us < window_end
                {
                    flows_now
                        .entry(FlowKey {
                            src_ip: p.src_ip,
                            dst_ip: p.dst_ip,
                            src_port: p.src_port,
                            dst_port: p.dst_port,
                            protocol: p.protocol,
                        })
                        .or_default()
                        .push(i);
                }
            }
            for (key, pkt_indices) in flows_now {
                let Some(suggestion) = suggestions.get(&key) else {
                    continue;
                };
                if suggestion.iat_delta.len() != pkt_indices.len() {
                    // Packets slid across the window boundary since the
                    // suggestion was computed; skip rather than guess.
                    continue;
                }
                let n = pkt_indices.len();
                let mut cur_iat = Vec::with_capacity(n);
                let mut cur_len = Vec::with_capacity(n);
                for (j, &pi) in pkt_indices.iter().enumerate() {
                    let gap = if j == 0 {
                        0.0
                    } else {
                        (working[pi].ts_us - working[pkt_indices[j - 1]].ts_us) as f64
                    };
                    cur_iat.push(gap);
                    cur_len.push(working[pi].pkt_len as f64);
                }
                let flow_view = Flow {
                    key,
                    iat_us: cur_iat.clone(),
                    pkt_len: cur_len.clone(),
                    pkt_indices: pkt_indices.clone(),
                };
                // Transfer the suggestion onto the current state; the first
                // gap is the window anchor and stays untouched.
                let mut sugg_iat: Vec<f64> = cur_iat
                    .iter()
                    .zip(&suggestion.iat_delta)
                    .map(|(c, d)| c + d)
                    .collect();
                sugg_iat[0] = 0.0;
                let sugg_len: Vec<f64> = cur_len
                    .iter()
                    .zip(&suggestion.len_delta)
                    .map(|(c, d)| c + d)
                    .collect();
                // Repair gaps 1..n (the anchor is fixed), against the
                // current duration.
                let tail_flow = Flow {
                    key,
                    iat_us: cur_iat[1..].to_vec(),
                    pkt_len: cur_len[1..].to_vec(),
                    pkt_indices: pkt_indices[1..].to_vec(),
                };
                let orig_tail_sum: f64 = cur_iat[1..].iter().sum();
                let window = direction_window(orig_tail_sum, dir, config.duration_tolerance);
                let repaired = if n > 1 {
                    constraint_repair(
                        &tail_flow,
                        &sugg_iat[1..],
                        &sugg_len[1..],
                        config,
                        Some(window),
                    )?
                } else {
                    RepairOutcome {
                        iat: Vec::new(),
                        len: Vec::new(),
                        objective_gap: 0.0,
                        feasible: true,
                        sum_window: window,
                    }
                };
                // First packet length still repairs (separable).
                let first_len = (sugg_len[0].round() as i64)
                    .clamp(config.len_bounds.0 as i64, config.len_bounds.1 as i64)
                    as u32;
                violations += verify_repair(&repaired, config, orig_tail_sum);
                // Write back: timestamps rebuilt by cumulative gaps from the
                // flow's first packet; lengths written directly.
                let first_ts = working[pkt_indices[0]].ts_us;
                working[pkt_indices[0]].pkt_len = first_len;
                let mut acc = 0.0;
                for (j, &pi) in pkt_indices.iter().enumerate().skip(1) {
                    acc += repaired.iat[j - 1];
                    working[pi].ts_us = first_ts + acc.round() as i64;
                    working[pi].pkt_len = repaired.len[j - 1];
                }
                repaired_flows += 1;
                debug_assert!(flow_view.len() == n);
            }
        }

        // Round complete: re-chunk for measurement and for the next round.
        let (next_raw, next_norm, next_embs) = chunk_and_embed(&working)?;
        cur_raw = next_raw;
        cur_norm = next_norm;
        cur_embs = next_embs;
        let f1 = attack_f1(&cur_norm)?;
        let pair = fidelity_pair(&Trace::from_packets(working.clone(), "current"))?;
        let mean_fidelity_delta = match pair {
            Some((before, after)) if before > 0.0 => Some((after - before) / before),
            Some((_, after)) => Some(after),
            None => None,
        };
        let mean_fidelity_delta_abs = pair.map(|(before, after)| after - before);
        if let Some((before, after)) = pair {
            report.mean_fidelity_before = Some(before);
            report.mean_fidelity_after = Some(after);
        }
        report.rounds.push(RoundReport {
            round,
            vulnerable_count: vulnerable.len(),
            perturbed_sources: touched_sources.len(),
            repaired_flows,
            constraint_violations: violations,
            balance_violated: balance.violated,
            f1,
            mean_fidelity_delta,
            mean_fidelity_delta_abs,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }

    // Flag non-monotone F1 across rounds.
    let f1s: Vec<f64> = report.rounds.iter().filter_map(|r| r.f1).collect();
    report.non_monotone_f1 = f1s.windows(2).any(|w| w[1] > w[0] + 1e-9);

    let obfuscated = SyntheticTrace {
        trace: Trace::from_packets(working, format!("{}-patched", synth.trace.label)),
        volume_multiplier: synth.volume_multiplier,
    };
    Ok((obfuscated, report))
}

/// Returns the number of violated repair constraints (0 when sound).
fn verify_repair(outcome: &RepairOutcome, config: &DefenseConfig, _orig_sum: f64) -> usize {
    let mut bad = 0;
    if outcome.iat.iter().any(|&v| v < 0.0) {
        bad += 1;
    }
    let sum: f64 = outcome.iat.iter().sum();
    if sum < outcome.sum_window.0 - 1e-6 || sum > outcome.sum_window.1 + 1e-6 {
        bad += 1;
    }
    if outcome
        .len
        .iter()
        .any(|&l| l < config.len_bounds.0 || l > config.len_bounds.1)
    {
        bad += 1;
    }
    bad
}
