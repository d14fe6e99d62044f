//! Flow-classifier comparison attack: a small convolutional network over
//! fixed-length per-flow features, trained to predict the source address,
//! with majority voting per target source at inference. Sources voted for
//! become IN; every other training source becomes OUT. The classifier can
//! only ever answer with labels seen during training.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackReport, MembershipVerdict, Verdict};
use crate::autodiff::Tape;
use crate::chunk::FlowKey;
use crate::error::{Error, Result};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfConfig {
    /// Packets per flow fed to the classifier, zero-padded.
    pub input_len: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DfConfig {
    fn default() -> Self {
        DfConfig {
            input_len: 100,
            conv1_channels: 8,
            conv2_channels: 16,
            kernel: 5,
            stride: 2,
            epochs: 10,
            batch_size: 32,
            learning_rate: 5e-2,
            seed: 0,
        }
    }
}

impl DfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_len < self.kernel {
            return Err(Error::Config(
                "input_len must be at least the kernel width".into(),
            ));
        }
        if self.kernel < 1 || self.stride < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "kernel, stride, and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DfNormStats {
    iat_mean: f64,
    iat_std: f64,
    len_mean: f64,
    len_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfModel {
    pub config: DfConfig,
    pub params: BTreeMap<String, Array2<f64>>,
    /// Class index -> source address.
    pub label_map: Vec<Ipv4Addr>,
    stats: DfNormStats,
}

/// Per-flow fixed-length feature matrix: the first `input_len` packets'
/// (log-scaled gap, length), z-scored with training statistics, zero-padded.
fn flow_matrix(iat_us: &[f64], lens: &[f64], stats: &DfNormStats, n: usize) -> Array2<f64> {
    let mut x = Array2::zeros((n, 2));
    for i in 0..iat_us.len().min(n) {
        x[[i, 0]] = ((1.0 + iat_us[i]).ln() - stats.iat_mean) / stats.iat_std;
        x[[i, 1]] = (lens[i] - stats.len_mean) / stats.len_std;
    }
    x
}

/// Extracts whole-trace five-tuple flows as (source, gaps, lengths).
fn extract_flows(trace: &Trace) -> Vec<(Ipv4Addr, Vec<f64>, Vec<f64>)> {
    let mut flows: BTreeMap<FlowKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in trace.packets().iter().enumerate() {
        flows
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
    flows
        .into_iter()
        .map(|(key, idxs)| {
            let packets = trace.packets();
            let mut iat = Vec::with_capacity(idxs.len());
            let mut len = Vec::with_capacity(idxs.len());
            for (j, &i) in idxs.iter().enumerate() {
                iat.push(if j == 0 {
                    0.0
                } else {
                    (packets[i].ts_us - packets[idxs[j - 1]].ts_us) as f64
                });
                len.push(packets[i].pkt_len as f64);
            }
            (key.src_ip, iat, len)
        })
        .collect()
}

fn init_params(config: &DfConfig, classes: usize, seed: u64) -> BTreeMap<String, Array2<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let xavier = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Array2<f64> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
    };
    params.insert(
        "conv1.w".into(),
        xavier(config.kernel * 2, config.conv1_channels, &mut rng),
    );
    params.insert("conv1.b".into(), Array2::zeros((1, config.conv1_channels)));
    params.insert(
        "conv2.w".into(),
        xavier(
            config.kernel * config.conv1_channels,
            config.conv2_channels,
            &mut rng,
        ),
    );
    params.insert("conv2.b".into(), Array2::zeros((1, config.conv2_channels)));
    params.insert(
        "out.w".into(),
        xavier(config.conv2_channels, classes, &mut rng),
    );
    params.insert("out.b".into(), Array2::zeros((1, classes)));
    params
}

/// Logits for one flow matrix (tape graph shared by training and inference).
fn logits_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, crate::autodiff::VarId>,
    x: crate::autodiff::VarId,
    config: &DfConfig,
) -> crate::autodiff::VarId {
    let c1 = tape.im2col(x, config.kernel, config.stride);
    let h1 = tape.matmul(c1, vars["conv1.w"]);
    let h1 = tape.add_row(h1, vars["conv1.b"]);
    let h1 = tape.relu(h1);
    let c2 = tape.im2col(h1, config.kernel, config.stride);
    let h2 = tape.matmul(c2, vars["conv2.w"]);
    let h2 = tape.add_row(h2, vars["conv2.b"]);
    let h2 = tape.relu(h2);
    let pooled = tape.mean_rows(h2);
    let out = tape.matmul(pooled, vars["out.w"]);
    tape.add_row(out, vars["out.b"])
}

/// Trains the classifier on the whole-trace flows of `trace_t`, labeling
/// each flow with its source address. Deterministic under the config seed.
pub fn df_train(trace_t: &Trace, config: &DfConfig) -> Result<DfModel> {
    config.validate()?;
    let flows = extract_flows(trace_t);
    let label_map: Vec<Ipv4Addr> = {
        let set: BTreeSet<Ipv4Addr> = flows.iter().map(|f| f.0).collect();
        set.into_iter().collect()
    };
    if label_map.len() < 2 {
        return Err(Error::Training(format!(
            "flow classifier needs >= 2 source classes, found {}",
            label_map.len()
        )));
    }
    // Feature statistics over the training flows.
    let mut sums = (0.0f64, 0.0f64);
    let mut sqs = (0.0f64, 0.0f64);
    let mut n = 0u64;
    for (_, iat, len) in &flows {
        for i in 0..iat.len() {
            let a = (1.0 + iat[i]).ln();
            sums.0 += a;
            sqs.0 += a * a;
            sums.1 += len[i];
            sqs.1 += len[i] * len[i];
            n += 1;
        }
    }
    let mean = (sums.0 / n as f64, sums.1 / n as f64);
    let var = (
        (sqs.0 / n as f64 - mean.0 * mean.0).max(1e-12),
        (sqs.1 / n as f64 - mean.1 * mean.1).max(1e-12),
    );
    let stats = DfNormStats {
        iat_mean: mean.0,
        iat_std: var.0.sqrt(),
        len_mean: mean.1,
        len_std: var.1.sqrt(),
    };

    let class_of: BTreeMap<Ipv4Addr, usize> = label_map
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i))
        .collect();
    let mut params = init_params(config, label_map.len(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..flows.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars: BTreeMap<String, crate::autodiff::VarId> = params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect();
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &fi in batch {
                let (src, iat, len) = &flows[fi];
                let x = tape.leaf(flow_matrix(iat, len, &stats, config.input_len));
                rows.push(logits_on_tape(&mut tape, &vars, x, config));
                labels.push(class_of[src]);
            }
            let stacked = tape.stack_rows(rows);
            let probs = tape.softmax_rows(stacked);
            let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(r, &c)| (r, c)).collect();
            let p_true = tape.gather_elems(probs, idx);
            let lp = tape.ln(p_true);
            let sum = tape.sum_all(lp);
            let loss = tape.affine(sum, -1.0 / batch.len() as f64, 0.0);
            if !tape.value(loss)[[0, 0]].is_finite() {
                return Err(Error::Training("classifier loss diverged".into()));
            }
            let grads = tape.backward(loss);
            for (name, var) in &vars {
                let g = grads.get(*var, &tape);
                params
                    .get_mut(name)
                    .expect("registered parameter")
                    .scaled_add(-config.learning_rate, &g);
            }
        }
    }
    Ok(DfModel {
        config: *config,
        params,
        label_map,
        stats,
    })
}

/// Class prediction for one flow; logit ties resolve to the lowest index.
pub fn classify_flow(model: &DfModel, iat_us: &[f64], lens: &[f64]) -> usize {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, crate::autodiff::VarId> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
        .collect();
    let x = tape.leaf(flow_matrix(iat_us, lens, &model.stats, model.config.input_len));
    let logits = logits_on_tape(&mut tape, &vars, x, &model.config);
    argmax_lowest(tape.value(logits).row(0).as_slice().unwrap())
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfInference {
    pub predicted_in: BTreeSet<Ipv4Addr>,
    /// Per target source: (voted training label, vote fraction, flows voted).
    pub votes: BTreeMap<Ipv4Addr, (Ipv4Addr, f64, usize)>,
    /// Some target sources were never seen at training time; votes still
    /// land on training labels (the closed-set limitation).
    pub forced_label: bool,
}

/// Classifies every flow of each target source and majority-votes a label;
/// vote ties resolve to the lowest class index. The voted labels form the
/// predicted-IN set.
pub fn df_infer(model: &DfModel, trace_d: &Trace) -> Result<DfInference> {
    if trace_d.is_empty() {
        return Err(Error::Input("target trace is empty".into()));
    }
    let flows = extract_flows(trace_d);
    let mut by_source: BTreeMap<Ipv4Addr, Vec<usize>> = BTreeMap::new();
    for (i, (src, _, _)) in flows.iter().enumerate() {
        by_source.entry(*src).or_default().push(i);
    }
    let training_labels: BTreeSet<Ipv4Addr> = model.label_map.iter().copied().collect();
    let mut predicted_in = BTreeSet::new();
    let mut votes = BTreeMap::new();
    let mut forced_label = false;
    use rayon::prelude::*;
    let classified: Vec<usize> = flows
        .par_iter()
        .map(|(_, iat, len)| classify_flow(model, iat, len))
        .collect();
    for (src, idxs) in by_source {
        if !training_labels.contains(&src) {
            forced_label = true;
        }
        let mut counts = vec![0usize; model.label_map.len()];
        for &i in &idxs {
            counts[classified[i]] += 1;
        }
        let winner = argmax_lowest(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        let label = model.label_map[winner];
        predicted_in.insert(label);
        votes.insert(
            src,
            (label, counts[winner] as f64 / idxs.len() as f64, idxs.len()),
        );
    }
    Ok(DfInference {
        predicted_in,
        votes,
        forced_label,
    })
}

/// Wraps the voted labels into the toolkit's uniform attack report: voted
/// training sources are IN, all remaining training sources OUT.
pub fn df_attack_report(
    model: &DfModel,
    inference: &DfInference,
    ground_truth: &BTreeMap<Ipv4Addr, bool>,
) -> Result<AttackReport> {
    let verdicts: Vec<MembershipVerdict> = model
        .label_map
        .iter()
        .map(|src| {
            let is_in = inference.predicted_in.contains(src);
            MembershipVerdict {
                source: *src,
                verdict: if is_in { Verdict::In } else { Verdict::Out },
                n_chunks: 0,
                n_close: 0,
                p_value_close: if is_in { 0.0 } else { 1.0 },
                p_value_far: if is_in { 1.0 } else { 0.0 },
                conflict: false,
            }
        })
        .collect();
    crate::attack::score(&verdicts, ground_truth)
}
