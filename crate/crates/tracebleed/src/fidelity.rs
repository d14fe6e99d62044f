//! Divergence suite comparing a synthetic trace against the real target:
//! Jensen-Shannon divergence (base 2) over the categorical address/port
//! fields and 1-Wasserstein distance over the continuous per-source,
//! per-flow, and per-packet distributions, min-max normalized across the
//! compared generator set.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::chunk::FlowKey;
use crate::error::{Error, Result};
use crate::trace::{SyntheticTrace, Trace};

/// Empirical distributions of the fidelity fields. Categorical fields map
/// value to probability; continuous fields are sorted (value, probability)
/// supports.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistograms {
    pub sa: BTreeMap<Ipv4Addr, f64>,
    pub da: BTreeMap<Ipv4Addr, f64>,
    pub sp: BTreeMap<u16, f64>,
    pub dp: BTreeMap<u16, f64>,
    pub proto: BTreeMap<String, f64>,
    /// Flows per source.
    pub sfn: Vec<(f64, f64)>,
    /// Packets per source.
    pub spn: Vec<(f64, f64)>,
    /// Packet length.
    pub pl: Vec<(f64, f64)>,
    /// Per-flow inter-arrival times, pooled, in seconds.
    pub iat: Vec<(f64, f64)>,
    /// Flow length in packets.
    pub fl: Vec<(f64, f64)>,
}

pub const JSD_FIELDS: [&str; 4] = ["SA", "DA", "SP", "DP"];
pub const EMD_FIELDS: [&str; 5] = ["SFN", "SPN", "PL", "IAT", "FL"];

/// Computes every field distribution of a trace. Flows are five-tuple
/// groupings over the whole trace (not windowed).
pub fn field_histograms(trace: &Trace) -> Result<FieldHistograms> {
    if trace.is_empty() {
        return Err(Error::Input("cannot build histograms of an empty trace".into()));
    }
    let packets = trace.packets();
    let mut sa: BTreeMap<Ipv4Addr, u64> = BTreeMap::new();
    let mut da: BTreeMap<Ipv4Addr, u64> = BTreeMap::new();
    let mut sp: BTreeMap<u16, u64> = BTreeMap::new();
    let mut dp: BTreeMap<u16, u64> = BTreeMap::new();
    let mut proto: BTreeMap<String, u64> = BTreeMap::new();
    let mut pl: BTreeMap<u64, u64> = BTreeMap::new();
    let mut flows: BTreeMap<FlowKey, Vec<i64>> = BTreeMap::new();
    let mut per_source_packets: BTreeMap<Ipv4Addr, u64> = BTreeMap::new();
    for p in packets {
        *sa.entry(p.src_ip).or_insert(0) += 1;
        *da.entry(p.dst_ip).or_insert(0) += 1;
        *sp.entry(p.src_port).or_insert(0) += 1;
        *dp.entry(p.dst_port).or_insert(0) += 1;
        *proto.entry(p.protocol.to_string()).or_insert(0) += 1;
        *pl.entry(p.pkt_len as u64).or_insert(0) += 1;
        *per_source_packets.entry(p.src_ip).or_insert(0) += 1;
        flows
            .entry(FlowKey {
                src_ip: p.src_ip,
                dst_ip: p.dst_ip,
                src_port: p.src_port,
                dst_port: p.dst_port,
                protocol: p.protocol,
            })
            .or_default()
            .push(p.ts_us);
    }
    let mut per_source_flows: BTreeMap<Ipv4Addr, u64> = BTreeMap::new();
    let mut fl_counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut iat_counts: BTreeMap<i64, u64> = BTreeMap::new();
    for (key, ts) in &flows {
        *per_source_flows.entry(key.src_ip).or_insert(0) += 1;
        *fl_counts.entry(ts.len() as u64).or_insert(0) += 1;
        for w in ts.windows(2) {
            *iat_counts.entry(w[1] - w[0]).or_insert(0) += 1;
        }
    }
    let count_dist = |m: &BTreeMap<u64, u64>| -> Vec<(f64, f64)> {
        let total: u64 = m.values().sum();
        m.iter()
            .map(|(&v, &c)| (v as f64, c as f64 / total as f64))
            .collect()
    };
    let value_dist = |m: &BTreeMap<Ipv4Addr, u64>| -> Vec<(f64, f64)> {
        // Distribution of per-source counts: each source is one sample.
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for &v in m.values() {
            *counts.entry(v).or_insert(0) += 1;
        }
        count_dist(&counts)
    };
    let iat = if iat_counts.is_empty() {
        // Every flow is a single packet: model the gap distribution as a
        // point mass at zero so comparisons stay total.
        vec![(0.0, 1.0)]
    } else {
        let total: u64 = iat_counts.values().sum();
        iat_counts
            .iter()
            .map(|(&us, &c)| (us as f64 / 1e6, c as f64 / total as f64))
            .collect()
    };
    Ok(FieldHistograms {
        sa: normalize_categorical(&sa),
        da: normalize_categorical(&da),
        sp: normalize_categorical(&sp),
        dp: normalize_categorical(&dp),
        proto: normalize_categorical(&proto),
        sfn: value_dist(&per_source_flows),
        spn: value_dist(&per_source_packets),
        pl: count_dist(&pl),
        iat,
        fl: count_dist(&fl_counts),
    })
}

fn normalize_categorical<K: Ord + Clone>(m: &BTreeMap<K, u64>) -> BTreeMap<K, f64> {
    let total: u64 = m.values().sum();
    m.iter()
        .map(|(k, &c)| (k.clone(), c as f64 / total as f64))
        .collect()
}

/// Jensen-Shannon divergence with base-2 logarithm, bounded in [0, 1].
pub fn jsd<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Input("jsd of an empty distribution".into()));
    }
    let mut keys: Vec<&K> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut acc = 0.0;
    for k in keys {
        let pv = p.get(k).copied().unwrap_or(0.0);
        let qv = q.get(k).copied().unwrap_or(0.0);
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            acc += 0.5 * pv * (pv / m).log2();
        }
        if qv > 0.0 {
            acc += 0.5 * qv * (qv / m).log2();
        }
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// 1-Wasserstein distance between two finite 1-D distributions, computed by
/// integrating the absolute CDF difference over the merged support.
pub fn emd_1d(p: &[(f64, f64)], q: &[(f64, f64)]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Input("emd of an empty distribution".into()));
    }
    let norm = |d: &[(f64, f64)]| -> Result<Vec<(f64, f64)>> {
        let total: f64 = d.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Input("emd distribution has zero mass".into()));
        }
        let mut v: Vec<(f64, f64)> = d.iter().map(|&(x, w)| (x, w / total)).collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Ok(v)
    };
    let p = norm(p)?;
    let q = norm(q)?;
    let mut xs: Vec<f64> = p.iter().map(|t| t.0).chain(q.iter().map(|t| t.0)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let mut acc = 0.0;
    let (mut cp, mut cq) = (0.0, 0.0);
    let (mut i, mut j) = (0usize, 0usize);
    for w in 0..xs.len() {
        let x = xs[w];
        while i < p.len() && p[i].0 <= x {
            cp += p[i].1;
            i += 1;
        }
        while j < q.len() && q[j].0 <= x {
            cq += q[j].1;
            j += 1;
        }
        if w + 1 < xs.len() {
            acc += (cp - cq).abs() * (xs[w + 1] - x);
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub jsd: BTreeMap<String, f64>,
    pub emd_raw: BTreeMap<String, f64>,
    pub emd_norm: BTreeMap<String, f64>,
    pub mean_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFidelity {
    pub name: String,
    /// None when the generator produced an empty trace.
    pub report: Option<FidelityReport>,
    pub empty_output: bool,
}

/// Compares each named synthetic trace against the real one. Raw distances
/// are computed per field; the normalized distance divides by the maximum
/// raw distance any generator in the set reached on that field, and the
/// mean fidelity averages the categorical divergences with the normalized
/// continuous distances (lower is better).
pub fn fidelity_report(
    real: &Trace,
    synth_set: &[(String, &SyntheticTrace)],
    include_protocol: bool,
) -> Result<Vec<GeneratorFidelity>> {
    if synth_set.is_empty() {
        return Err(Error::Input("need at least one synthetic trace".into()));
    }
    let real_h = field_histograms(real)?;
    struct RawEntry {
        name: String,
        jsd: BTreeMap<String, f64>,
        emd_raw: BTreeMap<String, f64>,
        empty: bool,
    }
    let mut raw = Vec::new();
    for (name, synth) in synth_set {
        if synth.trace.is_empty() {
            log::warn!("generator {name} produced an empty trace; reporting null metrics");
            raw.push(RawEntry {
                name: name.clone(),
                jsd: BTreeMap::new(),
                emd_raw: BTreeMap::new(),
                empty: true,
            });
            continue;
        }
        let h = field_histograms(&synth.trace)?;
        let mut jsd_map = BTreeMap::new();
        jsd_map.insert("SA".into(), jsd(&real_h.sa, &h.sa)?);
        jsd_map.insert("DA".into(), jsd(&real_h.da, &h.da)?);
        jsd_map.insert("SP".into(), jsd(&real_h.sp, &h.sp)?);
        jsd_map.insert("DP".into(), jsd(&real_h.dp, &h.dp)?);
        if include_protocol {
            jsd_map.insert("PROTO".into(), jsd(&real_h.proto, &h.proto)?);
        }
        let mut emd_map = BTreeMap::new();
        emd_map.insert("SFN".into(), emd_1d(&real_h.sfn, &h.sfn)?);
        emd_map.insert("SPN".into(), emd_1d(&real_h.spn, &h.spn)?);
        emd_map.insert("PL".into(), emd_1d(&real_h.pl, &h.pl)?);
        emd_map.insert("IAT".into(), emd_1d(&real_h.iat, &h.iat)?);
        emd_map.insert("FL".into(), emd_1d(&real_h.fl, &h.fl)?);
        raw.push(RawEntry {
            name: name.clone(),
            jsd: jsd_map,
            emd_raw: emd_map,
            empty: false,
        });
    }
    // Min-max normalization across the generator set (min pinned at 0).
    let mut field_max: BTreeMap<String, f64> = BTreeMap::new();
    for entry in raw.iter().filter(|e| !e.empty) {
        for (field, &v) in &entry.emd_raw {
            let m = field_max.entry(field.clone()).or_insert(0.0);
            if v > *m {
                *m = v;
            }
        }
    }
    let mut out = Vec::new();
    for entry in raw {
        if entry.empty {
            out.push(GeneratorFidelity {
                name: entry.name,
                report: None,
                empty_output: true,
            });
            continue;
        }
        let emd_norm: BTreeMap<String, f64> = entry
            .emd_raw
            .iter()
            .map(|(field, &v)| {
                let max = field_max[field];
                (field.clone(), if max > 0.0 { v / max } else { 0.0 })
            })
            .collect();
        let mut values: Vec<f64> = entry.jsd.values().copied().collect();
        values.extend(emd_norm.values().copied());
        let mean_fidelity = values.iter().sum::<f64>() / values.len() as f64;
        out.push(GeneratorFidelity {
            name: entry.name,
            report: Some(FidelityReport {
                jsd: entry.jsd,
                emd_raw: entry.emd_raw,
                emd_norm,
                mean_fidelity,
            }),
            empty_output: false,
        });
    }
    Ok(out)
}

/// CSV matrix (generator x metric) for the report plotter.
pub fn fidelity_csv(reports: &[GeneratorFidelity]) -> Result<String> {
    let mut header = vec!["generator".to_string()];
    header.extend(JSD_FIELDS.iter().map(|f| format!("jsd_{f}")));
    header.extend(EMD_FIELDS.iter().map(|f| format!("emd_norm_{f}")));
    header.push("mean_fidelity".into());
    let mut out = header.join(",");
    out.push('\n');
    for g in reports {
        let mut row = vec![g.name.clone()];
        match &g.report {
            Some(r) => {
                for f in JSD_FIELDS {
                    row.push(format!("{}", r.jsd.get(f).copied().unwrap_or(f64::NAN)));
                }
                for f in EMD_FIELDS {
                    row.push(format!("{}", r.emd_norm.get(f).copied().unwrap_or(f64::NAN)));
                }
                row.push(format!("{}", r.mean_fidelity));
            }
            None => {
                for _ in 0..JSD_FIELDS.len() + EMD_FIELDS.len() + 1 {
                    row.push("".into());
                }
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
