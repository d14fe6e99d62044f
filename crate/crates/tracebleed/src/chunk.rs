//! Partitions a trace into per-source, per-window chunks of five-tuple
//! flows with per-packet (inter-arrival time, packet length) features.
//!
//! Windows slide with stride `S` over the trace and may overlap, so a
//! packet belongs to every window that covers it. Chunks that fail the
//! activity filter are removed, and sources ending up with too few chunks
//! are removed entirely with a reason code in the drop report.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Protocol, SyntheticTrace, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub window_us: i64,
    pub stride_us: i64,
    pub min_active_flows: usize,
    pub min_packets_per_flow: usize,
    pub min_chunks_per_source: usize,
    pub max_flows_per_chunk: usize,
    pub max_packets_per_flow: usize,
}

pub const DEFAULT_MIN_ACTIVE_FLOWS: usize = 3;
pub const DEFAULT_MIN_PACKETS_PER_FLOW: usize = 5;
pub const DEFAULT_MIN_CHUNKS_PER_SOURCE: usize = 10;
pub const DEFAULT_MAX_FLOWS_PER_CHUNK: usize = 64;
pub const DEFAULT_MAX_PACKETS_PER_FLOW: usize = 256;

impl ChunkConfig {
    pub fn with_window(window_us: i64, stride_us: i64) -> Self {
        ChunkConfig {
            window_us,
            stride_us,
            min_active_flows: DEFAULT_MIN_ACTIVE_FLOWS,
            min_packets_per_flow: DEFAULT_MIN_PACKETS_PER_FLOW,
            min_chunks_per_source: DEFAULT_MIN_CHUNKS_PER_SOURCE,
            max_flows_per_chunk: DEFAULT_MAX_FLOWS_PER_CHUNK,
            max_packets_per_flow: DEFAULT_MAX_PACKETS_PER_FLOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_us <= 0 || self.window_us <= 0 || self.stride_us > self.window_us {
            return Err(Error::Config(format!(
                "need 0 < stride <= window, got stride={}us window={}us",
                self.stride_us, self.window_us
            )));
        }
        for (name, v) in [
            ("min_active_flows", self.min_active_flows),
            ("min_packets_per_flow", self.min_packets_per_flow),
            ("min_chunks_per_source", self.min_chunks_per_source),
            ("max_flows_per_chunk", self.max_flows_per_chunk),
            ("max_packets_per_flow", self.max_packets_per_flow),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Derives the paper-style window configuration from the target trace:
/// the window is a tenth of the trace duration and the stride a tenth of
/// the window.
pub fn default_config(target: &Trace) -> Result<ChunkConfig> {
    let duration = target.duration_us();
    if duration <= 0 {
        return Err(Error::Config(
            "trace spans zero duration; cannot derive a window size".into(),
        ));
    }
    let window_us = (duration / 10).max(1);
    let stride_us = (window_us / 10).max(1);
    Ok(ChunkConfig::with_window(window_us, stride_us))
}

/// Five-tuple flow key.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

/// One flow inside one chunk window. `iat_us[0]` is always 0; subsequent
/// entries are gaps to the previous packet of the same flow within the
/// window. `pkt_indices` point back into the source trace so the defense
/// can write repaired features through to packets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub key: FlowKey,
    pub iat_us: Vec<f64>,
    pub pkt_len: Vec<f64>,
    pub pkt_indices: Vec<usize>,
}

impl Flow {
    pub fn len(&self) -> usize {
        self.iat_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iat_us.is_empty()
    }
}

/// All of one source's flows inside one sliding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub source: Ipv4Addr,
    pub window_index: usize,
    pub window_start_us: i64,
    pub flows: Vec<Flow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    /// Source had some active chunks but fewer than `min_chunks_per_source`.
    InsufficientChunks { had: usize },
    /// Source never produced an active chunk.
    NoActiveChunks,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    /// Inactive (filtered) chunk counts per source, including retained sources.
    pub inactive_chunks: BTreeMap<Ipv4Addr, usize>,
    pub dropped_sources: BTreeMap<Ipv4Addr, DropReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub chunks: Vec<Chunk>,
    pub config: ChunkConfig,
    pub source_index: BTreeMap<Ipv4Addr, Vec<usize>>,
    pub drop_report: DropReport,
    /// Set once feature normalization has been applied; guards against
    /// normalizing twice.
    pub normalized: bool,
}

impl ChunkSet {
    pub fn sources(&self) -> impl Iterator<Item = &Ipv4Addr> {
        self.source_index.keys()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Chunks a real trace. Windows are anchored at the trace's minimum
/// timestamp; the trailing partial window is kept when it passes the
/// activity filter.
pub fn chunk(trace: &Trace, config: &ChunkConfig) -> Result<ChunkSet> {
    config.validate()?;
    let packets = trace.packets();
    let mut candidate_chunks: Vec<Chunk> = Vec::new();
    let mut inactive: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    let mut all_sources: BTreeSet<Ipv4Addr> = BTreeSet::new();

    if let Some(t0) = trace.start_us() {
        let t_last = packets.last().unwrap().ts_us;
        let num_windows = ((t_last - t0) / config.stride_us) as usize + 1;
        for w in 0..num_windows {
            let start = t0 + w as i64 * config.stride_us;
            let end = start + config.window_us;
            let lo = packets.partition_point(|p| p.ts_us < start);
            let hi = packets.partition_point(|p| p.ts_us < end);
            if lo == hi {
                continue;
            }
            // Group by source, then five-tuple, preserving timestamp order.
            let mut per_source: BTreeMap<Ipv4Addr, BTreeMap<FlowKey, Vec<usize>>> =
                BTreeMap::new();
            for idx in lo..hi {
                let p = &packets[idx];
                let key = FlowKey {
                    src_ip: p.src_ip,
                    dst_ip: p.dst_ip,
                    src_port: p.src_port,
                    dst_port: p.dst_port,
                    protocol: p.protocol,
                };
                per_source
                    .entry(p.src_ip)
                    .or_default()
                    .entry(key)
                    .or_default()
                    .push(idx);
            }
            for (source, flow_map) in per_source {
                all_sources.insert(source);
                let active = flow_map
                    .values()
                    .filter(|idxs| idxs.len() >= config.min_packets_per_flow)
                    .count();
                if active < config.min_active_flows {
                    *inactive.entry(source).or_insert(0) += 1;
                    continue;
                }
                let mut flows: Vec<Flow> = flow_map
                    .into_iter()
                    .map(|(key, idxs)| build_flow(key, &idxs, packets, config))
                    .collect();
                if flows.len() > config.max_flows_per_chunk {
                    // Keep the flows with the most packets; ties break on key order.
                    flows.sort_by(|a, b| b.len().cmp(&a.len()).then(a.key.cmp(&b.key)));
                    flows.truncate(config.max_flows_per_chunk);
                    flows.sort_by(|a, b| a.key.cmp(&b.key));
                }
                candidate_chunks.push(Chunk {
                    source,
                    window_index: w,
                    window_start_us: start,
                    flows,
                });
            }
        }
    }

    // Enforce the per-source chunk minimum.
    let mut counts: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    for c in &candidate_chunks {
        *counts.entry(c.source).or_insert(0) += 1;
    }
    let mut dropped_sources: BTreeMap<Ipv4Addr, DropReason> = BTreeMap::new();
    for src in &all_sources {
        match counts.get(src) {
            None => {
                dropped_sources.insert(*src, DropReason::NoActiveChunks);
            }
            Some(&n) if n < config.min_chunks_per_source => {
                dropped_sources.insert(*src, DropReason::InsufficientChunks { had: n });
            }
            _ => {}
        }
    }
    let mut chunks: Vec<Chunk> = candidate_chunks
        .into_iter()
        .filter(|c| !dropped_sources.contains_key(&c.source))
        .collect();
    chunks.sort_by(|a, b| {
        a.window_index
            .cmp(&b.window_index)
            .then(a.source.cmp(&b.source))
    });
    let mut source_index: BTreeMap<Ipv4Addr, Vec<usize>> = BTreeMap::new();
    for (i, c) in chunks.iter().enumerate() {
        source_index.entry(c.source).or_default().push(i);
    }
    Ok(ChunkSet {
        chunks,
        config: *config,
        source_index,
        drop_report: DropReport {
            inactive_chunks: inactive,
            dropped_sources,
        },
        normalized: false,
    })
}

/// Chunks a synthetic trace with the same config used for the real trace.
/// Windows anchor at the synthetic trace's own minimum timestamp.
pub fn chunk_synthetic(synth: &SyntheticTrace, config: &ChunkConfig) -> Result<ChunkSet> {
    chunk(&synth.trace, config)
}

fn build_flow(
    key: FlowKey,
    idxs: &[usize],
    packets: &[crate::trace::PacketRecord],
    config: &ChunkConfig,
) -> Flow {
    let take = idxs.len().min(config.max_packets_per_flow);
    let mut iat_us = Vec::with_capacity(take);
    let mut pkt_len = Vec::with_capacity(take);
    let mut pkt_indices = Vec::with_capacity(take);
    let mut prev_ts = None;
    for &idx in &idxs[..take] {
        let p = &packets[idx];
        let iat = match prev_ts {
            None => 0,
            Some(prev) => p.ts_us - prev,
        };
        prev_ts = Some(p.ts_us);
        iat_us.push(iat as f64);
        pkt_len.push(p.pkt_len as f64);
        pkt_indices.push(idx);
    }
    Flow {
        key,
        iat_us,
        pkt_len,
        pkt_indices,
    }
}

// --- directory serialization -----------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ChunkDirManifest {
    config: ChunkConfig,
    normalized: bool,
    drop_report: DropReport,
    sources: Vec<SourceFileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SourceFileEntry {
    source: Ipv4Addr,
    file: String,
    chunks: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkLine {
    window_index: usize,
    window_start_us: i64,
    flows: Vec<Flow>,
}

/// Writes a chunk set as a directory of per-source feature files plus a
/// manifest recording config and drop report.
pub fn save_chunkset(set: &ChunkSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sources = Vec::new();
    for (source, idxs) in &set.source_index {
        let file = format!("src_{}.jsonl", source.to_string().replace('.', "_"));
        let path = dir.join(&file);
        let mut out = String::new();
        for &i in idxs {
            let c = &set.chunks[i];
            let line = ChunkLine {
                window_index: c.window_index,
                window_start_us: c.window_start_us,
                flows: c.flows.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        sources.push(SourceFileEntry {
            source: *source,
            file,
            chunks: idxs.len(),
        });
    }
    let manifest = ChunkDirManifest {
        config: set.config,
        normalized: set.normalized,
        drop_report: set.drop_report.clone(),
        sources,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads a chunk set previously written by [`save_chunkset`].
pub fn load_chunkset(dir: impl AsRef<Path>) -> Result<ChunkSet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: ChunkDirManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let mut chunks = Vec::new();
    for entry in &manifest.sources {
        let path = dir.join(&entry.file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines() {
            let parsed: ChunkLine = serde_json::from_str(line)?;
            chunks.push(Chunk {
                source: entry.source,
                window_index: parsed.window_index,
                window_start_us: parsed.window_start_us,
                flows: parsed.flows,
            });
        }
    }
    chunks.sort_by(|a, b| {
        a.window_index
            .cmp(&b.window_index)
            .then(a.source.cmp(&b.source))
    });
    let mut source_index: BTreeMap<Ipv4Addr, Vec<usize>> = BTreeMap::new();
    for (i, c) in chunks.iter().enumerate() {
        source_index.entry(c.source).or_default().push(i);
    }
    Ok(ChunkSet {
        chunks,
        config: manifest.config,
        source_index,
        drop_report: manifest.drop_report,
        normalized: manifest.normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::PacketRecord;
    use rand::Rng;
    use rand::SeedableRng;

    fn pkt(ts_us: i64, src: u8, dst_port: u16, len: u32) -> PacketRecord {
        PacketRecord {
            ts_us,
            src_ip: Ipv4Addr::new(10, 0, 0, src),
            dst_ip: Ipv4Addr::new(192, 0, 2, 1),
            src_port: 40000,
            dst_port,
            protocol: Protocol::Tcp,
            pkt_len: len,
        }
    }

    /// One source, `flows` distinct flows per window, `pkts` packets per flow,
    /// repeated over `windows` non-overlapping windows of one second.
    fn grid_trace(flows: u16, pkts: usize, windows: usize) -> Trace {
        let mut packets = Vec::new();
        for w in 0..windows {
            let base = w as i64 * 1_000_000;
            for f in 0..flows {
                for p in 0..pkts {
                    packets.push(pkt(base + p as i64 * 1000, 1, 1000 + f, 100));
                }
            }
        }
        Trace::from_packets(packets, "grid")
    }

    fn grid_config() -> ChunkConfig {
        let mut c = ChunkConfig::with_window(1_000_000, 1_000_000);
        c.min_chunks_per_source = 10;
        c
    }

    #[test]
    fn default_config_is_a_tenth_of_the_duration() {
        let trace = grid_trace(1, 2, 101); // spans 100 s and a bit
        let mut packets = trace.packets().to_vec();
        packets.truncate(packets.len() - 1);
        // Construct exactly 100 s span.
        let t = Trace::from_packets(
            vec![pkt(0, 1, 1000, 100), pkt(100_000_000, 1, 1000, 100)],
            "span",
        );
        let cfg = default_config(&t).unwrap();
        assert_eq!(cfg.window_us, 10_000_000);
        assert_eq!(cfg.stride_us, 1_000_000);

        let t1 = Trace::from_packets(
            vec![pkt(0, 1, 1000, 100), pkt(1_000_000, 1, 1000, 100)],
            "short",
        );
        let cfg1 = default_config(&t1).unwrap();
        assert_eq!(cfg1.window_us, 100_000);
        assert_eq!(cfg1.stride_us, 10_000);
    }

    #[test]
    fn default_config_rejects_single_timestamp_traces() {
        let t = Trace::from_packets(vec![pkt(5, 1, 1000, 100)], "point");
        assert!(matches!(default_config(&t).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn exactly_meeting_the_activity_filter_keeps_all_windows() {
        let trace = grid_trace(3, 5, 10);
        let set = chunk(&trace, &grid_config()).unwrap();
        let src = Ipv4Addr::new(10, 0, 0, 1);
        assert_eq!(set.source_index[&src].len(), 10);
        assert!(set.drop_report.dropped_sources.is_empty());
    }

    #[test]
    fn two_flows_per_window_is_inactive_everywhere() {
        let trace = grid_trace(2, 5, 10);
        let set = chunk(&trace, &grid_config()).unwrap();
        assert!(set.is_empty());
        let src = Ipv4Addr::new(10, 0, 0, 1);
        assert_eq!(
            set.drop_report.dropped_sources[&src],
            DropReason::NoActiveChunks
        );
        assert_eq!(set.drop_report.inactive_chunks[&src], 10);
    }

    #[test]
    fn sources_below_the_chunk_minimum_are_dropped_with_reason() {
        let trace = grid_trace(3, 5, 4);
        let set = chunk(&trace, &grid_config()).unwrap();
        assert!(set.is_empty());
        let src = Ipv4Addr::new(10, 0, 0, 1);
        assert_eq!(
            set.drop_report.dropped_sources[&src],
            DropReason::InsufficientChunks { had: 4 }
        );
    }

    #[test]
    fn first_packet_iat_is_zero_and_iats_reconstruct_timestamps() {
        let trace = grid_trace(3, 5, 10);
        let set = chunk(&trace, &grid_config()).unwrap();
        for c in &set.chunks {
            for f in &c.flows {
                assert_eq!(f.iat_us[0], 0.0);
                let first_ts = trace.packets()[f.pkt_indices[0]].ts_us as f64;
                for (k, &idx) in f.pkt_indices.iter().enumerate() {
                    let expect = trace.packets()[idx].ts_us as f64;
                    let got: f64 = first_ts + f.iat_us[..=k].iter().sum::<f64>();
                    assert_eq!(got, expect);
                }
            }
        }
    }

    /// Brute-force oracle: re-derive chunk membership with an independent
    /// window scan and compare the full structure.
    fn oracle_chunks(trace: &Trace, config: &ChunkConfig) -> Vec<(Ipv4Addr, usize, Vec<usize>)> {
        let packets = trace.packets();
        if packets.is_empty() {
            return Vec::new();
        }
        let t0 = packets[0].ts_us;
        let t_last = packets.last().unwrap().ts_us;
        let mut out = Vec::new();
        let mut w = 0usize;
        loop {
            let start = t0 + w as i64 * config.stride_us;
            if start > t_last {
                break;
            }
            let mut flows: BTreeMap<(Ipv4Addr, FlowKey), Vec<usize>> = BTreeMap::new();
            for (i, p) in packets.iter().enumerate() {
                if p.ts_us >= start && p.ts_us < start + config.window_us {
                    let key = FlowKey {
                        src_ip: p.src_ip,
                        dst_ip: p.dst_ip,
                        src_port: p.src_port,
                        dst_port: p.dst_port,
                        protocol: p.protocol,
                    };
                    flows.entry((p.src_ip, key)).or_default().push(i);
                }
            }
            let mut srcs: BTreeMap<Ipv4Addr, Vec<Vec<usize>>> = BTreeMap::new();
            for ((src, _), idxs) in flows {
                srcs.entry(src).or_default().push(idxs);
            }
            for (src, flow_lists) in srcs {
                let active = flow_lists
                    .iter()
                    .filter(|l| l.len() >= config.min_packets_per_flow)
                    .count();
                if active >= config.min_active_flows {
                    let mut all: Vec<usize> = flow_lists.into_iter().flatten().collect();
                    all.sort_unstable();
                    out.push((src, w, all));
                }
            }
            w += 1;
        }
        // Apply the per-source chunk minimum.
        let mut counts: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
        for (src, _, _) in &out {
            *counts.entry(*src).or_insert(0) += 1;
        }
        out.retain(|(src, _, _)| counts[src] >= config.min_chunks_per_source);
        out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn randomized_trace_matches_brute_force_window_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut packets = Vec::new();
        for _ in 0..4000 {
            packets.push(pkt(
                rng.random_range(0..20_000_000),
                rng.random_range(1..5),
                1000 + rng.random_range(0..6),
                rng.random_range(40..1500),
            ));
        }
        let trace = Trace::from_packets(packets, "rand");
        let mut config = ChunkConfig::with_window(3_000_000, 1_000_000);
        config.min_chunks_per_source = 3;
        // Large caps so the oracle need not model truncation.
        config.max_flows_per_chunk = 10_000;
        config.max_packets_per_flow = 10_000;

        let set = chunk(&trace, &config).unwrap();
        let expect = oracle_chunks(&trace, &config);
        assert_eq!(set.chunks.len(), expect.len());
        for (c, (src, w, idxs)) in set.chunks.iter().zip(&expect) {
            assert_eq!(c.source, *src);
            assert_eq!(c.window_index, *w);
            let mut got: Vec<usize> = c
                .flows
                .iter()
                .flat_map(|f| f.pkt_indices.iter().copied())
                .collect();
            got.sort_unstable();
            assert_eq!(&got, idxs);
        }
    }

    #[test]
    fn chunking_is_deterministic() {
        let trace = grid_trace(4, 6, 12);
        let config = grid_config();
        let a = chunk(&trace, &config).unwrap();
        let b = chunk(&trace, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_identical_to_real_chunks_identically() {
        let trace = grid_trace(3, 5, 10);
        let synth = SyntheticTrace {
            trace: trace.clone(),
            volume_multiplier: 1.0,
        };
        let config = grid_config();
        let a = chunk(&trace, &config).unwrap();
        let b = chunk_synthetic(&synth, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_chunks_keep_the_heaviest_flows() {
        let mut packets = Vec::new();
        // Five flows with 5..9 packets; cap at 3 flows.
        for f in 0..5u16 {
            for p in 0..(5 + f as usize) {
                packets.push(pkt(p as i64 * 1000, 1, 2000 + f, 100));
            }
        }
        let trace = Trace::from_packets(packets, "cap");
        let mut config = ChunkConfig::with_window(1_000_000, 1_000_000);
        config.min_chunks_per_source = 1;
        config.max_flows_per_chunk = 3;
        let set = chunk(&trace, &config).unwrap();
        assert_eq!(set.chunks.len(), 1);
        let kept: Vec<u16> = set.chunks[0].flows.iter().map(|f| f.key.dst_port).collect();
        assert_eq!(kept, vec![2002, 2003, 2004]);
    }

    #[test]
    fn long_flows_are_truncated_to_the_packet_cap() {
        let mut packets = Vec::new();
        for f in 0..3u16 {
            for p in 0..40 {
                packets.push(pkt(p as i64 * 1000, 1, 2000 + f, 100));
            }
        }
        let trace = Trace::from_packets(packets, "trunc");
        let mut config = ChunkConfig::with_window(1_000_000, 1_000_000);
        config.min_chunks_per_source = 1;
        config.max_packets_per_flow = 16;
        let set = chunk(&trace, &config).unwrap();
        assert!(set.chunks[0].flows.iter().all(|f| f.len() == 16));
    }

    #[test]
    fn chunkset_round_trips_through_directory_format() {
        let trace = grid_trace(3, 5, 10);
        let set = chunk(&trace, &grid_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_chunkset(&set, dir.path()).unwrap();
        let back = load_chunkset(dir.path()).unwrap();
        assert_eq!(set, back);
    }
}
