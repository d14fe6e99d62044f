//! Emulated traces with known per-source behavior: procedurally generated
//! website-load templates, users with peaked site preferences, Poisson
//! session arrivals, and a deliberately leaky synthetic generator used as
//! the attack/defense evaluation target.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::chunk::FlowKey;
use crate::error::{Error, Result};
use crate::trace::{PacketRecord, Protocol, SyntheticTrace, Trace};

/// Epoch-like base for emitted timestamps.
pub const BASE_TS_US: i64 = 1_600_000_000_000_000;

pub const LEN_BOUNDS: (u32, u32) = (40, 1500);

/// RNG stream id offsets, so users, sites, and synth copies never share a
/// stream even under the same seed.
const SITE_STREAM: u64 = 0x517e_0000;
const USER_STREAM: u64 = 0x05e7_0000;
const EMIT_STREAM: u64 = 0xe517_0000;
const SYNTH_STREAM: u64 = 0xc0de_0000;

/// One website load: the packet schedule of a single flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTemplate {
    /// (inter-arrival microseconds, packet length, destination port).
    pub packets: Vec<(i64, u32, u16)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_id: usize,
    pub loads: Vec<FlowTemplate>,
}

impl SiteProfile {
    pub fn median_pkt_len(&self) -> f64 {
        let mut lens: Vec<u32> = self
            .loads
            .iter()
            .flat_map(|l| l.packets.iter().map(|p| p.1))
            .collect();
        lens.sort_unstable();
        lens[lens.len() / 2] as f64
    }
}

/// Destination address assigned to a site, stable across runs.
pub fn site_dst_ip(site_id: usize) -> Ipv4Addr {
    Ipv4Addr::new(198, 18, (site_id / 250) as u8, (site_id % 250) as u8)
}

/// Relative jitter bounds applied across the loads of one site.
pub const LOAD_IAT_JITTER: f64 = 0.10;
pub const LOAD_LEN_JITTER: f64 = 0.03;

/// Builds `n_sites` site profiles with `loads_per_site` loads each. Sites
/// get distinct packet-length and timing regimes; loads within a site vary
/// only by bounded jitter. The first packet of every load is a 40-byte
/// handshake-style packet.
pub fn make_site_library(
    n_sites: usize,
    loads_per_site: usize,
    seed: u64,
) -> Result<Vec<SiteProfile>> {
    if n_sites < 1 || loads_per_site < 1 {
        return Err(Error::Config(
            "need at least one site and one load per site".into(),
        ));
    }
    let mut sites = Vec::with_capacity(n_sites);
    for site_id in 0..n_sites {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SITE_STREAM + site_id as u64);
        let span = (LEN_BOUNDS.1 - 200 - LEN_BOUNDS.0) as f64;
        let base_len = LEN_BOUNDS.0 as f64
            + 80.0
            + if n_sites == 1 {
                0.0
            } else {
                span * site_id as f64 / (n_sites - 1) as f64
            };
        // Log-spaced timing regimes from 1 ms to ~80 ms.
        let base_iat_us = if n_sites == 1 {
            5_000.0
        } else {
            1_000.0 * 80f64.powf(site_id as f64 / (n_sites - 1) as f64)
        };
        let base_pkts = 8 + (site_id % 6);
        let port: u16 = if site_id % 4 == 0 { 80 } else { 443 };
        let mut loads = Vec::with_capacity(loads_per_site);
        for _ in 0..loads_per_site {
            let n_pkts = (base_pkts as i64 + rng.random_range(-2..=2)).max(6) as usize;
            let mut packets = Vec::with_capacity(n_pkts);
            packets.push((0i64, LEN_BOUNDS.0, port));
            for _ in 1..n_pkts {
                let iat =
                    base_iat_us * (1.0 + rng.random_range(-LOAD_IAT_JITTER..LOAD_IAT_JITTER));
                let len = base_len * (1.0 + rng.random_range(-LOAD_LEN_JITTER..LOAD_LEN_JITTER));
                packets.push((
                    iat.max(1.0) as i64,
                    (len.round() as u32).clamp(LEN_BOUNDS.0, LEN_BOUNDS.1),
                    port,
                ));
            }
            loads.push(FlowTemplate { packets });
        }
        sites.push(SiteProfile { site_id, loads });
    }
    // Distinct behavior check: medians must separate the sites.
    let mut medians: Vec<f64> = sites.iter().map(|s| s.median_pkt_len()).collect();
    medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    medians.dedup();
    if medians.len() != n_sites {
        return Err(Error::Config(
            "site packet-length medians collide; increase spacing".into(),
        ));
    }
    Ok(sites)
}

pub const MAX_SITES_PER_USER: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: usize,
    pub site_subset: Vec<usize>,
    pub preference: Vec<f64>,
    pub src_ip: Ipv4Addr,
}

/// Builds user profiles: between 1 and 6 sites per user, a Dirichlet
/// preference over them, and a unique synthetic source address. Duplicate
/// (subset, preference) draws are resampled.
pub fn make_users(
    n_users: usize,
    sites: &[SiteProfile],
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<Vec<UserProfile>> {
    if n_users < 1 {
        return Err(Error::Config("need at least one user".into()));
    }
    if sites.is_empty() {
        return Err(Error::Config("site library is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(USER_STREAM);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut users = Vec::with_capacity(n_users);
    for user_id in 0..n_users {
        let mut attempt = 0;
        let profile = loop {
            attempt += 1;
            if attempt > 100 {
                return Err(Error::Config(format!(
                    "could not draw a unique profile for user {user_id} within 100 tries"
                )));
            }
            let k = rng.random_range(1..=MAX_SITES_PER_USER.min(sites.len()));
            let mut subset: Vec<usize> = Vec::with_capacity(k);
            while subset.len() < k {
                let s = rng.random_range(0..sites.len());
                if !subset.contains(&s) {
                    subset.push(s);
                }
            }
            subset.sort_unstable();
            let preference = sample_dirichlet(k, dirichlet_alpha, &mut rng)?;
            let key = format!(
                "{subset:?}|{:?}",
                preference
                    .iter()
                    .map(|p| (p * 1e9).round() as i64)
                    .collect::<Vec<_>>()
            );
            if seen.insert(key) {
                break UserProfile {
                    user_id,
                    site_subset: subset,
                    preference,
                    src_ip: Ipv4Addr::new(
                        10,
                        (user_id / 65536) as u8,
                        ((user_id / 256) % 256) as u8,
                        (user_id % 256) as u8,
                    ),
                };
            }
        };
        users.push(profile);
    }
    Ok(users)
}

/// Symmetric Dirichlet draw via normalized Gamma samples (valid for any
/// support size, unlike the const-generic Dirichlet type).
fn sample_dirichlet(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("gamma: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 1e-300 {
            return Ok(draws.iter().map(|d| d / total).collect());
        }
    }
}

/// Emission parameters for one activity segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitSpec {
    pub duration_s: f64,
    pub session_rate: f64,
    pub seed: u64,
    /// Offset of this segment's start relative to the scenario origin.
    pub start_offset_s: f64,
    /// Multiplies every template inter-arrival gap (behavioral drift knob).
    pub iat_scale: f64,
    /// Extra relative packet-length jitter applied at emission time.
    pub len_jitter_pct: f64,
}

impl EmitSpec {
    pub fn new(duration_s: f64, session_rate: f64, seed: u64) -> Self {
        EmitSpec {
            duration_s,
            session_rate,
            seed,
            start_offset_s: 0.0,
            iat_scale: 1.0,
            len_jitter_pct: 0.0,
        }
    }
}

/// Emits one trace: Poisson session arrivals per user over the segment
/// span; each session samples a site by preference and a load uniformly,
/// stamps packets with the user's source address, and offsets timestamps
/// to the session start. Output is sorted by timestamp.
pub fn emit_trace(
    users: &[UserProfile],
    sites: &[SiteProfile],
    duration_s: f64,
    session_rate: f64,
    seed: u64,
) -> Result<Trace> {
    emit_trace_with(users, sites, &EmitSpec::new(duration_s, session_rate, seed))
}

pub fn emit_trace_with(
    users: &[UserProfile],
    sites: &[SiteProfile],
    spec: &EmitSpec,
) -> Result<Trace> {
    if spec.duration_s <= 0.0 {
        return Err(Error::Config("segment duration must be positive".into()));
    }
    if spec.session_rate < 0.0 {
        return Err(Error::Config("session rate must be nonnegative".into()));
    }
    let mut packets = Vec::new();
    for user in users {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(EMIT_STREAM + user.user_id as u64);
        if spec.session_rate == 0.0 {
            continue;
        }
        let mut t = 0.0f64;
        loop {
            // Exponential gap between Poisson arrivals.
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            t += -u.ln() / spec.session_rate;
            if t >= spec.duration_s {
                break;
            }
            let site_idx = sample_preference(&user.preference, &mut rng);
            let site = &sites[user.site_subset[site_idx]];
            let load = &site.loads[rng.random_range(0..site.loads.len())];
            let src_port: u16 = rng.random_range(1024..65535);
            let dst_ip = site_dst_ip(site.site_id);
            let session_start_us = BASE_TS_US + ((spec.start_offset_s + t) * 1e6).round() as i64;
            let mut ts = session_start_us;
            for (i, &(iat_us, len, dst_port)) in load.packets.iter().enumerate() {
                if i > 0 {
                    ts += (iat_us as f64 * spec.iat_scale).round().max(1.0) as i64;
                }
                let len = if spec.len_jitter_pct > 0.0 {
                    let jitter = 1.0 + rng.random_range(-spec.len_jitter_pct..spec.len_jitter_pct);
                    ((len as f64 * jitter).round() as u32).clamp(LEN_BOUNDS.0, LEN_BOUNDS.1)
                } else {
                    len
                };
                packets.push(PacketRecord {
                    ts_us: ts,
                    src_ip: user.src_ip,
                    dst_ip,
                    src_port,
                    dst_port,
                    protocol: Protocol::Tcp,
                    pkt_len: len,
                });
            }
        }
    }
    Ok(Trace::from_packets(packets, "sim"))
}

fn sample_preference(preference: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in preference.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    preference.len() - 1
}

/// One activity segment of a composed scenario, addressing a contiguous
/// user range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub user_start: usize,
    pub user_end: usize,
    pub start_offset_s: f64,
    pub duration_s: f64,
    pub session_rate: f64,
    pub iat_scale: f64,
    pub len_jitter_pct: f64,
    pub seed_offset: u64,
}

/// A full scenario: site library, users, and activity segments. Serialized
/// as the scenario descriptor for exact reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_sites: usize,
    pub loads_per_site: usize,
    pub n_users: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub segments: Vec<SegmentSpec>,
}

pub fn default_dirichlet_alpha() -> f64 {
    0.3
}

/// Builds the scenario trace by emitting every segment and merging.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<(Trace, Vec<UserProfile>)> {
    let sites = make_site_library(spec.n_sites, spec.loads_per_site, spec.seed)?;
    let users = make_users(spec.n_users, &sites, spec.dirichlet_alpha, spec.seed)?;
    let mut packets = Vec::new();
    for (i, seg) in spec.segments.iter().enumerate() {
        if seg.user_start >= seg.user_end || seg.user_end > users.len() {
            return Err(Error::Config(format!(
                "segment {i} addresses users [{}, {}) outside 0..{}",
                seg.user_start,
                seg.user_end,
                users.len()
            )));
        }
        let emit = EmitSpec {
            duration_s: seg.duration_s,
            session_rate: seg.session_rate,
            seed: spec.seed ^ seg.seed_offset,
            start_offset_s: seg.start_offset_s,
            iat_scale: seg.iat_scale,
            len_jitter_pct: seg.len_jitter_pct,
        };
        let segment_trace = emit_trace_with(&users[seg.user_start..seg.user_end], &sites, &emit)?;
        packets.extend_from_slice(segment_trace.packets());
    }
    Ok((Trace::from_packets(packets, "sim-scenario"), users))
}

/// Inputs for the standard three-group evaluation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeGroupSpec {
    pub n_sites: usize,
    pub loads_per_site: usize,
    /// Users active through the whole capture (end up IN the target data).
    pub group_a: usize,
    /// Users active through training and validation spans only.
    pub group_b: usize,
    /// Users active in the training span only.
    pub group_c: usize,
    pub session_rate: f64,
    /// Approximate total packet budget across all segments.
    pub target_packets: usize,
    pub gap_s: f64,
    /// Behavioral drift applied to the final (target) segment.
    pub drift_iat_scale: f64,
    pub drift_len_jitter: f64,
    pub seed: u64,
}

/// Builds a scenario whose packet mass is split roughly 78% / 11% / 11%
/// across three activity segments: everyone, groups A+B, then group A
/// alone. With a 9:1 / 8:1 packet-count split, the reference/target cut
/// lands inside the third segment and the training/validation cut inside
/// the second, so group B is never in the target partition and group C
/// never reaches validation.
pub fn three_group_scenario(spec: &ThreeGroupSpec) -> Result<ScenarioSpec> {
    let n = spec.group_a + spec.group_b + spec.group_c;
    if spec.group_a == 0 || spec.group_b == 0 || spec.group_c == 0 {
        return Err(Error::Config(
            "all three user groups must be non-empty".into(),
        ));
    }
    // Expected packets per session from the actual library.
    let sites = make_site_library(spec.n_sites, spec.loads_per_site, spec.seed)?;
    let total_pkts: usize = sites
        .iter()
        .flat_map(|s| s.loads.iter().map(|l| l.packets.len()))
        .sum();
    let total_loads: usize = sites.iter().map(|s| s.loads.len()).sum();
    let pkts_per_load = total_pkts as f64 / total_loads as f64;
    let lambda = spec.session_rate * pkts_per_load; // packets / user / second
    let p = spec.target_packets as f64;
    let t1 = 0.78 * p / (n as f64 * lambda);
    let t2 = 0.11 * p / ((spec.group_a + spec.group_b) as f64 * lambda);
    let t3 = 0.11 * p / (spec.group_a as f64 * lambda);
    Ok(ScenarioSpec {
        n_sites: spec.n_sites,
        loads_per_site: spec.loads_per_site,
        n_users: n,
        dirichlet_alpha: default_dirichlet_alpha(),
        seed: spec.seed,
        segments: vec![
            SegmentSpec {
                user_start: 0,
                user_end: n,
                start_offset_s: 0.0,
                duration_s: t1,
                session_rate: spec.session_rate,
                iat_scale: 1.0,
                len_jitter_pct: 0.0,
                seed_offset: 0,
            },
            SegmentSpec {
                user_start: 0,
                user_end: spec.group_a + spec.group_b,
                start_offset_s: t1 + spec.gap_s,
                duration_s: t2,
                session_rate: spec.session_rate,
                iat_scale: 1.0,
                len_jitter_pct: 0.0,
                seed_offset: 1,
            },
            SegmentSpec {
                user_start: 0,
                user_end: spec.group_a,
                start_offset_s: t1 + t2 + 2.0 * spec.gap_s,
                duration_s: t3,
                session_rate: spec.session_rate,
                iat_scale: spec.drift_iat_scale,
                len_jitter_pct: spec.drift_len_jitter,
                seed_offset: 2,
            },
        ],
    })
}

/// Deliberately leaky synthetic generator: concatenates `multiplier`
/// time-shifted copies of the reference trace, each with per-flow jitter on
/// gaps and lengths plus a systematic per-copy timing scale (alternating
/// stretch/compress, the way generators typically mis-fit timing). Later
/// copies use progressively tighter jitter, so sharing more volume exposes
/// closer-to-real samples. Source addresses are kept verbatim (that is the
/// leak).
pub fn leaky_synthetic(
    reference: &Trace,
    multiplier: usize,
    base_jitter: f64,
    seed: u64,
) -> Result<SyntheticTrace> {
    leaky_synthetic_with_decay(reference, multiplier, base_jitter, DEFAULT_JITTER_DECAY, seed)
}

/// Fraction of the base jitter removed by the tenth copy; higher values
/// make high-volume shares expose much closer samples.
pub const DEFAULT_JITTER_DECAY: f64 = 0.5;

pub fn leaky_synthetic_with_decay(
    reference: &Trace,
    multiplier: usize,
    base_jitter: f64,
    jitter_decay: f64,
    seed: u64,
) -> Result<SyntheticTrace> {
    if multiplier < 1 {
        return Err(Error::Config("multiplier must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&jitter_decay) {
        return Err(Error::Config("jitter_decay must lie in [0, 1]".into()));
    }
    if reference.is_empty() {
        return Err(Error::Input("reference trace is empty".into()));
    }
    let ref_start = reference.start_us().unwrap();
    let span = reference.duration_us() + 1_000_000;
    let mut packets = Vec::new();
    for copy in 0..multiplier {
        let decay = 1.0 - jitter_decay * copy as f64 / 10.0;
        let jitter = base_jitter * decay;
        let direction = if copy % 2 == 0 { 1.0 } else { -1.0 };
        let gap_scale = 1.0 + direction * 0.5 * base_jitter * decay;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SYNTH_STREAM + copy as u64);
        let shift = copy as i64 * span;
        // Rebuild per flow so gap jitter accumulates within flows.
        let mut flows: std::collections::BTreeMap<FlowKey, Vec<&PacketRecord>> =
            std::collections::BTreeMap::new();
        for p in reference.packets() {
            flows
                .entry(FlowKey {
                    src_ip: p.src_ip,
                    dst_ip: p.dst_ip,
                    src_port: p.src_port,
                    dst_port: p.dst_port,
                    protocol: p.protocol,
                })
                .or_default()
                .push(p);
        }
        for (_, flow_packets) in flows {
            let mut ts = flow_packets[0].ts_us - ref_start + shift + BASE_TS_US;
            for (i, p) in flow_packets.iter().enumerate() {
                if i > 0 {
                    let gap = (p.ts_us - flow_packets[i - 1].ts_us) as f64;
                    let j = 1.0 + rng.random_range(-jitter..=jitter);
                    ts += (gap * gap_scale * j).round().max(0.0) as i64;
                }
                let len_jitter = 1.0 + rng.random_range(-jitter..=jitter);
                let len = ((p.pkt_len as f64 * len_jitter).round() as u32)
                    .clamp(LEN_BOUNDS.0, LEN_BOUNDS.1);
                packets.push(PacketRecord {
                    ts_us: ts,
                    pkt_len: len,
                    ..**p
                });
            }
        }
    }
    Ok(SyntheticTrace {
        trace: Trace::from_packets(packets, format!("{}-synth", reference.label)),
        volume_multiplier: multiplier as f64,
    })
}
