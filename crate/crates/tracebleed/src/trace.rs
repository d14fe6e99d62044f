//! Canonical packet/trace data model, CSV ingestion/export, and temporal
//! dataset splitting into reference/target partitions.

use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transport protocol of a packet. Anything that is not TCP or UDP is
/// collapsed to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
    Other,
}

impl Protocol {
    pub fn from_ip_number(n: u8) -> Self {
        match n {
            6 => Protocol::Tcp,
            17 => Protocol::Udp,
            _ => Protocol::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Other => "OTHER",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "TCP" => Ok(Protocol::Tcp),
            "UDP" => Ok(Protocol::Udp),
            "OTHER" => Ok(Protocol::Other),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// One captured packet. Timestamps are stored at microsecond resolution to
/// match pcap's native precision and keep comparisons exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts_us: i64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub pkt_len: u32,
}

impl PacketRecord {
    /// Timestamp as fractional seconds since the epoch.
    pub fn timestamp_secs(&self) -> f64 {
        self.ts_us as f64 / 1e6
    }
}

/// A sequence of packets sorted by timestamp plus a free-form origin tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    packets: Vec<PacketRecord>,
    pub label: String,
}

impl Trace {
    /// Builds a trace, sorting packets by timestamp (stable, so equal
    /// timestamps keep their input order).
    pub fn from_packets(mut packets: Vec<PacketRecord>, label: impl Into<String>) -> Self {
        packets.sort_by_key(|p| p.ts_us);
        Trace {
            packets,
            label: label.into(),
        }
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.packets
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Duration in microseconds between the first and last packet.
    pub fn duration_us(&self) -> i64 {
        match (self.packets.first(), self.packets.last()) {
            (Some(first), Some(last)) => last.ts_us - first.ts_us,
            _ => 0,
        }
    }

    pub fn start_us(&self) -> Option<i64> {
        self.packets.first().map(|p| p.ts_us)
    }

    /// Distinct source addresses in timestamp order of first appearance.
    pub fn sources(&self) -> Vec<Ipv4Addr> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.packets {
            if seen.insert(p.src_ip) {
                out.push(p.src_ip);
            }
        }
        out
    }
}

/// A synthetic trace plus its size relative to the source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub trace: Trace,
    pub volume_multiplier: f64,
}

/// Temporal split of a trace into attacker training (T), attacker
/// validation (V), and the data-holder training target (D).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub t: Trace,
    pub v: Trace,
    pub d: Trace,
    pub r_rd: f64,
    pub r_tv: f64,
}

pub const DEFAULT_R_RD: f64 = 0.9;
pub const DEFAULT_R_TV: f64 = 8.0 / 9.0;

/// Splits `trace` by time: the first `r_rd` fraction of packets forms the
/// reference R (itself split `r_tv` into T and V) and the remainder D.
///
/// Fractions are counted over packets; packets sharing the boundary
/// timestamp all go to the earlier partition, so the cut points are
/// reproducible regardless of tie order.
pub fn split_by_time(trace: &Trace, r_rd: f64, r_tv: f64) -> Result<DatasetSplit> {
    if !(r_rd > 0.0 && r_rd < 1.0) || !(r_tv > 0.0 && r_tv < 1.0) {
        return Err(Error::Split(format!(
            "split fractions must lie in (0,1), got r_rd={r_rd}, r_tv={r_tv}"
        )));
    }
    if trace.is_empty() {
        return Err(Error::Split("cannot split an empty trace".into()));
    }
    let packets = trace.packets();
    let cut_rd = boundary_index(packets, r_rd);
    let (r_part, d_part) = packets.split_at(cut_rd);
    let cut_tv = boundary_index(r_part, r_tv);
    let (t_part, v_part) = r_part.split_at(cut_tv);
    for (name, part) in [("T", t_part), ("V", v_part), ("D", d_part)] {
        if part.is_empty() {
            return Err(Error::Split(format!(
                "partition {name} is empty for a {}-packet trace",
                packets.len()
            )));
        }
    }
    Ok(DatasetSplit {
        t: Trace::from_packets(t_part.to_vec(), format!("{}/T", trace.label)),
        v: Trace::from_packets(v_part.to_vec(), format!("{}/V", trace.label)),
        d: Trace::from_packets(d_part.to_vec(), format!("{}/D", trace.label)),
        r_rd,
        r_tv,
    })
}

/// Index of the first packet past the `fraction` cut, with boundary ties
/// absorbed into the earlier side.
fn boundary_index(packets: &[PacketRecord], fraction: f64) -> usize {
    let n = packets.len();
    let mut k = ((n as f64) * fraction).round() as usize;
    k = k.clamp(0, n);
    if k == 0 || k == n {
        return k;
    }
    let boundary_ts = packets[k - 1].ts_us;
    while k < n && packets[k].ts_us == boundary_ts {
        k += 1;
    }
    k
}

pub const CSV_HEADER: [&str; 7] = [
    "timestamp", "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "pkt_len",
];

/// Reads a trace from the canonical CSV schema
/// `timestamp,src_ip,dst_ip,src_port,dst_port,protocol,pkt_len`.
///
/// Row-level problems (bad address, out-of-range port, non-positive length)
/// abort with the offending line number.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::CsvSchema(e.to_string()))?
        .clone();
    if headers.len() != CSV_HEADER.len()
        || headers.iter().zip(CSV_HEADER).any(|(got, want)| got != want)
    {
        return Err(Error::CsvSchema(format!(
            "expected header {:?}, got {:?}",
            CSV_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut packets = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::CsvRow {
            line,
            reason: e.to_string(),
        })?;
        packets.push(parse_csv_row(&record, line)?);
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    Ok(Trace::from_packets(packets, label))
}

fn parse_csv_row(record: &csv::StringRecord, line: u64) -> Result<PacketRecord> {
    let field = |i: usize| -> Result<&str> {
        record.get(i).ok_or(Error::CsvRow {
            line,
            reason: format!("missing field {}", CSV_HEADER[i]),
        })
    };
    let row_err = |reason: String| Error::CsvRow { line, reason };

    let ts_us = parse_timestamp_us(field(0)?).map_err(|e| row_err(format!("timestamp: {e}")))?;
    let src_ip: Ipv4Addr = field(1)?
        .parse()
        .map_err(|e| row_err(format!("src_ip: {e}")))?;
    let dst_ip: Ipv4Addr = field(2)?
        .parse()
        .map_err(|e| row_err(format!("dst_ip: {e}")))?;
    let src_port = parse_port(field(3)?).map_err(|e| row_err(format!("src_port: {e}")))?;
    let dst_port = parse_port(field(4)?).map_err(|e| row_err(format!("dst_port: {e}")))?;
    let protocol: Protocol = field(5)?.parse().map_err(|e| row_err(format!("{e}")))?;
    let pkt_len: u32 = field(6)?
        .parse()
        .map_err(|e| row_err(format!("pkt_len: {e}")))?;
    if pkt_len == 0 {
        return Err(row_err("pkt_len must be >= 1".into()));
    }
    Ok(PacketRecord {
        ts_us,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        pkt_len,
    })
}

fn parse_port(s: &str) -> std::result::Result<u16, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    u16::try_from(v).map_err(|_| format!("port {v} outside [0, 65535]"))
}

/// Parses a fractional-seconds timestamp into microseconds without a float
/// detour, so values written by [`export_csv`] round-trip exactly. More than
/// six fractional digits are rounded half-up to microseconds.
pub fn parse_timestamp_us(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim();
    let (sec_str, frac_str) = match s.split_once('.') {
        Some((a, b)) => (a, b),
        None => (s, ""),
    };
    let secs: i64 = sec_str.parse().map_err(|e| format!("{e}"))?;
    if secs < 0 {
        return Err("negative timestamps are not supported".into());
    }
    if !frac_str.is_empty() && !frac_str.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("invalid fractional part {frac_str:?}"));
    }
    let mut micros: i64 = 0;
    if !frac_str.is_empty() {
        let digits: Vec<u8> = frac_str.bytes().map(|b| b - b'0').collect();
        for i in 0..6 {
            micros = micros * 10 + digits.get(i).copied().unwrap_or(0) as i64;
        }
        if digits.get(6).copied().unwrap_or(0) >= 5 {
            micros += 1;
        }
    }
    secs.checked_mul(1_000_000)
        .and_then(|v| v.checked_add(micros))
        .ok_or_else(|| "timestamp overflows microsecond range".into())
}

pub fn format_timestamp_us(ts_us: i64) -> String {
    format!("{}.{:06}", ts_us / 1_000_000, ts_us % 1_000_000)
}

/// Writes a trace in the canonical CSV schema.
pub fn export_csv(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::Serialize(e.to_string()))?;
    for p in trace.packets() {
        writer
            .write_record([
                format_timestamp_us(p.ts_us),
                p.src_ip.to_string(),
                p.dst_ip.to_string(),
                p.src_port.to_string(),
                p.dst_port.to_string(),
                p.protocol.to_string(),
                p.pkt_len.to_string(),
            ])
            .map_err(|e| Error::Serialize(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pkt(ts_us: i64, src: [u8; 4], len: u32) -> PacketRecord {
        PacketRecord {
            ts_us,
            src_ip: Ipv4Addr::from(src),
            dst_ip: Ipv4Addr::new(198, 51, 100, 7),
            src_port: 40000,
            dst_port: 443,
            protocol: Protocol::Tcp,
            pkt_len: len,
        }
    }

    fn seq_trace(n: usize) -> Trace {
        let packets = (0..n)
            .map(|i| pkt(1_000_000 * i as i64, [10, 0, 0, 1], 100))
            .collect();
        Trace::from_packets(packets, "seq")
    }

    #[test]
    fn split_defaults_match_expected_partition_sizes() {
        let trace = seq_trace(100);
        let split = split_by_time(&trace, DEFAULT_R_RD, DEFAULT_R_TV).unwrap();
        assert_eq!(split.t.len(), 80);
        assert_eq!(split.v.len(), 10);
        assert_eq!(split.d.len(), 10);
    }

    #[test]
    fn split_errors_when_a_partition_would_be_empty() {
        let trace = seq_trace(3);
        let err = split_by_time(&trace, DEFAULT_R_RD, DEFAULT_R_TV).unwrap_err();
        assert!(matches!(err, Error::Split(_)), "got {err:?}");
    }

    #[test]
    fn split_orders_partitions_by_time() {
        let trace = seq_trace(50);
        let split = split_by_time(&trace, 0.9, 8.0 / 9.0).unwrap();
        let t_max = split.t.packets().last().unwrap().ts_us;
        let v_min = split.v.packets().first().unwrap().ts_us;
        let v_max = split.v.packets().last().unwrap().ts_us;
        let d_min = split.d.packets().first().unwrap().ts_us;
        assert!(t_max <= v_min && v_min <= v_max && v_max <= d_min);
    }

    #[test]
    fn split_sends_boundary_ties_to_the_earlier_partition() {
        // 10 packets, four of them sharing the timestamp at the 90% cut.
        let mut packets: Vec<PacketRecord> =
            (0..6).map(|i| pkt(i as i64, [10, 0, 0, 1], 100)).collect();
        for _ in 0..4 {
            packets.push(pkt(500, [10, 0, 0, 2], 100));
        }
        let trace = Trace::from_packets(packets, "ties");
        let err = split_by_time(&trace, 0.9, 0.5).unwrap_err();
        // All tied packets land in R, leaving D empty.
        assert!(matches!(err, Error::Split(_)));
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trace = Trace::from_packets(
            vec![
                pkt(1_700_000_000_123_456, [10, 0, 0, 1], 60),
                pkt(1_700_000_001_000_001, [10, 0, 0, 2], 1500),
            ],
            "t",
        );
        export_csv(&trace, &path).unwrap();
        let back = ingest_csv(&path).unwrap();
        assert_eq!(back.packets(), trace.packets());
    }

    #[test]
    fn csv_rejects_out_of_range_port_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "timestamp,src_ip,dst_ip,src_port,dst_port,protocol,pkt_len\n\
             1.000000,10.0.0.1,10.0.0.2,40000,443,TCP,60\n\
             2.000000,10.0.0.1,10.0.0.2,70000,443,TCP,60\n",
        )
        .unwrap();
        match ingest_csv(&path).unwrap_err() {
            Error::CsvRow { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("src_port"), "{reason}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time,src,dst\n1,2,3\n").unwrap();
        assert!(matches!(
            ingest_csv(&path).unwrap_err(),
            Error::CsvSchema(_)
        ));
    }

    #[test]
    fn csv_rejects_zero_length_packet() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "timestamp,src_ip,dst_ip,src_port,dst_port,protocol,pkt_len\n\
             1.000000,10.0.0.1,10.0.0.2,40000,443,TCP,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_csv(&path).unwrap_err(),
            Error::CsvRow { line: 2, .. }
        ));
    }

    #[test]
    fn timestamps_past_six_digits_round_half_up() {
        assert_eq!(parse_timestamp_us("1.0000004").unwrap(), 1_000_000);
        assert_eq!(parse_timestamp_us("1.0000005").unwrap(), 1_000_001);
        assert_eq!(parse_timestamp_us("3").unwrap(), 3_000_000);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_packet() -> impl Strategy<Value = PacketRecord> {
            (
                0i64..2_000_000_000_000i64,
                any::<[u8; 4]>(),
                any::<[u8; 4]>(),
                any::<u16>(),
                any::<u16>(),
                0u8..3,
                1u32..65_536,
            )
                .prop_map(|(ts_us, src, dst, sp, dp, proto, len)| PacketRecord {
                    ts_us,
                    src_ip: Ipv4Addr::from(src),
                    dst_ip: Ipv4Addr::from(dst),
                    src_port: sp,
                    dst_port: dp,
                    protocol: match proto {
                        0 => Protocol::Tcp,
                        1 => Protocol::Udp,
                        _ => Protocol::Other,
                    },
                    pkt_len: len,
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn csv_round_trip_is_field_exact(packets in proptest::collection::vec(arb_packet(), 1..60)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("t.csv");
                let trace = Trace::from_packets(packets, "prop");
                export_csv(&trace, &path).unwrap();
                let back = ingest_csv(&path).unwrap();
                prop_assert_eq!(back.packets(), trace.packets());
            }

            #[test]
            fn split_partitions_exactly(packets in proptest::collection::vec(arb_packet(), 12..120)) {
                let trace = Trace::from_packets(packets, "prop");
                if let Ok(split) = split_by_time(&trace, DEFAULT_R_RD, DEFAULT_R_TV) {
                    let total = split.t.len() + split.v.len() + split.d.len();
                    prop_assert_eq!(total, trace.len());
                    let rebuilt: Vec<PacketRecord> = split
                        .t
                        .packets()
                        .iter()
                        .chain(split.v.packets())
                        .chain(split.d.packets())
                        .copied()
                        .collect();
                    prop_assert_eq!(rebuilt, trace.packets().to_vec());
                    let t_max = split.t.packets().last().unwrap().ts_us;
                    let v_min = split.v.packets().first().unwrap().ts_us;
                    let v_max = split.v.packets().last().unwrap().ts_us;
                    let d_min = split.d.packets().first().unwrap().ts_us;
                    prop_assert!(t_max <= v_min && v_max <= d_min);
                }
            }
        }
    }
}
