//! Reader for classic libpcap capture files (microsecond magic 0xa1b2c3d4
//! and nanosecond magic 0xa1b23c4d, either byte order). Parses link and
//! transport headers only; payloads are discarded.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{PacketRecord, Protocol, Trace};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

/// Per-file ingest accounting. Packets can be dropped without failing the
/// whole ingest; structural damage is a hard error instead.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_records: u64,
    pub kept: u64,
    pub dropped_ipv6: u64,
    pub dropped_non_ip: u64,
    pub dropped_filtered: u64,
    pub dropped_truncated: u64,
    pub dropped_zero_len: u64,
}

/// Reads a pcap file, keeping IPv4 packets whose transport protocol is in
/// `proto_filter`. Output is sorted by timestamp.
pub fn ingest_pcap(
    path: impl AsRef<Path>,
    proto_filter: &BTreeSet<Protocol>,
) -> Result<(Trace, IngestReport)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "capture".into());
    let (packets, report) = parse_pcap_bytes(&data, proto_filter)?;
    if packets.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok((Trace::from_packets(packets, label), report))
}

struct FileFormat {
    nanos: bool,
    linktype: u32,
}

pub(crate) fn parse_pcap_bytes(
    data: &[u8],
    proto_filter: &BTreeSet<Protocol>,
) -> Result<(Vec<PacketRecord>, IngestReport)> {
    let parse_err = |offset: usize, reason: &str| Error::PcapParse {
        offset: offset as u64,
        reason: reason.into(),
    };
    if data.len() < 24 {
        return Err(parse_err(0, "file shorter than the 24-byte global header"));
    }
    let magic_le = u32::from_le_bytes(data[0..4].try_into().unwrap());
    let magic_be = u32::from_be_bytes(data[0..4].try_into().unwrap());
    let (big_endian, nanos) = match (magic_le, magic_be) {
        (MAGIC_MICROS, _) => (false, false),
        (MAGIC_NANOS, _) => (false, true),
        (_, MAGIC_MICROS) => (true, false),
        (_, MAGIC_NANOS) => (true, true),
        _ => return Err(parse_err(0, "unrecognized pcap magic number")),
    };
    let read_u32 = |buf: &[u8]| -> u32 {
        let arr: [u8; 4] = buf.try_into().unwrap();
        if big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    };
    let linktype = read_u32(&data[20..24]);
    if linktype != LINKTYPE_ETHERNET && linktype != LINKTYPE_RAW {
        return Err(parse_err(20, "unsupported link type"));
    }
    let format = FileFormat { nanos, linktype };

    let mut report = IngestReport::default();
    let mut packets = Vec::new();
    let mut offset = 24usize;
    while offset < data.len() {
        if data.len() - offset < 16 {
            return Err(parse_err(offset, "truncated packet record header"));
        }
        let ts_sec = read_u32(&data[offset..offset + 4]) as i64;
        let ts_frac = read_u32(&data[offset + 4..offset + 8]) as i64;
        let incl_len = read_u32(&data[offset + 8..offset + 12]) as usize;
        let orig_len = read_u32(&data[offset + 12..offset + 16]);
        let body_start = offset + 16;
        if data.len() - body_start < incl_len {
            return Err(parse_err(offset + 8, "record length exceeds file size"));
        }
        let ts_us = if format.nanos {
            ts_sec * 1_000_000 + ts_frac / 1_000
        } else {
            ts_sec * 1_000_000 + ts_frac
        };
        report.total_records += 1;
        let body = &data[body_start..body_start + incl_len];
        match decode_packet(body, &format, ts_us, orig_len, proto_filter, &mut report) {
            Some(p) => packets.push(p),
            None => {}
        }
        offset = body_start + incl_len;
    }
    report.kept = packets.len() as u64;
    Ok((packets, report))
}

fn decode_packet(
    body: &[u8],
    format: &FileFormat,
    ts_us: i64,
    orig_len: u32,
    proto_filter: &BTreeSet<Protocol>,
    report: &mut IngestReport,
) -> Option<PacketRecord> {
    let ip = match format.linktype {
        LINKTYPE_ETHERNET => {
            if body.len() < 14 {
                report.dropped_truncated += 1;
                return None;
            }
            let mut ethertype = u16::from_be_bytes([body[12], body[13]]);
            let mut l3_start = 14;
            if ethertype == ETHERTYPE_VLAN {
                if body.len() < 18 {
                    report.dropped_truncated += 1;
                    return None;
                }
                ethertype = u16::from_be_bytes([body[16], body[17]]);
                l3_start = 18;
            }
            match ethertype {
                ETHERTYPE_IPV4 => &body[l3_start..],
                ETHERTYPE_IPV6 => {
                    report.dropped_ipv6 += 1;
                    return None;
                }
                _ => {
                    report.dropped_non_ip += 1;
                    return None;
                }
            }
        }
        LINKTYPE_RAW => {
            if body.is_empty() {
                report.dropped_truncated += 1;
                return None;
            }
            match body[0] >> 4 {
                4 => body,
                6 => {
                    report.dropped_ipv6 += 1;
                    return None;
                }
                _ => {
                    report.dropped_non_ip += 1;
                    return None;
                }
            }
        }
        _ => unreachable!("link type validated at header parse"),
    };
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        report.dropped_truncated += 1;
        return None;
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    if ihl < 20 || ip.len() < ihl {
        report.dropped_truncated += 1;
        return None;
    }
    let protocol = Protocol::from_ip_number(ip[9]);
    if !proto_filter.contains(&protocol) {
        report.dropped_filtered += 1;
        return None;
    }
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let (src_port, dst_port) = match protocol {
        Protocol::Tcp | Protocol::Udp => {
            if ip.len() < ihl + 4 {
                report.dropped_truncated += 1;
                return None;
            }
            (
                u16::from_be_bytes([ip[ihl], ip[ihl + 1]]),
                u16::from_be_bytes([ip[ihl + 2], ip[ihl + 3]]),
            )
        }
        Protocol::Other => (0, 0),
    };
    if orig_len == 0 {
        report.dropped_zero_len += 1;
        return None;
    }
    Some(PacketRecord {
        ts_us,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        pkt_len: orig_len,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Minimal pcap writer used to build fixtures for the reader tests.

    use super::*;

    pub struct PcapSpec {
        pub nanos: bool,
        pub big_endian: bool,
    }

    impl Default for PcapSpec {
        fn default() -> Self {
            PcapSpec {
                nanos: false,
                big_endian: false,
            }
        }
    }

    pub fn write_pcap(packets: &[PacketRecord], spec: &PcapSpec) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: u32| {
            if spec.big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        let put_u16 = |out: &mut Vec<u8>, v: u16| {
            if spec.big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        let magic = if spec.nanos { MAGIC_NANOS } else { MAGIC_MICROS };
        put_u32(&mut out, magic);
        put_u16(&mut out, 2);
        put_u16(&mut out, 4);
        put_u32(&mut out, 0); // thiszone
        put_u32(&mut out, 0); // sigfigs
        put_u32(&mut out, 65535); // snaplen
        put_u32(&mut out, LINKTYPE_ETHERNET);
        for p in packets {
            let frame = ethernet_frame(p);
            put_u32(&mut out, (p.ts_us / 1_000_000) as u32);
            let frac = p.ts_us % 1_000_000;
            put_u32(&mut out, if spec.nanos { frac as u32 * 1000 } else { frac as u32 });
            put_u32(&mut out, frame.len() as u32);
            put_u32(&mut out, p.pkt_len);
            out.extend_from_slice(&frame);
        }
        out
    }

    fn ethernet_frame(p: &PacketRecord) -> Vec<u8> {
        let mut f = vec![0u8; 14];
        f[12] = 0x08;
        f[13] = 0x00;
        let mut ip = vec![0u8; 20];
        ip[0] = 0x45;
        let total_len = 20u16 + 8;
        ip[2..4].copy_from_slice(&total_len.to_be_bytes());
        ip[8] = 64;
        ip[9] = match p.protocol {
            Protocol::Tcp => 6,
            Protocol::Udp => 17,
            Protocol::Other => 47,
        };
        ip[12..16].copy_from_slice(&p.src_ip.octets());
        ip[16..20].copy_from_slice(&p.dst_ip.octets());
        f.extend_from_slice(&ip);
        let mut l4 = vec![0u8; 8];
        l4[0..2].copy_from_slice(&p.src_port.to_be_bytes());
        l4[2..4].copy_from_slice(&p.dst_port.to_be_bytes());
        f.extend_from_slice(&l4);
        f
    }
}
