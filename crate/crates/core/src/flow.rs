//! Bidirectional 5-tuple flows: segmentation, direction labelling and
//! anonymization.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::packet::{self, ip_address_ranges, link_info, parse_packet, ParseError, Transport};
use crate::pcap::{Direction, PacketRecord};

/// One side of a conversation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

/// Canonical, order-independent 5-tuple: `lo <= hi` by (address, port).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub transport: Transport,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, transport: Transport) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        Self { lo, hi, transport }
    }
}

/// Packets of one conversation in capture order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flow {
    pub key: Option<FlowKey>,
    pub initiator: Option<Endpoint>,
    pub packets: Vec<PacketRecord>,
}

fn endpoints(p: &packet::ParsedPacket) -> (Endpoint, Endpoint) {
    (Endpoint { addr: p.ip.src, port: p.transport.src_port }, Endpoint { addr: p.ip.dst, port: p.transport.dst_port })
}

impl Flow {
    /// Builds a flow from already-grouped packets, deriving the key and
    /// directions from the first parseable packet. Packets that do not parse
    /// keep `direction = None`.
    pub fn from_packets(mut packets: Vec<PacketRecord>) -> Self {
        let mut key = None;
        let mut initiator = None;
        for rec in &mut packets {
            let Ok(p) = parse_packet(&rec.bytes, rec.linktype) else {
                rec.direction = None;
                continue;
            };
            let (src, dst) = endpoints(&p);
            let init = *initiator.get_or_insert(src);
            key.get_or_insert(FlowKey::new(src, dst, p.transport.transport));
            rec.direction = Some(if src == init { Direction::Outgoing } else { Direction::Incoming });
        }
        Self { key, initiator, packets }
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn directions(&self) -> Vec<Option<Direction>> {
        self.packets.iter().map(|p| p.direction).collect()
    }
}

/// Result of flow segmentation plus the drop accounting side channel.
#[derive(Clone, Debug, Default)]
pub struct SplitResult {
    pub flows: Vec<Flow>,
    pub dropped: usize,
    pub drop_reasons: BTreeMap<String, usize>,
}

/// Machine-readable summary of one segmentation run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitReport {
    pub source: String,
    pub records: usize,
    pub flows: usize,
    pub dropped: usize,
    pub drop_reasons: BTreeMap<String, usize>,
}

impl SplitResult {
    pub fn report(&self, source: impl Into<String>) -> SplitReport {
        SplitReport {
            source: source.into(),
            records: self.flows.iter().map(Flow::len).sum::<usize>() + self.dropped,
            flows: self.flows.len(),
            dropped: self.dropped,
            drop_reasons: self.drop_reasons.clone(),
        }
    }
}

fn drop_reason(e: &ParseError) -> &'static str {
    match e {
        ParseError::Truncated { .. } => "truncated",
        ParseError::UnsupportedLinktype(_) => "unsupported_linktype",
        ParseError::NotIp(_) => "not_ip",
        ParseError::BadIpVersion(_) | ParseError::BadHeaderLength(_) => "malformed_ip",
        ParseError::UnsupportedTransport(_) => "not_tcp_udp",
    }
}

/// Groups records into bidirectional flows keyed by canonical 5-tuple.
///
/// Flows are ordered by their first packet; within a flow packets are sorted
/// by timestamp with ties kept in capture order. Packets that are not
/// TCP/UDP over IP are dropped and counted.
pub fn split_flows(records: impl IntoIterator<Item = PacketRecord>) -> SplitResult {
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<Flow> = Vec::new();
    let mut result = SplitResult::default();
    for mut rec in records {
        let parsed = match parse_packet(&rec.bytes, rec.linktype) {
            Ok(p) => p,
            Err(e) => {
                result.dropped += 1;
                *result.drop_reasons.entry(drop_reason(&e).to_string()).or_default() += 1;
                continue;
            }
        };
        let (src, dst) = endpoints(&parsed);
        let key = FlowKey::new(src, dst, parsed.transport.transport);
        let slot = *index.entry(key).or_insert_with(|| {
            flows.push(Flow { key: Some(key), initiator: Some(src), packets: Vec::new() });
            flows.len() - 1
        });
        let flow = &mut flows[slot];
        rec.direction = Some(if Some(src) == flow.initiator { Direction::Outgoing } else { Direction::Incoming });
        flow.packets.push(rec);
    }
    for f in &mut flows {
        f.packets.sort_by_key(|p| p.timestamp);
    }
    result.flows = flows;
    result
}

/// Which identifying fields to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnonymizePolicy {
    pub mac: bool,
    pub ip: bool,
    pub ports: bool,
}

impl AnonymizePolicy {
    pub const ALL: AnonymizePolicy = AnonymizePolicy { mac: true, ip: true, ports: true };
    pub const NONE: AnonymizePolicy = AnonymizePolicy { mac: false, ip: false, ports: false };
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("packet {packet}: cannot anonymize {field}: {source}")]
pub struct FieldOutOfRange {
    pub packet: usize,
    pub field: &'static str,
    pub source: ParseError,
}

fn zero(range: std::ops::Range<usize>, bytes: &mut [u8]) {
    bytes[range].iter_mut().for_each(|b| *b = 0);
}

fn zero_addr(addr: IpAddr) -> IpAddr {
    match addr {
        IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
        IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
    }
}

/// Zeroes the selected fields in every frame of `flow`. Lengths and
/// checksums are left as captured.
pub fn anonymize(mut flow: Flow, policy: AnonymizePolicy) -> Result<Flow, FieldOutOfRange> {
    if policy == AnonymizePolicy::NONE {
        return Ok(flow);
    }
    for (i, rec) in flow.packets.iter_mut().enumerate() {
        let err = |field: &'static str| move |source| FieldOutOfRange { packet: i, field, source };
        let link = link_info(&rec.bytes, rec.linktype).map_err(err("link"))?;
        if policy.mac {
            if let Some(r) = link.mac.clone() {
                zero(r, &mut rec.bytes);
            }
        }
        if policy.ip {
            let (s, d) = ip_address_ranges(&rec.bytes, &link).map_err(err("ip"))?;
            zero(s, &mut rec.bytes);
            zero(d, &mut rec.bytes);
        }
        if policy.ports {
            let ip = packet::ip_info(&rec.bytes, &link).map_err(err("ports"))?;
            let t = packet::transport_info(&rec.bytes, &ip).map_err(err("ports"))?;
            zero(t.port_range(), &mut rec.bytes);
        }
    }
    let scrub =
        |e: Endpoint| Endpoint { addr: if policy.ip { zero_addr(e.addr) } else { e.addr }, port: if policy.ports { 0 } else { e.port } };
    flow.initiator = flow.initiator.map(scrub);
    flow.key = flow.key.map(|k| FlowKey::new(scrub(k.lo), scrub(k.hi), k.transport));
    Ok(flow)
}
