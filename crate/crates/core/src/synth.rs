//! Synthetic frames and flow corpora for fixtures, tests and desk-scale runs.

use std::net::IpAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::Flow;
use crate::packet::{Transport, ETHERTYPE_IPV4, ETHERTYPE_IPV6, PROTO_TCP, PROTO_UDP};
use crate::pcap::{linktype, PacketRecord, Timestamp};

fn checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    let mut carry: Option<u8> = None;
    for chunk in chunks {
        for &b in *chunk {
            match carry.take() {
                Some(hi) => sum += u32::from(u16::from_be_bytes([hi, b])),
                None => carry = Some(b),
            }
        }
    }
    if let Some(hi) = carry {
        sum += u32::from(hi) << 8;
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Builder for well-formed TCP/UDP frames.
#[derive(Clone, Debug)]
pub struct FrameBuilder {
    src: IpAddr,
    dst: IpAddr,
    sport: u16,
    dport: u16,
    transport: Transport,
    payload: Vec<u8>,
    ttl: u8,
    ip_id: u16,
    seq: u32,
    ack: u32,
    tcp_flags: u8,
    src_mac: [u8; 6],
    dst_mac: [u8; 6],
    outgoing: bool,
}

impl FrameBuilder {
    pub fn new(src: IpAddr, dst: IpAddr, sport: u16, dport: u16, transport: Transport) -> Self {
        Self {
            src,
            dst,
            sport,
            dport,
            transport,
            payload: Vec::new(),
            ttl: 64,
            ip_id: 0,
            seq: 1,
            ack: 0,
            tcp_flags: 0x18,
            src_mac: [0x02, 0, 0, 0, 0, 0x01],
            dst_mac: [0x02, 0, 0, 0, 0, 0x02],
            outgoing: true,
        }
    }

    pub fn tcp_v4(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> Self {
        Self::new(src.into(), dst.into(), sport, dport, Transport::Tcp)
    }

    pub fn udp_v4(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> Self {
        Self::new(src.into(), dst.into(), sport, dport, Transport::Udp)
    }

    pub fn tcp_v6(src: [u8; 16], dst: [u8; 16], sport: u16, dport: u16) -> Self {
        Self::new(src.into(), dst.into(), sport, dport, Transport::Tcp)
    }

    pub fn udp_v6(src: [u8; 16], dst: [u8; 16], sport: u16, dport: u16) -> Self {
        Self::new(src.into(), dst.into(), sport, dport, Transport::Udp)
    }

    pub fn payload(mut self, bytes: &[u8]) -> Self {
        self.payload = bytes.to_vec();
        self
    }

    pub fn ttl(mut self, ttl: u8) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn ip_id(mut self, id: u16) -> Self {
        self.ip_id = id;
        self
    }

    pub fn seq_ack(mut self, seq: u32, ack: u32) -> Self {
        self.seq = seq;
        self.ack = ack;
        self
    }

    pub fn tcp_flags(mut self, flags: u8) -> Self {
        self.tcp_flags = flags;
        self
    }

    pub fn macs(mut self, src: [u8; 6], dst: [u8; 6]) -> Self {
        self.src_mac = src;
        self.dst_mac = dst;
        self
    }

    /// SLL packet type: "sent by us" when outgoing, "to us" otherwise.
    pub fn outgoing(mut self, outgoing: bool) -> Self {
        self.outgoing = outgoing;
        self
    }

    fn pseudo_header(&self, len: usize) -> Vec<u8> {
        let proto = self.transport.protocol_number();
        let mut ph = Vec::new();
        match (self.src, self.dst) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                ph.extend_from_slice(&s.octets());
                ph.extend_from_slice(&d.octets());
                ph.extend_from_slice(&[0, proto]);
                ph.extend_from_slice(&(len as u16).to_be_bytes());
            }
            (IpAddr::V6(s), IpAddr::V6(d)) => {
                ph.extend_from_slice(&s.octets());
                ph.extend_from_slice(&d.octets());
                ph.extend_from_slice(&(len as u32).to_be_bytes());
                ph.extend_from_slice(&[0, 0, 0, proto]);
            }
            _ => panic!("mixed address families"),
        }
        ph
    }

    fn segment(&self) -> Vec<u8> {
        let mut seg = Vec::new();
        seg.extend_from_slice(&self.sport.to_be_bytes());
        seg.extend_from_slice(&self.dport.to_be_bytes());
        let csum_at = match self.transport {
            Transport::Tcp => {
                seg.extend_from_slice(&self.seq.to_be_bytes());
                seg.extend_from_slice(&self.ack.to_be_bytes());
                seg.push(5 << 4);
                seg.push(self.tcp_flags);
                seg.extend_from_slice(&64240u16.to_be_bytes());
                seg.extend_from_slice(&[0, 0, 0, 0]);
                16
            }
            Transport::Udp => {
                seg.extend_from_slice(&((8 + self.payload.len()) as u16).to_be_bytes());
                seg.extend_from_slice(&[0, 0]);
                6
            }
        };
        seg.extend_from_slice(&self.payload);
        let c = checksum(&[&self.pseudo_header(seg.len()), &seg]);
        seg[csum_at..csum_at + 2].copy_from_slice(&c.to_be_bytes());
        seg
    }

    /// The IP datagram without link framing.
    pub fn datagram(&self) -> Vec<u8> {
        let seg = self.segment();
        let proto = match self.transport {
            Transport::Tcp => PROTO_TCP,
            Transport::Udp => PROTO_UDP,
        };
        let mut out = Vec::with_capacity(40 + seg.len());
        match (self.src, self.dst) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                out.extend_from_slice(&[0x45, 0]);
                out.extend_from_slice(&((20 + seg.len()) as u16).to_be_bytes());
                out.extend_from_slice(&self.ip_id.to_be_bytes());
                out.extend_from_slice(&[0x40, 0, self.ttl, proto, 0, 0]);
                out.extend_from_slice(&s.octets());
                out.extend_from_slice(&d.octets());
                let c = checksum(&[&out]);
                out[10..12].copy_from_slice(&c.to_be_bytes());
            }
            (IpAddr::V6(s), IpAddr::V6(d)) => {
                out.extend_from_slice(&[0x60, 0, 0, 0]);
                out.extend_from_slice(&(seg.len() as u16).to_be_bytes());
                out.extend_from_slice(&[proto, self.ttl]);
                out.extend_from_slice(&s.octets());
                out.extend_from_slice(&d.octets());
            }
            _ => panic!("mixed address families"),
        }
        out.extend_from_slice(&seg);
        out
    }

    fn ethertype(&self) -> u16 {
        match self.src {
            IpAddr::V4(_) => ETHERTYPE_IPV4,
            IpAddr::V6(_) => ETHERTYPE_IPV6,
        }
    }

    pub fn ethernet(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.dst_mac);
        out.extend_from_slice(&self.src_mac);
        out.extend_from_slice(&self.ethertype().to_be_bytes());
        out.extend_from_slice(&self.datagram());
        out
    }

    pub fn sll(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(if self.outgoing { 4u16 } else { 0 }).to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&6u16.to_be_bytes());
        out.extend_from_slice(&self.src_mac);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.ethertype().to_be_bytes());
        out.extend_from_slice(&self.datagram());
        out
    }

    pub fn frame(&self, lt: u32) -> Vec<u8> {
        match lt {
            linktype::ETHERNET => self.ethernet(),
            linktype::LINUX_SLL => self.sll(),
            _ => self.datagram(),
        }
    }
}

/// Knobs for [`random_flow`].
#[derive(Clone, Debug)]
pub struct FlowShape {
    pub linktype: u32,
    pub transport: Transport,
    pub ipv6: bool,
    pub packets: usize,
    pub max_payload: usize,
    /// Upper bound of inter-arrival gaps in microseconds.
    pub max_gap_us: u64,
}

fn random_shape<R: Rng>(rng: &mut R, packets: usize) -> FlowShape {
    FlowShape {
        linktype: if rng.gen_bool(0.5) { linktype::ETHERNET } else { linktype::LINUX_SLL },
        transport: if rng.gen_bool(0.5) { Transport::Tcp } else { Transport::Udp },
        ipv6: rng.gen_bool(0.2),
        packets,
        max_payload: rng.gen_range(0..400),
        max_gap_us: rng.gen_range(1..3_000_000),
    }
}

/// A random bidirectional conversation with the given shape.
pub fn random_flow<R: Rng>(rng: &mut R, shape: &FlowShape) -> Flow {
    let max = shape.max_payload;
    random_flow_with(rng, shape, |rng, _| {
        let plen = if max == 0 { 0 } else { rng.gen_range(0..=max) };
        (0..plen).map(|_| rng.gen()).collect()
    })
}

/// Like [`random_flow`], with payloads drawn from `payload(rng, outgoing)`.
pub fn random_flow_with<R: Rng>(rng: &mut R, shape: &FlowShape, mut payload: impl FnMut(&mut R, bool) -> Vec<u8>) -> Flow {
    let (client, server): (IpAddr, IpAddr) = if shape.ipv6 {
        let mut a = [0u8; 16];
        let mut b = [0u8; 16];
        rng.fill(&mut a);
        rng.fill(&mut b);
        a[0] = 0xFD;
        b[0] = 0x20;
        (a.into(), b.into())
    } else {
        (
            [10, rng.gen(), rng.gen(), rng.gen_range(1..255)].into(),
            [rng.gen_range(1..224), rng.gen(), rng.gen(), rng.gen_range(1..255)].into(),
        )
    };
    let cport = rng.gen_range(1024..65535);
    let sport = *[53u16, 80, 443, 8080, 123, 993].get(rng.gen_range(0..6)).unwrap();
    let mut t = 1_600_000_000_000_000u64 + rng.gen_range(0..86_400_000_000);
    let (cmac, smac): ([u8; 6], [u8; 6]) = (rng.gen(), rng.gen());
    let base = FrameBuilder::new(client, server, cport, sport, shape.transport);
    let mut seq = [rng.gen::<u32>(), rng.gen::<u32>()];
    let mut packets = Vec::with_capacity(shape.packets);
    for i in 0..shape.packets {
        let outgoing = i == 0 || rng.gen_bool(0.55);
        let payload = payload(rng, outgoing);
        let plen = payload.len();
        let side = usize::from(!outgoing);
        let mut b = if outgoing {
            base.clone().macs(cmac, smac)
        } else {
            FrameBuilder::new(server, client, sport, cport, shape.transport).macs(smac, cmac)
        };
        b = b
            .payload(&payload)
            .ttl(if outgoing { 64 } else { *[52u8, 64, 128, 255].get(rng.gen_range(0..4)).unwrap() })
            .ip_id(rng.gen())
            .seq_ack(seq[side], seq[1 - side])
            .outgoing(outgoing);
        seq[side] = seq[side].wrapping_add(plen as u32);
        if i > 0 {
            t += rng.gen_range(0..=shape.max_gap_us);
        }
        packets.push(PacketRecord::new(Timestamp::from_micros(t), shape.linktype, b.frame(shape.linktype)));
    }
    Flow::from_packets(packets)
}

/// Mixed corpus: TCP and UDP, Ethernet and SLL, IPv4 and IPv6, with packet
/// counts spread over `1..=max_packets` (both ends always included).
pub fn fixture_corpus(count: usize, max_packets: usize, seed: u64) -> Vec<Flow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = match i {
                0 => 1,
                1 => max_packets,
                _ => {
                    if rng.gen_bool(0.7) {
                        rng.gen_range(1..=max_packets.min(12))
                    } else {
                        rng.gen_range(1..=max_packets)
                    }
                }
            };
            let mut shape = random_shape(&mut rng, n);
            if i == 2 {
                shape.linktype = linktype::LINUX_SLL;
            }
            if n > 50 {
                shape.max_payload = shape.max_payload.min(80);
            }
            random_flow(&mut rng, &shape)
        })
        .collect()
}

/// Ten short flows (three small packets each) for memorization runs.
pub fn overfit_corpus(seed: u64) -> Vec<Flow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|i| {
            let shape = FlowShape {
                linktype: if i % 2 == 0 { linktype::ETHERNET } else { linktype::LINUX_SLL },
                transport: if i % 3 == 0 { Transport::Udp } else { Transport::Tcp },
                ipv6: false,
                packets: 3,
                max_payload: 24,
                max_gap_us: 50_000,
            };
            random_flow(&mut rng, &shape)
        })
        .collect()
}

/// Per-class payload signature. Signature bytes lie below 100 (noise bytes
/// are drawn from 100..=255) and are pairwise disjoint for up to six classes.
pub fn class_signature(class: usize) -> Vec<u8> {
    (0..16).map(|j| ((class * 16 + j) % 100) as u8).collect()
}

/// Labelled corpus where class membership is carried only by a signature
/// placed `signal_offset` bytes into each outgoing packet's payload; every
/// other byte is shared random structure.
pub fn class_corpus(classes: usize, per_class: usize, signal_offset: usize, seed: u64) -> Vec<(Flow, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for class in 0..classes {
            let n = rng.gen_range(2..5);
            let mut shape = random_shape(&mut rng, n);
            shape.ipv6 = false;
            let sig = class_signature(class);
            let flow = random_flow_with(&mut rng, &shape, |rng, outgoing| {
                let mut p: Vec<u8> = (0..signal_offset).map(|_| rng.gen_range(100..=255)).collect();
                if outgoing {
                    p.extend_from_slice(&sig);
                }
                p.extend((0..rng.gen_range(0..16)).map(|_| rng.gen_range(100..=255u8)));
                p
            });
            out.push((flow, class));
        }
    }
    out
}

/// Flow whose every frame is `len` copies of `byte`; trivially separable from
/// real traffic.
pub fn constant_flow(byte: u8, packets: usize, len: usize) -> Flow {
    let recs =
        (0..packets).map(|i| PacketRecord::new(Timestamp::from_micros(i as u64 * 1000), linktype::ETHERNET, vec![byte; len])).collect();
    Flow { key: None, initiator: None, packets: recs }
}
