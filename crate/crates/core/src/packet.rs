//! Truncation-aware header parsing for the link, network and transport layers.
//!
//! Every accessor reports byte offsets into the original frame so callers can
//! rewrite fields in place (anonymization) or bound-check them (validation).

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::ops::Range;

use crate::pcap::linktype;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86DD;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const SLL_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("{layer} header needs {needed} bytes, frame has {available}")]
    Truncated { layer: &'static str, needed: usize, available: usize },
    #[error("linktype {0} is not supported")]
    UnsupportedLinktype(u32),
    #[error("ethertype 0x{0:04X} is not IP")]
    NotIp(u16),
    #[error("IP version nibble {0} is undefined")]
    BadIpVersion(u8),
    #[error("IPv4 header length {0} words is invalid")]
    BadHeaderLength(u8),
    #[error("IP protocol {0} is neither TCP nor UDP")]
    UnsupportedTransport(u8),
}

fn need(layer: &'static str, bytes: &[u8], end: usize) -> Result<(), ParseError> {
    if bytes.len() < end {
        Err(ParseError::Truncated { layer, needed: end, available: bytes.len() })
    } else {
        Ok(())
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Link-layer framing of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkInfo {
    /// Bytes holding hardware addresses (both MACs for Ethernet, the
    /// link-layer address field for SLL).
    pub mac: Option<Range<usize>>,
    pub ethertype: u16,
    pub network_offset: usize,
}

pub fn link_info(bytes: &[u8], lt: u32) -> Result<LinkInfo, ParseError> {
    match lt {
        linktype::ETHERNET => {
            need("ethernet", bytes, ETHERNET_HEADER_LEN)?;
            let mut ethertype = be16(bytes, 12);
            let mut offset = ETHERNET_HEADER_LEN;
            while ethertype == ETHERTYPE_VLAN {
                need("vlan", bytes, offset + 4)?;
                ethertype = be16(bytes, offset + 2);
                offset += 4;
            }
            Ok(LinkInfo { mac: Some(0..12), ethertype, network_offset: offset })
        }
        linktype::LINUX_SLL => {
            need("sll", bytes, SLL_HEADER_LEN)?;
            Ok(LinkInfo { mac: Some(6..14), ethertype: be16(bytes, 14), network_offset: SLL_HEADER_LEN })
        }
        linktype::RAW | linktype::IPV4 | linktype::IPV6 => {
            need("ip", bytes, 1)?;
            let ethertype = match bytes[0] >> 4 {
                4 => ETHERTYPE_IPV4,
                6 => ETHERTYPE_IPV6,
                v => return Err(ParseError::BadIpVersion(v)),
            };
            Ok(LinkInfo { mac: None, ethertype, network_offset: 0 })
        }
        other => Err(ParseError::UnsupportedLinktype(other)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpVersion {
    V4,
    V6,
}

/// Network-layer header of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IpInfo {
    pub version: IpVersion,
    pub offset: usize,
    pub header_len: usize,
    /// Declared datagram length (IPv4 total length; IPv6 40 + payload length).
    pub declared_len: usize,
    pub protocol: u8,
    /// TTL (IPv4) or hop limit (IPv6).
    pub ttl: u8,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub src_range: Range<usize>,
    pub dst_range: Range<usize>,
}

impl IpInfo {
    pub fn transport_offset(&self) -> usize {
        self.offset + self.header_len
    }
}

/// Offsets of the address fields only; needs fewer bytes than [`ip_info`].
pub fn ip_address_ranges(bytes: &[u8], link: &LinkInfo) -> Result<(Range<usize>, Range<usize>), ParseError> {
    let off = link.network_offset;
    match link.ethertype {
        ETHERTYPE_IPV4 => {
            need("ipv4", bytes, off + 20)?;
            Ok((off + 12..off + 16, off + 16..off + 20))
        }
        ETHERTYPE_IPV6 => {
            need("ipv6", bytes, off + 40)?;
            Ok((off + 8..off + 24, off + 24..off + 40))
        }
        other => Err(ParseError::NotIp(other)),
    }
}

pub fn ip_info(bytes: &[u8], link: &LinkInfo) -> Result<IpInfo, ParseError> {
    let off = link.network_offset;
    match link.ethertype {
        ETHERTYPE_IPV4 => {
            need("ipv4", bytes, off + 20)?;
            let version = bytes[off] >> 4;
            if version != 4 {
                return Err(ParseError::BadIpVersion(version));
            }
            let ihl = bytes[off] & 0x0F;
            if ihl < 5 {
                return Err(ParseError::BadHeaderLength(ihl));
            }
            let header_len = usize::from(ihl) * 4;
            need("ipv4 options", bytes, off + header_len)?;
            let src = Ipv4Addr::new(bytes[off + 12], bytes[off + 13], bytes[off + 14], bytes[off + 15]);
            let dst = Ipv4Addr::new(bytes[off + 16], bytes[off + 17], bytes[off + 18], bytes[off + 19]);
            Ok(IpInfo {
                version: IpVersion::V4,
                offset: off,
                header_len,
                declared_len: usize::from(be16(bytes, off + 2)),
                protocol: bytes[off + 9],
                ttl: bytes[off + 8],
                src: IpAddr::V4(src),
                dst: IpAddr::V4(dst),
                src_range: off + 12..off + 16,
                dst_range: off + 16..off + 20,
            })
        }
        ETHERTYPE_IPV6 => {
            need("ipv6", bytes, off + 40)?;
            let version = bytes[off] >> 4;
            if version != 6 {
                return Err(ParseError::BadIpVersion(version));
            }
            let addr = |at: usize| {
                let mut a = [0u8; 16];
                a.copy_from_slice(&bytes[at..at + 16]);
                Ipv6Addr::from(a)
            };
            Ok(IpInfo {
                version: IpVersion::V6,
                offset: off,
                header_len: 40,
                declared_len: 40 + usize::from(be16(bytes, off + 4)),
                protocol: bytes[off + 6],
                ttl: bytes[off + 7],
                src: IpAddr::V6(addr(off + 8)),
                dst: IpAddr::V6(addr(off + 24)),
                src_range: off + 8..off + 24,
                dst_range: off + 24..off + 40,
            })
        }
        other => Err(ParseError::NotIp(other)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    pub fn from_protocol(p: u8) -> Option<Self> {
        match p {
            PROTO_TCP => Some(Transport::Tcp),
            PROTO_UDP => Some(Transport::Udp),
            _ => None,
        }
    }

    pub fn protocol_number(self) -> u8 {
        match self {
            Transport::Tcp => PROTO_TCP,
            Transport::Udp => PROTO_UDP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransportInfo {
    pub transport: Transport,
    pub offset: usize,
    pub src_port: u16,
    pub dst_port: u16,
}

impl TransportInfo {
    pub fn port_range(&self) -> Range<usize> {
        self.offset..self.offset + 4
    }
}

pub fn transport_info(bytes: &[u8], ip: &IpInfo) -> Result<TransportInfo, ParseError> {
    let transport = Transport::from_protocol(ip.protocol).ok_or(ParseError::UnsupportedTransport(ip.protocol))?;
    let off = ip.transport_offset();
    need("ports", bytes, off + 4)?;
    Ok(TransportInfo { transport, offset: off, src_port: be16(bytes, off), dst_port: be16(bytes, off + 2) })
}

/// Fully parsed TCP/UDP-over-IP frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPacket {
    pub link: LinkInfo,
    pub ip: IpInfo,
    pub transport: TransportInfo,
}

pub fn parse_packet(bytes: &[u8], lt: u32) -> Result<ParsedPacket, ParseError> {
    let link = link_info(bytes, lt)?;
    let ip = ip_info(bytes, &link)?;
    let transport = transport_info(bytes, &ip)?;
    Ok(ParsedPacket { link, ip, transport })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::FrameBuilder;

    #[test]
    fn parses_ethernet_ipv4_tcp() {
        let frame = FrameBuilder::tcp_v4([10, 0, 0, 1], [10, 0, 0, 2], 1234, 80).payload(b"hi").ethernet();
        let p = parse_packet(&frame, linktype::ETHERNET).unwrap();
        assert_eq!(p.ip.src, IpAddr::from([10, 0, 0, 1]));
        assert_eq!(p.ip.src_range, 26..30);
        assert_eq!(p.transport.port_range(), 34..38);
        assert_eq!((p.transport.src_port, p.transport.dst_port), (1234, 80));
        assert_eq!(p.transport.transport, Transport::Tcp);
    }

    #[test]
    fn parses_sll_ipv6_udp() {
        let frame = FrameBuilder::udp_v6([1; 16], [2; 16], 53, 5353).payload(&[0; 9]).sll();
        let p = parse_packet(&frame, linktype::LINUX_SLL).unwrap();
        assert_eq!(p.ip.version, IpVersion::V6);
        assert_eq!(p.transport.offset, SLL_HEADER_LEN + 40);
        assert_eq!(p.transport.dst_port, 5353);
    }

    #[test]
    fn arp_is_not_ip() {
        let mut frame = vec![0xFF; 12];
        frame.extend_from_slice(&ETHERTYPE_ARP.to_be_bytes());
        frame.extend_from_slice(&[0; 28]);
        assert_eq!(parse_packet(&frame, linktype::ETHERNET), Err(ParseError::NotIp(ETHERTYPE_ARP)));
    }

    #[test]
    fn short_frame_is_truncated() {
        assert!(matches!(link_info(&[0; 10], linktype::ETHERNET), Err(ParseError::Truncated { .. })));
    }
}
