//! Classic (microsecond) pcap container: reading, writing and packet records.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

/// Classic pcap magic, microsecond timestamps.
pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
/// Classic pcap magic, nanosecond timestamps (rejected).
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
/// Largest record accepted on read.
pub const MAX_RECORD_LEN: usize = 1 << 26;
const DEFAULT_SNAPLEN: u32 = 262_144;

pub mod linktype {
    pub const ETHERNET: u32 = 1;
    pub const RAW: u32 = 101;
    pub const LINUX_SLL: u32 = 113;
    pub const IPV4: u32 = 228;
    pub const IPV6: u32 = 229;
}

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("unsupported capture format: {0}")]
    UnsupportedFormat(String),
    #[error("capture truncated in record {index}")]
    TruncatedCapture { index: usize },
    #[error("record {index} has zero captured bytes")]
    EmptyRecord { index: usize },
    #[error("timestamp {micros} us does not fit 32-bit seconds")]
    TimestampOverflow { micros: u64 },
    #[error("record {index} has linktype {found}, capture uses {expected}")]
    LinktypeMismatch { index: usize, expected: u32, found: u32 },
    #[error("timestamps decrease at record {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Capture time with microsecond resolution, stored as whole microseconds
/// since the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_parts(secs: u64, micros: u32) -> Self {
        Timestamp(secs * 1_000_000 + u64::from(micros))
    }

    pub fn from_micros(micros: u64) -> Self {
        Timestamp(micros)
    }

    /// Nearest microsecond, ties away from zero. Negative or non-finite
    /// inputs yield `None`.
    pub fn from_secs_f64(secs: f64) -> Option<Self> {
        let micros = (secs * 1e6).round();
        (micros.is_finite() && micros >= 0.0 && micros < u64::MAX as f64).then_some(Timestamp(micros as u64))
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn secs(self) -> u64 {
        self.0 / 1_000_000
    }

    pub fn subsec_micros(self) -> u32 {
        (self.0 % 1_000_000) as u32
    }

    pub fn as_secs_f64(self) -> f64 {
        self.secs() as f64 + f64::from(self.subsec_micros()) * 1e-6
    }

    /// Interval to a later timestamp in seconds; saturates at zero.
    pub fn seconds_until(self, later: Timestamp) -> f64 {
        later.0.saturating_sub(self.0) as f64 / 1e6
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.secs(), self.subsec_micros())
    }
}

/// Packet direction relative to the flow initiator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outgoing,
    Incoming,
}

/// One captured frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp: Timestamp,
    pub linktype: u32,
    pub bytes: Vec<u8>,
    /// Unset until the packet has been assigned to a flow.
    pub direction: Option<Direction>,
}

impl PacketRecord {
    pub fn new(timestamp: Timestamp, linktype: u32, bytes: Vec<u8>) -> Self {
        Self { timestamp, linktype, bytes, direction: None }
    }
}

/// A decoded capture file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Capture {
    pub linktype: u32,
    pub records: Vec<PacketRecord>,
}

#[derive(Clone, Copy, Debug)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

/// Streaming reader over classic pcap records.
pub struct PcapReader<R> {
    inner: R,
    endian: Endian,
    linktype: u32,
    index: usize,
}

/// Fills `buf` completely, returning the number of bytes read before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut header)?;
        if got < 4 {
            return Err(PcapError::UnsupportedFormat("missing magic number".into()));
        }
        let le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let endian = match le {
            MAGIC_MICROS => Endian::Little,
            m if m.swap_bytes() == MAGIC_MICROS => Endian::Big,
            m if m == MAGIC_NANOS || m.swap_bytes() == MAGIC_NANOS => {
                return Err(PcapError::UnsupportedFormat("nanosecond pcap is not supported".into()))
            }
            m => return Err(PcapError::UnsupportedFormat(format!("bad magic 0x{:08X}", m.swap_bytes()))),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::UnsupportedFormat("truncated global header".into()));
        }
        let linktype = endian.u32(&header[20..24]) & 0x0FFF_FFFF;
        Ok(Self { inner, endian, linktype, index: 0 })
    }

    pub fn linktype(&self) -> u32 {
        self.linktype
    }

    pub fn next_record(&mut self) -> Result<Option<PacketRecord>, PcapError> {
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        let index = self.index;
        if got < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedCapture { index });
        }
        let secs = self.endian.u32(&hdr[0..4]);
        let usec = self.endian.u32(&hdr[4..8]);
        let incl = self.endian.u32(&hdr[8..12]) as usize;
        if usec >= 1_000_000 {
            return Err(PcapError::UnsupportedFormat(format!("record {index}: microseconds field {usec} out of range")));
        }
        if incl == 0 {
            return Err(PcapError::EmptyRecord { index });
        }
        if incl > MAX_RECORD_LEN {
            return Err(PcapError::UnsupportedFormat(format!("record {index}: length {incl} exceeds limit")));
        }
        let mut bytes = vec![0u8; incl];
        if read_full(&mut self.inner, &mut bytes)? < incl {
            return Err(PcapError::TruncatedCapture { index });
        }
        self.index += 1;
        Ok(Some(PacketRecord::new(Timestamp::from_parts(u64::from(secs), usec), self.linktype, bytes)))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PacketRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

pub fn read_pcap<R: Read>(source: R) -> Result<Capture, PcapError> {
    let mut reader = PcapReader::new(source)?;
    let linktype = reader.linktype();
    let records = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(Capture { linktype, records })
}

/// Writes a little-endian, microsecond pcap.
pub fn write_pcap<W: Write>(mut sink: W, linktype: u32, records: &[PacketRecord]) -> Result<(), PcapError> {
    let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
    header.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    let snaplen = records.iter().map(|r| r.bytes.len() as u32).max().unwrap_or(0).max(DEFAULT_SNAPLEN);
    header.extend_from_slice(&snaplen.to_le_bytes());
    header.extend_from_slice(&linktype.to_le_bytes());
    sink.write_all(&header)?;

    let mut prev = Timestamp::ZERO;
    for (index, rec) in records.iter().enumerate() {
        if rec.linktype != linktype {
            return Err(PcapError::LinktypeMismatch { index, expected: linktype, found: rec.linktype });
        }
        if rec.timestamp < prev {
            return Err(PcapError::NonMonotonicTimestamps { index });
        }
        prev = rec.timestamp;
        let secs = u32::try_from(rec.timestamp.secs()).map_err(|_| PcapError::TimestampOverflow { micros: rec.timestamp.micros() })?;
        let len = rec.bytes.len() as u32;
        let mut rh = [0u8; RECORD_HEADER_LEN];
        rh[0..4].copy_from_slice(&secs.to_le_bytes());
        rh[4..8].copy_from_slice(&rec.timestamp.subsec_micros().to_le_bytes());
        rh[8..12].copy_from_slice(&len.to_le_bytes());
        rh[12..16].copy_from_slice(&len.to_le_bytes());
        sink.write_all(&rh)?;
        sink.write_all(&rec.bytes)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn write_pcap_to_vec(linktype: u32, records: &[PacketRecord]) -> Result<Vec<u8>, PcapError> {
    let mut out = Vec::new();
    write_pcap(&mut out, linktype, records)?;
    Ok(out)
}
