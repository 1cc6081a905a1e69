//! Reversible flow <-> token mapping over the 260-symbol vocabulary.
//!
//! Layout of one flow:
//!
//! ```text
//! ( PKT_START  BYTE[linktype]  BYTE x 8 [interval]  BYTE+ [frame] )+  FLOW_END
//! ```
//!
//! The interval is the gap to the previous packet (zero for the first one)
//! as the big-endian IEEE-754 binary64 pattern of the gap in seconds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::flow::Flow;
use crate::pcap::{PacketRecord, Timestamp};

pub type TokenId = u16;

pub const VOCAB_SIZE: usize = 260;
pub const PKT_START: TokenId = 256;
pub const FLOW_END: TokenId = 257;
pub const CLS: TokenId = 258;
pub const PAD: TokenId = 259;

/// Tokens emitted per packet besides its frame bytes.
pub const PACKET_OVERHEAD: usize = 10;
pub const INTERVAL_LEN: usize = 8;

/// Decoded view of a token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Byte(u8),
    PacketStart,
    FlowEnd,
    Cls,
    Pad,
}

impl Token {
    pub fn from_id(id: TokenId) -> Option<Token> {
        match id {
            0..=255 => Some(Token::Byte(id as u8)),
            PKT_START => Some(Token::PacketStart),
            FLOW_END => Some(Token::FlowEnd),
            CLS => Some(Token::Cls),
            PAD => Some(Token::Pad),
            _ => None,
        }
    }

    pub fn id(self) -> TokenId {
        match self {
            Token::Byte(b) => TokenId::from(b),
            Token::PacketStart => PKT_START,
            Token::FlowEnd => FLOW_END,
            Token::Cls => CLS,
            Token::Pad => PAD,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Byte(b) => write!(f, "{b:02X}"),
            Token::PacketStart => f.write_str("[PKT]"),
            Token::FlowEnd => f.write_str("[END]"),
            Token::Cls => f.write_str("[CLS]"),
            Token::Pad => f.write_str("[PAD]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("interval {0} is negative or not finite")]
    InvalidInterval(f64),
    #[error("linktype {0} does not fit one byte token")]
    LinktypeNotEncodable(u32),
    #[error("flow has no packets")]
    EmptyFlow,
    #[error("timestamps decrease at packet {0}")]
    NonMonotonicTimestamps(usize),
    #[error("token sequence has no FLOW_END")]
    UnterminatedFlow,
    #[error("packet starting at token {0} is truncated")]
    TruncatedPacket(usize),
    #[error("illegal token {token} inside flow body at {position}")]
    IllegalTokenInBody { position: usize, token: TokenId },
    #[error("malformed token sequence: {0}")]
    Malformed(GrammarViolation),
    #[error("timestamp overflow while decoding packet {0}")]
    TimestampOverflow(usize),
}

/// The 8 interval bytes for a gap of `delta` seconds.
pub fn encode_interval(delta: f64) -> Result<[u8; INTERVAL_LEN], CodecError> {
    // -0.0 passes `>= 0.0` but would encode a sign bit.
    if !delta.is_finite() || delta < 0.0 || delta.is_sign_negative() {
        return Err(CodecError::InvalidInterval(delta));
    }
    Ok(delta.to_be_bytes())
}

pub fn decode_interval(bytes: [u8; INTERVAL_LEN]) -> f64 {
    f64::from_be_bytes(bytes)
}

/// Token ids of one flow.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

/// Expected token count of a flow: `1 + sum(10 + frame_len)`.
pub fn token_count(flow: &Flow) -> usize {
    1 + flow.packets.iter().map(|p| PACKET_OVERHEAD + p.bytes.len()).sum::<usize>()
}

pub fn tokenize_flow(flow: &Flow) -> Result<TokenSequence, CodecError> {
    if flow.packets.is_empty() {
        return Err(CodecError::EmptyFlow);
    }
    let mut ids = Vec::with_capacity(token_count(flow));
    let mut prev: Option<Timestamp> = None;
    for (i, pkt) in flow.packets.iter().enumerate() {
        let lt = u8::try_from(pkt.linktype).map_err(|_| CodecError::LinktypeNotEncodable(pkt.linktype))?;
        let delta = match prev {
            None => 0.0,
            Some(p) if pkt.timestamp < p => return Err(CodecError::NonMonotonicTimestamps(i)),
            Some(p) => p.seconds_until(pkt.timestamp),
        };
        prev = Some(pkt.timestamp);
        ids.push(PKT_START);
        ids.push(TokenId::from(lt));
        ids.extend(encode_interval(delta)?.iter().map(|&b| TokenId::from(b)));
        ids.extend(pkt.bytes.iter().map(|&b| TokenId::from(b)));
    }
    ids.push(FLOW_END);
    Ok(TokenSequence(ids))
}

/// Which grammar rule failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarRule {
    ExpectedPacketStart,
    EmptyFlow,
    IncompletePacket,
    EmptyFrame,
    IllegalToken,
    UnknownToken,
    MissingFlowEnd,
    TrailingTokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarViolation {
    pub position: usize,
    pub rule: GrammarRule,
}

impl fmt::Display for GrammarViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at token {}", self.rule, self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Start,
    Linktype,
    Interval(usize),
    Frame(usize),
    Done,
}

/// Incremental grammar checker shared by validation, detokenization and the
/// generation loop.
#[derive(Clone, Debug)]
pub struct GrammarCursor {
    state: State,
    position: usize,
}

impl Default for GrammarCursor {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarCursor {
    pub fn new() -> Self {
        Self { state: State::Start, position: 0 }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn is_complete(&self) -> bool {
        self.state == State::Done
    }

    /// True when a PKT_START or FLOW_END would legally close the current packet.
    pub fn in_frame(&self) -> bool {
        matches!(self.state, State::Frame(n) if n > 0)
    }

    pub fn push(&mut self, id: TokenId) -> Result<(), GrammarViolation> {
        let violation = |rule| GrammarViolation { position: self.position, rule };
        let tok = Token::from_id(id).ok_or_else(|| violation(GrammarRule::UnknownToken))?;
        let next = match (self.state, tok) {
            (State::Done, _) => return Err(violation(GrammarRule::TrailingTokens)),
            (_, Token::Cls | Token::Pad) => return Err(violation(GrammarRule::IllegalToken)),
            (State::Start, Token::PacketStart) => State::Linktype,
            (State::Start, Token::FlowEnd) if self.position == 0 => return Err(violation(GrammarRule::EmptyFlow)),
            (State::Start, _) => return Err(violation(GrammarRule::ExpectedPacketStart)),
            (State::Linktype, Token::Byte(_)) => State::Interval(0),
            (State::Interval(k), Token::Byte(_)) if k + 1 == INTERVAL_LEN => State::Frame(0),
            (State::Interval(k), Token::Byte(_)) => State::Interval(k + 1),
            (State::Linktype | State::Interval(_), _) => return Err(violation(GrammarRule::IncompletePacket)),
            (State::Frame(n), Token::Byte(_)) => State::Frame(n + 1),
            (State::Frame(0), _) => return Err(violation(GrammarRule::EmptyFrame)),
            (State::Frame(_), Token::PacketStart) => State::Linktype,
            (State::Frame(_), Token::FlowEnd) => State::Done,
        };
        self.state = next;
        self.position += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<(), GrammarViolation> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(GrammarViolation { position: self.position, rule: GrammarRule::MissingFlowEnd })
        }
    }
}

/// Accepts exactly the flow grammar; reports the first violation otherwise.
pub fn validate_token_grammar(ids: &[TokenId]) -> Result<(), GrammarViolation> {
    let mut cur = GrammarCursor::new();
    for &id in ids {
        cur.push(id)?;
    }
    cur.finish()
}

/// Accepts every prefix of a well-formed flow (including the empty prefix).
pub fn validate_token_prefix(ids: &[TokenId]) -> Result<GrammarCursor, GrammarViolation> {
    let mut cur = GrammarCursor::new();
    for &id in ids {
        cur.push(id)?;
    }
    Ok(cur)
}

/// One packet's slice of a token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PacketTokens<'a> {
    /// Index of the packet's PKT_START.
    pub start: usize,
    pub linktype: u8,
    pub interval: [u8; INTERVAL_LEN],
    pub frame: &'a [TokenId],
}

impl PacketTokens<'_> {
    pub fn interval_secs(&self) -> f64 {
        decode_interval(self.interval)
    }

    pub fn frame_bytes(&self) -> Vec<u8> {
        self.frame.iter().map(|&t| t as u8).collect()
    }
}

/// Splits a grammar-valid body (FLOW_END optional) at PKT_START delimiters.
/// Incomplete trailing packets are not yielded.
pub fn packets_of(ids: &[TokenId]) -> Vec<PacketTokens<'_>> {
    let mut out = Vec::new();
    let starts: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == PKT_START).map(|(i, _)| i).collect();
    for (n, &s) in starts.iter().enumerate() {
        let end = starts.get(n + 1).copied().unwrap_or_else(|| ids[s..].iter().position(|&t| t == FLOW_END).map_or(ids.len(), |p| s + p));
        if end < s + PACKET_OVERHEAD + 1 || (n + 1 == starts.len() && end == ids.len()) {
            continue;
        }
        let mut interval = [0u8; INTERVAL_LEN];
        for (dst, &t) in interval.iter_mut().zip(&ids[s + 2..s + PACKET_OVERHEAD]) {
            *dst = t as u8;
        }
        out.push(PacketTokens { start: s, linktype: ids[s + 1] as u8, interval, frame: &ids[s + PACKET_OVERHEAD..end] });
    }
    out
}

/// Inverse of [`tokenize_flow`]. Packet `k` is stamped at
/// `base_time + sum_{j<=k} interval_j`, rounded to the nearest microsecond.
pub fn detokenize_flow(tokens: &[TokenId], base_time: Timestamp, linktype_override: Option<u32>) -> Result<Flow, CodecError> {
    if let Err(v) = validate_token_grammar(tokens) {
        return Err(match v.rule {
            GrammarRule::MissingFlowEnd => CodecError::UnterminatedFlow,
            GrammarRule::IncompletePacket | GrammarRule::EmptyFrame => {
                let start = tokens[..v.position].iter().rposition(|&t| t == PKT_START).unwrap_or(0);
                CodecError::TruncatedPacket(start)
            }
            GrammarRule::IllegalToken => CodecError::IllegalTokenInBody { position: v.position, token: tokens[v.position] },
            GrammarRule::EmptyFlow => CodecError::EmptyFlow,
            _ => CodecError::Malformed(v),
        });
    }
    let mut offset = 0.0f64;
    let mut records = Vec::new();
    for (k, p) in packets_of(tokens).into_iter().enumerate() {
        let delta = p.interval_secs();
        if !delta.is_finite() || delta < 0.0 {
            return Err(CodecError::InvalidInterval(delta));
        }
        offset += delta;
        let micros = (offset * 1e6).round();
        if !micros.is_finite() || micros >= (u64::MAX / 2) as f64 {
            return Err(CodecError::TimestampOverflow(k));
        }
        let ts = base_time.micros().checked_add(micros as u64).ok_or(CodecError::TimestampOverflow(k))?;
        let lt = linktype_override.unwrap_or(u32::from(p.linktype));
        records.push(PacketRecord::new(Timestamp::from_micros(ts), lt, p.frame_bytes()));
    }
    Ok(Flow::from_packets(records))
}
