//! Autoregressive flow generation with top-k sampling and per-packet
//! validation.
//!
//! Each time a packet completes (the model samples the next `PKT_START` or
//! `FLOW_END`), the packet is checked with [`validate_packet`]. An illegal
//! packet is discarded and sampling resumes right after its `PKT_START`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_interval, detokenize_flow, validate_token_prefix, CodecError, GrammarCursor, GrammarViolation, TokenId, TokenSequence, FLOW_END,
    INTERVAL_LEN, PACKET_OVERHEAD, PKT_START, VOCAB_SIZE,
};
use crate::flow::Flow;
use crate::lm::{DecodeSession, LmError, Model};
use crate::packet::{ETHERNET_HEADER_LEN, ETHERTYPE_IPV4, ETHERTYPE_IPV6, PROTO_TCP, PROTO_UDP, SLL_HEADER_LEN};
use crate::pcap::{linktype, write_pcap, PcapError, Timestamp};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("prompt is not a valid flow prefix: {0}")]
    InvalidPrompt(GrammarViolation),
    #[error("flow aborted after {} restarts", trace.restarts)]
    AbortedFlow { trace: Box<GenerationTrace> },
    #[error("non-finite logits")]
    NumericDomain,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest gap a generated packet may encode, in seconds.
pub const MAX_INTERVAL_SECS: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_packets: usize,
    pub max_tokens_total: usize,
    pub max_restarts_per_packet: usize,
    pub seed: u64,
    /// Reject non-TCP/UDP IP payloads and non-IP ethertypes.
    pub strict: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { k: 8, temperature: 1.0, max_packets: 200, max_tokens_total: 200_000, max_restarts_per_packet: 32, seed: 0, strict: true }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::InvalidConfig(m.to_string()));
        if self.k == 0 || self.k > VOCAB_SIZE {
            return bad("k must lie in [1, 260]");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be > 0");
        }
        if self.max_packets == 0 || self.max_tokens_total == 0 {
            return bad("caps must be positive");
        }
        Ok(())
    }
}

/// Anything that maps a context to next-token logits.
pub trait TokenModel {
    /// Longest context plus one; generation never passes more than `max_len - 1` tokens.
    fn max_len(&self) -> usize;
    fn logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, LmError>;
}

/// Draws from the `k` largest logits (ties broken toward the lower id) with
/// probabilities `softmax(logits / temperature)` renormalized over that set.
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> Result<TokenId, GenerateError> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(GenerateError::NumericDomain);
    }
    if k == 0 || logits.is_empty() {
        return Err(GenerateError::InvalidConfig("k must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    if idx.len() == 1 {
        return Ok(idx[0] as TokenId);
    }
    let m = logits[idx[0]] / temperature;
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i] / temperature - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return Ok(i as TokenId);
        }
        u -= wi;
    }
    Ok(*idx.last().expect("non-empty") as TokenId)
}

/// One reason a frame is illegal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum PacketViolation {
    /// Frame shorter than its link-layer header.
    FrameTooShort(String),
    UndefinedHeaderField(String),
    LengthExceedsLimit(String),
    UnsupportedLinktype(u32),
}

impl std::fmt::Display for PacketViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PacketViolation::FrameTooShort(s) => write!(f, "frame too short: {s}"),
            PacketViolation::UndefinedHeaderField(s) => write!(f, "undefined header field: {s}"),
            PacketViolation::LengthExceedsLimit(s) => write!(f, "length exceeds limit: {s}"),
            PacketViolation::UnsupportedLinktype(l) => write!(f, "unsupported linktype {l}"),
        }
    }
}

fn be16(b: &[u8], at: usize) -> usize {
    usize::from(u16::from_be_bytes([b[at], b[at + 1]]))
}

fn check_transport(b: &[u8], proto: u8, strict: bool, out: &mut Vec<PacketViolation>) {
    use PacketViolation::*;
    match proto {
        PROTO_TCP => {
            if b.len() < 20 {
                out.push(FrameTooShort(format!("TCP header needs 20 bytes, {} available", b.len())));
                return;
            }
            let off = b[12] >> 4;
            if !(5..=15).contains(&off) {
                out.push(UndefinedHeaderField(format!("TCP data offset {off}")));
            } else if usize::from(off) * 4 > b.len() {
                out.push(LengthExceedsLimit(format!("TCP header {} bytes, {} available", off as usize * 4, b.len())));
            }
        }
        PROTO_UDP => {
            if b.len() < 8 {
                out.push(FrameTooShort(format!("UDP header needs 8 bytes, {} available", b.len())));
                return;
            }
            let len = be16(b, 4);
            if len < 8 {
                out.push(UndefinedHeaderField(format!("UDP length {len}")));
            } else if len > b.len() {
                out.push(LengthExceedsLimit(format!("UDP length {len}, {} available", b.len())));
            }
        }
        p if strict => out.push(UndefinedHeaderField(format!("IP protocol {p}"))),
        _ => {}
    }
}

/// Returns the datagram length when the header is well formed.
fn check_ipv4(b: &[u8], strict: bool, out: &mut Vec<PacketViolation>) -> Option<usize> {
    use PacketViolation::*;
    if b.len() < 20 {
        out.push(FrameTooShort(format!("IPv4 header needs 20 bytes, {} available", b.len())));
        return None;
    }
    let version = b[0] >> 4;
    if version != 4 {
        out.push(UndefinedHeaderField(format!("IP version {version}")));
        return None;
    }
    let ihl = usize::from(b[0] & 0x0F);
    if !(5..=15).contains(&ihl) {
        out.push(UndefinedHeaderField(format!("IPv4 IHL {ihl}")));
        return None;
    }
    let hlen = ihl * 4;
    let total = be16(b, 2);
    if total > b.len() {
        out.push(LengthExceedsLimit(format!("IPv4 total length {total}, {} captured", b.len())));
        return None;
    }
    if total < hlen {
        out.push(UndefinedHeaderField(format!("IPv4 total length {total} below header length {hlen}")));
        return None;
    }
    check_transport(&b[hlen..total], b[9], strict, out);
    Some(total)
}

fn check_ipv6(b: &[u8], strict: bool, out: &mut Vec<PacketViolation>) -> Option<usize> {
    use PacketViolation::*;
    if b.len() < 40 {
        out.push(FrameTooShort(format!("IPv6 header needs 40 bytes, {} available", b.len())));
        return None;
    }
    let version = b[0] >> 4;
    if version != 6 {
        out.push(UndefinedHeaderField(format!("IP version {version}")));
        return None;
    }
    let total = 40 + be16(b, 4);
    if total > b.len() {
        out.push(LengthExceedsLimit(format!("IPv6 datagram length {total}, {} captured", b.len())));
        return None;
    }
    check_transport(&b[40..total], b[6], strict, out);
    Some(total)
}

/// Shortest Ethernet frame on the wire, without the frame check sequence.
pub const ETHERNET_MIN_FRAME: usize = 60;

/// Structural checks on one frame: link-layer minimum length, then the IP
/// header (version, header length, declared length versus captured bytes,
/// protocol when `strict`), then the TCP data offset or UDP length. Strict
/// mode also rejects bytes past the IP datagram other than padding up to the
/// minimum Ethernet frame.
pub fn validate_packet(frame: &[u8], lt: u32, strict: bool) -> Result<(), Vec<PacketViolation>> {
    let mut out = Vec::new();
    let (min, ethertype_at) = match lt {
        linktype::ETHERNET => (ETHERNET_HEADER_LEN, Some(12)),
        linktype::LINUX_SLL => (SLL_HEADER_LEN, Some(14)),
        linktype::RAW | linktype::IPV4 | linktype::IPV6 => (1, None),
        other => return Err(vec![PacketViolation::UnsupportedLinktype(other)]),
    };
    if frame.len() < min {
        return Err(vec![PacketViolation::FrameTooShort(format!("linktype {lt} needs {min} bytes, frame has {}", frame.len()))]);
    }
    let (ethertype, net) = match ethertype_at {
        Some(at) => {
            let mut et = be16(frame, at) as u16;
            let mut off = min;
            while lt == linktype::ETHERNET && et == crate::packet::ETHERTYPE_VLAN {
                if frame.len() < off + 4 {
                    return Err(vec![PacketViolation::FrameTooShort("VLAN tag truncated".into())]);
                }
                et = be16(frame, off + 2) as u16;
                off += 4;
            }
            (et, off)
        }
        None => (if frame[0] >> 4 == 6 { ETHERTYPE_IPV6 } else { ETHERTYPE_IPV4 }, 0),
    };
    let datagram = match ethertype {
        ETHERTYPE_IPV4 => check_ipv4(&frame[net..], strict, &mut out),
        ETHERTYPE_IPV6 => check_ipv6(&frame[net..], strict, &mut out),
        other => {
            if strict {
                out.push(PacketViolation::UndefinedHeaderField(format!("ethertype 0x{other:04X}")));
            }
            None
        }
    };
    if let Some(len) = datagram {
        let trailing = frame.len() - net - len;
        let padding = lt == linktype::ETHERNET && frame.len() <= ETHERNET_MIN_FRAME;
        if strict && trailing > 0 && !padding {
            out.push(PacketViolation::LengthExceedsLimit(format!("{trailing} bytes past the IP datagram")));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FlowEnd,
    CapReached,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketVerdict {
    /// Index of the packet's PKT_START in the token stream at validation time.
    pub start: usize,
    pub accepted: bool,
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<TokenId>,
    pub verdicts: Vec<PacketVerdict>,
    pub restarts: usize,
    /// Packets for which sampling began, including retried ones once.
    pub packets_attempted: usize,
    pub termination: Termination,
}

impl GenerationTrace {
    pub fn accepted_packets(&self) -> usize {
        self.verdicts.iter().filter(|v| v.accepted).count()
    }
}

/// Checks a finished packet `tokens[start..]` (PKT_START included).
fn judge_packet(tokens: &[TokenId], flow_linktype: Option<u8>, strict: bool) -> Vec<String> {
    let lt = tokens[1] as u8;
    let mut problems = Vec::new();
    if let Some(first) = flow_linktype {
        if first != lt {
            problems.push(format!("linktype {lt} differs from the flow's {first}"));
        }
    }
    let mut iv = [0u8; INTERVAL_LEN];
    for (d, &t) in iv.iter_mut().zip(&tokens[2..PACKET_OVERHEAD]) {
        *d = t as u8;
    }
    let gap = decode_interval(iv);
    // -0.0 never comes out of the encoder
    if !gap.is_finite() || !(0.0..=MAX_INTERVAL_SECS).contains(&gap) || (gap == 0.0 && gap.is_sign_negative()) {
        problems.push(format!("interval {gap} outside [0, {MAX_INTERVAL_SECS}]"));
    }
    let frame: Vec<u8> = tokens[PACKET_OVERHEAD..].iter().map(|&t| t as u8).collect();
    if let Err(v) = validate_packet(&frame, u32::from(lt), strict) {
        problems.extend(v.iter().map(|x| x.to_string()));
    }
    problems
}

fn rebuild_cursor(tokens: &[TokenId]) -> GrammarCursor {
    validate_token_prefix(tokens).expect("retained tokens are a valid prefix")
}

/// Generates one flow continuing `prompt` (which must be a valid prefix).
/// An empty prompt starts with `PKT_START`, the only legal first token.
pub fn generate_flow<M: TokenModel + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<(TokenSequence, GenerationTrace), GenerateError> {
    cfg.validate()?;
    let mut cursor = validate_token_prefix(prompt).map_err(GenerateError::InvalidPrompt)?;
    let mut tokens = prompt.to_vec();
    let mut trace =
        GenerationTrace { tokens: Vec::new(), verdicts: Vec::new(), restarts: 0, packets_attempted: 0, termination: Termination::FlowEnd };
    if cursor.is_complete() {
        trace.tokens = tokens.clone();
        return Ok((TokenSequence(tokens), trace));
    }
    if tokens.is_empty() {
        tokens.push(PKT_START);
        cursor.push(PKT_START).expect("PKT_START opens a flow");
    }
    let window = model.max_len().saturating_sub(1).max(1);
    let flow_linktype = |tokens: &[TokenId]| (tokens.len() > 1).then(|| tokens[1] as u8);
    let mut packet_start = tokens.iter().rposition(|&t| t == PKT_START).expect("prefix holds a PKT_START");
    let mut restarts_here = 0usize;
    let mut accepted = tokens[..packet_start].iter().filter(|&&t| t == PKT_START).count();
    trace.packets_attempted = 1;

    let abort = |mut trace: GenerationTrace, tokens: Vec<TokenId>| {
        trace.termination = Termination::Aborted;
        trace.tokens = tokens;
        GenerateError::AbortedFlow { trace: Box::new(trace) }
    };

    loop {
        if tokens.len() >= cfg.max_tokens_total {
            // drop the unfinished packet and close the flow
            tokens.truncate(packet_start);
            if accepted == 0 {
                return Err(abort(trace, tokens));
            }
            tokens.push(FLOW_END);
            trace.termination = Termination::CapReached;
            break;
        }
        let ctx_start = tokens.len().saturating_sub(window);
        let logits = model.logits(&tokens[ctx_start..])?;
        let next = sample_top_k(&logits, cfg.k, cfg.temperature, rng)?;

        let closes = (next == PKT_START || next == FLOW_END) && cursor.in_frame();
        let mut illegal: Option<Vec<String>> = None;
        if closes {
            let first_lt = if packet_start > 0 { flow_linktype(&tokens) } else { None };
            let problems = judge_packet(&tokens[packet_start..], first_lt, cfg.strict);
            let ok = problems.is_empty();
            trace.verdicts.push(PacketVerdict { start: packet_start, accepted: ok, violations: problems.clone() });
            if !ok {
                illegal = Some(problems);
            }
        } else if let Err(v) = cursor.clone().push(next) {
            illegal = Some(vec![format!("{:?} token {next}", v.rule)]);
            trace.verdicts.push(PacketVerdict { start: packet_start, accepted: false, violations: illegal.clone().unwrap() });
        }

        if illegal.is_some() {
            if restarts_here == cfg.max_restarts_per_packet {
                return Err(abort(trace, tokens));
            }
            trace.restarts += 1;
            restarts_here += 1;
            tokens.truncate(packet_start + 1);
            cursor = rebuild_cursor(&tokens);
            continue;
        }

        cursor.push(next).expect("checked above");
        tokens.push(next);
        if closes {
            accepted += 1;
            restarts_here = 0;
            if next == FLOW_END {
                trace.termination = Termination::FlowEnd;
                break;
            }
            if accepted >= cfg.max_packets {
                tokens.pop();
                tokens.push(FLOW_END);
                trace.termination = Termination::CapReached;
                break;
            }
            packet_start = tokens.len() - 1;
            trace.packets_attempted += 1;
        }
    }
    trace.tokens = tokens.clone();
    Ok((TokenSequence(tokens), trace))
}

/// [`TokenModel`] over a language model, reusing its decoding state while
/// the context grows by one token at a time.
pub struct CachedLm<'m, T> {
    model: &'m Model<T>,
    session: Option<DecodeSession<T>>,
    last: Vec<f64>,
    /// Model evaluations that had to replay the whole context.
    pub reprimes: usize,
    /// Longest context ever passed in.
    pub max_context_seen: usize,
}

impl<'m, T: Scalar> CachedLm<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self { model, session: None, last: Vec::new(), reprimes: 0, max_context_seen: 0 }
    }
}

impl<T: Scalar> TokenModel for CachedLm<'_, T> {
    fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if context.is_empty() {
            return Err(LmError::Shape("empty context".into()));
        }
        self.max_context_seen = self.max_context_seen.max(context.len());
        if let Some(s) = self.session.as_mut() {
            let have = s.tokens();
            if have == context {
                return Ok(self.last.clone());
            }
            if have.len() + 1 == context.len() && context.starts_with(have) {
                let row = s.step(self.model, context[context.len() - 1])?;
                self.last = row.iter().map(|x| x.as_f64()).collect();
                return Ok(self.last.clone());
            }
        }
        self.reprimes += 1;
        let (s, row) = DecodeSession::prime(self.model, context)?;
        self.session = Some(s);
        self.last = row.iter().map(|x| x.as_f64()).collect();
        Ok(self.last.clone())
    }
}

/// Detokenizes and writes one flow as a pcap; returns the decoded flow.
pub fn emit_pcap(tokens: &[TokenId], base_time: Timestamp, path: &Path) -> Result<Flow, GenerateError> {
    if tokens.is_empty() {
        return Err(CodecError::EmptyFlow.into());
    }
    let flow = detokenize_flow(tokens, base_time, None)?;
    let lt = flow.packets.first().map(|p| p.linktype).ok_or(CodecError::EmptyFlow)?;
    write_pcap(BufWriter::new(File::create(path)?), lt, &flow.packets)?;
    Ok(flow)
}

/// One line of the batch manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub file: Option<String>,
    pub tokens: usize,
    pub packets: usize,
    pub restarts: usize,
    pub termination: Termination,
}

pub const GENERATION_MANIFEST: &str = "manifest.jsonl";

/// Per-flow RNG: the base seed with the flow index as the ChaCha stream.
pub fn flow_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` flows in parallel into `out_dir` as `flow_00000.pcap`,
/// ... plus `manifest.jsonl`. Aborted flows get a manifest line without a file.
pub fn generate_batch<T: Scalar>(
    model: &Model<T>,
    count: usize,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    base_time: Timestamp,
    out_dir: &Path,
) -> Result<Vec<ManifestLine>, GenerateError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let lines: Vec<Result<ManifestLine, GenerateError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = flow_rng(cfg.seed, i as u64);
            let mut lm = CachedLm::new(model);
            match generate_flow(&mut lm, prompt, cfg, &mut rng) {
                Ok((seq, trace)) => {
                    let name = format!("flow_{i:05}.pcap");
                    let flow = emit_pcap(&seq, base_time, &out_dir.join(&name))?;
                    Ok(ManifestLine {
                        file: Some(name),
                        tokens: seq.len(),
                        packets: flow.len(),
                        restarts: trace.restarts,
                        termination: trace.termination,
                    })
                }
                Err(GenerateError::AbortedFlow { trace }) => Ok(ManifestLine {
                    file: None,
                    tokens: trace.tokens.len(),
                    packets: trace.accepted_packets(),
                    restarts: trace.restarts,
                    termination: Termination::Aborted,
                }),
                Err(e) => Err(e),
            }
        })
        .collect();
    let lines = lines.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_manifest(&out_dir.join(GENERATION_MANIFEST), &lines)?;
    Ok(lines)
}

/// Replays a fixed token script: at context length `n` it puts all mass on
/// `script[n]`. Tests use it to force exact sequences.
#[derive(Clone, Debug)]
pub struct ScriptedModel {
    pub script: Vec<TokenId>,
    pub max_len: usize,
    pub calls: usize,
    /// Largest context length ever requested.
    pub max_context_seen: usize,
}

impl ScriptedModel {
    pub fn new(script: Vec<TokenId>, max_len: usize) -> Self {
        Self { script, max_len, calls: 0, max_context_seen: 0 }
    }
}

/// One-hot logits with a margin large enough to dominate any top-k draw.
pub fn forcing_logits(token: TokenId) -> Vec<f64> {
    let mut l = vec![-1e4; VOCAB_SIZE];
    l[usize::from(token)] = 0.0;
    l
}

impl TokenModel for ScriptedModel {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.calls += 1;
        self.max_context_seen = self.max_context_seen.max(context.len());
        let n = context.len().min(self.script.len() - 1);
        Ok(forcing_logits(self.script[n]))
    }
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<PathBuf, GenerateError> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tokenize_flow;
    use crate::synth::overfit_corpus;

    fn sample_flow_tokens() -> Vec<TokenId> {
        tokenize_flow(&overfit_corpus(7)[0]).unwrap().0
    }

    fn version_byte_positions(tokens: &[TokenId]) -> Vec<usize> {
        crate::codec::packets_of(tokens)
            .iter()
            .map(|p| {
                let off = if u32::from(p.linktype) == linktype::ETHERNET { ETHERNET_HEADER_LEN } else { SLL_HEADER_LEN };
                p.start + PACKET_OVERHEAD + off
            })
            .collect()
    }

    #[test]
    fn forced_valid_sequence_is_reproduced() {
        let script = sample_flow_tokens();
        let mut m = ScriptedModel::new(script.clone(), 4096);
        let mut rng = flow_rng(0, 0);
        let (seq, trace) = generate_flow(&mut m, &[], &GenerationConfig::default(), &mut rng).unwrap();
        assert_eq!(seq.0, script);
        assert_eq!(trace.restarts, 0);
        assert_eq!(trace.termination, Termination::FlowEnd);
        assert!(trace.verdicts.iter().all(|v| v.accepted));
    }

    #[test]
    fn always_invalid_packet_aborts_within_cap() {
        let mut script = sample_flow_tokens();
        let at = version_byte_positions(&script)[0];
        script[at] = 0x55;
        let cfg = GenerationConfig { max_restarts_per_packet: 5, ..GenerationConfig::default() };
        let mut m = ScriptedModel::new(script, 4096);
        match generate_flow(&mut m, &[], &cfg, &mut flow_rng(0, 0)) {
            Err(GenerateError::AbortedFlow { trace }) => {
                assert_eq!(trace.termination, Termination::Aborted);
                assert_eq!(trace.restarts, 5);
                assert!(trace.restarts <= cfg.max_restarts_per_packet * trace.packets_attempted);
                assert!(trace.verdicts[0].violations[0].contains("undefined header field"));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    struct CorruptOnce {
        script: Vec<TokenId>,
        at: usize,
        fired: bool,
    }

    impl TokenModel for CorruptOnce {
        fn max_len(&self) -> usize {
            4096
        }
        fn logits(&mut self, ctx: &[TokenId]) -> Result<Vec<f64>, LmError> {
            if ctx.len() == self.at && !self.fired {
                self.fired = true;
                return Ok(forcing_logits(0x55));
            }
            Ok(forcing_logits(self.script[ctx.len().min(self.script.len() - 1)]))
        }
    }

    #[test]
    fn one_bad_packet_is_discarded_and_regenerated() {
        let script = sample_flow_tokens();
        let at = version_byte_positions(&script)[1];
        let mut m = CorruptOnce { script: script.clone(), at, fired: false };
        let (seq, trace) = generate_flow(&mut m, &[], &GenerationConfig::default(), &mut flow_rng(0, 0)).unwrap();
        assert_eq!(seq.0, script);
        assert_eq!(trace.restarts, 1);
        assert_eq!(trace.verdicts.iter().filter(|v| !v.accepted).count(), 1);
    }

    struct Counting {
        script: Vec<TokenId>,
        calls: usize,
        longest: usize,
    }

    impl TokenModel for Counting {
        fn max_len(&self) -> usize {
            64
        }
        fn logits(&mut self, ctx: &[TokenId]) -> Result<Vec<f64>, LmError> {
            self.calls += 1;
            self.longest = self.longest.max(ctx.len());
            Ok(forcing_logits(self.script[self.calls]))
        }
    }

    #[test]
    fn context_never_exceeds_window() {
        let script = sample_flow_tokens();
        let mut m = Counting { script: script.clone(), calls: 0, longest: 0 };
        let (seq, _) = generate_flow(&mut m, &[], &GenerationConfig::default(), &mut flow_rng(0, 0)).unwrap();
        assert_eq!(seq.0, script);
        assert_eq!(m.longest, 63);
    }

    #[test]
    fn packet_cap_closes_the_flow() {
        let script = sample_flow_tokens();
        let cfg = GenerationConfig { max_packets: 1, ..GenerationConfig::default() };
        let (seq, trace) = generate_flow(&mut ScriptedModel::new(script, 4096), &[], &cfg, &mut flow_rng(0, 0)).unwrap();
        assert_eq!(trace.termination, Termination::CapReached);
        assert_eq!(crate::codec::packets_of(&seq.0).len(), 1);
        crate::codec::validate_token_grammar(&seq.0).unwrap();
    }

    #[test]
    fn invalid_prompt_is_rejected() {
        let r = generate_flow(&mut ScriptedModel::new(vec![0], 16), &[1, 2], &GenerationConfig::default(), &mut flow_rng(0, 0));
        assert!(matches!(r, Err(GenerateError::InvalidPrompt(_))));
    }

    #[test]
    fn top_k_frequencies_match_renormalized_softmax() {
        let mut logits = vec![-5.0; VOCAB_SIZE];
        logits[10] = 2.0;
        logits[20] = 1.0;
        logits[30] = 0.5;
        let mut rng = flow_rng(3, 0);
        let n = 40_000;
        let mut counts = [0usize; VOCAB_SIZE];
        for _ in 0..n {
            counts[usize::from(sample_top_k(&logits, 2, 1.0, &mut rng).unwrap())] += 1;
        }
        assert_eq!(counts[10] + counts[20], n);
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((counts[10] as f64 / n as f64 - p).abs() < 5.0 * sd);
    }

    #[test]
    fn top_k_ties_prefer_lower_ids() {
        let logits = vec![0.0; VOCAB_SIZE];
        let mut rng = flow_rng(1, 0);
        for _ in 0..500 {
            assert!(sample_top_k(&logits, 3, 1.0, &mut rng).unwrap() < 3);
        }
        assert_eq!(sample_top_k(&logits, 1, 1.0, &mut rng).unwrap(), 0);
        let mut bad = logits.clone();
        bad[4] = f64::NAN;
        assert!(matches!(sample_top_k(&bad, 1, 1.0, &mut rng), Err(GenerateError::NumericDomain)));
    }

    fn udp_frame() -> Vec<u8> {
        let mut f = vec![0u8; 60];
        f[12] = 0x08;
        f[14] = 0x45;
        f[16..18].copy_from_slice(&28u16.to_be_bytes());
        f[23] = PROTO_UDP;
        f[38..40].copy_from_slice(&8u16.to_be_bytes());
        f
    }

    #[test]
    fn packet_validator_rules() {
        assert_eq!(validate_packet(&udp_frame(), linktype::ETHERNET, true), Ok(()));
        let mut v5 = udp_frame();
        v5[14] = 0x55;
        let e = validate_packet(&v5, linktype::ETHERNET, true).unwrap_err();
        assert!(e[0].to_string().contains("undefined header field"));
        let mut long = udp_frame();
        long[16..18].copy_from_slice(&2000u16.to_be_bytes());
        let e = validate_packet(&long, linktype::ETHERNET, true).unwrap_err();
        assert!(e[0].to_string().contains("length exceeds limit"));
        let mut icmp = udp_frame();
        icmp[23] = 1;
        assert!(validate_packet(&icmp, linktype::ETHERNET, true).is_err());
        assert!(validate_packet(&icmp, linktype::ETHERNET, false).is_ok());
        assert!(validate_packet(&udp_frame()[..10], linktype::ETHERNET, true).is_err());
        let mut udp_len = udp_frame();
        udp_len[38..40].copy_from_slice(&9u16.to_be_bytes());
        assert!(validate_packet(&udp_len, linktype::ETHERNET, true).unwrap_err()[0].to_string().contains("length exceeds limit"));
    }

    #[test]
    fn trailing_bytes_are_only_minimum_frame_padding() {
        let mut over = udp_frame();
        over.push(0);
        assert!(validate_packet(&over, linktype::ETHERNET, true).unwrap_err()[0].to_string().contains("past the IP datagram"));
        assert!(validate_packet(&over, linktype::ETHERNET, false).is_ok());
        let mut exact = udp_frame();
        exact.truncate(ETHERNET_HEADER_LEN + 28);
        assert_eq!(validate_packet(&exact, linktype::ETHERNET, true), Ok(()));
        let mut sll = vec![0u8; SLL_HEADER_LEN];
        sll[14] = 0x08;
        sll.extend_from_slice(&exact[ETHERNET_HEADER_LEN..]);
        assert_eq!(validate_packet(&sll, linktype::LINUX_SLL, true), Ok(()));
        sll.push(0);
        assert!(validate_packet(&sll, linktype::LINUX_SLL, true).is_err());
    }

    #[test]
    fn emit_rejects_empty_and_writes_readable_pcap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pcap");
        assert!(matches!(emit_pcap(&[], Timestamp::ZERO, &p), Err(GenerateError::Codec(CodecError::EmptyFlow))));
        let tokens = sample_flow_tokens();
        let flow = emit_pcap(&tokens, Timestamp::from_micros(1_000_000), &p).unwrap();
        let back = crate::pcap::read_pcap(std::io::BufReader::new(File::open(&p).unwrap())).unwrap();
        assert_eq!(back.records.len(), flow.len());
    }

    #[test]
    fn batch_generation_is_seed_deterministic() {
        let model = Model::<f64>::new(crate::lm::ModelConfig::tiny(8, 1, 64), 0).unwrap();
        let cfg = GenerationConfig {
            max_packets: 2,
            max_tokens_total: 300,
            max_restarts_per_packet: 2,
            strict: false,
            ..GenerationConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let la = generate_batch(&model, 3, &[], &cfg, Timestamp::ZERO, a.path()).unwrap();
        let lb = generate_batch(&model, 3, &[], &cfg, Timestamp::ZERO, b.path()).unwrap();
        assert_eq!(la, lb);
        let manifest = std::fs::read_to_string(a.path().join(GENERATION_MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 3);
    }
}
