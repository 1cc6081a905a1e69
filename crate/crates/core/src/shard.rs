//! On-disk token shards and corpus manifests.
//!
//! A shard is a 16-byte header followed by little-endian `u16` token ids:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `TGTK`          |
//! | 4      | 2    | format version (1)    |
//! | 6      | 2    | vocabulary size (260) |
//! | 8      | 8    | token count           |
//!
//! Flows are concatenated; each ends with `FLOW_END`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{TokenId, FLOW_END, VOCAB_SIZE};

pub const SHARD_MAGIC: [u8; 4] = *b"TGTK";
pub const SHARD_VERSION: u16 = 1;
pub const SHARD_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("not a token shard: {0}")]
    BadHeader(String),
    #[error("shard truncated: header declares {declared} tokens, found {found}")]
    Truncated { declared: u64, found: u64 },
    #[error("token id {0} outside the vocabulary")]
    BadToken(TokenId),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_shard<W: Write>(mut w: W, tokens: &[TokenId]) -> Result<(), ShardError> {
    let mut header = [0u8; SHARD_HEADER_LEN];
    header[0..4].copy_from_slice(&SHARD_MAGIC);
    header[4..6].copy_from_slice(&SHARD_VERSION.to_le_bytes());
    header[6..8].copy_from_slice(&(VOCAB_SIZE as u16).to_le_bytes());
    header[8..16].copy_from_slice(&(tokens.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(tokens.len() * 2);
    for &t in tokens {
        if usize::from(t) >= VOCAB_SIZE {
            return Err(ShardError::BadToken(t));
        }
        buf.extend_from_slice(&t.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn write_shard_file(path: &Path, tokens: &[TokenId]) -> Result<(), ShardError> {
    write_shard(BufWriter::new(File::create(path)?), tokens)
}

/// Streaming reader yielding one flow (terminated by FLOW_END) at a time.
pub struct ShardReader<R> {
    inner: R,
    remaining: u64,
    declared: u64,
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self, ShardError> {
        let mut header = [0u8; SHARD_HEADER_LEN];
        inner.read_exact(&mut header).map_err(|_| ShardError::BadHeader("shorter than 16 bytes".into()))?;
        if header[0..4] != SHARD_MAGIC {
            return Err(ShardError::BadHeader("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != SHARD_VERSION {
            return Err(ShardError::BadHeader(format!("unsupported version {version}")));
        }
        let vocab = u16::from_le_bytes([header[6], header[7]]);
        if usize::from(vocab) != VOCAB_SIZE {
            return Err(ShardError::BadHeader(format!("vocabulary size {vocab}")));
        }
        let declared = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
        Ok(Self { inner, remaining: declared, declared })
    }

    pub fn declared_tokens(&self) -> u64 {
        self.declared
    }

    fn next_token(&mut self) -> Result<Option<TokenId>, ShardError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let mut b = [0u8; 2];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => ShardError::Truncated { declared: self.declared, found: self.declared - self.remaining },
            _ => ShardError::Io(e),
        })?;
        self.remaining -= 1;
        let t = u16::from_le_bytes(b);
        if usize::from(t) >= VOCAB_SIZE {
            return Err(ShardError::BadToken(t));
        }
        Ok(Some(t))
    }

    /// Next flow's ids including its FLOW_END; a trailing unterminated run is
    /// returned as-is.
    pub fn next_flow(&mut self) -> Result<Option<Vec<TokenId>>, ShardError> {
        let mut flow = Vec::new();
        while let Some(t) = self.next_token()? {
            flow.push(t);
            if t == FLOW_END {
                return Ok(Some(flow));
            }
        }
        Ok((!flow.is_empty()).then_some(flow))
    }

    pub fn read_all(mut self) -> Result<Vec<TokenId>, ShardError> {
        let mut out = Vec::with_capacity(self.remaining as usize);
        while let Some(t) = self.next_token()? {
            out.push(t);
        }
        Ok(out)
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<Vec<TokenId>, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_flow().transpose()
    }
}

pub fn open_shard(path: &Path) -> Result<ShardReader<BufReader<File>>, ShardError> {
    ShardReader::new(BufReader::new(File::open(path)?))
}

pub fn read_shard<R: Read>(r: R) -> Result<Vec<TokenId>, ShardError> {
    ShardReader::new(r)?.read_all()
}

/// One shard's entry in a corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub source: String,
    pub linktype: u32,
    pub flows: usize,
    pub tokens: u64,
    /// Absolute time of each flow's first packet, in microseconds.
    pub base_times_us: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u16,
    pub vocab_size: usize,
    pub shards: Vec<ShardEntry>,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self { version: SHARD_VERSION, vocab_size: VOCAB_SIZE, shards: Vec::new() }
    }
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self, ShardError> {
        let f = File::open(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ShardError> {
        let mut f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn shard_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.shards.iter().map(|s| dir.join(&s.path)).collect()
    }
}

/// Shard files of a corpus directory: the manifest's list when present,
/// otherwise every `*.tgtk` file in name order.
pub fn corpus_shards(dir: &Path) -> Result<Vec<PathBuf>, ShardError> {
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(CorpusManifest::load(dir)?.shard_paths(dir));
    }
    let mut paths: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "tgtk")).collect();
    paths.sort();
    Ok(paths)
}
