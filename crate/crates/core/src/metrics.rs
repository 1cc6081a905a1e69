//! Distribution comparisons between real and generated traffic: header-field
//! and flow-feature Jensen-Shannon divergences, and empirical CDF exports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::IpAddr;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::Flow;
use crate::packet::parse_packet;
use crate::pcap::Direction;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("not a distribution: {0}")]
    NotADistribution(String),
    #[error("flow has no packets")]
    EmptyFlow,
    #[error("no samples")]
    EmptyInput,
    #[error("packet {packet} has no direction")]
    MissingDirection { packet: usize },
    #[error("non-finite sample")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Finite distribution over ordered categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution<K> {
    support: Vec<K>,
    probs: Vec<f64>,
}

impl<K: Ord + Clone> CategoricalDistribution<K> {
    pub fn new(pairs: Vec<(K, f64)>) -> Result<Self, MetricsError> {
        let mut pairs = pairs;
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MetricsError::NotADistribution("duplicate category".into()));
        }
        if pairs.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(MetricsError::NotADistribution("negative or non-finite mass".into()));
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(MetricsError::NotADistribution(format!("mass sums to {total}")));
        }
        let (support, probs) = pairs.into_iter().unzip();
        Ok(Self { support, probs })
    }

    pub fn from_counts(counts: &BTreeMap<K, usize>) -> Result<Self, MetricsError> {
        let n: usize = counts.values().sum();
        if n == 0 {
            return Err(MetricsError::NotADistribution("no observations".into()));
        }
        Ok(Self { support: counts.keys().cloned().collect(), probs: counts.values().map(|&c| c as f64 / n as f64).collect() })
    }

    pub fn from_samples(samples: impl IntoIterator<Item = K>) -> Result<Self, MetricsError> {
        let mut counts = BTreeMap::new();
        for s in samples {
            *counts.entry(s).or_insert(0usize) += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn support(&self) -> &[K] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, k: &K) -> f64 {
        self.support.binary_search(k).map(|i| self.probs[i]).unwrap_or(0.0)
    }
}

/// `x log2(x / m)` with `0 log 0 = 0`.
fn kl_term(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).log2()
    }
}

/// Jensen-Shannon divergence in bits over the union of both supports;
/// symmetric exactly and clamped into [0, 1] against rounding.
pub fn jsd<K: Ord + Clone>(p: &CategoricalDistribution<K>, q: &CategoricalDistribution<K>) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    while i < p.support.len() || j < q.support.len() {
        let (a, b) = match (p.support.get(i), q.support.get(j)) {
            (Some(x), Some(y)) if x == y => {
                i += 1;
                j += 1;
                (p.probs[i - 1], q.probs[j - 1])
            }
            (Some(x), Some(y)) if x < y => {
                i += 1;
                (p.probs[i - 1], 0.0)
            }
            (Some(_), None) => {
                i += 1;
                (p.probs[i - 1], 0.0)
            }
            _ => {
                j += 1;
                (0.0, q.probs[j - 1])
            }
        };
        let m = 0.5 * (a + b);
        total += 0.5 * kl_term(a, m) + 0.5 * kl_term(b, m);
    }
    total.clamp(0.0, 1.0)
}

/// Category of a header field: integers, or addresses kept opaque.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Category {
    Int(u64),
    Addr(IpAddr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderField {
    Sport,
    Dport,
    SrcAddress,
    DstAddress,
    PacketLength,
    Ttl,
}

impl HeaderField {
    pub const ALL: [HeaderField; 6] = [
        HeaderField::Sport,
        HeaderField::Dport,
        HeaderField::SrcAddress,
        HeaderField::DstAddress,
        HeaderField::PacketLength,
        HeaderField::Ttl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeaderField::Sport => "sport",
            HeaderField::Dport => "dport",
            HeaderField::SrcAddress => "src_address",
            HeaderField::DstAddress => "dst_address",
            HeaderField::PacketLength => "packet_length",
            HeaderField::Ttl => "ttl",
        }
    }
}

impl std::str::FromStr for HeaderField {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        HeaderField::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| format!("unknown header field {s}"))
    }
}

/// Per-packet header values; `None` for frames without an IP transport header.
pub fn header_values(flow: &Flow) -> Vec<Option<[Category; 6]>> {
    flow.packets
        .iter()
        .map(|rec| {
            let p = parse_packet(&rec.bytes, rec.linktype).ok()?;
            Some([
                Category::Int(u64::from(p.transport.src_port)),
                Category::Int(u64::from(p.transport.dst_port)),
                Category::Addr(p.ip.src),
                Category::Addr(p.ip.dst),
                Category::Int(rec.bytes.len() as u64),
                Category::Int(u64::from(p.ip.ttl)),
            ])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeaderDistributions {
    pub fields: Vec<(HeaderField, CategoricalDistribution<Category>)>,
    /// Packets skipped because they do not parse as IP TCP/UDP.
    pub skipped: usize,
}

pub fn packet_header_distributions(flows: &[Flow]) -> Result<HeaderDistributions, MetricsError> {
    let per_flow: Vec<Vec<Option<[Category; 6]>>> = flows.par_iter().map(header_values).collect();
    let mut counts: Vec<BTreeMap<Category, usize>> = vec![BTreeMap::new(); 6];
    let mut skipped = 0;
    for v in per_flow.iter().flatten() {
        match v {
            Some(vals) => {
                for (c, val) in counts.iter_mut().zip(vals) {
                    *c.entry(val.clone()).or_insert(0) += 1;
                }
            }
            None => skipped += 1,
        }
    }
    let fields = HeaderField::ALL
        .into_iter()
        .zip(&counts)
        .map(|(f, c)| Ok((f, CategoricalDistribution::from_counts(c)?)))
        .collect::<Result<_, MetricsError>>()?;
    Ok(HeaderDistributions { fields, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketJsdReport {
    pub sport: f64,
    pub dport: f64,
    pub src_address: f64,
    pub dst_address: f64,
    pub packet_length: f64,
    pub ttl: f64,
    pub average: f64,
    pub skipped_real: usize,
    pub skipped_generated: usize,
}

pub fn packet_header_jsd(real: &[Flow], generated: &[Flow]) -> Result<PacketJsdReport, MetricsError> {
    let (a, b) = (packet_header_distributions(real)?, packet_header_distributions(generated)?);
    let s: Vec<f64> = a.fields.iter().zip(&b.fields).map(|((_, p), (_, q))| jsd(p, q)).collect();
    Ok(PacketJsdReport {
        sport: s[0],
        dport: s[1],
        src_address: s[2],
        dst_address: s[3],
        packet_length: s[4],
        ttl: s[5],
        average: s.iter().sum::<f64>() / 6.0,
        skipped_real: a.skipped,
        skipped_generated: b.skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowFeatureVector {
    /// Incoming packets.
    pub f1: f64,
    /// Outgoing fraction.
    pub f2: f64,
    /// Incoming fraction.
    pub f3: f64,
    /// Population std of the outgoing ordering list.
    pub f4: f64,
    /// Outgoing packets.
    pub f5: f64,
    /// Sum of the alternative concentration list.
    pub f6: f64,
}

impl FlowFeatureVector {
    pub fn get(&self, i: usize) -> f64 {
        [self.f1, self.f2, self.f3, self.f4, self.f5, self.f6][i]
    }
}

pub const CONCENTRATION_CHUNK: usize = 20;

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn features_from_directions(dirs: &[Direction]) -> Result<FlowFeatureVector, MetricsError> {
    if dirs.is_empty() {
        return Err(MetricsError::EmptyFlow);
    }
    let out = |d: &Direction| *d == Direction::Outgoing;
    let total = dirs.len() as f64;
    let outgoing = dirs.iter().filter(|d| out(d)).count() as f64;
    let incoming = total - outgoing;
    let ordering: Vec<f64> = dirs.iter().enumerate().filter(|(_, d)| out(d)).map(|(i, _)| i as f64).collect();
    let concentration: Vec<usize> = dirs.chunks(CONCENTRATION_CHUNK).map(|c| c.iter().filter(|d| out(d)).count()).collect();
    let alternative: Vec<usize> = concentration.chunks(CONCENTRATION_CHUNK).map(|c| c.iter().sum()).collect();
    Ok(FlowFeatureVector {
        f1: incoming,
        f2: outgoing / total,
        f3: incoming / total,
        f4: population_std(&ordering),
        f5: outgoing,
        f6: alternative.iter().sum::<usize>() as f64,
    })
}

pub fn flow_feature_vector(flow: &Flow) -> Result<FlowFeatureVector, MetricsError> {
    let dirs = flow
        .packets
        .iter()
        .enumerate()
        .map(|(i, p)| p.direction.ok_or(MetricsError::MissingDirection { packet: i }))
        .collect::<Result<Vec<_>, _>>()?;
    features_from_directions(&dirs)
}

/// Features binned into equal-width bins over the combined range (f2, f3, f4).
pub const CONTINUOUS_FEATURES: [usize; 3] = [1, 2, 3];
pub const FEATURE_BINS: usize = 50;

pub fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> u64 {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64).floor() as u64).min(bins as u64 - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowJsdReport {
    pub feature_1: f64,
    pub feature_2: f64,
    pub feature_3: f64,
    pub feature_4: f64,
    pub feature_5: f64,
    pub feature_6: f64,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowFeatureComparison {
    pub report: FlowJsdReport,
    /// Per feature, the (real, generated) distributions over bin or count categories.
    pub distributions: Vec<(CategoricalDistribution<u64>, CategoricalDistribution<u64>)>,
}

fn features_of(flows: &[Flow]) -> Result<Vec<FlowFeatureVector>, MetricsError> {
    if flows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    flows.par_iter().map(flow_feature_vector).collect()
}

pub fn compare_feature_vectors(real: &[FlowFeatureVector], generated: &[FlowFeatureVector]) -> Result<FlowFeatureComparison, MetricsError> {
    if real.is_empty() || generated.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut distributions = Vec::with_capacity(6);
    let mut scores = [0.0; 6];
    for (i, score) in scores.iter_mut().enumerate() {
        let key: Box<dyn Fn(f64) -> u64> = if CONTINUOUS_FEATURES.contains(&i) {
            let all = real.iter().chain(generated).map(|v| v.get(i));
            let lo = all.clone().fold(f64::INFINITY, f64::min);
            let hi = all.fold(f64::NEG_INFINITY, f64::max);
            Box::new(move |x| bin_index(x, lo, hi, FEATURE_BINS))
        } else {
            Box::new(|x| x as u64)
        };
        let p = CategoricalDistribution::from_samples(real.iter().map(|v| key(v.get(i))))?;
        let q = CategoricalDistribution::from_samples(generated.iter().map(|v| key(v.get(i))))?;
        *score = jsd(&p, &q);
        distributions.push((p, q));
    }
    let report = FlowJsdReport {
        feature_1: scores[0],
        feature_2: scores[1],
        feature_3: scores[2],
        feature_4: scores[3],
        feature_5: scores[4],
        feature_6: scores[5],
        average: scores.iter().sum::<f64>() / 6.0,
    };
    Ok(FlowFeatureComparison { report, distributions })
}

pub fn flow_feature_distributions(real: &[Flow], generated: &[Flow]) -> Result<FlowFeatureComparison, MetricsError> {
    compare_feature_vectors(&features_of(real)?, &features_of(generated)?)
}

/// Empirical CDF at every distinct sample value: `(v, #{x <= v} / N)`.
pub fn cdf_points(samples: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in s.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    Ok(out)
}

pub const CDF_HEADER: &str = "source,value,cumulative_fraction";

/// One CSV with a labeled CDF series per source.
pub fn write_cdf_csv(path: &Path, series: &[(&str, &[f64])]) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CDF_HEADER}")?;
    for (source, samples) in series {
        for (v, f) in cdf_points(samples)? {
            writeln!(w, "{source},{v},{f}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-packet samples of a numeric header field (addresses as integers).
pub fn header_samples(flows: &[Flow], field: HeaderField) -> Vec<f64> {
    let idx = HeaderField::ALL.iter().position(|f| *f == field).expect("listed");
    flows
        .iter()
        .flat_map(header_values)
        .flatten()
        .map(|vals| match &vals[idx] {
            Category::Int(v) => *v as f64,
            Category::Addr(IpAddr::V4(a)) => f64::from(u32::from(*a)),
            Category::Addr(IpAddr::V6(a)) => u128::from(*a) as f64,
        })
        .collect()
}
