//! Traffic language modelling over raw packet captures.
//!
//! The crate covers the whole pipeline: classic pcap I/O and 5-tuple flow
//! segmentation ([`pcap`], [`flow`]), the reversible flow/token codec
//! ([`codec`], [`shard`]), the attention mechanisms and the causal language
//! model ([`attention`], [`alt`], [`lm`]), top-k flow generation
//! ([`generate`]), `[CLS]`-based classification ([`classify`]) and the
//! distributional evaluation suite ([`metrics`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod alt;
pub mod attention;
pub mod classify;
pub mod codec;
pub mod flow;
pub mod generate;
pub mod lm;
pub mod metrics;
pub mod packet;
pub mod pcap;
pub mod scalar;
pub mod shard;
pub mod synth;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Model32 = lm::Model<f32>;
pub type Model64 = lm::Model<f64>;

/// Broad failure class, for callers that map errors to exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
}

/// Any error raised by the pipeline modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Pcap(#[from] pcap::PcapError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error(transparent)]
    Shard(#[from] shard::ShardError),
    #[error(transparent)]
    Anonymize(#[from] flow::FieldOutOfRange),
    #[error(transparent)]
    Lm(#[from] lm::LmError),
    #[error(transparent)]
    Generate(#[from] generate::GenerateError),
    #[error(transparent)]
    Classify(#[from] classify::ClassifyError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn lm_kind(e: &lm::LmError) -> ErrorKind {
    match e {
        lm::LmError::InvalidConfig(_) => ErrorKind::Config,
        lm::LmError::DivergenceDetected { .. } => ErrorKind::Divergence,
        _ => ErrorKind::Data,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Lm(e) => lm_kind(e),
            Error::Generate(generate::GenerateError::InvalidConfig(_)) => ErrorKind::Config,
            Error::Generate(generate::GenerateError::Model(e)) => lm_kind(e),
            Error::Classify(classify::ClassifyError::Lm(e)) => lm_kind(e),
            Error::Classify(classify::ClassifyError::WindowTooSmall { .. } | classify::ClassifyError::LabelOverflow { .. }) => {
                ErrorKind::Config
            }
            _ => ErrorKind::Data,
        }
    }
}
