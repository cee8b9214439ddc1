use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} out of range for {frac_bits} fractional bits")]
    OutOfRange { value: f64, frac_bits: u32 },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("party mismatch: {0} vs {1}")]
    PartyMismatch(usize, usize),
    #[error("invalid party index {0}")]
    InvalidParty(usize),
    #[error("codec mismatch between shares")]
    CodecMismatch,
    #[error("beaver triple {0} already consumed")]
    TripleReuse(u64),
    #[error("comparison key {0} already consumed")]
    KeyReuse(u64),
    #[error("dealer exhausted after {issued} items (budget {budget})")]
    DealerExhausted { issued: u64, budget: u64 },
    #[error("domain_bits must lie in 8..=64, got {0}")]
    BadDomain(u32),
    #[error("frac_bits must lie in 8..=24, got {0}")]
    BadFracBits(u32),
    #[error("malformed key material: {0}")]
    BadKey(&'static str),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("odd client count {0}: clients must be paired")]
    OddClientCount(usize),
    #[error("{n} clients exceeds the exact matcher cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("risk matrix: {0}")]
    BadRiskMatrix(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
