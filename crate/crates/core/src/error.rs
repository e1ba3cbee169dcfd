use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: loss is not recorded on this tape")]
    NotOnTape,
    #[error("{what}: length mismatch (expected {expected}, got {got})")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort at iteration {iter} (batch seed {seed:#018x}): {detail}")]
    Numerical { iter: u64, seed: u64, detail: String },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("architecture fingerprint mismatch")]
    Fingerprint,
    #[error("round mismatch: expected {expected}, got {got}")]
    Round { expected: u64, got: u64 },
    #[error("aggregation weights sum to zero")]
    ZeroWeight,
    #[error("no scenes")]
    NoScenes,
    #[error("client {client} failed during round {round}: {source}")]
    Client {
        client: u64,
        round: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Codec(String),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether this error stems from invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } => true,
            Error::Client { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
