use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("address width must be in 1..=160 bits, got {0}")]
    InvalidAddressBits(u32),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("latency matrix: {0}")]
    LatencyParse(String),
    #[error("NAT fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidNatFractions([f64; 3]),
    #[error("unknown group member {0:?}")]
    UnknownUser(String),
    #[error("user {0:?} has been revoked")]
    RevokedUser(String),
    #[error("shared secret mismatch for {0:?}")]
    BadSecret(String),
    #[error("unknown certificate serial {0}")]
    UnknownSerial(u64),
    #[error("unknown certificate request {0}")]
    UnknownRequest(u64),
    #[error("DHT routing failed")]
    RoutingFailure,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
