use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("all {capacity} process slots are registered")]
    CapacityExhausted { capacity: usize },
    #[error("the empty sentinel cannot be retired")]
    RetireEmpty,
    #[error("block pool exhausted")]
    PoolExhausted,
    #[error("block {0:#x} freed while not live")]
    DoubleFree(usize),
    #[error("address {0:#x} does not belong to this pool")]
    ForeignBlock(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
