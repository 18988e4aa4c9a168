use thiserror::Error;

use crate::pager::BlockId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("block size {0} is below the minimum of 16")]
    BlockTooSmall(u64),
    #[error("epsilon {0} is outside (0, 1)")]
    EpsilonOutOfRange(f64),
    #[error("capacity {n_cap} is smaller than the block size {block}")]
    CapacityBelowBlock { n_cap: u64, block: u64 },
    #[error("a node with fanout {fanout} and buffer {buffer} does not fit a block of {block}")]
    NodeDoesNotFit { fanout: u64, buffer: u64, block: u64 },
    #[error("constant {0} must be positive")]
    ZeroConstant(&'static str),
}

#[derive(Debug, Error)]
pub enum PagerError {
    #[error("access to unallocated block {0:?}")]
    Fault(BlockId),
    #[error("every cached block is pinned")]
    PinExhausted,
    #[error("block {0:?} is not pinned")]
    NotPinned(BlockId),
    #[error("block {0:?} is pinned")]
    Pinned(BlockId),
    #[error("block {0:?} is not resident")]
    NotResident(BlockId),
    #[error("page file: {0}")]
    Io(#[from] std::io::Error),
    #[error("page decode: {0}")]
    Codec(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Pager(#[from] PagerError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("not found: {0}")]
    NotFound(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn integrity<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Integrity(msg.into()))
}
