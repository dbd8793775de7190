use thiserror::Error;

use crate::GroupId;

/// Errors raised by the shared domain types.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("label {value} is outside [0, 1]")]
    LabelOutOfRange { value: f64 },
    #[error("value {value} is outside [0, 1]")]
    ValueOutOfRange { value: f64 },
    #[error("a group system needs at least one group")]
    EmptyGroupSystem,
    #[error("max membership {max} exceeds the group count {count}")]
    MembershipBoundTooLarge { max: u32, count: u32 },
    #[error("group id {id} is out of range for a system of {count} groups")]
    GroupIdOutOfRange { id: GroupId, count: u32 },
    #[error("example belongs to {got} groups, more than the declared maximum {max}")]
    MembershipExceeded { got: usize, max: u32 },
    #[error("bucket count must be at least 1")]
    InvalidBucketCount,
    #[error("grid refinement must be at least 1")]
    InvalidRefinement,
    #[error("grid resolution r*n = {rn} exceeds the supported maximum {max}")]
    GridTooFine { rn: u64, max: u32 },
    #[error("transcript line {line}: {message}")]
    TranscriptParse { line: usize, message: String },
    #[error("transcript io: {0}")]
    TranscriptIo(#[from] std::io::Error),
}
