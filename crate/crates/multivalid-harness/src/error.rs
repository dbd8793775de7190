use multivalid_core::CoreError;
use multivalid_interval::IntervalError;
use multivalid_mean::MeanError;
use multivalid_moment::MomentError;
use multivalid_wrappers::WrapperError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field `{field}` rejected: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Mean(#[from] MeanError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
}
