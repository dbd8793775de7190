//! Shared domain types for online multivalid prediction.
//!
//! Every predictor in this workspace consumes a stream of examples that are
//! visible only through their group memberships 𝒢(x), makes a prediction on a
//! finite grid over [0,1], then observes a label y ∈ [0,1]. This crate holds
//! the pieces they all share:
//!
//! * [`Example`] / [`GroupSystem`] — examples as sorted group-id lists and the
//!   ambient collection of (possibly intersecting) groups;
//! * [`BucketGrid`] / [`GridPoint`] — the bucket partition B_n(i) of [0,1] and
//!   the prediction grid 𝒫^{rn} = {0, 1/rn, …, 1}, kept as exact integer
//!   numerators so bucket assignment never hits a floating-point boundary;
//! * [`cover`] — the interval coverage indicator, half-open on the right
//!   except that intervals ending at 1 are closed there;
//! * [`SignedLog`] — reals stored as (sign, ln magnitude), used for the
//!   exponential potential sums exp(ηV) ± exp(−ηV) that would otherwise
//!   overflow once ηV grows;
//! * [`Transcript`] — the ordered interaction record ((x_t, p_t, y_t)) plus
//!   per-round sparse state deltas for exact replay.

mod error;
mod grid;
mod group;
mod signed_log;
mod transcript;

pub use error::CoreError;
pub use grid::{bucket_index, bucket_of_numerator, cover, grid_points, BucketGrid, GridPoint};
pub use group::{Example, GroupId, GroupSystem};
pub use signed_log::SignedLog;
pub use transcript::{CellKey, Prediction, RoundRecord, StateDelta, Transcript};
