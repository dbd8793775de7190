//! Round-by-round transcripts.
//!
//! A transcript stores, for every round, the example's group memberships, the
//! published prediction, and the realized label. That is the complete state
//! of every predictor here: error tables are sums of per-round increments, so
//! a transcript plus hyperparameters reproduces any intermediate state. The
//! serialized form (JSON lines) therefore omits the per-round increments;
//! they are recomputed on load.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{CoreError, GroupId};

/// Identifies one error-table cell within a group: a bucket for mean and
/// moment predictors, an interval-endpoint bucket pair for interval
/// predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellKey {
    Bucket { i: u32 },
    BucketPair { i: u32, j: u32 },
}

/// A published prediction, in the shape the consumer asked for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Mean { value: f64 },
    Moment { mean: f64, moment: f64 },
    Interval { lower: f64, upper: f64 },
}

impl Prediction {
    pub fn as_mean(&self) -> Option<f64> {
        match self {
            Prediction::Mean { value } => Some(*value),
            _ => None,
        }
    }

    pub fn as_moment(&self) -> Option<(f64, f64)> {
        match self {
            Prediction::Moment { mean, moment } => Some((*mean, *moment)),
            _ => None,
        }
    }

    pub fn as_interval(&self) -> Option<(f64, f64)> {
        match self {
            Prediction::Interval { lower, upper } => Some((*lower, *upper)),
            _ => None,
        }
    }
}

/// One additive increment to an error-table entry, produced when a round is
/// applied to predictor state. `value_delta` updates the primary table;
/// `moment_delta` updates the k-th moment table where one exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub group: GroupId,
    pub cell: CellKey,
    pub value_delta: f64,
    pub moment_delta: Option<f64>,
}

/// One completed round. `deltas` is an in-memory cache of the state
/// increments this round induced; it is never serialized and is rebuilt by
/// whichever predictor loads the transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub group_ids: Vec<GroupId>,
    pub prediction: Prediction,
    pub label: f64,
    #[serde(skip)]
    pub deltas: Vec<StateDelta>,
}

/// An append-only sequence of rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    rounds: Vec<RoundRecord>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: RoundRecord) {
        self.rounds.push(record);
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn rounds_mut(&mut self) -> &mut [RoundRecord] {
        &mut self.rounds
    }

    pub fn into_rounds(self) -> Vec<RoundRecord> {
        self.rounds
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CoreError> {
        for record in &self.rounds {
            let line = serde_json::to_string(record).map_err(|e| CoreError::TranscriptParse {
                line: record.round as usize,
                message: e.to_string(),
            })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads JSON lines, reporting the 1-based line number of any malformed
    /// record. Blank lines are ignored.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CoreError> {
        let mut rounds = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: RoundRecord = serde_json::from_str(&line).map_err(|e| {
                CoreError::TranscriptParse { line: idx + 1, message: e.to_string() }
            })?;
            rounds.push(record);
        }
        Ok(Self { rounds })
    }
}
