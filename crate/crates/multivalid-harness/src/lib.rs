//! Simulation harness for the multivalid online predictors: seeded label
//! adversaries, round-protocol simulation drivers, transcript audits with
//! theorem-bound verdicts, CSV stream ingestion, and the `multivalid` CLI.
//!
//! Everything here is deterministic given its seeds. Reports are always
//! recomputed from raw transcripts, never from live predictor state, so the
//! audit is an independent check on the online updates.

mod error;

pub mod adversary;
pub mod report;
pub mod simulate;
pub mod stream;

pub use adversary::{
    Adversary, AdversaryConfig, AdversaryKind, GroupLaw, LabelLaw, LearnerView, PublishedStrategy,
};
pub use error::HarnessError;
pub use report::{
    batch_mean_alpha_bound, interval_alpha_bound, interval_default_eta, mean_alpha_bound,
    moment_alpha_bound, moment_default_eta, multivalidity_report, write_report_csv,
    MomentCellDetail, MultivalidityReport, ReportCell, ReportKind, ReportSummary, SUMMARY_VERSION,
};
pub use simulate::{
    run_simulation, PredictorSpec, Smoothing, SimulationConfig, SimulationOutcome,
};
pub use stream::{load_stream, parse_stream, StreamRow};
