//! Incremental evaluation protocol: synthetic or ingested feature streams,
//! session-by-session training and routing, and metrics.

mod metrics;
mod run;
mod stream;

pub use metrics::{
    compute_accuracy_proxy, compute_forgetting, compute_selection_metrics, oracle_accuracy, ExpertMatrix,
    SelectionMetrics,
};
pub use run::{
    compare_kinds, compare_selectors, comparison_to_csv, confusion_to_csv, run_incremental, sessions_to_csv,
    ComparisonReport, ComparisonRow, HarnessConfig, RunOutcome, SelectorKind, SessionReport, COMPARISON_CSV_HEADER,
    SESSION_CSV_HEADER,
};
pub use stream::{generate_stream, ingest_features, write_stream, DomainSplit, FeatureStream, StreamConfig};
