//! Evaluation: Hungarian re-assignment of discovered clusters, Old/New/All
//! accuracy, branch magnitude analysis and report files.

mod hungarian;
mod magnitude;
mod metrics;
mod report;

pub use hungarian::{hungarian_assign, AssignmentResult};
pub use magnitude::{magnitude_report, render_histogram_csv, BranchMagnitudes, MagnitudeReport};
pub use metrics::{evaluate, evaluate_predictions, max_cluster_share, ClassCount, ClassMap, MetricsReport};
pub use report::{emit_report, parse_csv, render_csv, render_markdown, ReportFormat, ReportRow, CSV_HEADER};
