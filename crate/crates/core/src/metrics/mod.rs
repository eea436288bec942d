//! Multi-view fusion and evaluation: overlap scores, boundary RMSE,
//! sensitivity ratio, reliability curves and the two-sample t-test.

mod boundary;
mod fusion;
mod overlap;
mod report;
mod stats;

pub use boundary::{boundary_points, boundary_rmse};
pub use fusion::{fuse_probabilities, fuse_views, FusedPrediction, DEFAULT_THRESHOLD};
pub use overlap::{binary_overlap_metrics, Overlap};
pub use report::{evaluate_case, slice_range_metrics, Aggregate, CaseMetrics, MetricReport};
pub use stats::{reliability_curve, sensitivity_ratio, summarize, two_sample_ttest, Summary, TTest};
