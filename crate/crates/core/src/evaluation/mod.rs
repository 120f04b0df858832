//! Error-detection metrics, confidence analysis, explanations and cost.

mod cam;
mod cost;
mod metrics;
#[cfg(feature = "plots")]
pub mod plots;
mod report;

pub use cam::{cam_stage, eigen_cam, eigen_cam_map, resize_bilinear};
pub use cost::{
    benchmark_latency, count_flops, count_layers, layer_macs, ComplexityReport, FlopUnit,
    LatencyStats,
};
pub use metrics::{
    auroc, confusion_buckets, recalls, summarize, Bucket, ConfidenceBuckets, Confusion,
    MetricsReport, Summary,
};
pub use report::{
    complexity_csv, confidence_csv, confidence_summary_csv, emit_report, metrics_csv, rank_flags,
    COMPLEXITY_CSV, CONFIDENCE_CSV, CONFIDENCE_SUMMARY_CSV, METRICS_CSV,
};
