//! Metrics, strategy comparisons and figure emitters.

pub mod benchmark;
pub mod compare;
pub mod curves;
pub mod metrics;
pub mod render;

pub use benchmark::{median_gap, BenchmarkCorpora, DeskBenchmark, DomainGap, FinetuneSettings, StageSettings};
pub use compare::{median, run_comparison, run_dir, ArmSummary, ComparisonReport, ReportRow, StrategyArm, REPORT_JSON, REPORT_TEXT};
pub use curves::{comparison_sources, export_curves, read_curve, read_curves_csv, CurveRow, CurveSource, CURVE_COLUMNS};
pub use metrics::{argmax, class_iou, mean_iou, top1_accuracy};
pub use render::{
    ramp_color, ramp_index, render_attention_map, render_reconstruction_panel, sample_plans, AttentionRender,
    ReconstructionPanel, GUTTER, MASK_GRAY, RAMP_LEN,
};
