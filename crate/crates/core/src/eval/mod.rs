//! Accuracy, confusion matrices, per-condition breakdowns and report files.

mod emit;
mod report;

pub use emit::{
    compare, confusion_csv, confusion_svg, emit_report, metrics_csv, read_report, wer_svg,
    ComparisonRow, COMPARISON_HEADER, METRICS_HEADER,
};
pub use report::{
    evaluate, predict_dataset, wer, wer_from_accuracy, Condition, ConditionRow, EvalReport,
};
