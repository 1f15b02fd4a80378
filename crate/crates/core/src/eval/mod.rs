//! Faithfulness evaluation: insertion curves, method comparison and the
//! non-locality scan.

mod compare;
mod insertion;
mod nonlocal;

pub use compare::{
    compare_methods, CompareOptions, Comparison, ComparisonRow, CurveRecord, EvalCase, Ranker,
    SkippedTarget,
};
pub use insertion::{auc, insertion_curve, rank_patches, InsertionCurve, InsertionOptions};
pub use nonlocal::{
    layer_scan, median, nonlocality_score, FeatureScan, LayerCount, NonlocalityReport,
    ScanOptions,
};
