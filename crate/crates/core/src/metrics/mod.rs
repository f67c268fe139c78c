//! Box geometry, losses, matching, detection metrics and the latency
//! benchmark.

mod ap;
mod bench;
mod boxes;
mod io;
mod losses;
mod matching;

pub use ap::{average_precision, evaluate, interpolated_ap, map50_95, pr_curve, ClassEval, EvalConfig, EvalReport, ImageGt, ImagePred};
pub use bench::{benchmark_runs, fps_benchmark, hardware_description, mean_cv, BenchResult, BenchSummary};
pub use boxes::{iou, BBox};
pub(crate) use boxes::iou_unchecked;
pub use io::{format_predictions, parse_predictions, read_predictions, write_predictions, PredictionRecord};
pub use losses::{
    bce_loss, bce_prob, bce_term, ciou_loss, ciou_loss_grad, detection_loss, focal_loss, DetectionLoss, GroundTruth,
    ScoredBox, CIOU_EPS, DEFAULT_BOX_WEIGHT, UNMATCHED_GT_PENALTY,
};
pub use matching::{match_detections, precision_recall_f1, Counts, MatchResult};
