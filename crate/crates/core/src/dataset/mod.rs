//! Pairing, label parsing, stratified splitting and manifests.

mod labels;
mod manifest;
mod pairing;
mod report;
mod split;

pub use labels::{parse_label_text, parse_labels, LabelRecord, ParsedLabels, BIRD, CLASS_NAMES, DRONE};
pub use manifest::{
    emit_manifests, read_manifests, verify_integrity, IntegrityFailure, IntegrityReport, Manifest, ManifestPaths,
    CONFIG_FILE, LIST_FILES,
};
pub use pairing::{label_path_for, list_images, pair_modalities, Corpus, ImagePair, IMAGE_EXTENSIONS};
pub use report::{distribution_report, DistributionReport, ModalityCounts};
pub use split::{
    compute_size_thresholds, percentile, stratified_split, stratum_of, train_count, SizeCategory, SizeThresholds,
    SplitManifest, Stratum, StratumCount, PERCENTILES,
};
