//! Assembled networks: the EGD variants (RGB, IR, early fusion) and the
//! YOLOv8 nano baseline, with accounting, decoding and weight files.

mod config;
mod decode;
mod graph;
mod report;
mod weights;

pub use config::{Architecture, EmaPlacement, Modality, VariantConfig};
pub use decode::{decode_predictions, dfl_expectation, nms, DecodeConfig, Detection};
pub use graph::{build_model, CostRow, Layer, LayerGraph, Node, STRIDES};
pub use report::{count_flops, count_params, CostReport, FLOP_CONVENTION};
pub use weights::{load_weights, load_weights_from_bytes, parse_weights, save_weights, weights_to_bytes, MAGIC, VERSION};
