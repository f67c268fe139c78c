//! Lightweight RGB/IR drone-vs-bird detection stack built on a small CPU
//! tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - deterministic NCHW tensors, forward kernels, a tape for
//!   reverse-mode gradients and a finite-difference checker.
//! * [`blocks`] - GhostConv, GhostBottleneck, C3Ghost, EMA attention, SPPF,
//!   modulated deformable convolution, the detection heads and the 4-channel
//!   fusion stem, plus the C2f reference used for comparisons.
//! * [`model`] - the nano-scale EGD and baseline graphs, parameter/MAC
//!   accounting, prediction decoding and the weight-file format.
//! * [`restoration`] - adaptive median, Richardson-Lucy, unsharp masking,
//!   IR normalisation, bilinear resize and seeded augmentations.
//! * [`dataset`] - RGB/IR pairing, YOLO label parsing, size-quintile
//!   stratified splitting, manifests, integrity checks and reports.
//! * [`metrics`] - IoU, CIoU/BCE/focal losses, matching, P/R/F1, AP and
//!   mAP@50-95, and the latency benchmark harness.

pub mod blocks;
pub mod dataset;
mod error;
pub mod metrics;
pub mod model;
pub mod restoration;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
