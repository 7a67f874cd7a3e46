//! Pruning-aware one-stage object detection toolkit.
//!
//! * [`netcfg`] reads and writes darknet network descriptions and weights.
//! * [`graph`] infers shapes, counts parameters and finds channel couplings.
//! * [`nnops`] holds deterministic CPU kernels; [`model`] runs whole networks.
//! * [`detect`] decodes yolo heads and applies NMS; [`losses`] implements the
//!   CIoU, confidence and classification losses with analytic gradients.
//! * [`prune`] performs batch-norm γ channel slimming.
//! * [`data`], [`train`] and [`eval`] cover augmentation, toy-scale training,
//!   mAP and throughput measurement.

pub mod data;
pub mod detect;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod netcfg;
pub mod nnops;
pub mod prune;
pub mod rng;
pub mod train;
pub mod zoo;
