//! Post-processing and evaluation of 6D object detections.
//!
//! A detection is a class, a confidence, a 2D box and a pose (unit
//! quaternion plus camera-frame translation). The crate provides:
//!
//! - [`geometry`]: quaternions, Euler angles, pinhole projection.
//! - [`records`]: JSONL / CSV input and output.
//! - [`postprocess`]: x,y recovery from depth, confidence thresholding,
//!   ignore-region filtering, max ensembling, threshold sweeps.
//! - [`metrics`]: pose-aware matching, AP/mAP, MAE, rotation error,
//!   precision and recall.
//! - [`losses`]: reference training losses with analytic gradients.
//! - [`synth`]: synthetic scenes and a brute-force mAP oracle.
//! - [`cli`]: the `pose6d` command line.
//!
//! Per-image work runs on rayon when the `parallel` feature (default) is
//! enabled; see [`exec::Exec`].

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod exec;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod postprocess;
pub mod records;
pub mod synth;

pub use exec::Exec;
pub use geometry::{BBox2D, CameraIntrinsics, EulerAngles, Pose, Quaternion, Translation};
pub use metrics::{EvaluationReport, LadderPair, ThresholdLadder};
pub use records::{Annotation, Detection, GroundTruth, IgnoreRegions, ImageRecord, Predictions};
