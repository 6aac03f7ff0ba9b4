//! Desk-scale Mask R-CNN for nucleus instance segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, anchors, box-delta regression targets and NMS.
//! - [`maskops`]: binary masks, the DSB run-length codec, mask IoU, label
//!   maps, mask-head targets and mask pasting.
//! - [`autodiff`]: a small reverse-mode tape with exactly the kernels the
//!   detector needs, SGD with momentum, finite-difference gradient checking
//!   and checkpoints.
//! - [`detection`]: backbone, FPN, RPN, ROI-Align, heads, the multitask loss
//!   and end-to-end inference.
//! - [`data`]: dataset discovery, preprocessing, augmentation, splits and
//!   the synthetic nucleus generator.
//! - [`eval`]: greedy instance matching, COCO-style AP and mean mask IoU.
//! - [`config`] and [`pipeline`]: run configuration and the train / infer /
//!   eval / gradcheck commands used by the CLI.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod maskops;
pub mod pipeline;

pub use error::{Error, Result};
