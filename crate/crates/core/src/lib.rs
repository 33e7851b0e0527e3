//! Two-stream contrast-oriented salient object detection.
//!
//! A multi-scale fully convolutional stream and a segment-wise spatial
//! pooling stream are fused by a learned attention map; an optional
//! fully connected CRF, guided by a spectral embedding of detected salient
//! contours, refines the result.

pub mod config;
pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod msfcn;
pub mod pipeline;
pub mod segment_stream;
pub mod segmentation;
pub mod tensor;
pub mod train;
pub mod weights_io;

pub use error::{Error, Result};
