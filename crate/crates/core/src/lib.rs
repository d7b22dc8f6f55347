//! Temporal-adaptive semantic segmentation for satellite image time series.
//!
//! A factorized temporal-then-spatial transformer is trained on random temporal
//! crops while an EMA teacher, fed the full sequence, distills its temporal,
//! spatial, prototype and soft-label knowledge into the student. A learnable
//! prototype bank injects class confidence into the segmentation logits and a
//! reconstruction head provides an auxiliary target for the temporal encoder.
//!
//! Evaluation crops every sequence from its first frame at a ladder of ratios
//! and summarizes the per-ratio mIoU with both the plain mean and the
//! length-decayed weighting that favours short sequences.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cropping;
pub mod data;
pub mod distillation;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prototype;
pub mod reconstruction;
pub mod trainer;

pub use error::{Result, TeaError};

// Training allocates many short-lived multi-megabyte buffers; the system
// allocator returns them to the OS on every free.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
