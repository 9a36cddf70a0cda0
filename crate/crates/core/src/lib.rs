//! Keyframe-grouped dynamic Gaussian splatting with differential,
//! bandwidth-adaptive streaming.
//!
//! The crate covers both halves of the pipeline at desk scale:
//!
//! * training: [`grouping`] partitions a sequence into groups anchored by
//!   keyframes; [`train`] fits per-frame deltas inside a group and rebuilds a
//!   canonical space (with densification, culling and an inflation penalty)
//!   at each keyframe;
//! * streaming: [`codec`] packs keyframes as attribute images and deltas as
//!   sparse payloads, [`prune`] picks a usage-ordered pruning level per frame
//!   under a bandwidth budget, and [`stream`] runs a trace-driven session with
//!   transmitted-variation bookkeeping so pruned variation is never lost.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod error;
pub mod exec;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod render;
pub mod stream;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
