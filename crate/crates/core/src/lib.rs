//! Building blocks for 6D object pose estimation: rigid-body geometry, object
//! models, pose metrics, PnP with RANSAC, ICP, dense feature matching, a small
//! pose regressor and a synthetic scene generator.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod features;
pub mod geometry;
pub mod icp;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pnp;
pub mod regressor;
pub mod rng;
pub mod spatial;
pub mod synth;
pub mod vfmt;
