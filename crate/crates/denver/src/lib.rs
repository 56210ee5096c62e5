//! DeNVeR: unsupervised vessel segmentation for X-ray angiography videos.
//!
//! The pipeline decomposes an angiography clip into a deforming background
//! layer and a moving vessel foreground layer by test-time training, and
//! emits per-frame binary vessel masks:
//!
//! 1. preprocessing: Hessian-based vesselness prior masks + guidance optical flow
//! 2. stage 1: fit a canonical background image and its deformation field
//! 3. stage 2: jointly optimize per-frame masks, a canonical foreground,
//!    a low-DOF B-spline background motion and a stationary Eulerian
//!    vessel motion field against prior/parallel/warp/mask/reconstruction losses
//!
//! A seeded synthetic angiography generator (`synth`) provides ground truth
//! for end-to-end verification; `metrics` implements the evaluation suite.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod imaging_io;
pub mod metrics;
pub mod motion_fields;
pub mod nn;
pub mod optical_flow;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod types;
pub mod vessel_prior;

pub use error::{DenverError, Result};
pub use types::{FlowField, FlowSequence, MaskKind, MaskSequence, VideoClip};
