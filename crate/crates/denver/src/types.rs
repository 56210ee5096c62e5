//! Core video-domain types: frame stacks, mask sequences, flow sequences.

use ndarray::Array2;

use crate::error::{DenverError, Result};

/// Ordered grayscale frame stack with intensities in [0,1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<Array2<f32>>,
    pub frame_ids: Vec<String>,
}

impl VideoClip {
    pub fn new(frames: Vec<Array2<f32>>, frame_ids: Vec<String>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(DenverError::Input(format!(
                "a clip needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let dim = frames[0].dim();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(DenverError::Input(format!(
                    "frame {} has resolution {:?}, expected {:?}",
                    i,
                    f.dim(),
                    dim
                )));
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(DenverError::Input(format!(
                    "frame {} has intensities outside [0,1]",
                    i
                )));
            }
        }
        if frame_ids.len() != frames.len() {
            return Err(DenverError::Input("frame_ids length mismatch".into()));
        }
        Ok(Self { frames, frame_ids })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width) of every frame.
    pub fn resolution(&self) -> (usize, usize) {
        self.frames[0].dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Soft,
    Binary,
}

/// Per-frame foreground/background masks, soft in [0,1] or binary {0,1}.
#[derive(Debug, Clone)]
pub struct MaskSequence {
    pub masks: Vec<Array2<f32>>,
    pub kind: MaskKind,
}

impl MaskSequence {
    pub fn new(masks: Vec<Array2<f32>>, kind: MaskKind) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            let ok = match kind {
                MaskKind::Soft => m.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
                MaskKind::Binary => m.iter().all(|v| *v == 0.0 || *v == 1.0),
            };
            if !ok {
                return Err(DenverError::Input(format!(
                    "mask {} violates {:?} value constraints",
                    i, kind
                )));
            }
        }
        Ok(Self { masks, kind })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Dense 2D displacement field. `u` is the horizontal (column) component,
/// `v` the vertical (row) component, both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }
}

/// Dense flow fields for consecutive frame pairs.
#[derive(Debug, Clone)]
pub struct FlowSequence {
    pub flows: Vec<FlowField>,
    /// (t, t+1) source/target frame indices for each field.
    pub pairing: Vec<(usize, usize)>,
}

impl FlowSequence {
    pub fn for_clip(flows: Vec<FlowField>) -> Result<Self> {
        for (i, f) in flows.iter().enumerate() {
            if !f.is_finite() {
                return Err(DenverError::Numeric(format!("flow {} has non-finite values", i)));
            }
        }
        let pairing = (0..flows.len()).map(|t| (t, t + 1)).collect();
        Ok(Self { flows, pairing })
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }
}
