//! Seeded synthetic angiography generator: a deforming low-frequency
//! background plus a branching vessel tree whose dark tubes appear
//! progressively as a contrast front advances along the centerlines. Ground
//! truth (visible-tube masks, background flows) comes out exact because the
//! frames are rendered from it.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DenverError, Result};
use crate::imaging_io::{save_binary_mask, save_gray_image, warp_bilinear, write_flo};
use crate::motion_fields::lattice_coords;
use crate::types::{FlowField, MaskKind, MaskSequence, VideoClip};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    pub branches: usize,
    pub max_depth: usize,
    pub radius_root: f32,
    /// Contrast-front speed in centerline pixels per frame.
    pub contrast_speed: f32,
    /// Heartbeat deformation period (frames) and spatial amplitude (pixels).
    pub heartbeat_period: f32,
    pub heartbeat_amp: f32,
    pub noise_sigma: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 128,
            frames: 24,
            branches: 2,
            max_depth: 4,
            radius_root: 4.0,
            contrast_speed: 12.0,
            heartbeat_period: 12.0,
            heartbeat_amp: 3.0,
            noise_sigma: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.frames < 2 || self.branches < 1 {
            return Err(DenverError::Config(
                "synth needs size >= 16, frames >= 2, branches >= 1".into(),
            ));
        }
        if self.radius_root <= 0.0 || self.heartbeat_period <= 0.0 {
            return Err(DenverError::Config(
                "synth radius_root and heartbeat_period must be positive".into(),
            ));
        }
        if self.contrast_speed < 0.0 || self.heartbeat_amp < 0.0 || self.noise_sigma < 0.0 {
            return Err(DenverError::Config(
                "synth speeds, amplitudes and noise must be >= 0".into(),
            ));
        }
        if self.heartbeat_amp >= self.size as f32 / 8.0 {
            return Err(DenverError::Config(format!(
                "heartbeat_amp {} too large for size {}",
                self.heartbeat_amp, self.size
            )));
        }
        Ok(())
    }
}

/// One quadratic-curve centerline segment with constant radius.
#[derive(Debug, Clone, Serialize)]
pub struct VesselSegment {
    pub p0: [f32; 2], // (x, y)
    pub p1: [f32; 2], // curve control point
    pub p2: [f32; 2],
    pub radius: f32,
    /// Arc length from the tree root to this segment's start.
    pub arc_start: f32,
    pub depth: usize,
}

impl VesselSegment {
    pub fn point_at(&self, s: f32) -> [f32; 2] {
        let t = 1.0 - s;
        [
            t * t * self.p0[0] + 2.0 * t * s * self.p1[0] + s * s * self.p2[0],
            t * t * self.p0[1] + 2.0 * t * s * self.p1[1] + s * s * self.p2[1],
        ]
    }

    pub fn arc_length(&self) -> f32 {
        let mut len = 0.0;
        let mut prev = self.point_at(0.0);
        for i in 1..=16 {
            let p = self.point_at(i as f32 / 16.0);
            len += (p[0] - prev[0]).hypot(p[1] - prev[1]);
            prev = p;
        }
        len
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VesselTree {
    pub segments: Vec<VesselSegment>,
}

impl VesselTree {
    pub fn max_arc(&self) -> f32 {
        self.segments
            .iter()
            .map(|s| s.arc_start + s.arc_length())
            .fold(0.0, f32::max)
    }
}

/// Recursive branching tree: each node spawns `cfg.branches` children with
/// radius parent * 0.75 until `max_depth`; segments are quadratic curves
/// bent by a seeded perpendicular offset. Children leaving the frame are
/// pruned.
pub fn grow_vessel_tree(seed: u64, cfg: &SynthConfig) -> Result<VesselTree> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size as f32;
    let seg_len = 0.8 * size / (cfg.max_depth + 1) as f32;
    let mut segments = Vec::new();
    let root = [size * 0.5 + rng.gen_range(-0.05..0.05) * size, size * 0.06];
    let mut stack = vec![(root, std::f32::consts::FRAC_PI_2, cfg.radius_root, 0.0f32, 0usize)];
    while let Some((p0, angle, radius, arc_start, depth)) = stack.pop() {
        let dir = [angle.cos(), angle.sin()];
        let p2 = [p0[0] + dir[0] * seg_len, p0[1] + dir[1] * seg_len];
        let bend = rng.gen_range(-0.25..0.25) * seg_len;
        let mid = [(p0[0] + p2[0]) * 0.5, (p0[1] + p2[1]) * 0.5];
        let p1 = [mid[0] - dir[1] * bend, mid[1] + dir[0] * bend];
        let seg = VesselSegment {
            p0,
            p1,
            p2,
            radius,
            arc_start,
            depth,
        };
        let end_arc = arc_start + seg.arc_length();
        let in_bounds = p2[0] > 0.0 && p2[0] < size && p2[1] > 0.0 && p2[1] < size;
        segments.push(seg);
        if depth < cfg.max_depth && in_bounds {
            for b in 0..cfg.branches {
                // fan the children across roughly +-45 degrees
                let spread = if cfg.branches == 1 {
                    rng.gen_range(-0.3..0.3)
                } else {
                    let frac = b as f32 / (cfg.branches - 1) as f32; // 0..1
                    (frac - 0.5) * 1.6 + rng.gen_range(-0.15..0.15)
                };
                stack.push((p2, angle + spread, radius * 0.75, end_arc, depth + 1));
            }
        }
    }
    Ok(VesselTree { segments })
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub clip: VideoClip,
    pub gt_masks: MaskSequence,
    /// Per-frame frame-to-canonical background displacement fields:
    /// frame_t(x) = canonical(x + flow_t(x)).
    pub gt_bg_flows: Vec<FlowField>,
    pub tree: VesselTree,
    pub canonical_bg: Array2<f32>,
}

/// Smooth low-frequency random texture in roughly [0.35, 0.9].
fn canonical_background(rng: &mut ChaCha8Rng, size: usize) -> Array2<f32> {
    let n_waves = 4;
    let waves: Vec<(f32, f32, f32, f32)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),  // cycles across the image, x
                rng.gen_range(0.5..2.5),  // cycles, y
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.04..0.09), // amplitude
            )
        })
        .collect();
    let s = size as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let mut v = 0.62;
        for (fx, fy, ph, amp) in &waves {
            v += amp
                * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / s + ph).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Spatial unit pattern of the heartbeat deformation: a cubic B-spline over
/// a small random control grid, normalized to peak magnitude 1.
fn deformation_pattern(rng: &mut ChaCha8Rng, size: usize) -> (Array2<f32>, Array2<f32>) {
    let nc = 5;
    let cu: Vec<f64> = (0..nc * nc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..nc * nc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut u = Array2::zeros((size, size));
    let mut v = Array2::zeros((size, size));
    let mut peak = 0.0f64;
    for y in 0..size {
        let (by, wy) = lattice_coords(y as f64, size, nc);
        for x in 0..size {
            let (bx, wx) = lattice_coords(x as f64, size, nc);
            let mut au = 0.0;
            let mut av = 0.0;
            for ky in 0..4 {
                for kx in 0..4 {
                    let yy = (by + ky).min(nc - 1);
                    let xx = (bx + kx).min(nc - 1);
                    let wgt = wy[ky] * wx[kx];
                    au += wgt * cu[yy * nc + xx];
                    av += wgt * cv[yy * nc + xx];
                }
            }
            u[[y, x]] = au as f32;
            v[[y, x]] = av as f32;
            peak = peak.max(au.hypot(av));
        }
    }
    if peak > 0.0 {
        let inv = (1.0 / peak) as f32;
        u.mapv_inplace(|a| a * inv);
        v.mapv_inplace(|a| a * inv);
    }
    (u, v)
}

fn gaussian_noise(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

pub fn generate_video(cfg: &SynthConfig) -> Result<SynthSample> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let canonical = canonical_background(&mut rng, size);
    let (pat_u, pat_v) = deformation_pattern(&mut rng, size);
    let tree = grow_vessel_tree(rng.gen(), cfg)?;

    // densely sampled centerline points: (x, y, arc_from_root, radius)
    let mut points: Vec<(f32, f32, f32, f32)> = Vec::new();
    for seg in &tree.segments {
        let len = seg.arc_length();
        let n = (len / 0.25).ceil().max(1.0) as usize;
        let mut arc = 0.0;
        let mut prev = seg.point_at(0.0);
        for i in 0..=n {
            let p = seg.point_at(i as f32 / n as f32);
            arc += (p[0] - prev[0]).hypot(p[1] - prev[1]);
            prev = p;
            points.push((p[0], p[1], seg.arc_start + arc, seg.radius));
        }
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let mut flows = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let phase = (std::f32::consts::TAU * t as f32 / cfg.heartbeat_period).sin();
        let a = cfg.heartbeat_amp * phase;
        let flow = FlowField {
            u: pat_u.mapv(|p| p * a),
            v: pat_v.mapv(|p| p * a),
        };
        let bg = warp_bilinear(&canonical, &flow)?;

        // vessels ride the same deformation: content at x came from x + flow,
        // so a centerline point p renders at the x solving p = x + flow(x);
        // one fixed-point step is plenty for these smooth fields
        let front = cfg.contrast_speed * t as f32;
        let mut dip = Array2::<f32>::zeros((size, size));
        let mut mask = Array2::<f32>::zeros((size, size));
        for &(px, py, arc, r) in &points {
            if arc > front {
                continue;
            }
            let ix = px.round().clamp(0.0, size as f32 - 1.0) as usize;
            let iy = py.round().clamp(0.0, size as f32 - 1.0) as usize;
            let mx = px - flow.u[[iy, ix]];
            let my = py - flow.v[[iy, ix]];
            let (x0, x1) = ((mx - r).floor() as i64, (mx + r).ceil() as i64);
            let (y0, y1) = ((my - r).floor() as i64, (my + r).ceil() as i64);
            for yy in y0.max(0)..=y1.min(size as i64 - 1) {
                for xx in x0.max(0)..=x1.min(size as i64 - 1) {
                    let d = (xx as f32 - mx).hypot(yy as f32 - my);
                    if d <= r {
                        let q = [yy as usize, xx as usize];
                        mask[q] = 1.0;
                        let profile = (std::f32::consts::FRAC_PI_2 * d / r).cos();
                        let depth_dip = 0.35 * (r / cfg.radius_root) * profile;
                        if depth_dip > dip[q] {
                            dip[q] = depth_dip;
                        }
                    }
                }
            }
        }

        let mut frame = bg.clone();
        for ((f, d), _m) in frame.iter_mut().zip(dip.iter()).zip(mask.iter()) {
            *f -= d;
        }
        if cfg.noise_sigma > 0.0 {
            for f in frame.iter_mut() {
                *f += gaussian_noise(&mut rng, cfg.noise_sigma);
            }
        }
        frame.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(frame);
        masks.push(mask);
        flows.push(flow);
    }

    let ids = (0..cfg.frames).map(|i| format!("{:05}", i)).collect();
    Ok(SynthSample {
        clip: VideoClip::new(frames, ids)?,
        gt_masks: MaskSequence::new(masks, MaskKind::Binary)?,
        gt_bg_flows: flows,
        tree,
        canonical_bg: canonical,
    })
}

/// Write a sample directory: frames/, gt_masks/, gt_flows/ plus a manifest
/// with the config.
pub fn write_sample(dir: &Path, sample: &SynthSample, cfg: &SynthConfig) -> Result<()> {
    for sub in ["frames", "gt_masks", "gt_flows"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, frame) in sample.clip.frames.iter().enumerate() {
        save_gray_image(frame, &dir.join(format!("frames/{:05}.png", i)))?;
        save_binary_mask(
            &sample.gt_masks.masks[i],
            &dir.join(format!("gt_masks/{:05}.png", i)),
        )?;
        write_flo(
            &sample.gt_bg_flows[i],
            &dir.join(format!("gt_flows/bg_{:05}.flo", i)),
        )?;
    }
    save_gray_image(&sample.canonical_bg, &dir.join("canonical_bg.png"))?;
    let manifest = serde_json::json!({ "config": cfg, "kind": "synth_sample" });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
