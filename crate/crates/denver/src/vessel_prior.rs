//! Hessian-based per-frame vessel prior masks and the distance-transform
//! direction field consumed by the parallel motion loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DenverError, Result};
use crate::imaging_io::{connected_components, distance_transform};
use crate::types::{MaskKind, MaskSequence, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Vessels darker than their surroundings (contrast-filled X-ray).
    DarkOnBright,
    BrightOnDark,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VesselnessConfig {
    /// Gaussian scales in pixels.
    pub scales: Vec<f32>,
    pub alpha_f: f32,
    /// Unused in the 2D variant; kept for config compatibility.
    pub beta_f: f32,
    /// Structureness sensitivity; `None` = half the max Hessian norm per frame.
    pub c_f: Option<f32>,
    pub polarity: Polarity,
}

impl Default for VesselnessConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 3.0, 4.0],
            alpha_f: 0.5,
            beta_f: 0.5,
            c_f: None,
            polarity: Polarity::DarkOnBright,
        }
    }
}

impl VesselnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(DenverError::Config("vesselness scale list is empty".into()));
        }
        if self.scales.iter().any(|s| *s <= 0.0) {
            return Err(DenverError::Config("vesselness scales must be positive".into()));
        }
        if self.alpha_f <= 0.0 || self.beta_f <= 0.0 || self.c_f.map_or(false, |c| c <= 0.0) {
            return Err(DenverError::Config("vesselness sensitivities must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Base fraction of pixels kept by the vesselness threshold.
    pub intensity_percentile: f32,
    /// Components smaller than this are discarded after region growing.
    pub min_component_area: usize,
    /// Quantile (over mask pixels) of vesselness used to pick growing seeds.
    pub seed_quantile: f32,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            intensity_percentile: 0.10,
            min_component_area: 50,
            seed_quantile: 0.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.intensity_percentile) || self.intensity_percentile <= 0.0 {
            return Err(DenverError::Config("intensity_percentile must be in (0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.seed_quantile) || self.seed_quantile <= 0.0 {
            return Err(DenverError::Config("seed_quantile must be in (0,1)".into()));
        }
        if self.min_component_area < 1 {
            return Err(DenverError::Config("min_component_area must be >= 1".into()));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with kernel radius 3*sigma, replicate borders.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i * i) as f32 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = img.dim();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp(x + ki as i64 - radius, w);
                acc += kv * img[[y, sx]];
            }
            tmp[[y, x as usize]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp(y + ki as i64 - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y as usize, x]] = acc;
        }
    }
    out
}

/// Scale-normalized Hessian (Ixx, Ixy, Iyy) of a Gaussian-smoothed image.
fn hessian_at_scale(frame: &Array2<f32>, sigma: f32) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let sm = gaussian_blur(frame, sigma);
    let (h, w) = sm.dim();
    let norm = sigma * sigma;
    let cl = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut ixx = Array2::zeros((h, w));
    let mut iyy = Array2::zeros((h, w));
    let mut ixy = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let v = |dy: i64, dx: i64| sm[[cl(y + dy, h), cl(x + dx, w)]];
            ixx[[y as usize, x as usize]] = norm * (v(0, 1) - 2.0 * v(0, 0) + v(0, -1));
            iyy[[y as usize, x as usize]] = norm * (v(1, 0) - 2.0 * v(0, 0) + v(-1, 0));
            ixy[[y as usize, x as usize]] =
                norm * 0.25 * (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1));
        }
    }
    (ixx, ixy, iyy)
}

/// Eigenvalues of the 2x2 symmetric Hessian ordered by magnitude |l1| <= |l2|.
pub fn hessian_eigenvalues(ixx: f32, ixy: f32, iyy: f32) -> (f32, f32) {
    let half_trace = 0.5 * (ixx + iyy);
    let disc = (0.5 * (ixx - iyy)).hypot(ixy);
    let (a, b) = (half_trace + disc, half_trace - disc);
    if a.abs() <= b.abs() {
        (a, b)
    } else {
        (b, a)
    }
}

/// Multiscale Frangi vesselness in [0,1].
pub fn frangi_vesselness(frame: &Array2<f32>, cfg: &VesselnessConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    let (h, w) = frame.dim();
    let mut best = Array2::<f32>::zeros((h, w));
    for &sigma in &cfg.scales {
        let (ixx, ixy, iyy) = hessian_at_scale(frame, sigma);
        // per-frame automatic structureness scale
        let c = match cfg.c_f {
            Some(c) => c,
            None => {
                let mut max_s = 0.0f32;
                for y in 0..h {
                    for x in 0..w {
                        let (l1, l2) =
                            hessian_eigenvalues(ixx[[y, x]], ixy[[y, x]], iyy[[y, x]]);
                        max_s = max_s.max(l1.hypot(l2));
                    }
                }
                (0.5 * max_s).max(1e-10)
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (l1, l2) = hessian_eigenvalues(ixx[[y, x]], ixy[[y, x]], iyy[[y, x]]);
                let wrong_sign = match cfg.polarity {
                    Polarity::DarkOnBright => l2 <= 0.0,
                    Polarity::BrightOnDark => l2 >= 0.0,
                };
                if wrong_sign {
                    continue;
                }
                let rb = l1 / l2;
                let s = l1.hypot(l2);
                let v = (-rb * rb / (2.0 * cfg.alpha_f * cfg.alpha_f)).exp()
                    * (1.0 - (-s * s / (2.0 * c * c)).exp());
                if v > best[[y, x]] {
                    best[[y, x]] = v;
                }
            }
        }
    }
    let mx = best.iter().cloned().fold(0.0f32, f32::max);
    if mx > 1.0 {
        best.mapv_inplace(|v| v / mx);
    }
    Ok(best)
}

/// Value at the q-th "keep fraction": threshold such that roughly a `keep`
/// fraction of strictly positive pixels pass.
fn keep_fraction_threshold(values: &Array2<f32>, keep: f32) -> f32 {
    let n = values.len();
    let k = ((keep * n as f32).ceil() as usize).clamp(1, n);
    let mut sorted: Vec<f32> = values.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted[k - 1]
}

/// Threshold the vesselness map; darker (contrast-rich) frames keep more
/// pixels: keep = intensity_percentile * clamp(2(1 - mean), 0.5, 2).
pub fn binarize_prior(
    vesselness: &Array2<f32>,
    frame: &Array2<f32>,
    cfg: &PriorConfig,
) -> Result<Array2<f32>> {
    if vesselness.dim() != frame.dim() {
        return Err(DenverError::Input("binarize: shape mismatch".into()));
    }
    let mean = frame.mean().unwrap_or(0.0);
    let k = (2.0 * (1.0 - mean)).clamp(0.5, 2.0);
    let keep = (cfg.intensity_percentile * k).min(0.95);
    let thr = keep_fraction_threshold(vesselness, keep);
    Ok(vesselness.mapv(|v| if v >= thr && v > 0.0 { 1.0 } else { 0.0 }))
}

/// Keep only mask components that contain a high-vesselness seed and are at
/// least `min_component_area` pixels.
pub fn region_grow_clean(
    mask: &Array2<f32>,
    vesselness: &Array2<f32>,
    cfg: &PriorConfig,
) -> Array2<f32> {
    let (h, w) = mask.dim();
    let mut inside: Vec<f32> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.5 {
                inside.push(vesselness[[y, x]]);
            }
        }
    }
    if inside.is_empty() {
        return Array2::zeros((h, w));
    }
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((cfg.seed_quantile * (inside.len() - 1) as f32).round() as usize)
        .min(inside.len() - 1);
    let seed_thr = inside[idx];

    let (labels, areas) = connected_components(mask);
    let mut keep = vec![false; areas.len()];
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l > 0 && vesselness[[y, x]] >= seed_thr {
                keep[(l - 1) as usize] = true;
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l > 0 {
                let i = (l - 1) as usize;
                if keep[i] && areas[i] >= cfg.min_component_area {
                    out[[y, x]] = 1.0;
                }
            }
        }
    }
    out
}

/// Per-frame prior masks H_t: frangi -> binarize -> region grow. Frames are
/// processed independently, so the result is not temporally continuous.
pub fn make_prior_masks(
    clip: &VideoClip,
    vcfg: &VesselnessConfig,
    pcfg: &PriorConfig,
) -> Result<MaskSequence> {
    pcfg.validate()?;
    let mut masks = Vec::with_capacity(clip.len());
    for frame in &clip.frames {
        let vess = frangi_vesselness(frame, vcfg)?;
        let bin = binarize_prior(&vess, frame, pcfg)?;
        masks.push(region_grow_clean(&bin, &vess, pcfg));
    }
    MaskSequence::new(masks, MaskKind::Binary)
}

/// Distance-transform gradient direction field with per-pixel validity.
/// V is zero outside the mask; pixels with |V| < 1e-6 are invalid.
pub struct DirectionField {
    pub vu: Array2<f32>,
    pub vv: Array2<f32>,
    pub valid: Array2<bool>,
}

pub fn vessel_direction_field(mask: &Array2<f32>) -> DirectionField {
    let d = distance_transform(mask);
    let (h, w) = d.dim();
    let cl = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut vu = Array2::zeros((h, w));
    let mut vv = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (yu, xu) = (y as usize, x as usize);
            if mask[[yu, xu]] <= 0.5 {
                continue;
            }
            let gu = 0.5 * (d[[yu, cl(x + 1, w)]] - d[[yu, cl(x - 1, w)]]);
            let gv = 0.5 * (d[[cl(y + 1, h), xu]] - d[[cl(y - 1, h), xu]]);
            vu[[yu, xu]] = gu;
            vv[[yu, xu]] = gv;
            if gu.hypot(gv) >= 1e-6 {
                valid[[yu, xu]] = true;
            }
        }
    }
    DirectionField { vu, vv, valid }
}
