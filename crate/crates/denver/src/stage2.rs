//! Stage 2: joint test-time optimization of per-frame masks, a canonical
//! foreground, a B-spline background motion and a stationary Eulerian vessel
//! motion field, with the stage-1 background frozen.
//!
//! Losses (all sums over pixels):
//!   prior    = sum H.M^b + alpha (1-H)(1-M^b)          (M^b: background mask)
//!   parallel = sum |V.F| / (|V||F|) over valid pixels
//!   warp     = sum_l sum_t M^l_t |F^l_t - F^l_{t+1}(x+F_guid)| / (s^l_t + s^l_{t+1})
//!   mask     = sum_t |M^f_t - M^f_{t+1}| + |M^b_t - M^b_{t+1}|
//!   rec      = sum_t |I_hat_t - I_t|,  I_hat = M^f C^f(x+F^f) + M^b BG
//! combined as the weighted sum of the five parts.

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph, Var};
use crate::error::{DenverError, Result};
use crate::motion_fields::{
    compose_vessel_flow, flow_scale, to_flow_field, LayerFlows, SpaceTimeBSplineField,
};
use crate::nn::{Adam, Binding, ForegroundGenerator, MaskNet, ParamStore};
use crate::types::{FlowField, FlowSequence, MaskKind, MaskSequence, VideoClip};
use crate::vessel_prior::{vessel_direction_field, DirectionField};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lambda_prior: f64,
    pub lambda_parallel: f64,
    pub lambda_warp: f64,
    pub lambda_mask: f64,
    pub lambda_rec: f64,
    /// Foreground weight alpha of the prior loss.
    pub alpha_prior: f64,
    /// Override alpha_prior per frame with that frame's own prior fg/bg pixel
    /// ratio. The prior loss is linear in the mask, so a fixed alpha leaves a
    /// net uniform drive on every step; on clips with a moving contrast front
    /// the per-frame class balance swings enough that the softmax can saturate
    /// to one layer and never recover. Balancing per frame removes the drive.
    pub balance_prior: bool,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Absolute steps at which each deferred loss switches on.
    pub enable_parallel_at: usize,
    pub enable_warp_at: usize,
    pub enable_rec_at: usize,
    pub unet_base: usize,
    pub fg_latent_channels: usize,
    pub bspline_spatial: usize,
    pub log_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_prior: 0.5,
            lambda_parallel: 0.05,
            lambda_warp: 0.1,
            lambda_mask: 0.1,
            lambda_rec: 0.5,
            alpha_prior: 0.5,
            balance_prior: false,
            warmup_steps: 500,
            total_steps: 2500,
            lr: 1e-3,
            seed: 0,
            enable_parallel_at: 500,
            enable_warp_at: 700,
            enable_rec_at: 900,
            unet_base: 6,
            fg_latent_channels: 16,
            bspline_spatial: 6,
            log_every: 50,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.lambda_prior,
            self.lambda_parallel,
            self.lambda_warp,
            self.lambda_mask,
            self.lambda_rec,
            self.alpha_prior,
        ];
        if ws.iter().any(|w| *w < 0.0) {
            return Err(DenverError::Config("stage2 loss weights must be >= 0".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(DenverError::Config(
                "stage2 warmup_steps must be < total_steps".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Stage2LossRow {
    pub step: usize,
    pub prior: f64,
    pub parallel: f64,
    pub warp: f64,
    pub mask: f64,
    pub rec: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub soft_masks: MaskSequence,
    pub binary_masks: MaskSequence,
    pub canonical_fg: Array2<f32>,
    pub layer_flows: LayerFlows,
    pub loss_trace: Vec<Stage2LossRow>,
}

fn const2(g: &mut Graph, a: &Array2<f32>) -> Var {
    let (h, w) = a.dim();
    let mut out = Arr::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = a[[y, x]] as f64;
        }
    }
    g.constant(out)
}

/// Hessian-prior disagreement: sum H.M^b + alpha (1-H)(1-M^b). `h_prior` is
/// the binary prior mask; `mb` the soft background mask [H,W].
pub fn loss_prior(g: &mut Graph, h_prior: &Array2<f32>, mb: Var, alpha: f64) -> Result<Var> {
    let shape = g.value(mb).shape().to_vec();
    if shape != [h_prior.dim().0, h_prior.dim().1] {
        return Err(DenverError::Input(format!(
            "prior mask {:?} vs soft mask {:?}",
            h_prior.dim(),
            shape
        )));
    }
    let hc = const2(g, h_prior);
    let t1 = g.mul(hc, mb);
    let t1 = g.sum(t1);
    let inv_h = const2(g, &h_prior.mapv(|v| 1.0 - v));
    let neg = g.scale(mb, -1.0);
    let inv_mb = g.add_const(neg, 1.0);
    let t2 = g.mul(inv_h, inv_mb);
    let t2 = g.sum(t2);
    let t2 = g.scale(t2, alpha);
    Ok(g.add(t1, t2))
}

/// Cosine alignment of the vessel-layer flow with the vessel cross-section
/// direction, summed over valid pixels; flow [2,H,W].
pub fn loss_parallel(g: &mut Graph, dir: &DirectionField, flow: Var) -> Var {
    let vu = dir.vu.mapv(|v| v as f64);
    let vv = dir.vv.mapv(|v| v as f64);
    g.parallel_loss(flow, vu, vv, dir.valid.clone())
}

/// One layer and one frame pair of the flow warp loss:
/// sum_x M_t(x) |F_t(x) - F_{t+1}(x + guidance(x))| / (s_t + s_{t+1}).
pub fn loss_warp_pair(
    g: &mut Graph,
    f_t: Var,
    f_t1: Var,
    mask_t: Var,
    guidance: &FlowField,
    s_t: f64,
    s_t1: f64,
) -> Var {
    let gc = g.constant(crate::motion_fields::from_flow_field(guidance));
    let warped = g.grid_sample(f_t1, gc);
    let diff = g.sub(f_t, warped);
    let n = g.vecnorm_eps(diff, 1e-12);
    let weighted = g.mul(mask_t, n);
    let s = g.sum(weighted);
    g.scale(s, 1.0 / (s_t + s_t1))
}

/// Temporal mask consistency for one adjacent pair: L1 over both channels of
/// the [2,H,W] softmax outputs.
pub fn loss_mask_pair(g: &mut Graph, masks_t: Var, masks_t1: Var) -> Var {
    let d = g.sub(masks_t, masks_t1);
    let a = g.abs(d);
    g.sum(a)
}

/// Composite render of one frame and its L1 reconstruction loss.
/// `masks` [2,H,W] (fg, bg), `canonical_fg` [1,H,W], `vessel_flow` [2,H,W].
pub fn render_and_rec_frame(
    g: &mut Graph,
    frame: &Array2<f32>,
    bg_render: &Array2<f32>,
    canonical_fg: Var,
    vessel_flow: Var,
    masks: Var,
) -> (Var, Var) {
    let warped = g.grid_sample(canonical_fg, vessel_flow);
    let (h, w) = frame.dim();
    let cf = g.reshape(warped, &[h, w]);
    let mf = g.channel(masks, 0);
    let mb = g.channel(masks, 1);
    let fg_part = g.mul(mf, cf);
    let bgc = const2(g, bg_render);
    let bg_part = g.mul(mb, bgc);
    let recon = g.add(fg_part, bg_part);
    let ic = const2(g, frame);
    let d = g.sub(recon, ic);
    let a = g.abs(d);
    let rec = g.sum(a);
    (recon, rec)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stage2LossParts {
    pub prior: f64,
    pub parallel: f64,
    pub warp: f64,
    pub mask: f64,
    pub rec: f64,
}

/// Weighted total of the five parts; rejects non-finite inputs.
pub fn loss_total(parts: &Stage2LossParts, cfg: &Stage2Config) -> Result<f64> {
    let vals = [parts.prior, parts.parallel, parts.warp, parts.mask, parts.rec];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(DenverError::Numeric(format!(
            "non-finite stage2 loss part: {:?}",
            parts
        )));
    }
    Ok(cfg.lambda_prior * parts.prior
        + cfg.lambda_parallel * parts.parallel
        + cfg.lambda_warp * parts.warp
        + cfg.lambda_mask * parts.mask
        + cfg.lambda_rec * parts.rec)
}

/// All trainable stage-2 state.
struct Stage2Model {
    store: ParamStore,
    masknet: MaskNet,
    fg_gen: ForegroundGenerator,
    bspline: SpaceTimeBSplineField,
    eulerian_id: usize,
}

impl Stage2Model {
    fn new(h: usize, w: usize, t_len: usize, cfg: &Stage2Config) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let masknet = MaskNet::new(&mut store, &mut rng, cfg.unet_base);
        let fg_gen =
            ForegroundGenerator::new(&mut store, &mut rng, h, w, cfg.fg_latent_channels)?;
        let ct = 4.max(t_len.div_ceil(8));
        let bspline = SpaceTimeBSplineField::new(
            &mut store,
            "bg_motion",
            ct,
            cfg.bspline_spatial,
            cfg.bspline_spatial,
            t_len,
            h,
            w,
        )?;
        let eulerian_id = store.register("eulerian", Arr::zeros(IxDyn(&[2, h, w])));
        Ok(Self {
            store,
            masknet,
            fg_gen,
            bspline,
            eulerian_id,
        })
    }

    /// MaskNet input for frame t: [2,H,W] = intensity + normalized-time plane.
    fn frame_input(clip: &VideoClip, t: usize) -> Arr {
        let (h, w) = clip.resolution();
        let t_norm = crate::stage1::norm_coord(t, clip.len());
        let mut input = Arr::zeros(IxDyn(&[2, h, w]));
        for y in 0..h {
            for x in 0..w {
                input[[0, y, x]] = clip.frames[t][[y, x]] as f64;
                input[[1, y, x]] = t_norm;
            }
        }
        input
    }

    /// Softmax masks [2,H,W] for frame t.
    fn masks(&self, g: &mut Graph, bind: &Binding, clip: &VideoClip, t: usize) -> Var {
        let input = g.constant(Self::frame_input(clip, t));
        let logits = self.masknet.forward(g, bind, input);
        g.softmax_c(logits)
    }

    /// Composed vessel-layer flow and the background flow for frame t.
    fn layer_flows_at(
        &self,
        g: &mut Graph,
        bind: &Binding,
        t: usize,
    ) -> Result<(Var, Var)> {
        let fb = self.bspline.eval(g, bind, t as f64)?;
        let e = bind.var(self.eulerian_id);
        let ff = compose_vessel_flow(g, e, fb);
        Ok((ff, fb))
    }
}

fn mask_plane(g: &Graph, masks: Var, ch: usize) -> Array2<f64> {
    let mv = g.value(masks);
    let (h, w) = (mv.shape()[1], mv.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| mv[[ch, y, x]])
}

/// Joint stage-2 optimization. `priors` are the binary Hessian masks,
/// `guidance` the precomputed frame-to-frame flows, `bg_frames` the frozen
/// stage-1 background renders.
pub fn run_stage2(
    clip: &VideoClip,
    priors: &MaskSequence,
    guidance: &FlowSequence,
    bg_frames: &[Array2<f32>],
    cfg: &Stage2Config,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let (h, w) = clip.resolution();
    let t_len = clip.len();
    if priors.masks.len() != t_len || bg_frames.len() != t_len {
        return Err(DenverError::Input(format!(
            "stage2 needs {} priors and background renders, got {} and {}",
            t_len,
            priors.masks.len(),
            bg_frames.len()
        )));
    }
    if guidance.flows.len() != t_len - 1 {
        return Err(DenverError::Input(format!(
            "stage2 needs {} guidance flows, got {}",
            t_len - 1,
            guidance.flows.len()
        )));
    }

    let model = Stage2Model::new(h, w, t_len, cfg)?;
    let mut store = model.store.clone();
    let dirs: Vec<DirectionField> = priors
        .masks
        .iter()
        .map(vessel_direction_field)
        .collect();
    let frame_alpha: Vec<f64> = priors
        .masks
        .iter()
        .map(|m| {
            let fg = m.iter().filter(|v| **v > 0.5).count() as f64;
            let bg = m.len() as f64 - fg;
            if cfg.balance_prior && bg > 0.0 {
                fg / bg
            } else {
                cfg.alpha_prior
            }
        })
        .collect();
    let mut adam = Adam::new(cfg.lr, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a6_e200);
    let mut trace = Vec::new();
    let norm = 1.0 / (h * w) as f64;

    for step in 0..cfg.total_steps {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mut parts = Stage2LossParts::default();
        let mut objective: Option<Var> = None;
        let push = |g: &mut Graph, obj: &mut Option<Var>, v: Var, lambda: f64| {
            let s = g.scale(v, lambda * norm);
            *obj = Some(match obj {
                None => s,
                Some(acc) => g.add(*acc, s),
            });
        };

        if step < cfg.warmup_steps {
            // phase A: mask warm start on the prior only
            let t = rng.gen_range(0..t_len);
            let masks = model.masks(&mut g, &bind, clip, t);
            let mb = g.channel(masks, 1);
            let lp = loss_prior(&mut g, &priors.masks[t], mb, frame_alpha[t])?;
            parts.prior = g.scalar_value(lp);
            push(&mut g, &mut objective, lp, cfg.lambda_prior);
        } else {
            // phase B: joint optimization on a random adjacent pair
            let t = rng.gen_range(0..t_len - 1);
            let masks_t = model.masks(&mut g, &bind, clip, t);
            let masks_t1 = model.masks(&mut g, &bind, clip, t + 1);
            let mb_t = g.channel(masks_t, 1);
            let mb_t1 = g.channel(masks_t1, 1);
            let lp_a = loss_prior(&mut g, &priors.masks[t], mb_t, frame_alpha[t])?;
            let lp_b = loss_prior(&mut g, &priors.masks[t + 1], mb_t1, frame_alpha[t + 1])?;
            let lp = g.add(lp_a, lp_b);
            parts.prior = g.scalar_value(lp);
            push(&mut g, &mut objective, lp, cfg.lambda_prior);

            let (ff_t, fb_t) = model.layer_flows_at(&mut g, &bind, t)?;
            let (ff_t1, fb_t1) = model.layer_flows_at(&mut g, &bind, t + 1)?;

            if step >= cfg.enable_parallel_at {
                let pa = loss_parallel(&mut g, &dirs[t], ff_t);
                let pb = loss_parallel(&mut g, &dirs[t + 1], ff_t1);
                let lpar = g.add(pa, pb);
                parts.parallel = g.scalar_value(lpar);
                push(&mut g, &mut objective, lpar, cfg.lambda_parallel);
            }

            if step >= cfg.enable_warp_at {
                let mf_t = g.channel(masks_t, 0);
                let mf_plane = mask_plane(&g, masks_t, 0);
                let mb_plane = mask_plane(&g, masks_t, 1);
                let mf1_plane = mask_plane(&g, masks_t1, 0);
                let mb1_plane = mask_plane(&g, masks_t1, 1);
                let sf_t = flow_scale(g.value(ff_t), &mf_plane);
                let sf_t1 = flow_scale(g.value(ff_t1), &mf1_plane);
                let sb_t = flow_scale(g.value(fb_t), &mb_plane);
                let sb_t1 = flow_scale(g.value(fb_t1), &mb1_plane);
                let wf = loss_warp_pair(
                    &mut g,
                    ff_t,
                    ff_t1,
                    mf_t,
                    &guidance.flows[t],
                    sf_t,
                    sf_t1,
                );
                let wb = loss_warp_pair(
                    &mut g,
                    fb_t,
                    fb_t1,
                    mb_t,
                    &guidance.flows[t],
                    sb_t,
                    sb_t1,
                );
                let lw = g.add(wf, wb);
                parts.warp = g.scalar_value(lw);
                push(&mut g, &mut objective, lw, cfg.lambda_warp);

                let lm = loss_mask_pair(&mut g, masks_t, masks_t1);
                parts.mask = g.scalar_value(lm);
                push(&mut g, &mut objective, lm, cfg.lambda_mask);
            }

            if step >= cfg.enable_rec_at {
                let cf = model.fg_gen.forward(&mut g, &bind);
                let (_, ra) = render_and_rec_frame(
                    &mut g,
                    &clip.frames[t],
                    &bg_frames[t],
                    cf,
                    ff_t,
                    masks_t,
                );
                let (_, rb) = render_and_rec_frame(
                    &mut g,
                    &clip.frames[t + 1],
                    &bg_frames[t + 1],
                    cf,
                    ff_t1,
                    masks_t1,
                );
                let lr = g.add(ra, rb);
                parts.rec = g.scalar_value(lr);
                push(&mut g, &mut objective, lr, cfg.lambda_rec);
            }
        }

        let total = loss_total(&parts, cfg)
            .map_err(|e| DenverError::Numeric(format!("stage2 step {}: {}", step, e)))?;
        let objective = objective.expect("at least one loss is always active");
        g.backward(objective);
        let grads = bind.grads(&g);
        adam.step(&mut store, &grads)
            .map_err(|e| DenverError::Numeric(format!("stage2 step {}: {}", step, e)))?;

        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            trace.push(Stage2LossRow {
                step,
                prior: parts.prior,
                parallel: parts.parallel,
                warp: parts.warp,
                mask: parts.mask,
                rec: parts.rec,
                total,
            });
        }
    }

    // final inference with trained parameters
    let model = Stage2Model { store, ..model };
    finalize(clip, &model, trace)
}

fn finalize(
    clip: &VideoClip,
    model: &Stage2Model,
    trace: Vec<Stage2LossRow>,
) -> Result<SegmentationResult> {
    let t_len = clip.len();
    let mut soft = Vec::with_capacity(t_len);
    let mut binary = Vec::with_capacity(t_len);
    let mut bg_flows = Vec::with_capacity(t_len);
    let mut fg_flows = Vec::with_capacity(t_len);
    let mut canonical_fg = Array2::zeros(clip.resolution());
    for t in 0..t_len {
        let mut g = Graph::new();
        let bind = model.store.bind_frozen(&mut g);
        let masks = model.masks(&mut g, &bind, clip, t);
        let mf = mask_plane(&g, masks, 0);
        soft.push(mf.mapv(|v| v as f32));
        binary.push(mf.mapv(|v| if v > 0.5 { 1.0f32 } else { 0.0 }));
        let (ff, fb) = model.layer_flows_at(&mut g, &bind, t)?;
        fg_flows.push(to_flow_field(g.value(ff)));
        bg_flows.push(to_flow_field(g.value(fb)));
        if t == 0 {
            let cf = model.fg_gen.forward(&mut g, &bind);
            let cv = g.value(cf);
            canonical_fg = Array2::from_shape_fn(clip.resolution(), |(y, x)| {
                cv[[0, y, x]] as f32
            });
        }
    }
    Ok(SegmentationResult {
        soft_masks: MaskSequence::new(soft, MaskKind::Soft)?,
        binary_masks: MaskSequence::new(binary, MaskKind::Binary)?,
        canonical_fg,
        layer_flows: LayerFlows {
            background: bg_flows,
            foreground: fg_flows,
        },
        loss_trace: trace,
    })
}

pub fn loss_trace_csv(trace: &[Stage2LossRow]) -> String {
    let mut s = String::from("step,prior,parallel,warp,mask,rec,total\n");
    for r in trace {
        s += &format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.prior, r.parallel, r.warp, r.mask, r.rec, r.total
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MaskKind;

    fn leaf2(g: &mut Graph, a: &Array2<f64>) -> Var {
        g.leaf(a.clone().into_dyn())
    }

    fn leaf_flow(g: &mut Graph, u: f64, v: f64, h: usize, w: usize) -> Var {
        let mut f = Arr::zeros(IxDyn(&[2, h, w]));
        f.index_axis_mut(ndarray::Axis(0), 0).fill(u);
        f.index_axis_mut(ndarray::Axis(0), 1).fill(v);
        g.leaf(f)
    }

    #[test]
    fn prior_loss_examples() {
        let mut g = Graph::new();
        // M^b = 1 - H -> 0 for any alpha
        let mut h_mask = Array2::zeros((10, 10));
        for i in 0..10 {
            h_mask[[i, i]] = 1.0;
        }
        let mb = h_mask.mapv(|v: f32| 1.0 - v as f64);
        let mbv = leaf2(&mut g, &mb);
        let l = loss_prior(&mut g, &h_mask, mbv, 0.7).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        // H all ones, M^b all ones, N pixels -> N
        let ones = Array2::from_elem((8, 8), 1.0f32);
        let mb1 = Array2::from_elem((8, 8), 1.0f64);
        let mbv = leaf2(&mut g, &mb1);
        let l = loss_prior(&mut g, &ones, mbv, 0.5).unwrap();
        assert_eq!(g.scalar_value(l), 64.0);
        // 10 vessel px in 100, M^b = 0.5, alpha = 0.5 -> 27.5
        let mut h10 = Array2::zeros((10, 10));
        for x in 0..10 {
            h10[[4, x]] = 1.0;
        }
        let half = Array2::from_elem((10, 10), 0.5f64);
        let mbv = leaf2(&mut g, &half);
        let l = loss_prior(&mut g, &h10, mbv, 0.5).unwrap();
        assert!((g.scalar_value(l) - 27.5).abs() < 1e-9);
        // shape mismatch
        let bad = leaf2(&mut g, &Array2::zeros((5, 5)));
        assert!(loss_prior(&mut g, &h10, bad, 0.5).is_err());
    }

    fn horizontal_dir(h: usize, w: usize, valid_px: &[(usize, usize)]) -> DirectionField {
        let mut vu = Array2::zeros((h, w));
        let mut valid = Array2::from_elem((h, w), false);
        for &(y, x) in valid_px {
            vu[[y, x]] = 1.0;
            valid[[y, x]] = true;
        }
        DirectionField {
            vu,
            vv: Array2::zeros((h, w)),
            valid,
        }
    }

    #[test]
    fn parallel_loss_examples() {
        let px: Vec<(usize, usize)> = (0..5).map(|i| (i, 2)).collect();
        let dir = horizontal_dir(5, 5, &px);
        let mut g = Graph::new();
        let vertical = leaf_flow(&mut g, 0.0, 1.3, 5, 5);
        let l = loss_parallel(&mut g, &dir, vertical);
        assert_eq!(g.scalar_value(l), 0.0);
        let horizontal = leaf_flow(&mut g, -0.8, 0.0, 5, 5);
        let l = loss_parallel(&mut g, &dir, horizontal);
        assert!((g.scalar_value(l) - 5.0).abs() < 1e-9);
        let diag = leaf_flow(&mut g, 0.6, 0.6, 5, 5);
        let l = loss_parallel(&mut g, &dir, diag);
        assert!((g.scalar_value(l) - 5.0 / 2.0f64.sqrt()).abs() < 1e-6);
        // invariance to positive rescaling
        let diag_scaled = leaf_flow(&mut g, 6.0, 6.0, 5, 5);
        let l2 = loss_parallel(&mut g, &dir, diag_scaled);
        assert!((g.scalar_value(l2) - g.scalar_value(l)).abs() < 1e-9);
        // zero valid pixels -> 0
        let none = horizontal_dir(5, 5, &[]);
        let l = loss_parallel(&mut g, &none, diag);
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn warp_loss_examples() {
        let (h, w) = (5, 5);
        let full = Array2::from_elem((h, w), 1.0f64);
        // time-constant flows, zero guidance -> 0
        let mut g = Graph::new();
        let f_t = leaf_flow(&mut g, 1.0, 0.0, h, w);
        let f_t1 = leaf_flow(&mut g, 1.0, 0.0, h, w);
        let m = leaf2(&mut g, &full);
        let zero_guid = FlowField::zeros(h, w);
        let l = loss_warp_pair(&mut g, f_t, f_t1, m, &zero_guid, 1.0, 1.0);
        assert!(g.scalar_value(l) < 1e-4); // residual comes only from the norm eps
        // constant fields survive any guidance warp
        let mut guid = FlowField::zeros(h, w);
        guid.u.fill(1.5);
        guid.v.fill(-0.7);
        let l = loss_warp_pair(&mut g, f_t, f_t1, m, &guid, 1.0, 1.0);
        assert!(g.scalar_value(l) < 1e-4);
        // (2,0) vs (0,0), full masks, clamped scales -> N*2/(2+1e-3)
        let f2 = leaf_flow(&mut g, 2.0, 0.0, h, w);
        let fz = leaf_flow(&mut g, 0.0, 0.0, h, w);
        let s_t = flow_scale(g.value(f2), &full);
        let s_t1 = flow_scale(g.value(fz), &full);
        assert_eq!(s_t, 2.0);
        assert_eq!(s_t1, 1e-3);
        let l = loss_warp_pair(&mut g, f2, fz, m, &zero_guid, s_t, s_t1);
        let expect = 25.0 * 2.0 / (2.0 + 1e-3);
        assert!((g.scalar_value(l) - expect).abs() < 1e-6);
    }

    fn softmax_masks(g: &mut Graph, mf: &Array2<f64>) -> Var {
        let (h, w) = mf.dim();
        let mut m = Arr::zeros(IxDyn(&[2, h, w]));
        for y in 0..h {
            for x in 0..w {
                m[[0, y, x]] = mf[[y, x]];
                m[[1, y, x]] = 1.0 - mf[[y, x]];
            }
        }
        g.leaf(m)
    }

    #[test]
    fn mask_loss_examples() {
        let (h, w) = (5, 5);
        let a = Array2::from_elem((h, w), 0.3f64);
        let mut g = Graph::new();
        let ma = softmax_masks(&mut g, &a);
        let ma2 = softmax_masks(&mut g, &a);
        let l = loss_mask_pair(&mut g, ma, ma2);
        assert_eq!(g.scalar_value(l), 0.0);
        // flip k=4 pixels 0 -> 1: both channels change -> 2k
        let mut b0 = Array2::zeros((h, w));
        let mut b1 = Array2::zeros((h, w));
        for x in 0..4 {
            b1[[2, x]] = 1.0;
        }
        let m0 = softmax_masks(&mut g, &b0);
        let m1 = softmax_masks(&mut g, &b1);
        let l = loss_mask_pair(&mut g, m0, m1);
        assert_eq!(g.scalar_value(l), 8.0);
        // 0.3 -> 0.5 over N px -> 0.4 N
        let c = Array2::from_elem((h, w), 0.5f64);
        let mc = softmax_masks(&mut g, &c);
        let l = loss_mask_pair(&mut g, ma, mc);
        assert!((g.scalar_value(l) - 0.4 * 25.0).abs() < 1e-9);
        b0[[0, 0]] = 0.0; // silence unused-mut lint pattern
    }

    #[test]
    fn rec_loss_examples() {
        let (h, w) = (5, 5);
        let frame = Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f32 / 30.0);
        let mut g = Graph::new();
        // M^f = 0 and BG == I -> 0
        let masks = softmax_masks(&mut g, &Array2::zeros((h, w)));
        let cf = g.constant(Arr::zeros(IxDyn(&[1, h, w])));
        let flow = leaf_flow(&mut g, 0.0, 0.0, h, w);
        let (recon, rec) = render_and_rec_frame(&mut g, &frame, &frame, cf, flow, masks);
        assert_eq!(g.scalar_value(rec), 0.0);
        for (r, f) in g.value(recon).iter().zip(frame.iter()) {
            assert!((r - *f as f64).abs() < 1e-7);
        }
        // uniform 0.1 gap over N pixels (one frame) -> 0.1 N
        let off = frame.mapv(|v| v + 0.1);
        let (_, rec) = render_and_rec_frame(&mut g, &off, &frame, cf, flow, masks);
        assert!((g.scalar_value(rec) - 0.1 * 25.0).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = Stage2Config::default();
        let zero = Stage2LossParts::default();
        assert_eq!(loss_total(&zero, &cfg).unwrap(), 0.0);
        let ones = Stage2LossParts {
            prior: 1.0,
            parallel: 1.0,
            warp: 1.0,
            mask: 1.0,
            rec: 1.0,
        };
        assert!((loss_total(&ones, &cfg).unwrap() - 1.25).abs() < 1e-12);
        let mixed = Stage2LossParts {
            prior: 2.0,
            rec: 4.0,
            ..Default::default()
        };
        assert!((loss_total(&mixed, &cfg).unwrap() - 3.0).abs() < 1e-12);
        let bad = Stage2LossParts {
            warp: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(
            loss_total(&bad, &cfg),
            Err(DenverError::Numeric(_))
        ));
    }

    /// Central-difference check of a scalar graph loss with respect to a leaf.
    fn fd_check_leaf<F>(build: F, leaf_shape: &[usize], probes: usize, seed: u64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = leaf_shape.iter().product();
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let leaf = g.leaf(Arr::from_shape_vec(IxDyn(leaf_shape), vals.to_vec()).unwrap());
            let l = build(&mut g, leaf);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let leaf = g.leaf(Arr::from_shape_vec(IxDyn(leaf_shape), base.clone()).unwrap());
        let l = build(&mut g, leaf);
        g.backward(l);
        let grad = g.grad_or_zero(leaf);
        let h = 1e-5;
        for _ in 0..probes {
            let k = rng.gen_range(0..n);
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[k];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "elem {}: fd {} vs analytic {}",
                k,
                fd,
                an
            );
        }
    }

    #[test]
    fn loss_gradients_match_fd() {
        let mut h_mask = Array2::zeros((5, 5));
        for x in 0..5 {
            h_mask[[2, x]] = 1.0;
        }
        fd_check_leaf(
            move |g, leaf| loss_prior(g, &h_mask, leaf, 0.5).unwrap(),
            &[5, 5],
            20,
            1,
        );
        let px: Vec<(usize, usize)> = (0..5).flat_map(|y| [(y, 1), (y, 3)]).collect();
        let dir = horizontal_dir(5, 5, &px);
        fd_check_leaf(
            move |g, leaf| loss_parallel(g, &dir, leaf),
            &[2, 5, 5],
            20,
            2,
        );
        let mut guid = FlowField::zeros(5, 5);
        guid.u.fill(0.4);
        fd_check_leaf(
            move |g, leaf| {
                let other = g.constant(Arr::from_elem(IxDyn(&[2, 5, 5]), 0.3));
                let m = g.constant(Arr::from_elem(IxDyn(&[5, 5]), 0.8));
                loss_warp_pair(g, leaf, other, m, &guid, 0.5, 0.4)
            },
            &[2, 5, 5],
            20,
            3,
        );
        fd_check_leaf(
            |g, leaf| {
                let other = g.constant(Arr::from_elem(IxDyn(&[2, 5, 5]), 0.35));
                loss_mask_pair(g, leaf, other)
            },
            &[2, 5, 5],
            20,
            4,
        );
        let frame = Array2::from_shape_fn((5, 5), |(y, x)| 0.2 + 0.1 * ((y + x) % 3) as f32);
        let bg = Array2::from_elem((5, 5), 0.4f32);
        fd_check_leaf(
            move |g, leaf| {
                let cf = g.constant(Arr::from_shape_fn(IxDyn(&[1, 5, 5]), |ix| {
                    0.3 + 0.05 * (ix[1] as f64)
                }));
                let flow = g.constant(Arr::from_elem(IxDyn(&[2, 5, 5]), 0.25));
                let (_, rec) = render_and_rec_frame(g, &frame, &bg, cf, flow, leaf);
                rec
            },
            &[2, 5, 5],
            20,
            5,
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = Stage2Config::default();
        cfg.lambda_warp = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = Stage2Config::default();
        cfg.warmup_steps = cfg.total_steps;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_stage2_smoke_and_determinism() {
        let (h, w, t_len) = (16, 16, 3);
        let frames: Vec<Array2<f32>> = (0..t_len)
            .map(|t| {
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let mut v = 0.6 + 0.2 * ((x + y) as f32 / 30.0).sin();
                    if y >= 6 && y < 10 && x >= 2 + t && x < 6 + t {
                        v -= 0.3; // moving dark patch
                    }
                    v
                })
            })
            .collect();
        let ids = (0..t_len).map(|i| format!("{:02}", i)).collect();
        let clip = VideoClip::new(frames.clone(), ids).unwrap();
        let priors = MaskSequence::new(
            (0..t_len)
                .map(|t| {
                    Array2::from_shape_fn((h, w), |(y, x)| {
                        ((6..10).contains(&y) && (2 + t..6 + t).contains(&x)) as u8 as f32
                    })
                })
                .collect(),
            MaskKind::Binary,
        )
        .unwrap();
        let guidance =
            FlowSequence::for_clip((0..t_len - 1).map(|_| FlowField::zeros(h, w)).collect())
                .unwrap();
        let bg: Vec<Array2<f32>> = (0..t_len)
            .map(|_| {
                Array2::from_shape_fn((h, w), |(y, x)| 0.6 + 0.2 * ((x + y) as f32 / 30.0).sin())
            })
            .collect();
        let cfg = Stage2Config {
            warmup_steps: 8,
            total_steps: 20,
            enable_parallel_at: 8,
            enable_warp_at: 12,
            enable_rec_at: 15,
            unet_base: 4,
            fg_latent_channels: 8,
            bspline_spatial: 4,
            log_every: 4,
            seed: 5,
            ..Default::default()
        };
        let r1 = run_stage2(&clip, &priors, &guidance, &bg, &cfg).unwrap();
        let r2 = run_stage2(&clip, &priors, &guidance, &bg, &cfg).unwrap();
        assert_eq!(r1.soft_masks.masks.len(), t_len);
        assert_eq!(r1.binary_masks.masks.len(), t_len);
        assert_eq!(r1.canonical_fg.dim(), (h, w));
        assert_eq!(r1.layer_flows.foreground.len(), t_len);
        for (a, b) in r1.binary_masks.masks.iter().zip(&r2.binary_masks.masks) {
            assert_eq!(a, b);
        }
        // binary masks are the thresholded soft masks
        for (s, b) in r1.soft_masks.masks.iter().zip(&r1.binary_masks.masks) {
            for (sv, bv) in s.iter().zip(b.iter()) {
                assert_eq!(*bv, (*sv > 0.5) as u8 as f32);
            }
        }
        // mismatched prior count rejected
        let short = MaskSequence::new(
            vec![Array2::zeros((h, w)); t_len - 1],
            MaskKind::Binary,
        )
        .unwrap();
        assert!(run_stage2(&clip, &short, &guidance, &bg, &cfg).is_err());
    }
}
