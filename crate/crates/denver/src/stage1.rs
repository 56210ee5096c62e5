//! Stage 1: fit the canonical background layer. Three coordinate MLPs are
//! trained against the clip: B(u,v) the canonical image, g_b(x,y,t) the
//! background deformation and g_f(x,y,t) a free residual that absorbs
//! whatever the deforming background cannot explain. The total objective is
//!
//!   recons + lambda_smooth * smooth + lambda_limit * limit
//!
//! where recons is the squared reconstruction error of
//! clamp(B((x,y)+g_b) + g_f, 0, 1), smooth the entrywise L1 of the (x,y,t)
//! Jacobian of g_b, and limit the L1 of g_f.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DenverError, Result};
use crate::nn::{Adam, Binding, Mlp, ParamStore};
use crate::types::VideoClip;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lambda_smooth: f64,
    pub lambda_limit: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_pixels: usize,
    pub seed: u64,
    /// MLP width and hidden-layer count shared by all three nets.
    pub hidden: usize,
    pub depth: usize,
    /// Fourier-feature octaves for B(u,v) and for the space-time nets.
    pub pe_space: usize,
    pub pe_time: usize,
    /// Central-difference step (normalized coordinates) for the Eq.-2 Jacobian.
    pub fd_h: f64,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.02,
            lambda_limit: 0.02,
            steps: 2000,
            lr: 1e-3,
            batch_pixels: 1024,
            seed: 0,
            hidden: 48,
            depth: 3,
            pe_space: 6,
            pe_time: 4,
            fd_h: 1e-3,
            log_every: 100,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_smooth < 0.0 || self.lambda_limit < 0.0 {
            return Err(DenverError::Config("stage1 loss weights must be >= 0".into()));
        }
        if self.steps == 0 || self.batch_pixels == 0 {
            return Err(DenverError::Config(
                "stage1 steps and batch_pixels must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BackgroundModel {
    pub store: ParamStore,
    pub canonical: Mlp, // (u,v) -> intensity logit; sigmoid applied in render
    pub deform: Mlp,    // (x,y,t) -> (du,dv), zero-initialized head
    pub residual: Mlp,  // (x,y,t) -> intensity residual, zero-initialized head
    pub h: usize,
    pub w: usize,
    pub t_len: usize,
}

/// Map a pixel/time index to [-1,1].
pub fn norm_coord(i: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (len - 1) as f64 - 1.0
    }
}

impl BackgroundModel {
    pub fn new(h: usize, w: usize, t_len: usize, cfg: &Stage1Config) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let canonical = Mlp::new(
            &mut store,
            &mut rng,
            "canonical",
            2,
            cfg.hidden,
            cfg.depth,
            1,
            cfg.pe_space,
            false,
        );
        let deform = Mlp::new(
            &mut store,
            &mut rng,
            "deform",
            3,
            cfg.hidden,
            cfg.depth,
            2,
            cfg.pe_time,
            true,
        );
        let residual = Mlp::new(
            &mut store,
            &mut rng,
            "residual",
            3,
            cfg.hidden,
            cfg.depth,
            1,
            cfg.pe_time,
            true,
        );
        Self {
            store,
            canonical,
            deform,
            residual,
            h,
            w,
            t_len,
        }
    }

    /// Canonical image sampled at raw (u,v) coordinates: sigmoid(MLP).
    pub fn eval_canonical(&self, g: &mut Graph, bind: &Binding, uv: &Array2<f64>) -> Var {
        let raw = self.canonical.forward(g, bind, uv);
        g.sigmoid(raw)
    }

    /// Reconstruction at normalized (x,y,t) rows:
    /// clamp(B((x,y) + g_b(x,y,t)) + g_f(x,y,t), 0, 1). Returns [N,1].
    pub fn render_recon(&self, g: &mut Graph, bind: &Binding, xyt: &Array2<f64>) -> Var {
        let b = self.render_background_at(g, bind, xyt);
        let xyt_c = g.constant(xyt.clone().into_dyn());
        let r = self.residual.forward_var(g, bind, xyt_c);
        let s = g.add(b, r);
        g.clamp01(s)
    }

    /// Background component only: B((x,y) + g_b(x,y,t)), in (0,1). [N,1].
    pub fn render_background_at(&self, g: &mut Graph, bind: &Binding, xyt: &Array2<f64>) -> Var {
        let xyt_c = g.constant(xyt.clone().into_dyn());
        let d = self.deform.forward_var(g, bind, xyt_c);
        let xy = xyt.slice(ndarray::s![.., 0..2]).to_owned();
        let xy_c = g.constant(xy.into_dyn());
        let uv = g.add(xy_c, d);
        let raw = self.canonical.forward_var(g, bind, uv);
        g.sigmoid(raw)
    }

    /// Full-resolution background renders for every frame (inference only).
    pub fn render_background_frames(&self) -> Vec<Array2<f32>> {
        (0..self.t_len)
            .map(|t| self.render_background_frame(norm_coord(t, self.t_len)))
            .collect()
    }

    pub fn render_background_frame(&self, t_norm: f64) -> Array2<f32> {
        let xyt = frame_coords(self.h, self.w, t_norm);
        let mut g = Graph::new();
        let bind = self.store.bind_frozen(&mut g);
        let b = self.render_background_at(&mut g, &bind, &xyt);
        let bv = g.value(b);
        let mut out = Array2::zeros((self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                out[[y, x]] = bv[[y * self.w + x, 0]] as f32;
            }
        }
        out
    }
}

/// All pixel coordinates of one frame as normalized (x,y,t) rows, row-major.
pub fn frame_coords(h: usize, w: usize, t_norm: f64) -> Array2<f64> {
    let mut xyt = Array2::zeros((h * w, 3));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            xyt[[i, 0]] = norm_coord(x, w);
            xyt[[i, 1]] = norm_coord(y, h);
            xyt[[i, 2]] = t_norm;
        }
    }
    xyt
}

pub struct Stage1LossVars {
    pub recons: Var,
    pub smooth: Var,
    pub limit: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stage1LossValues {
    pub recons: f64,
    pub smooth: f64,
    pub limit: f64,
    pub total: f64,
}

/// Build all four loss terms for a batch of normalized (x,y,t) rows with
/// intensity targets. Sum-form, exactly the weighted objective.
pub fn stage1_losses(
    g: &mut Graph,
    bind: &Binding,
    model: &BackgroundModel,
    xyt: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &Stage1Config,
) -> Stage1LossVars {
    let recon = model.render_recon(g, bind, xyt);
    let tgt = g.constant(targets.clone().into_dyn());
    let d = g.sub(recon, tgt);
    let sq = g.square(d);
    let recons = g.sum(sq);

    // Eq.-2 Jacobian of g_b w.r.t. (x,y,t) by central differences in the
    // graph: six shifted forward passes, entrywise L1.
    let h = cfg.fd_h;
    let mut smooth = None;
    for j in 0..3 {
        let mut plus = xyt.clone();
        let mut minus = xyt.clone();
        plus.column_mut(j).mapv_inplace(|v| v + h);
        minus.column_mut(j).mapv_inplace(|v| v - h);
        let pc = g.constant(plus.into_dyn());
        let mc = g.constant(minus.into_dyn());
        let dp = model.deform.forward_var(g, bind, pc);
        let dm = model.deform.forward_var(g, bind, mc);
        let diff = g.sub(dp, dm);
        let deriv = g.scale(diff, 1.0 / (2.0 * h));
        let a = g.abs(deriv);
        let s = g.sum(a);
        smooth = Some(match smooth {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let smooth = smooth.unwrap();

    let xyt_c = g.constant(xyt.clone().into_dyn());
    let r = model.residual.forward_var(g, bind, xyt_c);
    let ra = g.abs(r);
    let limit = g.sum(ra);

    let ws = g.scale(smooth, cfg.lambda_smooth);
    let wl = g.scale(limit, cfg.lambda_limit);
    let t1 = g.add(recons, ws);
    let total = g.add(t1, wl);
    Stage1LossVars {
        recons,
        smooth,
        limit,
        total,
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub model: BackgroundModel,
    /// (step, recons, smooth, limit, total) at log intervals and the final step.
    pub loss_trace: Vec<(usize, Stage1LossValues)>,
    pub bg_frames: Vec<Array2<f32>>,
}

/// Minimize the stage-1 objective over the clip. Deterministic under
/// `cfg.seed`; aborts with a numeric error if the loss or a gradient goes
/// non-finite.
pub fn fit_background(clip: &VideoClip, cfg: &Stage1Config) -> Result<Stage1Result> {
    cfg.validate()?;
    let (h, w) = clip.resolution();
    let t_len = clip.frames.len();
    let model = BackgroundModel::new(h, w, t_len, cfg);
    let mut store = model.store.clone();
    let mut adam = Adam::new(cfg.lr, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_a1ce);
    let mut trace = Vec::new();

    for step in 0..cfg.steps {
        let n = cfg.batch_pixels;
        let mut xyt = Array2::zeros((n, 3));
        let mut targets = Array2::zeros((n, 1));
        for i in 0..n {
            let t = rng.gen_range(0..t_len);
            let y = rng.gen_range(0..h);
            let x = rng.gen_range(0..w);
            xyt[[i, 0]] = norm_coord(x, w);
            xyt[[i, 1]] = norm_coord(y, h);
            xyt[[i, 2]] = norm_coord(t, t_len);
            targets[[i, 0]] = clip.frames[t][[y, x]] as f64;
        }
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let model_view = BackgroundModel {
            store: ParamStore::new(), // forward only reads ids via bind
            ..model.clone()
        };
        let losses = stage1_losses(&mut g, &bind, &model_view, &xyt, &targets, cfg);
        let vals = Stage1LossValues {
            recons: g.scalar_value(losses.recons),
            smooth: g.scalar_value(losses.smooth),
            limit: g.scalar_value(losses.limit),
            total: g.scalar_value(losses.total),
        };
        if !vals.total.is_finite() {
            return Err(DenverError::Numeric(format!(
                "stage1 loss became non-finite at step {}",
                step
            )));
        }
        // normalize by batch size so lr is batch-invariant
        let objective = g.scale(losses.total, 1.0 / n as f64);
        g.backward(objective);
        let grads = bind.grads(&g);
        adam.step(&mut store, &grads)
            .map_err(|e| DenverError::Numeric(format!("stage1 step {}: {}", step, e)))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push((step, vals));
        }
    }

    let model = BackgroundModel { store, ..model };
    let bg_frames = model.render_background_frames();
    Ok(Stage1Result {
        model,
        loss_trace: trace,
        bg_frames,
    })
}
