//! Low-degree-of-freedom motion parameterizations for stage 2: a space-time
//! cubic B-spline lattice for background motion, flow composition for the
//! vessel layer, and the flow magnitude normalizer.

use ndarray::{Array2, IxDyn};

use crate::autodiff::{Arr, Graph, SplineAxis, Var};
use crate::error::{DenverError, Result};
use crate::nn::{Binding, ParamStore};
use crate::types::FlowField;

/// Uniform cubic B-spline basis at fractional offset u in [0,1).
pub(crate) fn cubic_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Map a coordinate in [0, len-1] onto a lattice with `n_ctrl` controls:
/// first control index (<= n_ctrl-4) and the 4 basis weights.
pub(crate) fn lattice_coords(x: f64, len: usize, n_ctrl: usize) -> (usize, [f64; 4]) {
    let span = (n_ctrl - 3) as f64;
    let s = if len > 1 {
        x / (len - 1) as f64 * span
    } else {
        0.0
    };
    let mut i = s.floor();
    if i > span - 1.0 {
        i = span - 1.0; // x == len-1 lands on the last span
    }
    (i as usize, cubic_basis(s - i))
}

fn dense_axis(len: usize, n_ctrl: usize) -> SplineAxis {
    let mut base = Vec::with_capacity(len);
    let mut weights = Vec::with_capacity(len);
    for p in 0..len {
        let (b, w) = lattice_coords(p as f64, len, n_ctrl);
        base.push(b);
        weights.push(w);
    }
    SplineAxis { base, weights }
}

/// Background motion model: a [ct, cy, cx, 2] control lattice of a
/// space-time cubic B-spline, evaluated densely over the frame at any
/// (possibly fractional) time in [0, t_len-1]. Controls start at zero, so
/// the initial field is the identity motion.
#[derive(Debug, Clone)]
pub struct SpaceTimeBSplineField {
    pub param_id: usize,
    pub ct: usize,
    pub cy: usize,
    pub cx: usize,
    pub t_len: usize,
    pub h: usize,
    pub w: usize,
    ax: SplineAxis,
    ay: SplineAxis,
}

impl SpaceTimeBSplineField {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ct: usize,
        cy: usize,
        cx: usize,
        t_len: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if ct < 4 || cy < 4 || cx < 4 {
            return Err(DenverError::Config(format!(
                "b-spline lattice needs at least 4 controls per axis, got ({},{},{})",
                ct, cy, cx
            )));
        }
        if t_len < 2 || h < 2 || w < 2 {
            return Err(DenverError::Config(
                "b-spline field domain must span at least 2 samples per axis".into(),
            ));
        }
        let param_id = store.register(name, Arr::zeros(IxDyn(&[ct, cy, cx, 2])));
        Ok(Self {
            param_id,
            ct,
            cy,
            cx,
            t_len,
            h,
            w,
            ax: dense_axis(w, cx),
            ay: dense_axis(h, cy),
        })
    }

    /// Dense [2,H,W] displacement field at time `t` (frames; fractional ok).
    pub fn eval(&self, g: &mut Graph, bind: &Binding, t: f64) -> Result<Var> {
        if !(0.0..=(self.t_len - 1) as f64).contains(&t) {
            return Err(DenverError::Range(format!(
                "b-spline time {} outside [0, {}]",
                t,
                self.t_len - 1
            )));
        }
        let (it, wt) = lattice_coords(t, self.t_len, self.ct);
        Ok(g.bspline_eval(bind.var(self.param_id), self.ax.clone(), self.ay.clone(), wt, it))
    }
}

/// Vessel-layer flow by composition: `F_f(x) = E(x + F_b(x)) + F_b(x)`,
/// where `eulerian` is the stationary vessel motion field and `fb` the
/// background flow, both [2,H,W].
pub fn compose_vessel_flow(g: &mut Graph, eulerian: Var, fb: Var) -> Var {
    let warped = g.grid_sample(eulerian, fb);
    g.add(warped, fb)
}

/// Mask-weighted mean flow magnitude, floored at 1e-3 so it is safe as a
/// normalizer. `flow` is [2,H,W], `mask` a soft [H,W] weight map.
pub fn flow_scale(flow: &Arr, mask: &Array2<f64>) -> f64 {
    let (h, w) = mask.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            let m = mask[[y, x]];
            let u = flow[[0, y, x]];
            let v = flow[[1, y, x]];
            num += m * (u * u + v * v).sqrt();
            den += m;
        }
    }
    let mean = if den > 0.0 { num / den } else { 0.0 };
    mean.max(1e-3)
}

/// Per-layer frame-to-canonical flows produced by stage 2.
#[derive(Debug, Clone)]
pub struct LayerFlows {
    pub background: Vec<FlowField>,
    pub foreground: Vec<FlowField>,
}

/// Detach a [2,H,W] graph value into a `FlowField`.
pub fn to_flow_field(arr: &Arr) -> FlowField {
    let (h, w) = (arr.shape()[1], arr.shape()[2]);
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            u[[y, x]] = arr[[0, y, x]] as f32;
            v[[y, x]] = arr[[1, y, x]] as f32;
        }
    }
    FlowField { u, v }
}

/// Lift a `FlowField` into a [2,H,W] constant array.
pub fn from_flow_field(f: &FlowField) -> Arr {
    let (h, w) = f.u.dim();
    let mut out = Arr::zeros(IxDyn(&[2, h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = f.u[[y, x]] as f64;
            out[[1, y, x]] = f.v[[y, x]] as f64;
        }
    }
    out
}
