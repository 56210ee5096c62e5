//! Small trainable networks on top of the autodiff tape: coordinate MLPs
//! (stage 1), a U-Net mask head and a deep-prior foreground generator
//! (stage 2), plus Adam.
//!
//! Parameters live in a [`ParamStore`] as plain arrays; each optimization
//! step binds them into a fresh graph as leaves, runs forward/backward and
//! feeds the collected gradients to [`Adam`].

use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::error::{DenverError, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub tensors: Vec<Arr>,
    pub names: Vec<String>,
}

pub struct Binding {
    pub vars: Vec<Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> usize {
        self.tensors.push(value);
        self.names.push(name.to_string());
        self.tensors.len() - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Push every parameter into `g` as a leaf, in registration order.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Like `bind`, but as constants: for inference passes that should not
    /// build gradient state.
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

impl Binding {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Gradients for all parameters, in registration order (zeros for
    /// parameters the loss never touched). Call after `Graph::backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Arr> {
        self.vars.iter().map(|v| g.grad_or_zero(*v)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---- coordinate MLP ----

/// Per-dimension sin/cos encoding at octave frequencies: for input x in
/// roughly [-1,1], features are [x, sin(2^k pi x), cos(2^k pi x)] for
/// k = 0..levels.
pub fn positional_encoding(x: &Array2<f64>, levels: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d * (1 + 2 * levels)));
    for i in 0..n {
        let mut c = 0;
        for j in 0..d {
            out[[i, c]] = x[[i, j]];
            c += 1;
        }
        for k in 0..levels {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for j in 0..d {
                out[[i, c]] = (f * x[[i, j]]).sin();
                out[[i, c + d]] = (f * x[[i, j]]).cos();
                c += 1;
            }
            c += d;
        }
    }
    out
}

/// Fully connected network with tanh activations over positionally encoded
/// coordinates. The last layer can be zero-initialized so the net starts as
/// the identity-like zero map (used for deformation and residual heads).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(usize, usize)>, // (weight id, bias id)
    pub in_dim: usize,
    pub pe_levels: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        pe_levels: usize,
        zero_init_last: bool,
    ) -> Self {
        let enc_dim = in_dim * (1 + 2 * pe_levels);
        let mut dims = vec![enc_dim];
        dims.extend(std::iter::repeat(hidden).take(depth));
        dims.push(out_dim);
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let w = if last && zero_init_last {
                Arr::zeros(IxDyn(&[fan_in, fan_out]))
            } else {
                // Xavier-uniform, suitable for tanh
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                uniform(rng, &[fan_in, fan_out], bound)
            };
            let b = Arr::zeros(IxDyn(&[fan_out]));
            layers.push((
                store.register(&format!("{}.w{}", name, l), w),
                store.register(&format!("{}.b{}", name, l), b),
            ));
        }
        Self {
            layers,
            in_dim,
            pe_levels,
        }
    }

    /// coords: [N, in_dim] raw coordinates; returns [N, out_dim].
    pub fn forward(&self, g: &mut Graph, bind: &Binding, coords: &Array2<f64>) -> Var {
        let c = g.constant(coords.clone().into_dyn());
        self.forward_var(g, bind, c)
    }

    /// In-graph variant whose input may itself carry gradients (e.g. deformed
    /// coordinates). The positional encoding is built from graph ops in the
    /// same feature order as [`positional_encoding`].
    pub fn forward_var(&self, g: &mut Graph, bind: &Binding, coords: Var) -> Var {
        let mut h = coords;
        for k in 0..self.pe_levels {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            let s = g.scale(coords, f);
            let sn = g.sin(s);
            let cs = g.cos(s);
            h = g.concat(h, sn, 1);
            h = g.concat(h, cs, 1);
        }
        for (l, (wi, bi)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, bind.var(*wi));
            h = g.add_bias(z, bind.var(*bi));
            if l + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        h
    }
}

// ---- U-Net mask head ----

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: usize,
    b: usize,
}

fn conv_param(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> ConvIds {
    let bound = (1.0 / (cin as f64 * 9.0)).sqrt();
    ConvIds {
        w: store.register(&format!("{}.w", name), uniform(rng, &[cout, cin, 3, 3], bound)),
        b: store.register(&format!("{}.b", name), Arr::zeros(IxDyn(&[cout]))),
    }
}

fn conv_relu(g: &mut Graph, bind: &Binding, ids: ConvIds, x: Var) -> Var {
    let c = g.conv3x3(x, bind.var(ids.w), bind.var(ids.b));
    g.relu(c)
}

/// Two-level U-Net producing 2-channel logits (foreground, background) for a
/// single frame. Input is [2,H,W]: the grayscale frame and a constant
/// normalized-time plane. H and W must be divisible by 4.
#[derive(Debug, Clone)]
pub struct MaskNet {
    enc1a: ConvIds,
    enc1b: ConvIds,
    enc2a: ConvIds,
    enc2b: ConvIds,
    mid_a: ConvIds,
    mid_b: ConvIds,
    dec2a: ConvIds,
    dec2b: ConvIds,
    dec1a: ConvIds,
    dec1b: ConvIds,
    head: ConvIds,
    pub base: usize,
}

impl MaskNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, base: usize) -> Self {
        let c = |s: &mut ParamStore, r: &mut ChaCha8Rng, n: &str, ci, co| {
            conv_param(s, r, &format!("masknet.{}", n), ci, co)
        };
        Self {
            enc1a: c(store, rng, "enc1a", 2, base),
            enc1b: c(store, rng, "enc1b", base, base),
            enc2a: c(store, rng, "enc2a", base, 2 * base),
            enc2b: c(store, rng, "enc2b", 2 * base, 2 * base),
            mid_a: c(store, rng, "mid_a", 2 * base, 4 * base),
            mid_b: c(store, rng, "mid_b", 4 * base, 4 * base),
            dec2a: c(store, rng, "dec2a", 6 * base, 2 * base),
            dec2b: c(store, rng, "dec2b", 2 * base, 2 * base),
            dec1a: c(store, rng, "dec1a", 3 * base, base),
            dec1b: c(store, rng, "dec1b", base, base),
            head: c(store, rng, "head", base, 2),
            base,
        }
    }

    /// Returns 2-channel logits [2,H,W]; apply `softmax_c` for masks.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, input: Var) -> Var {
        let e1 = conv_relu(g, bind, self.enc1a, input);
        let e1 = conv_relu(g, bind, self.enc1b, e1);
        let p1 = g.avg_pool2(e1);
        let e2 = conv_relu(g, bind, self.enc2a, p1);
        let e2 = conv_relu(g, bind, self.enc2b, e2);
        let p2 = g.avg_pool2(e2);
        let m = conv_relu(g, bind, self.mid_a, p2);
        let m = conv_relu(g, bind, self.mid_b, m);
        let u2 = g.upsample2(m);
        let cat2 = g.concat(u2, e2, 0);
        let d2 = conv_relu(g, bind, self.dec2a, cat2);
        let d2 = conv_relu(g, bind, self.dec2b, d2);
        let u1 = g.upsample2(d2);
        let cat1 = g.concat(u1, e1, 0);
        let d1 = conv_relu(g, bind, self.dec1a, cat1);
        let d1 = conv_relu(g, bind, self.dec1b, d1);
        g.conv3x3(d1, bind.var(self.head.w), bind.var(self.head.b))
    }
}

// ---- deep-prior foreground generator ----

/// Decodes a fixed seeded latent volume into the canonical foreground image
/// through three upsampling conv stages and a sigmoid. Only the conv weights
/// train; the latent is frozen noise.
#[derive(Debug, Clone)]
pub struct ForegroundGenerator {
    pub latent: Arr, // [c_lat, H/8, W/8]
    c0: ConvIds,
    c1: ConvIds,
    c2: ConvIds,
    head: ConvIds,
    pub out_h: usize,
    pub out_w: usize,
}

impl ForegroundGenerator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        out_h: usize,
        out_w: usize,
        c_lat: usize,
    ) -> Result<Self> {
        if out_h % 8 != 0 || out_w % 8 != 0 {
            return Err(DenverError::Config(format!(
                "foreground generator needs dimensions divisible by 8, got {}x{}",
                out_h, out_w
            )));
        }
        let latent = uniform(rng, &[c_lat, out_h / 8, out_w / 8], 0.1);
        let c = |s: &mut ParamStore, r: &mut ChaCha8Rng, n: &str, ci, co| {
            conv_param(s, r, &format!("fg_gen.{}", n), ci, co)
        };
        Ok(Self {
            latent,
            c0: c(store, rng, "c0", c_lat, c_lat),
            c1: c(store, rng, "c1", c_lat, c_lat / 2),
            c2: c(store, rng, "c2", c_lat / 2, c_lat / 2),
            head: c(store, rng, "head", c_lat / 2, 1),
            out_h,
            out_w,
        })
    }

    /// Canonical foreground image in (0,1), shape [1,H,W].
    pub fn forward(&self, g: &mut Graph, bind: &Binding) -> Var {
        let z = g.constant(self.latent.clone());
        let h = conv_relu(g, bind, self.c0, z);
        let h = g.upsample2(h);
        let h = conv_relu(g, bind, self.c1, h);
        let h = g.upsample2(h);
        let h = conv_relu(g, bind, self.c2, h);
        let h = g.upsample2(h);
        let h = g.conv3x3(h, bind.var(self.head.w), bind.var(self.head.b));
        g.sigmoid(h)
    }
}

// ---- optimizer ----

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.tensors.iter().map(|t| Arr::zeros(t.raw_dim())).collect(),
            v: store.tensors.iter().map(|t| Arr::zeros(t.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update. Fails with a numeric error if any gradient is non-finite,
    /// leaving the parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Arr]) -> Result<()> {
        assert_eq!(grads.len(), store.tensors.len());
        for (gr, name) in grads.iter().zip(&store.names) {
            if !gr.iter().all(|v| v.is_finite()) {
                return Err(DenverError::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    name
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let (m, v) = (&self.m[i], &self.v[i]);
            let p = &mut store.tensors[i];
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}
