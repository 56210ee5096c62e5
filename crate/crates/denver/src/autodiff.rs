//! Minimal define-by-run reverse-mode autodiff over f64 ndarrays.
//!
//! A `Graph` is rebuilt every optimization step; parameters enter as `leaf`
//! nodes and constants as `constant` nodes. Backward walks the tape in
//! reverse and accumulates gradients only into subgraphs that require them.
//! The op set is exactly what the pipeline needs: dense/conv linear algebra,
//! pointwise nonlinearities, bilinear grid sampling, cubic B-spline
//! evaluation and the cosine alignment loss.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Per-axis cubic B-spline support: for each output sample, the first control
/// index and the 4 basis weights.
#[derive(Debug, Clone)]
pub struct SplineAxis {
    pub base: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    #[allow(dead_code)] // kept so the tape records the constant
    AddConst(f64),
    Sum,
    Abs,
    SqrtEps(f64),
    Sin,
    Cos,
    Tanh,
    Relu,
    Sigmoid,
    ClampMin(f64),
    Clamp01,
    MatMul,
    AddBias,
    Concat { axis: usize, split: usize },
    SoftmaxC,
    Conv3x3,
    AvgPool2,
    Upsample2,
    GridSample,
    #[allow(dead_code)] // kept so the tape records the epsilon
    VecNormEps(f64),
    Channel(usize),
    Reshape,
    /// Tensor-product cubic B-spline: controls [ct,cy,cx,2] -> field [2,H,W]
    /// at a fixed time slice.
    BSplineEval {
        ax: SplineAxis,
        ay: SplineAxis,
        wt: [f64; 4],
        it: usize,
    },
    /// Sum over valid pixels of |V.F| / (|V||F|); parent is F [2,H,W].
    ParallelLoss {
        vu: Array2<f64>,
        vv: Array2<f64>,
        valid: Array2<bool>,
    },
}

struct Node {
    value: Arr,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Arr>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn is_scalar(a: &Arr) -> bool {
    a.len() == 1
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Arr, parents: Vec<usize>, op: Op) -> Var {
        let requires_grad = matches!(op, Op::Leaf)
            || parents.iter().any(|p| self.nodes[*p].requires_grad);
        self.nodes.push(Node { value, parents, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Fixed input; backward does not descend into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        let v = self.push(value, vec![], Op::Leaf);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap()
    }

    pub fn grad(&self, v: Var) -> &Arr {
        self.grads[v.0]
            .as_ref()
            .expect("gradient not computed for this node; run backward first")
    }

    /// Gradient of `v`, or zeros if `v` did not participate in the loss.
    pub fn grad_or_zero(&self, v: Var) -> Arr {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Arr::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    // ---- elementwise binary ----

    fn binary(&mut self, a: Var, b: Var, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match op {
            Op::Add => bcast_zip(av, bv, |x, y| x + y),
            Op::Sub => bcast_zip(av, bv, |x, y| x - y),
            Op::Mul => bcast_zip(av, bv, |x, y| x * y),
            Op::Div => bcast_zip(av, bv, |x, y| x / y),
            _ => unreachable!(),
        };
        self.push(value, vec![a.0, b.0], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, vec![a.0], Op::Scale(c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, vec![a.0], Op::AddConst(c))
    }

    // ---- reductions / pointwise ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Arr::from_elem(IxDyn(&[]), s), vec![a.0], Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn unary(&mut self, a: Var, op: Op) -> Var {
        let value = {
            let av = &self.nodes[a.0].value;
            match &op {
                Op::Abs => av.mapv(f64::abs),
                Op::SqrtEps(e) => av.mapv(|x| (x + e).sqrt()),
                Op::Sin => av.mapv(f64::sin),
                Op::Cos => av.mapv(f64::cos),
                Op::Tanh => av.mapv(f64::tanh),
                Op::Relu => av.mapv(|x| x.max(0.0)),
                Op::Sigmoid => av.mapv(|x| 1.0 / (1.0 + (-x).exp())),
                Op::ClampMin(c) => av.mapv(|x| x.max(*c)),
                Op::Clamp01 => av.mapv(|x| x.clamp(0.0, 1.0)),
                _ => unreachable!(),
            }
        };
        self.push(value, vec![a.0], op)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs)
    }
    /// sqrt(x + eps), safe at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::SqrtEps(eps))
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid)
    }
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMin(c))
    }
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- linear algebra ----

    /// [n,k] x [k,m] -> [n,m]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let out = av.dot(&bv).into_dyn();
        self.push(out, vec![a.0, b.0], Op::MatMul)
    }

    /// [n,m] + row vector [m]
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = &self.nodes[b.0].value;
        let bv1 = Array1::from_iter(bv.iter().copied());
        let out = (&av + &bv1).into_dyn();
        self.push(out, vec![a.0, b.0], Op::AddBias)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let split = av.shape()[axis];
        let out = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()]).unwrap();
        self.push(out, vec![a.0, b.0], Op::Concat { axis, split })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(out, vec![a.0], Op::Reshape)
    }

    /// Softmax across axis 0 (the channel axis of a [C,H,W] map).
    pub fn softmax_c(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        let c = av.shape()[0];
        let inner: usize = av.len() / c;
        {
            let flat = out.as_slice_mut().unwrap();
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(flat[ch * inner + i]);
                }
                let mut s = 0.0;
                for ch in 0..c {
                    let e = (flat[ch * inner + i] - mx).exp();
                    flat[ch * inner + i] = e;
                    s += e;
                }
                for ch in 0..c {
                    flat[ch * inner + i] /= s;
                }
            }
        }
        self.push(out, vec![a.0], Op::SoftmaxC)
    }

    /// 3x3 convolution, stride 1, zero padding 1. x: [Cin,H,W],
    /// w: [Cout,Cin,3,3], b: [Cout] -> [Cout,H,W]
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cout = wv.shape()[0];
        debug_assert_eq!(wv.shape(), [cout, cin, 3, 3]);
        let cols = im2col3(xv, cin, h, wd);
        let wmat = as2(&wv.clone().into_shape(IxDyn(&[cout, cin * 9])).unwrap());
        let mut out2 = wmat.dot(&cols); // [cout, h*w]
        let bs = bv.as_slice().unwrap();
        for (ci, mut row) in out2.axis_iter_mut(Axis(0)).enumerate() {
            row += bs[ci];
        }
        let out = out2.into_shape((cout, h, wd)).unwrap().into_dyn();
        self.push(out, vec![x.0, w.0, b.0], Op::Conv3x3)
    }

    /// 2x2 average pooling; dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Arr::zeros(IxDyn(&[c, h / 2, w / 2]));
        for ci in 0..c {
            for y in 0..h / 2 {
                for x2 in 0..w / 2 {
                    let s = xv[[ci, 2 * y, 2 * x2]]
                        + xv[[ci, 2 * y, 2 * x2 + 1]]
                        + xv[[ci, 2 * y + 1, 2 * x2]]
                        + xv[[ci, 2 * y + 1, 2 * x2 + 1]];
                    out[[ci, y, x2]] = 0.25 * s;
                }
            }
        }
        self.push(out, vec![x.0], Op::AvgPool2)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Arr::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    out[[ci, y, x2]] = xv[[ci, y / 2, x2 / 2]];
                }
            }
        }
        self.push(out, vec![x.0], Op::Upsample2)
    }

    /// Backward-warp sampling: out[c](p) = img[c](p + flow(p)), bilinear with
    /// clamp-to-edge borders. img: [C,H,W], flow: [2,H,W] (u,v).
    pub fn grid_sample(&mut self, img: Var, flow: Var) -> Var {
        let iv = &self.nodes[img.0].value;
        let fv = &self.nodes[flow.0].value;
        let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        debug_assert_eq!(fv.shape(), [2, h, w]);
        let mut out = Arr::zeros(IxDyn(&[c, h, w]));
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + fv[[0, y, x]];
                let sy = y as f64 + fv[[1, y, x]];
                let (x0, y0, x1, y1, fx, fy, _, _) = bilinear_coeffs(sx, sy, h, w);
                for ci in 0..c {
                    let top = iv[[ci, y0, x0]] * (1.0 - fx) + iv[[ci, y0, x1]] * fx;
                    let bot = iv[[ci, y1, x0]] * (1.0 - fx) + iv[[ci, y1, x1]] * fx;
                    out[[ci, y, x]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.push(out, vec![img.0, flow.0], Op::GridSample)
    }

    /// Per-pixel L2 norm of a [2,H,W] field: sqrt(u^2 + v^2 + eps) -> [H,W].
    pub fn vecnorm_eps(&mut self, f: Var, eps: f64) -> Var {
        let fv = &self.nodes[f.0].value;
        let (h, w) = (fv.shape()[1], fv.shape()[2]);
        let mut out = Arr::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            for x in 0..w {
                let u = fv[[0, y, x]];
                let v = fv[[1, y, x]];
                out[[y, x]] = (u * u + v * v + eps).sqrt();
            }
        }
        self.push(out, vec![f.0], Op::VecNormEps(eps))
    }

    /// Select channel i of a [C,...] tensor.
    pub fn channel(&mut self, a: Var, i: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let out = av.index_axis(Axis(0), i).to_owned();
        self.push(out, vec![a.0], Op::Channel(i))
    }

    /// Evaluate a space-time cubic B-spline displacement lattice
    /// (controls [ct,cy,cx,2]) as a dense [2,H,W] field at one time slice.
    pub fn bspline_eval(
        &mut self,
        controls: Var,
        ax: SplineAxis,
        ay: SplineAxis,
        wt: [f64; 4],
        it: usize,
    ) -> Var {
        let cv = &self.nodes[controls.0].value;
        let (cy, cx) = (cv.shape()[1], cv.shape()[2]);
        let cs = cv.as_slice().expect("b-spline controls must be contiguous");
        let h = ay.base.len();
        let w = ax.base.len();
        let mut out = Arr::zeros(IxDyn(&[2, h, w]));
        let os = out.as_slice_mut().unwrap();
        for y in 0..h {
            let by = ay.base[y];
            let wy = ay.weights[y];
            for x in 0..w {
                let bx = ax.base[x];
                let wx = ax.weights[x];
                let mut acc = [0.0f64; 2];
                for (kt, wkt) in wt.iter().enumerate() {
                    if *wkt == 0.0 {
                        continue;
                    }
                    let t = it + kt;
                    for ky in 0..4 {
                        let wyy = wkt * wy[ky];
                        let yy = (by + ky).min(cy - 1);
                        let base = (t * cy + yy) * cx;
                        for kx in 0..4 {
                            let wq = wyy * wx[kx];
                            let off = (base + (bx + kx).min(cx - 1)) * 2;
                            acc[0] += wq * cs[off];
                            acc[1] += wq * cs[off + 1];
                        }
                    }
                }
                os[y * w + x] = acc[0];
                os[h * w + y * w + x] = acc[1];
            }
        }
        self.push(out, vec![controls.0], Op::BSplineEval { ax, ay, wt, it })
    }

    /// Sum over valid pixels of |V(x).F(x)| / (|V(x)| |F(x)|), skipping
    /// pixels where |F| < 1e-6. F: [2,H,W].
    pub fn parallel_loss(
        &mut self,
        flow: Var,
        vu: Array2<f64>,
        vv: Array2<f64>,
        valid: Array2<bool>,
    ) -> Var {
        let fv = &self.nodes[flow.0].value;
        let (h, w) = vu.dim();
        let mut total = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                if !valid[[y, x]] {
                    continue;
                }
                let fu = fv[[0, y, x]];
                let fvv = fv[[1, y, x]];
                let fn2 = (fu * fu + fvv * fvv).sqrt();
                if fn2 < 1e-6 {
                    continue;
                }
                let vn = (vu[[y, x]] * vu[[y, x]] + vv[[y, x]] * vv[[y, x]]).sqrt();
                total += (vu[[y, x]] * fu + vv[[y, x]] * fvv).abs() / (vn * fn2);
            }
        }
        self.push(
            Arr::from_elem(IxDyn(&[]), total),
            vec![flow.0],
            Op::ParallelLoss { vu, vv, valid },
        )
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.grads = (0..n).map(|_| None).collect();
        self.grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..n).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, node: usize, contribution: Arr) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut self.grads[node] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Arr) {
        let parents = self.nodes[i].parents.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add => {
                let (a, b) = (parents[0], parents[1]);
                self.accum(a, reduce_to(&self.nodes[a].value, g));
                self.accum(b, reduce_to(&self.nodes[b].value, g));
            }
            Op::Sub => {
                let (a, b) = (parents[0], parents[1]);
                self.accum(a, reduce_to(&self.nodes[a].value, g));
                let neg = g.mapv(|x| -x);
                self.accum(b, reduce_to(&self.nodes[b].value, &neg));
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let da = bcast_zip(g, &self.nodes[b].value, |x, y| x * y);
                let db = bcast_zip(g, &self.nodes[a].value, |x, y| x * y);
                self.accum(a, reduce_to(&self.nodes[a].value, &da));
                self.accum(b, reduce_to(&self.nodes[b].value, &db));
            }
            Op::Div => {
                let (a, b) = (parents[0], parents[1]);
                let bv = self.nodes[b].value.clone();
                let av = self.nodes[a].value.clone();
                let da = bcast_zip(g, &bv, |x, y| x / y);
                let db = {
                    let t = bcast_zip(&av, &bv, |x, y| -x / (y * y));
                    bcast_zip(g, &t, |x, y| x * y)
                };
                self.accum(a, reduce_to(&self.nodes[a].value, &da));
                self.accum(b, reduce_to(&self.nodes[b].value, &db));
            }
            Op::Scale(c) => {
                let c = *c;
                self.accum(parents[0], g.mapv(|x| x * c));
            }
            Op::AddConst(_) => {
                self.accum(parents[0], g.clone());
            }
            Op::Sum => {
                let gs = g.iter().next().copied().unwrap();
                let p = parents[0];
                self.accum(p, Arr::from_elem(self.nodes[p].value.raw_dim(), gs));
            }
            Op::Abs => {
                let p = parents[0];
                let s = self.nodes[p].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(p, g * &s);
            }
            Op::SqrtEps(_) => {
                let p = parents[0];
                let out = &self.nodes[i].value;
                self.accum(p, g * &out.mapv(|o| 0.5 / o));
            }
            Op::Sin => {
                let p = parents[0];
                self.accum(p, g * &self.nodes[p].value.mapv(f64::cos));
            }
            Op::Cos => {
                let p = parents[0];
                self.accum(p, g * &self.nodes[p].value.mapv(|x| -x.sin()));
            }
            Op::Tanh => {
                let p = parents[0];
                let out = &self.nodes[i].value;
                self.accum(p, g * &out.mapv(|o| 1.0 - o * o));
            }
            Op::Relu => {
                let p = parents[0];
                let m = self.nodes[p].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(p, g * &m);
            }
            Op::Sigmoid => {
                let p = parents[0];
                let out = &self.nodes[i].value;
                self.accum(p, g * &out.mapv(|o| o * (1.0 - o)));
            }
            Op::ClampMin(c) => {
                let c = *c;
                let p = parents[0];
                let m = self.nodes[p].value.mapv(|x| if x > c { 1.0 } else { 0.0 });
                self.accum(p, g * &m);
            }
            Op::Clamp01 => {
                let p = parents[0];
                let m = self.nodes[p]
                    .value
                    .mapv(|x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
                self.accum(p, g * &m);
            }
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                let g2 = as2(g);
                let av = as2(&self.nodes[a].value);
                let bv = as2(&self.nodes[b].value);
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::AddBias => {
                let (a, b) = (parents[0], parents[1]);
                self.accum(a, g.clone());
                let g2 = as2(g);
                let db = g2.sum_axis(Axis(0));
                let shape = self.nodes[b].value.raw_dim();
                self.accum(b, db.into_dyn().into_shape(shape).unwrap());
            }
            Op::Concat { axis, split } => {
                let (axis, split) = (*axis, *split);
                let (a, b) = (parents[0], parents[1]);
                let ga = g.index_axis_range_to_owned(axis, 0, split);
                let gb = g.index_axis_range_to_owned(axis, split, g.shape()[axis]);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::SoftmaxC => {
                let p = parents[0];
                let out = &self.nodes[i].value;
                let c = out.shape()[0];
                let inner = out.len() / c;
                let of = out.as_slice().unwrap();
                let gf = g.as_slice().unwrap();
                let mut dg = vec![0.0f64; out.len()];
                for px in 0..inner {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += gf[ch * inner + px] * of[ch * inner + px];
                    }
                    for ch in 0..c {
                        let idx = ch * inner + px;
                        dg[idx] = of[idx] * (gf[idx] - dot);
                    }
                }
                self.accum(p, Arr::from_shape_vec(out.raw_dim(), dg).unwrap());
            }
            Op::Conv3x3 => {
                let (x, w, b) = (parents[0], parents[1], parents[2]);
                let xv = self.nodes[x].value.clone();
                let wv = self.nodes[w].value.clone();
                let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[0];
                let g2 = as2(&g.clone().into_shape(IxDyn(&[cout, h * wd])).unwrap());
                // db
                let db = g2.sum_axis(Axis(1));
                self.accum(b, db.into_dyn());
                // dW = g . cols^T
                if self.nodes[w].requires_grad {
                    let cols = im2col3(&xv, cin, h, wd);
                    let dw = g2.dot(&cols.t());
                    self.accum(w, dw.into_dyn().into_shape(IxDyn(&[cout, cin, 3, 3])).unwrap());
                }
                // dx = col2im(W^T . g)
                if self.nodes[x].requires_grad {
                    let wmat = as2(&wv.into_shape(IxDyn(&[cout, cin * 9])).unwrap());
                    let dcols = wmat.t().dot(&g2);
                    let dx = col2im3(&dcols, cin, h, wd);
                    self.accum(x, dx);
                }
            }
            Op::AvgPool2 => {
                let p = parents[0];
                let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut dx = Arr::zeros(IxDyn(&[c, h2 * 2, w2 * 2]));
                for ci in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let v = 0.25 * g[[ci, y, x]];
                            dx[[ci, 2 * y, 2 * x]] = v;
                            dx[[ci, 2 * y, 2 * x + 1]] = v;
                            dx[[ci, 2 * y + 1, 2 * x]] = v;
                            dx[[ci, 2 * y + 1, 2 * x + 1]] = v;
                        }
                    }
                }
                self.accum(p, dx);
            }
            Op::Upsample2 => {
                let p = parents[0];
                let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut dx = Arr::zeros(IxDyn(&[c, h2 / 2, w2 / 2]));
                for ci in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            dx[[ci, y / 2, x / 2]] += g[[ci, y, x]];
                        }
                    }
                }
                self.accum(p, dx);
            }
            Op::GridSample => {
                let (img, flow) = (parents[0], parents[1]);
                let iv = self.nodes[img].value.clone();
                let fv = self.nodes[flow].value.clone();
                let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let mut dimg = Arr::zeros(iv.raw_dim());
                let mut dflow = Arr::zeros(fv.raw_dim());
                for y in 0..h {
                    for x in 0..w {
                        let sx = x as f64 + fv[[0, y, x]];
                        let sy = y as f64 + fv[[1, y, x]];
                        let (x0, y0, x1, y1, fx, fy, inx, iny) = bilinear_coeffs(sx, sy, h, w);
                        for ci in 0..c {
                            let go = g[[ci, y, x]];
                            if go == 0.0 {
                                continue;
                            }
                            dimg[[ci, y0, x0]] += go * (1.0 - fx) * (1.0 - fy);
                            dimg[[ci, y0, x1]] += go * fx * (1.0 - fy);
                            dimg[[ci, y1, x0]] += go * (1.0 - fx) * fy;
                            dimg[[ci, y1, x1]] += go * fx * fy;
                            if inx {
                                let dsx = (1.0 - fy) * (iv[[ci, y0, x1]] - iv[[ci, y0, x0]])
                                    + fy * (iv[[ci, y1, x1]] - iv[[ci, y1, x0]]);
                                dflow[[0, y, x]] += go * dsx;
                            }
                            if iny {
                                let dsy = (1.0 - fx) * (iv[[ci, y1, x0]] - iv[[ci, y0, x0]])
                                    + fx * (iv[[ci, y1, x1]] - iv[[ci, y0, x1]]);
                                dflow[[1, y, x]] += go * dsy;
                            }
                        }
                    }
                }
                self.accum(img, dimg);
                self.accum(flow, dflow);
            }
            Op::VecNormEps(_) => {
                let p = parents[0];
                let fv = self.nodes[p].value.clone();
                let out = &self.nodes[i].value;
                let (h, w) = (out.shape()[0], out.shape()[1]);
                let mut df = Arr::zeros(fv.raw_dim());
                for y in 0..h {
                    for x in 0..w {
                        let go = g[[y, x]] / out[[y, x]];
                        df[[0, y, x]] = go * fv[[0, y, x]];
                        df[[1, y, x]] = go * fv[[1, y, x]];
                    }
                }
                self.accum(p, df);
            }
            Op::Channel(ci) => {
                let ci = *ci;
                let p = parents[0];
                let mut dx = Arr::zeros(self.nodes[p].value.raw_dim());
                dx.index_axis_mut(Axis(0), ci).assign(g);
                self.accum(p, dx);
            }
            Op::Reshape => {
                let p = parents[0];
                let shape = self.nodes[p].value.raw_dim();
                self.accum(p, g.clone().into_shape(shape).unwrap());
            }
            Op::BSplineEval { ax, ay, wt, it } => {
                let (ax, ay, wt, it) = (ax.clone(), ay.clone(), *wt, *it);
                let p = parents[0];
                let cv_shape = self.nodes[p].value.raw_dim();
                let (cy, cx) = (cv_shape[1], cv_shape[2]);
                let mut dc = Arr::zeros(cv_shape);
                let ds = dc.as_slice_mut().unwrap();
                let gs = g.as_slice().expect("b-spline grad must be contiguous");
                let h = ay.base.len();
                let w = ax.base.len();
                for y in 0..h {
                    let by = ay.base[y];
                    let wy = ay.weights[y];
                    for x in 0..w {
                        let bx = ax.base[x];
                        let wx = ax.weights[x];
                        let g0 = gs[y * w + x];
                        let g1 = gs[h * w + y * w + x];
                        if g0 == 0.0 && g1 == 0.0 {
                            continue;
                        }
                        for (kt, wkt) in wt.iter().enumerate() {
                            if *wkt == 0.0 {
                                continue;
                            }
                            let t = it + kt;
                            for ky in 0..4 {
                                let wyy = wkt * wy[ky];
                                let yy = (by + ky).min(cy - 1);
                                let base = (t * cy + yy) * cx;
                                for kx in 0..4 {
                                    let wq = wyy * wx[kx];
                                    let off = (base + (bx + kx).min(cx - 1)) * 2;
                                    ds[off] += wq * g0;
                                    ds[off + 1] += wq * g1;
                                }
                            }
                        }
                    }
                }
                self.accum(p, dc);
            }
            Op::ParallelLoss { vu, vv, valid } => {
                let (vu, vv, valid) = (vu.clone(), vv.clone(), valid.clone());
                let p = parents[0];
                let fv = self.nodes[p].value.clone();
                let gs = g.iter().next().copied().unwrap();
                let (h, w) = vu.dim();
                let mut df = Arr::zeros(fv.raw_dim());
                for y in 0..h {
                    for x in 0..w {
                        if !valid[[y, x]] {
                            continue;
                        }
                        let fu = fv[[0, y, x]];
                        let fw = fv[[1, y, x]];
                        let fnorm = (fu * fu + fw * fw).sqrt();
                        if fnorm < 1e-6 {
                            continue;
                        }
                        let (au, av) = (vu[[y, x]], vv[[y, x]]);
                        let vnorm = (au * au + av * av).sqrt();
                        let dot = au * fu + av * fw;
                        let sgn = if dot >= 0.0 { 1.0 } else { -1.0 };
                        let denom = vnorm * fnorm;
                        // d/dF of |V.F|/(|V||F|)
                        let du = sgn * au / denom - dot.abs() * fu / (denom * fnorm * fnorm);
                        let dv = sgn * av / denom - dot.abs() * fw / (denom * fnorm * fnorm);
                        df[[0, y, x]] += gs * du;
                        df[[1, y, x]] += gs * dv;
                    }
                }
                self.accum(p, df);
            }
        }
    }
}

trait IndexAxisRange {
    fn index_axis_range_to_owned(&self, axis: usize, from: usize, to: usize) -> Arr;
}

impl IndexAxisRange for Arr {
    fn index_axis_range_to_owned(&self, axis: usize, from: usize, to: usize) -> Arr {
        self.slice_axis(Axis(axis), ndarray::Slice::from(from as isize..to as isize))
            .to_owned()
    }
}

fn as2(a: &Arr) -> Array2<f64> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 tensor")
}

/// Elementwise combine with scalar broadcasting (either side may be a
/// single-element tensor).
fn bcast_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, y| *x = f(*x, *y));
        out
    } else if is_scalar(b) {
        let bv = b.iter().next().copied().unwrap();
        a.mapv(|x| f(x, bv))
    } else if is_scalar(a) {
        let av = a.iter().next().copied().unwrap();
        b.mapv(|y| f(av, y))
    } else {
        panic!("shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }
}

/// Reduce a gradient to the shape of `target` (sums when target is scalar).
fn reduce_to(target: &Arr, g: &Arr) -> Arr {
    if g.shape() == target.shape() {
        g.clone()
    } else if is_scalar(target) {
        Arr::from_elem(target.raw_dim(), g.sum())
    } else {
        panic!("cannot reduce grad {:?} to {:?}", g.shape(), target.shape());
    }
}

/// (x0, y0, x1, y1, fx, fy, x_interior, y_interior) for clamped bilinear
/// sampling at (x, y).
fn bilinear_coeffs(x: f64, y: f64, h: usize, w: usize) -> (usize, usize, usize, usize, f64, f64, bool, bool) {
    let inx = x > 0.0 && x < (w - 1) as f64;
    let iny = y > 0.0 && y < (h - 1) as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, y0, x1, y1, xc - x0 as f64, yc - y0 as f64, inx, iny)
}

// The (kx-shifted) overlap of an image row with the output row: returns
// (out_start, src_start, len), empty when len is 0.
fn kx_span(kx: i64, w: usize) -> (usize, usize, usize) {
    match kx {
        0 => (1, 0, w - 1),  // sx = xp - 1
        1 => (0, 0, w),      // sx = xp
        _ => (0, 1, w - 1),  // sx = xp + 1
    }
}

fn im2col3(x: &Arr, cin: usize, h: usize, w: usize) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((cin * 9, h * w));
    let xs = x.as_slice().expect("conv input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ky in 0..3i64 {
            for kx in 0..3i64 {
                let row = ci * 9 + (ky * 3 + kx) as usize;
                let (ox, sx, len) = kx_span(kx, w);
                for y in 0..h as i64 {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let dst = row * h * w + y as usize * w + ox;
                    let src = ci * h * w + sy as usize * w + sx;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

fn col2im3(dcols: &Array2<f64>, cin: usize, h: usize, w: usize) -> Arr {
    let mut dx = Arr::zeros(IxDyn(&[cin, h, w]));
    let ds = dcols.as_slice().expect("col grad must be contiguous");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ky in 0..3i64 {
            for kx in 0..3i64 {
                let row = ci * 9 + (ky * 3 + kx) as usize;
                let (ox, sx, len) = kx_span(kx, w);
                for y in 0..h as i64 {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src = row * h * w + y as usize * w + ox;
                    let dst = ci * h * w + sy as usize * w + sx;
                    for (d, s) in xs[dst..dst + len].iter_mut().zip(&ds[src..src + len]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(scalar out)/d(leaf) for a graph
    /// builder `f` taking the leaf value.
    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Arr, h: f64, tol: f64) {
        let mut g = Graph::new();
        let leaf = g.leaf(x0.clone());
        let out = build(&mut g, leaf);
        g.backward(out);
        let analytic = g.grad(leaf).clone();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = x0.len();
        let probes: Vec<usize> = (0..n.min(60)).map(|_| rng.gen_range(0..n)).collect();
        for idx in probes {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let mut gp = Graph::new();
            let lp = gp.leaf(xp);
            let op = build(&mut gp, lp);
            let mut gm = Graph::new();
            let lm = gm.leaf(xm);
            let om = build(&mut gm, lm);
            let fd = (gp.scalar_value(op) - gm.scalar_value(om)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / denom < tol,
                "grad mismatch at {}: fd={} analytic={}",
                idx,
                fd,
                an
            );
        }
    }

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0f64))
    }

    #[test]
    fn grad_pointwise_chain() {
        fd_check(
            |g, x| {
                let a = g.tanh(x);
                let b = g.sin(a);
                let c = g.sigmoid(b);
                let d = g.square(c);
                g.sum(d)
            },
            rand_arr(&[4, 5], 1),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_matmul_bias() {
        let w = rand_arr(&[3, 4], 2);
        let b = rand_arr(&[4], 3);
        fd_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.matmul(x, wv);
                let y = g.add_bias(y, bv);
                let y = g.tanh(y);
                g.sum(y)
            },
            rand_arr(&[5, 3], 4),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_conv_pool_upsample() {
        let w = rand_arr(&[3, 2, 3, 3], 5);
        let b = rand_arr(&[3], 6);
        fd_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.conv3x3(x, wv, bv);
                let y = g.tanh(y);
                let y = g.avg_pool2(y);
                let y = g.upsample2(y);
                let s = g.square(y);
                g.sum(s)
            },
            rand_arr(&[2, 6, 6], 7),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_conv_weights() {
        let x = rand_arr(&[2, 5, 6], 8);
        fd_check(
            |g, w| {
                let xv = g.constant(x.clone());
                let b = g.constant(Arr::zeros(IxDyn(&[3])));
                let y = g.conv3x3(xv, w, b);
                let y = g.sigmoid(y);
                g.sum(y)
            },
            rand_arr(&[3, 2, 3, 3], 9),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_softmax_channels() {
        fd_check(
            |g, x| {
                let s = g.softmax_c(x);
                let c0 = g.channel(s, 0);
                let sq = g.square(c0);
                g.sum(sq)
            },
            rand_arr(&[2, 4, 4], 10),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_grid_sample_wrt_image() {
        let mut flow = Arr::zeros(IxDyn(&[2, 5, 5]));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in flow.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
        fd_check(
            |g, img| {
                let f = g.constant(flow.clone());
                let y = g.grid_sample(img, f);
                let s = g.square(y);
                g.sum(s)
            },
            rand_arr(&[1, 5, 5], 12),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_grid_sample_wrt_flow() {
        // smooth image so FD through bilinear kinks stays accurate
        let img = Arr::from_shape_fn(IxDyn(&[1, 8, 8]), |d| {
            let (y, x) = (d[1] as f64, d[2] as f64);
            (0.3 * x + 0.2 * y + 0.05 * x * y) / 10.0
        });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let flow = Arr::from_shape_fn(IxDyn(&[2, 8, 8]), |_| rng.gen_range(0.1..0.4f64));
        fd_check(
            |g, f| {
                let iv = g.constant(img.clone());
                let y = g.grid_sample(iv, f);
                let s = g.square(y);
                g.sum(s)
            },
            flow,
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_vecnorm() {
        fd_check(
            |g, f| {
                let n = g.vecnorm_eps(f, 1e-8);
                g.sum(n)
            },
            rand_arr(&[2, 4, 4], 14).mapv(|v| v + 2.0),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn grad_div_and_clamp_min() {
        fd_check(
            |g, x| {
                let n = g.sum(x);
                let n = g.clamp_min(n, 0.5);
                let s = g.square(x);
                let s = g.sum(s);
                g.div(s, n)
            },
            rand_arr(&[3, 3], 15).mapv(|v| v + 1.5),
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn constant_nodes_get_no_grad() {
        let mut g = Graph::new();
        let a = g.leaf(rand_arr(&[2, 2], 16));
        let c = g.constant(rand_arr(&[2, 2], 17));
        let m = g.mul(a, c);
        let s = g.sum(m);
        g.backward(s);
        assert!(g.grads[c.0].is_none());
        assert_eq!(g.grad(a).shape(), &[2, 2]);
    }
}
