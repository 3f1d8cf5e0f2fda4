//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! The op set is exactly what the denoiser, the codec, the perceptual extractor
//! and the training losses need. Images flow through as `[C, H, W]`; scalars as
//! shape `[1]`. Leaves created with [`Graph::param`] require gradients; those
//! created with [`Graph::constant`] do not, and nothing downstream of constants
//! alone is differentiated.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    MatVec { w: Var, v: Var },
    MatMul { a: Var, b: Var },
    Reshape(Var),
    Modulate { x: Var, scale: Var, shift: Var },
    AddChannel { x: Var, b: Var },
    AvgPool2(Var),
    UnitNorm { x: Var, norms: Vec<f64> },
    Clamp01(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    MeanSq(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape if it did not influence the root.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = silu_forward(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Stride-1 "same" convolution with zero padding; `w` is `[Co, Ci, k, k]`, k odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b }, ng)
    }

    pub fn matvec(&mut self, w: Var, v: Var) -> Var {
        let out = matvec_forward(self.value(w), self.value(v));
        let ng = self.ng(w) || self.ng(v);
        self.push(out, Op::MatVec { w, v }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = (at.shape()[0], at.shape()[1]);
        let (k2, n) = (bt.shape()[0], bt.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let out = matmul_raw(at.data(), bt.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul { a, b }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// `x * (1 + scale[c]) + shift[c]` per channel.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let out = modulate_forward(self.value(x), self.value(scale), self.value(shift));
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(out, Op::Modulate { x, scale, shift }, ng)
    }

    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let out = add_channel_forward(self.value(x), self.value(b));
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddChannel { x, b }, ng)
    }

    /// 2x2 mean pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = avg_pool2_forward(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::AvgPool2(x), ng)
    }

    /// Normalizes the channel vector at every pixel to unit length.
    pub fn unit_norm_channels(&mut self, x: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let (c, h, w) = dims3(xt);
        let hw = h * w;
        let d = xt.data();
        let mut norms = vec![0.0; hw];
        for ch in 0..c {
            for (n, v) in norms.iter_mut().zip(&d[ch * hw..(ch + 1) * hw]) {
                *n += v * v;
            }
        }
        for n in &mut norms {
            *n = (*n + eps).sqrt();
        }
        let mut out = xt.clone();
        for ch in 0..c {
            for (v, n) in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(&norms) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::UnitNorm { x, norms }, ng)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let ng = self.ng(x);
        self.push(v, Op::Clamp01(x), ng)
    }

    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Var {
        let v = space_to_depth(self.value(x), f);
        let ng = self.ng(x);
        self.push(v, Op::SpaceToDepth(x, f), ng)
    }

    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Var {
        let v = depth_to_space(self.value(x), f);
        let ng = self.ng(x);
        self.push(v, Op::DepthToSpace(x, f), ng)
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_sq(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum_sq() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::MeanSq(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        if !self.ng(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.zip_map(bv, |x, y| x * y).unwrap());
                    self.acc(&mut grads, *b, || g.zip_map(av, |x, y| x * y).unwrap());
                }
                Op::Scale(a, s) => {
                    self.acc(&mut grads, *a, || g.scale(*s));
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.zip_map(av, |gv, x| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .unwrap()
                    });
                }
                Op::Conv2d { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.ng(*x) {
                        let dx = conv2d_backward_input(&g, wv, xv.shape());
                        self.acc(&mut grads, *x, || dx);
                    }
                    if self.ng(*w) {
                        let dw = conv2d_backward_weight(&g, xv, wv.shape());
                        self.acc(&mut grads, *w, || dw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let (co, h, wd) = dims3(&g);
                            let hw = h * wd;
                            let db: Vec<f64> = (0..co)
                                .map(|o| g.data()[o * hw..(o + 1) * hw].iter().sum())
                                .collect();
                            self.acc(&mut grads, *b, || Tensor::from_vec(&[co], db).unwrap());
                        }
                    }
                }
                Op::MatVec { w, v } => {
                    let (wt, vt) = (self.value(*w), self.value(*v));
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    if self.ng(*w) {
                        let mut dw = vec![0.0; m * n];
                        for i in 0..m {
                            let gi = g.data()[i];
                            for (d, vj) in dw[i * n..(i + 1) * n].iter_mut().zip(vt.data()) {
                                *d = gi * vj;
                            }
                        }
                        self.acc(&mut grads, *w, || Tensor::from_vec(&[m, n], dw).unwrap());
                    }
                    if self.ng(*v) {
                        let mut dv = vec![0.0; n];
                        for i in 0..m {
                            let gi = g.data()[i];
                            for (d, wij) in dv.iter_mut().zip(&wt.data()[i * n..(i + 1) * n]) {
                                *d += gi * wij;
                            }
                        }
                        let shape = vt.shape().to_vec();
                        self.acc(&mut grads, *v, || Tensor::from_vec(&shape, dv).unwrap());
                    }
                }
                Op::MatMul { a, b } => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k) = (at.shape()[0], at.shape()[1]);
                    let n = bt.shape()[1];
                    if self.ng(*a) {
                        let bt_t = transpose(bt.data(), k, n);
                        let da = matmul_raw(g.data(), &bt_t, m, n, k);
                        self.acc(&mut grads, *a, || Tensor::from_vec(&[m, k], da).unwrap());
                    }
                    if self.ng(*b) {
                        let at_t = transpose(at.data(), m, k);
                        let db = matmul_raw(&at_t, g.data(), k, m, n);
                        self.acc(&mut grads, *b, || Tensor::from_vec(&[k, n], db).unwrap());
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.acc(&mut grads, *a, || g.clone().reshape(&shape).unwrap());
                }
                Op::Modulate { x, scale, shift } => {
                    let xv = self.value(*x);
                    let (c, h, w) = dims3(xv);
                    let hw = h * w;
                    if self.ng(*x) {
                        let s = self.value(*scale).data();
                        let mut dx = g.clone();
                        for (chunk, sc) in dx.data_mut().chunks_mut(hw).zip(s) {
                            for v in chunk {
                                *v *= 1.0 + sc;
                            }
                        }
                        self.acc(&mut grads, *x, || dx);
                    }
                    if self.ng(*scale) {
                        let ds: Vec<f64> = (0..c)
                            .map(|ch| {
                                g.data()[ch * hw..(ch + 1) * hw]
                                    .iter()
                                    .zip(&xv.data()[ch * hw..(ch + 1) * hw])
                                    .map(|(a, b)| a * b)
                                    .sum()
                            })
                            .collect();
                        self.acc(&mut grads, *scale, || Tensor::from_vec(&[c], ds).unwrap());
                    }
                    if self.ng(*shift) {
                        let dsh: Vec<f64> = (0..c)
                            .map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum())
                            .collect();
                        self.acc(&mut grads, *shift, || Tensor::from_vec(&[c], dsh).unwrap());
                    }
                }
                Op::AddChannel { x, b } => {
                    self.acc(&mut grads, *x, || g.clone());
                    if self.ng(*b) {
                        let (c, h, w) = dims3(&g);
                        let hw = h * w;
                        let db: Vec<f64> = (0..c)
                            .map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum())
                            .collect();
                        self.acc(&mut grads, *b, || Tensor::from_vec(&[c], db).unwrap());
                    }
                }
                Op::AvgPool2(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || avg_pool2_backward(&g, &shape));
                }
                Op::UnitNorm { x, norms } => {
                    let y = &node.value;
                    let (c, h, w) = dims3(y);
                    let hw = h * w;
                    self.acc(&mut grads, *x, || {
                        let mut dot = vec![0.0; hw];
                        for ch in 0..c {
                            let gs = &g.data()[ch * hw..(ch + 1) * hw];
                            let ys = &y.data()[ch * hw..(ch + 1) * hw];
                            for ((d, gv), yv) in dot.iter_mut().zip(gs).zip(ys) {
                                *d += gv * yv;
                            }
                        }
                        let mut dx = g.clone();
                        for ch in 0..c {
                            let ys = &y.data()[ch * hw..(ch + 1) * hw];
                            for (i, v) in dx.data_mut()[ch * hw..(ch + 1) * hw]
                                .iter_mut()
                                .enumerate()
                            {
                                *v = (*v - ys[i] * dot[i]) / norms[i];
                            }
                        }
                        dx
                    });
                }
                Op::Clamp01(x) => {
                    let xv = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        g.zip_map(xv, |gv, v| if (0.0..=1.0).contains(&v) { gv } else { 0.0 })
                            .unwrap()
                    });
                }
                Op::SpaceToDepth(x, f) => {
                    self.acc(&mut grads, *x, || depth_to_space(&g, *f));
                }
                Op::DepthToSpace(x, f) => {
                    self.acc(&mut grads, *x, || space_to_depth(&g, *f));
                }
                Op::MeanSq(x) => {
                    let xv = self.value(*x);
                    let k = 2.0 * g.item() / xv.len() as f64;
                    self.acc(&mut grads, *x, || xv.scale(k));
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || Tensor::full(&shape, g.item()));
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let contrib = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }
}

pub(crate) fn silu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub(crate) fn matvec_forward(w: &Tensor, v: &Tensor) -> Tensor {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(v.len(), n, "matvec: inner dimension mismatch");
    let out: Vec<f64> = (0..m)
        .map(|i| {
            w.data()[i * n..(i + 1) * n]
                .iter()
                .zip(v.data())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Tensor::from_vec(&[m], out).unwrap()
}

pub(crate) fn modulate_forward(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let (c, h, w) = dims3(x);
    let hw = h * w;
    let (s, sh) = (scale.data(), shift.data());
    assert_eq!(s.len(), c);
    assert_eq!(sh.len(), c);
    let mut out = x.clone();
    for ch in 0..c {
        let (m, a) = (1.0 + s[ch], sh[ch]);
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = *v * m + a;
        }
    }
    out
}

pub(crate) fn add_channel_forward(x: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = dims3(x);
    let hw = h * w;
    assert_eq!(b.len(), c);
    let mut out = x.clone();
    for ch in 0..c {
        let a = b.data()[ch];
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v += a;
        }
    }
    out
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "matmul: inner dimension mismatch");
    Tensor::from_vec(&[m, n], matmul_raw(a.data(), b.data(), m, k, n)).unwrap()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Valid index range of `y` such that `y + d` stays within `[0, n)`.
fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (ci, h, wd) = dims3(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Co,Ci,k,k]");
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci, "conv: input channels {ci} vs weight {ws:?}");
    assert!(k % 2 == 1 && ws[3] == k);
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut out = vec![0.0; co * hw];
    let (xd, wdat) = (x.data(), w.data());
    for o in 0..co {
        let oplane = &mut out[o * hw..(o + 1) * hw];
        if let Some(b) = b {
            oplane.fill(b.data()[o]);
        }
        for i in 0..ci {
            let iplane = &xd[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = shifted_range(wd, dx);
                    let wv = wdat[((o * ci + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &iplane[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, h, wd], out).unwrap()
}

fn conv2d_backward_input(g: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (co, h, wd) = dims3(g);
    let ci = x_shape[0];
    let k = w.shape()[2];
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut dx = vec![0.0; ci * hw];
    let (gd, wdat) = (g.data(), w.data());
    for o in 0..co {
        let gplane = &gd[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let dplane = &mut dx[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dxo = kx as isize - p;
                    let (x0, x1) = shifted_range(wd, dxo);
                    let wv = wdat[((o * ci + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dxo) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let drow = &mut dplane[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx).unwrap()
}

fn conv2d_backward_weight(g: &Tensor, x: &Tensor, w_shape: &[usize]) -> Tensor {
    let (co, h, wd) = dims3(g);
    let ci = x.shape()[0];
    let k = w_shape[2];
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut dw = vec![0.0; co * ci * k * k];
    let (gd, xd) = (g.data(), x.data());
    for o in 0..co {
        let gplane = &gd[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let iplane = &xd[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dxo = kx as isize - p;
                    let (x0, x1) = shifted_range(wd, dxo);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dxo) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let irow = &iplane[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[((o * ci + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(w_shape, dw).unwrap()
}

pub(crate) fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = dims3(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let d = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w;
                let s = d[base + 2 * y * w + 2 * xx]
                    + d[base + 2 * y * w + 2 * xx + 1]
                    + d[base + (2 * y + 1) * w + 2 * xx]
                    + d[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ch * oh + y) * ow + xx] = 0.25 * s;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

fn avg_pool2_backward(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g.data()[(ch * oh + y) * ow + xx];
                let base = ch * h * w;
                dx[base + 2 * y * w + 2 * xx] += v;
                dx[base + 2 * y * w + 2 * xx + 1] += v;
                dx[base + (2 * y + 1) * w + 2 * xx] += v;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] += v;
            }
        }
    }
    Tensor::from_vec(x_shape, dx).unwrap()
}

pub(crate) fn space_to_depth(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    assert!(h % f == 0 && w % f == 0, "space_to_depth: {h}x{w} not divisible by {f}");
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; c * h * w];
    let d = x.data();
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = (ch * f + dy) * f + dx;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(oc * oh + y) * ow + xx] = d[(ch * h + y * f + dy) * w + xx * f + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * f * f, oh, ow], out).unwrap()
}

pub(crate) fn depth_to_space(x: &Tensor, f: usize) -> Tensor {
    let (cf, oh, ow) = dims3(x);
    assert!(cf % (f * f) == 0, "depth_to_space: {cf} channels not divisible by {}", f * f);
    let c = cf / (f * f);
    let (h, w) = (oh * f, ow * f);
    let mut out = vec![0.0; c * h * w];
    let d = x.data();
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let ic = (ch * f + dy) * f + dx;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(ch * h + y * f + dy) * w + xx * f + dx] = d[(ic * oh + y) * ow + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).unwrap()
}
