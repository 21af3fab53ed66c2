//! Reverse-mode differentiation over a fixed set of network operations.
//!
//! A [`Tape`] records every value produced during a forward pass. Calling
//! [`Tape::backward`] with seed gradients for any set of nodes propagates
//! them to every node that requires a gradient. Feature maps are
//! `N x C x H x W`, vectors `N x F`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics axes of [`Tape::normalize`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per channel over batch and space.
    Batch,
    /// Per sample and channel over space.
    #[default]
    Instance,
}

pub const NORM_EPS: f64 = 1e-5;
pub const SOFTMAX_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Normalize { input: Var, gamma: Var, beta: Var, kind: NormKind, xhat: Vec<T>, inv_std: Vec<T> },
    AdaIn { content: Var, style: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Upsample { input: Var, factor: usize },
    ExtractAt { input: Var, points: Vec<FeaturePoint<T>> },
    Linear { input: Var, weight: Var, bias: Var },
    Softmax(Var),
    Concat(Vec<Var>),
    Gather { input: Var, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Sample location for [`Tape::extract_at`]: batch entry and fractional
/// `(x, y)` in feature-map pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeaturePoint<T> {
    pub batch: usize,
    pub x: T,
    pub y: T,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn dims4<T: Real>(t: &Tensor<T>, what: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(what, format!("expected N x C x H x W, got {:?}", t.shape()))),
    }
}

fn dims2<T: Real>(t: &Tensor<T>, what: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, f] => Ok([n, f]),
        _ => Err(Error::invalid(what, format!("expected N x F, got {:?}", t.shape()))),
    }
}

/// Unfold one `C x H x W` sample into a `(C k k) x (Ho Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps of half-pixel bilinear upsampling along one axis.
fn upsample_taps<T: Real>(n: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = T::from_usize(factor).unwrap();
    (0..n * factor)
        .map(|o| {
            let src = ((T::from_usize(o).unwrap() + T::lit(0.5)) / f - T::lit(0.5)).max(T::zero());
            let i0 = src.floor().to_usize().unwrap().min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - T::from_usize(i0).unwrap())
        })
        .collect()
}

fn bilinear_taps<T: Real>(x: T, y: T, h: usize, w: usize) -> [(usize, T); 4] {
    let xm = T::from_usize(w - 1).unwrap();
    let ym = T::from_usize(h - 1).unwrap();
    let (x, y) = (x.max(T::zero()).min(xm), y.max(T::zero()).min(ym));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0.to_usize().unwrap(), y0.to_usize().unwrap());
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let one = T::one();
    [
        (y0 * w + x0, (one - fy) * (one - fx)),
        (y0 * w + x1, (one - fy) * fx),
        (y1 * w + x0, fy * (one - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Standardize groups of values; returns `(xhat, inv_std)` per group. `groups`
/// yields, for each group, the flat indices that belong to it.
fn standardize<T: Real>(x: &[T], groups: &[Vec<usize>]) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(groups.len());
    let eps = T::lit(NORM_EPS);
    for g in groups {
        let m = T::from_usize(g.len()).unwrap();
        let mean = g.iter().map(|&i| x[i]).sum::<T>() / m;
        let var = g.iter().map(|&i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for &i in g {
            xhat[i] = (x[i] - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

/// Backward of standardization: `dxhat` to `dx` per group.
fn standardize_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: &[T], groups: &[Vec<usize>], dx: &mut [T]) {
    for (g, &is) in groups.iter().zip(inv_std) {
        let m = T::from_usize(g.len()).unwrap();
        let s1: T = g.iter().map(|&i| dxhat[i]).sum();
        let s2: T = g.iter().map(|&i| dxhat[i] * xhat[i]).sum();
        for &i in g {
            dx[i] += is / m * (m * dxhat[i] - s1 - xhat[i] * s2);
        }
    }
}

fn norm_groups(kind: NormKind, [n, c, h, w]: [usize; 4]) -> Vec<Vec<usize>> {
    let hw = h * w;
    match kind {
        NormKind::Instance => (0..n * c).map(|g| (g * hw..(g + 1) * hw).collect()).collect(),
        NormKind::Batch => (0..c).map(|ch| (0..n).flat_map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect()).collect(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("network op"));
        }
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Cross-correlation with zero padding. `kernel` is `Co x Ci x k x k`,
    /// `bias` has `Co` entries.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, w] = dims4(self.value(input), "input")?;
        let [co, kci, k, k2] = dims4(self.value(kernel), "kernel")?;
        if kci != ci || k != k2 {
            return Err(Error::ShapeMismatch { left: self.value(input).shape().to_vec(), right: self.value(kernel).shape().to_vec() });
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid("stride", format!("invalid conv geometry k={k} stride={stride} pad={pad} on {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(Error::ShapeMismatch { left: self.value(b).shape().to_vec(), right: vec![co] });
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let ckk = ci * k * k;
        let plane = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); n * co * plane];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        {
            let x = self.value(input).data();
            let kd = self.value(kernel).data();
            for b in 0..n {
                let xs = &x[b * ci * h * w..(b + 1) * ci * h * w];
                let src: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, ci, h, w, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                T::gemm(co, ckk, plane, kd, false, src, false, &mut out[b * co * plane..(b + 1) * co * plane], false);
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for b in 0..n {
                    for c in 0..co {
                        out[(b * co + c) * plane..(b * co + c + 1) * plane].iter_mut().for_each(|v| *v += bd[c]);
                    }
                }
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let needs = self.needs(&parents);
        self.push(Tensor::new(vec![n, co, ho, wo], out)?, Op::Conv2d { input, kernel, bias, stride, pad }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input).map(|x| x.max(T::zero()));
        let needs = self.needs(&[input]);
        self.push(v, Op::Relu(input), needs)
    }

    /// Standardize then apply the per-channel affine `gamma * xhat + beta`.
    pub fn normalize(&mut self, input: Var, gamma: Var, beta: Var, kind: NormKind) -> Result<Var> {
        let d = dims4(self.value(input), "input")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d[1]] {
                return Err(Error::ShapeMismatch { left: self.value(p).shape().to_vec(), right: vec![d[1]] });
            }
        }
        let groups = norm_groups(kind, d);
        let (xhat, inv_std) = standardize(self.value(input).data(), &groups);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let hw = d[2] * d[3];
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| {
            let c = (i / hw) % d[1];
            g[c] * v + b[c]
        }).collect();
        let needs = self.needs(&[input, gamma, beta]);
        self.push(Tensor::new(d.to_vec(), out)?, Op::Normalize { input, gamma, beta, kind, xhat, inv_std }, needs)
    }

    /// Adaptive instance normalization: `style` is `N x 2C`, scales first.
    pub fn adain(&mut self, content: Var, style: Var) -> Result<Var> {
        let d = dims4(self.value(content), "content")?;
        let s = dims2(self.value(style), "style")?;
        if s != [d[0], 2 * d[1]] {
            return Err(Error::ShapeMismatch { left: self.value(style).shape().to_vec(), right: vec![d[0], 2 * d[1]] });
        }
        let groups = norm_groups(NormKind::Instance, d);
        let (xhat, inv_std) = standardize(self.value(content).data(), &groups);
        let sd = self.value(style).data();
        let (c, hw) = (d[1], d[2] * d[3]);
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| {
            let (b, ch) = (i / (c * hw), (i / hw) % c);
            sd[b * 2 * c + ch] * v + sd[b * 2 * c + c + ch]
        }).collect();
        let needs = self.needs(&[content, style]);
        self.push(Tensor::new(d.to_vec(), out)?, Op::AdaIn { content, style, xhat, inv_std }, needs)
    }

    /// Bilinear upsampling by an integer factor (half-pixel alignment).
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "input")?;
        if factor == 0 {
            return Err(Error::invalid("factor", "must be at least 1"));
        }
        let out = if factor == 1 {
            self.value(input).clone()
        } else {
            let (ry, rx) = (upsample_taps::<T>(h, factor), upsample_taps::<T>(w, factor));
            let (oh, ow) = (h * factor, w * factor);
            let x = self.value(input).data();
            let mut out = vec![T::zero(); n * c * oh * ow];
            let one = T::one();
            for p in 0..n * c {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                        let top = (one - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                        let bot = (one - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                        dst[oy * ow + ox] = (one - ly) * top + ly * bot;
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], out)?
        };
        let needs = self.needs(&[input]);
        self.push(out, Op::Upsample { input, factor }, needs)
    }

    /// Bilinear read of the feature vector at each point; `M x C`.
    pub fn extract_at(&mut self, input: Var, points: Vec<FeaturePoint<T>>) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "input")?;
        let xm = T::from_usize(w - 1).unwrap();
        let ym = T::from_usize(h - 1).unwrap();
        for p in &points {
            if p.batch >= n || !(p.x >= T::zero() && p.x <= xm && p.y >= T::zero() && p.y <= ym) {
                return Err(Error::invalid("point", format!("({}, {}) in batch {} outside {n}x{h}x{w}", p.x, p.y, p.batch)));
            }
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); points.len() * c];
        for (m, p) in points.iter().enumerate() {
            let taps = bilinear_taps(p.x, p.y, h, w);
            for ch in 0..c {
                let base = (p.batch * c + ch) * h * w;
                out[m * c + ch] = taps.iter().map(|&(i, wt)| wt * x[base + i]).sum();
            }
        }
        let needs = self.needs(&[input]);
        self.push(Tensor::new(vec![points.len(), c], out)?, Op::ExtractAt { input, points }, needs)
    }

    /// Fully connected layer: `input (N x F) . weight^T (F x O) + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, f] = dims2(self.value(input), "input")?;
        let [o, wf] = dims2(self.value(weight), "weight")?;
        if wf != f || self.value(bias).shape() != [o] {
            return Err(Error::ShapeMismatch { left: self.value(input).shape().to_vec(), right: self.value(weight).shape().to_vec() });
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, f, o, self.value(input).data(), false, self.value(weight).data(), true, &mut out, false);
        let b = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        let needs = self.needs(&[input, weight, bias]);
        self.push(Tensor::new(vec![n, o], out)?, Op::Linear { input, weight, bias }, needs)
    }

    /// Softmax over the channel axis of `N x C x H x W`, floored at
    /// [`SOFTMAX_FLOOR`].
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "input")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        let floor = T::lit(SOFTMAX_FLOOR);
        for b in 0..n {
            for i in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + i;
                let m = (0..c).map(|ch| x[at(ch)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..c).map(|ch| (x[at(ch)] - m).exp()).sum();
                for ch in 0..c {
                    out[at(ch)] = ((x[at(ch)] - m).exp() / s).max(floor);
                }
            }
        }
        let needs = self.needs(&[input]);
        self.push(Tensor::new(vec![n, c, h, w], out)?, Op::Softmax(input), needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = dims4(self.value(*parts.first().ok_or_else(|| Error::invalid("parts", "nothing to concat"))?), "part")?;
        let mut channels = 0;
        for &p in parts {
            let d = dims4(self.value(p), "part")?;
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(Error::ShapeMismatch { left: first.to_vec(), right: d.to_vec() });
            }
            channels += d[1];
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &p in parts {
                let c = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let needs = self.needs(parts);
        self.push(Tensor::new(vec![n, channels, h, w], out)?, Op::Concat(parts.to_vec()), needs)
    }

    /// Select batch entries (with repetition) along the leading axis.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let n = *shape.first().ok_or_else(|| Error::invalid("input", "rank-0 tensor"))?;
        if let Some(i) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("indices", format!("index {i} out of range for {n} entries")));
        }
        let inner: usize = shape[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in &indices {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        let needs = self.needs(&[input]);
        self.push(Tensor::new(oshape, out)?, Op::Gather { input, indices }, needs)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Propagate seed gradients (`∂L/∂node` for each listed node) to every
    /// node that needs a gradient. Seeds add to any existing gradient.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor<T>)>) -> Result<()> {
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::ShapeMismatch { left: g.shape().to_vec(), right: self.value(v).shape().to_vec() });
            }
            self.accumulate(v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &gout)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op<T>, gout: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Relu(input) => {
                let g = Tensor::new(
                    gout.shape().to_vec(),
                    gout.data().iter().zip(self.value(*input).data()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
                )?;
                self.accumulate(*input, g);
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                let [n, ci, h, w] = dims4(self.value(*input), "input")?;
                let [co, _, k, _] = dims4(self.value(*kernel), "kernel")?;
                let [_, _, ho, wo] = dims4(gout, "grad")?;
                let (ckk, plane) = (ci * k * k, ho * wo);
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let need_x = self.nodes[input.0].needs_grad;
                let need_k = self.nodes[kernel.0].needs_grad;
                let mut dk = vec![T::zero(); co * ckk];
                let mut dx = vec![T::zero(); if need_x { n * ci * h * w } else { 0 }];
                let mut cols = vec![T::zero(); ckk * plane];
                let mut dcols = vec![T::zero(); if direct { 0 } else { ckk * plane }];
                let x = self.value(*input).data();
                let kd = self.value(*kernel).data();
                for b in 0..n {
                    let go = &gout.data()[b * co * plane..(b + 1) * co * plane];
                    let xs = &x[b * ci * h * w..(b + 1) * ci * h * w];
                    if need_k {
                        let src: &[T] = if direct {
                            xs
                        } else {
                            im2col(xs, ci, h, w, k, *stride, *pad, ho, wo, &mut cols);
                            &cols
                        };
                        T::gemm(co, plane, ckk, go, false, src, true, &mut dk, true);
                    }
                    if need_x {
                        let dxs = &mut dx[b * ci * h * w..(b + 1) * ci * h * w];
                        if direct {
                            T::gemm(ckk, co, plane, kd, true, go, false, dxs, true);
                        } else {
                            T::gemm(ckk, co, plane, kd, true, go, false, &mut dcols, false);
                            col2im(&dcols, ci, h, w, k, *stride, *pad, ho, wo, dxs);
                        }
                    }
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); co];
                    for b in 0..n {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            *dbc += gout.data()[(b * co + c) * plane..(b * co + c + 1) * plane].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(*bv, Tensor::new(vec![co], db)?);
                }
                let kshape = self.value(*kernel).shape().to_vec();
                let xshape = self.value(*input).shape().to_vec();
                if need_k {
                    self.accumulate(*kernel, Tensor::new(kshape, dk)?);
                }
                if need_x {
                    self.accumulate(*input, Tensor::new(xshape, dx)?);
                }
            }
            Op::Normalize { input, gamma, beta, kind, xhat, inv_std } => {
                let d = dims4(self.value(*input), "input")?;
                let (c, hw) = (d[1], d[2] * d[3]);
                let gam = self.value(*gamma).data().to_vec();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); xhat.len()];
                for (i, (&g, &xh)) in gout.data().iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dg[ch] += g * xh;
                    db[ch] += g;
                    dxhat[i] = g * gam[ch];
                }
                let mut dx = vec![T::zero(); xhat.len()];
                standardize_backward(&dxhat, xhat, inv_std, &norm_groups(*kind, d), &mut dx);
                self.accumulate(*gamma, Tensor::new(vec![c], dg)?);
                self.accumulate(*beta, Tensor::new(vec![c], db)?);
                self.accumulate(*input, Tensor::new(d.to_vec(), dx)?);
            }
            Op::AdaIn { content, style, xhat, inv_std } => {
                let d = dims4(self.value(*content), "content")?;
                let (c, hw) = (d[1], d[2] * d[3]);
                let sd = self.value(*style).data().to_vec();
                let mut ds = vec![T::zero(); d[0] * 2 * c];
                let mut dxhat = vec![T::zero(); xhat.len()];
                for (i, (&g, &xh)) in gout.data().iter().zip(xhat).enumerate() {
                    let (b, ch) = (i / (c * hw), (i / hw) % c);
                    ds[b * 2 * c + ch] += g * xh;
                    ds[b * 2 * c + c + ch] += g;
                    dxhat[i] = g * sd[b * 2 * c + ch];
                }
                let mut dx = vec![T::zero(); xhat.len()];
                standardize_backward(&dxhat, xhat, inv_std, &norm_groups(NormKind::Instance, d), &mut dx);
                self.accumulate(*style, Tensor::new(vec![d[0], 2 * c], ds)?);
                self.accumulate(*content, Tensor::new(d.to_vec(), dx)?);
            }
            Op::Upsample { input, factor } => {
                let [n, c, h, w] = dims4(self.value(*input), "input")?;
                if *factor == 1 {
                    self.accumulate(*input, gout.clone());
                    return Ok(());
                }
                let (ry, rx) = (upsample_taps::<T>(h, *factor), upsample_taps::<T>(w, *factor));
                let ow = w * factor;
                let one = T::one();
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let go = &gout.data()[p * ry.len() * ow..(p + 1) * ry.len() * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                            let g = go[oy * ow + ox];
                            dst[y0 * w + x0] += (one - ly) * (one - lx) * g;
                            dst[y0 * w + x1] += (one - ly) * lx * g;
                            dst[y1 * w + x0] += ly * (one - lx) * g;
                            dst[y1 * w + x1] += ly * lx * g;
                        }
                    }
                }
                self.accumulate(*input, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::ExtractAt { input, points } => {
                let [n, c, h, w] = dims4(self.value(*input), "input")?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for (m, p) in points.iter().enumerate() {
                    let taps = bilinear_taps(p.x, p.y, h, w);
                    for ch in 0..c {
                        let g = gout.data()[m * c + ch];
                        let base = (p.batch * c + ch) * h * w;
                        for &(i, wt) in &taps {
                            dx[base + i] += wt * g;
                        }
                    }
                }
                self.accumulate(*input, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Linear { input, weight, bias } => {
                let [n, f] = dims2(self.value(*input), "input")?;
                let o = self.value(*weight).shape()[0];
                let mut dw = vec![T::zero(); o * f];
                T::gemm(o, n, f, gout.data(), true, self.value(*input).data(), false, &mut dw, false);
                let mut dx = vec![T::zero(); n * f];
                T::gemm(n, o, f, gout.data(), false, self.value(*weight).data(), false, &mut dx, false);
                let mut db = vec![T::zero(); o];
                for row in gout.data().chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(*weight, Tensor::new(vec![o, f], dw)?);
                self.accumulate(*bias, Tensor::new(vec![o], db)?);
                self.accumulate(*input, Tensor::new(vec![n, f], dx)?);
            }
            Op::Softmax(input) => {
                let [n, c, h, w] = dims4(gout, "grad")?;
                let hw = h * w;
                let y = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); y.len()];
                for b in 0..n {
                    for i in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + i;
                        let dot: T = (0..c).map(|ch| y[at(ch)] * gout.data()[at(ch)]).sum();
                        for ch in 0..c {
                            dx[at(ch)] = y[at(ch)] * (gout.data()[at(ch)] - dot);
                        }
                    }
                }
                self.accumulate(*input, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Concat(parts) => {
                let [n, ctot, h, w] = dims4(gout, "grad")?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut g = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            g.extend_from_slice(&gout.data()[(b * ctot + offset) * hw..(b * ctot + offset + c) * hw]);
                        }
                        self.accumulate(p, Tensor::new(vec![n, c, h, w], g)?);
                    }
                    offset += c;
                }
            }
            Op::Gather { input, indices } => {
                let shape = self.value(*input).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![T::zero(); shape[0] * inner];
                for (m, &i) in indices.iter().enumerate() {
                    dx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&gout.data()[m * inner..(m + 1) * inner])
                        .for_each(|(a, &b)| *a += b);
                }
                self.accumulate(*input, Tensor::new(shape, dx)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Norm-wise relative error between analytic and central-difference
    /// gradients of `Σ w ⊙ f(inputs)` for every input.
    fn fd_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = |xs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape0, _, out0) = run(&inputs);
        let weights = rnd(tape0.value(out0).shape(), &mut rng);
        let objective = |xs: &[Tensor<f64>]| {
            let (t, _, o) = run(xs);
            t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut tape, vars, out) = run(&inputs);
        tape.backward(vec![(out, weights.clone())]).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let mut num = vec![0.0; inputs[k].len()];
            for i in 0..inputs[k].len() {
                let mut xs = inputs.clone();
                xs[k].data_mut()[i] += h;
                let fp = objective(&xs);
                xs[k].data_mut()[i] -= 2.0 * h;
                let fm = objective(&xs);
                num[i] = (fp - fm) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
        }
        worst
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rnd(&[2, 1, 4, 5], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = t.conv2d(xv, k, None, 1, 0).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn conv_average_on_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 1, 5, 6], 2.5));
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.shape(), &[1, 1, 5, 6]);
        for r in 1..4 {
            for c in 1..5 {
                assert!((v.get(&[0, 0, r, c]).unwrap() - 2.5).abs() < 1e-12);
            }
        }
        // zero padding: corner sees 4 of 9 taps
        assert!((v.get(&[0, 0, 0, 0]).unwrap() - 2.5 * 4.0 / 9.0).abs() < 1e-12);
        assert!((v.get(&[0, 0, 0, 2]).unwrap() - 2.5 * 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(t.conv2d(x, k, None, 1, 1).is_err());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let inputs = vec![rnd(&[2, 3, 6, 5], &mut rng), rnd(&[4, 3, k, k], &mut rng), rnd(&[4], &mut rng)];
            let err = fd_check(inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(), 3);
            assert!(err < 1e-4, "k={k} s={stride}: {err}");
        }
    }

    #[test]
    fn normalize_statistics_and_constant_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = rnd(&[2, 3, 4, 4], &mut rng);
        x.data_mut()[..16].iter_mut().for_each(|v| *v = 0.7);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.normalize(xv, g, b, NormKind::Instance).unwrap();
        let v = t.value(y).data();
        assert!(v[..16].iter().all(|&z| z.abs() < 1e-9));
        for grp in 1..6 {
            let s = &v[grp * 16..(grp + 1) * 16];
            let mean = s.iter().sum::<f64>() / 16.0;
            let var = s.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            // ε in the denominator shrinks the variance slightly
            assert!((var - 1.0).abs() < 1e-3);
        }
        let y = t.normalize(xv, g, b, NormKind::Batch).unwrap();
        let v = t.value(y);
        let mean: f64 = (0..2).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| v.data()[(n * 3 + 1) * 16 + i]).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [NormKind::Instance, NormKind::Batch] {
            let inputs = vec![rnd(&[2, 3, 3, 4], &mut rng), rnd(&[3], &mut rng), rnd(&[3], &mut rng)];
            let err = fd_check(inputs, |t, v| t.normalize(v[0], v[1], v[2], kind).unwrap(), 6);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn adain_neutral_and_degenerate_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rnd(&[1, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let neutral = t.constant(Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let a = t.adain(xv, neutral).unwrap();
        let n = t.normalize(xv, g, b, NormKind::Instance).unwrap();
        assert_eq!(t.value(a), t.value(n));
        let flat = t.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.3, -2.0]).unwrap());
        let a = t.adain(xv, flat).unwrap();
        let v = t.value(a).data();
        assert!(v[..9].iter().all(|&z| z == 0.3));
        assert!(v[9..].iter().all(|&z| z == -2.0));
    }

    #[test]
    fn adain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![rnd(&[2, 3, 4, 3], &mut rng), rnd(&[2, 6], &mut rng)];
        let err = fd_check(inputs, |t, v| t.adain(v[0], v[1]).unwrap(), 9);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn upsample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rnd(&[1, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.upsample(xv, 1).unwrap();
        assert_eq!(t.value(y), &x);
        let c = t.constant(Tensor::full(&[1, 1, 3, 2], 4.0));
        let y = t.upsample(c, 3).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));

        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let s = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![a, b, c, d]).unwrap());
        let y = t.upsample(s, 2).unwrap();
        // taps per axis: [1,0], [.75,.25], [.25,.75], [0,1]
        let wts = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for r in 0..4 {
            for col in 0..4 {
                let want = wts[r][0] * (wts[col][0] * a + wts[col][1] * b) + wts[r][1] * (wts[col][0] * c + wts[col][1] * d);
                assert!((t.value(y).get(&[0, 0, r, col]).unwrap() - want).abs() < 1e-12);
            }
        }
        assert_eq!(t.value(y).get(&[0, 0, 1, 1]).unwrap(), 0.75 * (0.75 + 0.5) + 0.25 * (2.25 + 1.25));
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in [1, 2, 4] {
            let err = fd_check(vec![rnd(&[2, 2, 3, 4], &mut rng)], |t, v| t.upsample(v[0], f).unwrap(), 12);
            assert!(err < 1e-4, "{f}: {err}");
        }
    }

    #[test]
    fn extract_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rnd(&[2, 3, 4, 5], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let e = t.extract_at(xv, vec![FeaturePoint { batch: 1, x: 3.0, y: 2.0 }]).unwrap();
        for c in 0..3 {
            assert_eq!(t.value(e).data()[c], x.get(&[1, c, 2, 3]).unwrap());
        }
        let k = t.constant(Tensor::full(&[1, 2, 3, 3], 0.25));
        let e = t.extract_at(k, vec![FeaturePoint { batch: 0, x: 1.3, y: 0.7 }]).unwrap();
        assert!(t.value(e).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(t.extract_at(xv, vec![FeaturePoint { batch: 0, x: 4.5, y: 0.0 }]).is_err());
        assert!(t.extract_at(xv, vec![FeaturePoint { batch: 2, x: 0.0, y: 0.0 }]).is_err());
    }

    #[test]
    fn extract_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = vec![
            FeaturePoint { batch: 0, x: 1.25, y: 2.5 },
            FeaturePoint { batch: 1, x: 0.0, y: 3.0 },
            FeaturePoint { batch: 1, x: 2.9, y: 0.1 },
        ];
        let err = fd_check(vec![rnd(&[2, 3, 4, 4], &mut rng)], |t, v| t.extract_at(v[0], pts.clone()).unwrap(), 15);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn remaining_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let err = fd_check(vec![rnd(&[3, 4], &mut rng), rnd(&[5, 4], &mut rng), rnd(&[5], &mut rng)], |t, v| t.linear(v[0], v[1], v[2]).unwrap(), 17);
        assert!(err < 1e-4, "linear {err}");
        let err = fd_check(vec![rnd(&[2, 3, 2, 2], &mut rng)], |t, v| t.softmax(v[0]).unwrap(), 18);
        assert!(err < 1e-4, "softmax {err}");
        let err = fd_check(vec![rnd(&[2, 1, 2, 3], &mut rng), rnd(&[2, 2, 2, 3], &mut rng)], |t, v| t.concat(&[v[0], v[1]]).unwrap(), 19);
        assert!(err < 1e-4, "concat {err}");
        let err = fd_check(vec![rnd(&[3, 2, 2, 2], &mut rng)], |t, v| t.gather(v[0], vec![2, 0, 2]).unwrap(), 20);
        assert!(err < 1e-4, "gather {err}");
        // relu away from the kink
        let x = rnd(&[1, 2, 3, 3], &mut rng).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let err = fd_check(vec![x], |t, v| t.relu(v[0]).unwrap(), 21);
        assert!(err < 1e-4, "relu {err}");
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut t = Tape::new();
        let x = t.constant(rnd(&[2, 4, 3, 3], &mut rng).scale(30.0));
        let y = t.softmax(x).unwrap();
        let v = t.value(y);
        for b in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..4).map(|c| v.data()[(b * 4 + c) * 9 + i]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(v.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = t.param(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, k, None, 1, 0).unwrap();
        t.backward(vec![(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad(k).unwrap().data(), &[4.0]);
    }
}
