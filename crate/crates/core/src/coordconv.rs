//! Depth-aware coordinate maps for a point proposal.
//!
//! For a proposal `p` on a normalized depth image `D` (values in `[0, 1]`)
//! the encoder produces, in this channel order:
//!
//! * `X_rel`, `Y_rel`: pixel offsets from `p` divided by `R`
//! * `D_dist = α (D - D(p))`
//! * `F_2.5D = sqrt(X_rel² + Y_rel² + D_dist²)` built from the unclamped maps
//! * `D_sim = exp(β |D - D(p)|) - 1`
//! * `H_dist^c = α (H^c - H^c(p))` for the three HHA channels
//!
//! Every map is finally saturated to `[-1, 1]`. None of them carries learned
//! parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Point proposal in pixel coordinates (`x` = column, `y` = row). May be
/// fractional when expressed at a reduced feature resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointProposal<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> PointProposal<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        let inside = self.x >= T::zero()
            && self.y >= T::zero()
            && self.x <= T::from_usize(width).unwrap() - T::one()
            && self.y <= T::from_usize(height).unwrap() - T::one();
        if inside {
            Ok(())
        } else {
            Err(Error::invalid("proposal", format!("({}, {}) outside {height}x{width} image", self.x, self.y)))
        }
    }

    /// Map an image-pixel proposal onto a grid downsampled by `stride`
    /// (pixel centres aligned, as in half-pixel bilinear resampling), clamped
    /// to the coarse grid.
    pub fn to_stride(&self, stride: usize, height: usize, width: usize) -> Self {
        let s = T::from_usize(stride).unwrap();
        let half = T::lit(0.5);
        let f = |v: T, n: usize| ((v + half) / s - half).max(T::zero()).min(T::from_usize(n).unwrap() - T::one());
        Self { x: f(self.x, width), y: f(self.y, height) }
    }
}

/// One of the selectable coordinate feature groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordFeature {
    Rel,
    DepthDist,
    Dist25,
    DepthSim,
    Hha,
}

impl CoordFeature {
    pub const ALL: [CoordFeature; 5] =
        [CoordFeature::Rel, CoordFeature::DepthDist, CoordFeature::Dist25, CoordFeature::DepthSim, CoordFeature::Hha];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn channels(self) -> usize {
        match self {
            CoordFeature::Rel => 2,
            CoordFeature::Hha => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoordFeature::Rel => "rel",
            CoordFeature::DepthDist => "depth_dist",
            CoordFeature::Dist25 => "dist25",
            CoordFeature::DepthSim => "depth_sim",
            CoordFeature::Hha => "hha",
        }
    }
}

/// Subset of [`CoordFeature`]s, serialized as a list of names.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<CoordFeature>", into = "Vec<CoordFeature>")]
pub struct FeatureSet(u8);

impl FeatureSet {
    pub const EMPTY: FeatureSet = FeatureSet(0);

    pub fn of(features: &[CoordFeature]) -> Self {
        Self(features.iter().fold(0, |acc, f| acc | f.bit()))
    }

    pub fn full() -> Self {
        Self::of(&CoordFeature::ALL)
    }

    pub fn contains(&self, f: CoordFeature) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = CoordFeature> + '_ {
        CoordFeature::ALL.into_iter().filter(|f| self.contains(*f))
    }

    /// Number of output channels this set produces.
    pub fn channel_count(&self) -> usize {
        self.iter().map(CoordFeature::channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("variants", "empty coordinate feature set"));
        }
        if self.contains(CoordFeature::Dist25) && !(self.contains(CoordFeature::Rel) && self.contains(CoordFeature::DepthDist)) {
            return Err(Error::invalid("variants", "dist25 requires rel and depth_dist"));
        }
        Ok(())
    }
}

impl From<Vec<CoordFeature>> for FeatureSet {
    fn from(v: Vec<CoordFeature>) -> Self {
        Self::of(&v)
    }
}

impl From<FeatureSet> for Vec<CoordFeature> {
    fn from(s: FeatureSet) -> Self {
        s.iter().collect()
    }
}

/// Pinhole camera used to back-project normalized depth for HHA. Metric depth
/// is `near + D (far - near)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn for_image(height: usize, width: usize) -> Self {
        let f = height.max(width) as f64;
        Self { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0, near: 0.5, far: 1.5 }
    }

    /// Same camera observing a grid downsampled by `stride`.
    pub fn downsampled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid("camera", "need 0 < near < far"));
        }
        Ok(())
    }
}

/// Hyperparameters of the coordinate encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordConvConfig {
    /// Divisor of the relative coordinates; roughly the largest object size.
    #[serde(rename = "R")]
    pub radius: f64,
    pub alpha: f64,
    pub beta: f64,
    pub variants: FeatureSet,
    /// Camera for HHA; `None` uses [`Camera::for_image`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl CoordConvConfig {
    /// Defaults for an `height x width` image: `R = max(H, W) / 2`, `α = 2`, `β = 1`.
    pub fn for_image(height: usize, width: usize, variants: FeatureSet) -> Self {
        Self {
            radius: height.max(width) as f64 / 2.0,
            alpha: 2.0,
            beta: 1.0,
            variants,
            camera: None,
            gravity: default_gravity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid("R", format!("must be positive, got {}", self.radius)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta", format!("must be positive, got {}", self.beta)));
        }
        self.variants.validate()
    }

    /// The configuration as seen on a grid downsampled by `stride`.
    pub fn downsampled(&self, stride: usize, height: usize, width: usize) -> Self {
        let cam = self.camera.unwrap_or_else(|| Camera::for_image(height, width));
        Self { radius: self.radius / stride as f64, camera: Some(cam.downsampled(stride)), ..*self }
    }
}

fn image_dims<T: Real>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::invalid(what, format!("expected a non-empty H x W map, got {:?}", t.shape()))),
    }
}

fn check_unit_range<T: Real>(d: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    let dims = image_dims(d, what)?;
    if let Some(v) = d.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::invalid(what, format!("values must lie in [0, 1], found {v}")));
    }
    Ok(dims)
}

/// Bilinear read of a 2-D map at fractional `(x, y)`, clamped to the map.
pub fn sample_bilinear<T: Real>(map: &Tensor<T>, x: T, y: T) -> T {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let xm = T::from_usize(w - 1).unwrap();
    let ym = T::from_usize(h - 1).unwrap();
    let (x, y) = (x.max(T::zero()).min(xm), y.max(T::zero()).min(ym));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0.to_usize().unwrap(), y0.to_usize().unwrap());
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let d = map.data();
    let v = |r: usize, c: usize| d[r * w + c];
    let one = T::one();
    (one - fy) * ((one - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((one - fx) * v(y1, x0) + fx * v(y1, x1))
}

fn saturate<T: Real>(t: Tensor<T>) -> Tensor<T> {
    let one = T::one();
    t.map(|v| v.max(-one).min(one))
}

fn rel_raw<T: Real>(h: usize, w: usize, p: PointProposal<T>, r: T) -> (Tensor<T>, Tensor<T>) {
    let xr = Tensor::from_fn(&[h, w], |i| (T::from_usize(i[1]).unwrap() - p.x) / r);
    let yr = Tensor::from_fn(&[h, w], |i| (T::from_usize(i[0]).unwrap() - p.y) / r);
    (xr, yr)
}

fn depth_dist_raw<T: Real>(d: &Tensor<T>, p: PointProposal<T>, alpha: T) -> Tensor<T> {
    let dp = sample_bilinear(d, p.x, p.y);
    d.map(|v| alpha * (v - dp))
}

fn norm3<T: Real>(x: &Tensor<T>, y: &Tensor<T>, z: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(y.data()).zip(z.data()).map(|((&a, &b), &c)| (a * a + b * b + c * c).sqrt()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Relative coordinate maps `(X_rel, Y_rel)`, clamped to `[-1, 1]`.
pub fn rel_coords<T: Real>(height: usize, width: usize, p: PointProposal<T>, radius: T) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(radius > T::zero()) {
        return Err(Error::invalid("R", "must be positive"));
    }
    p.check_inside(height, width)?;
    let (x, y) = rel_raw(height, width, p, radius);
    Ok((saturate(x), saturate(y)))
}

/// Depth-distance map `clamp(α (D - D(p)))`.
pub fn depth_dist<T: Real>(depth: &Tensor<T>, p: PointProposal<T>, alpha: T) -> Result<Tensor<T>> {
    let (h, w) = check_unit_range(depth, "depth")?;
    p.check_inside(h, w)?;
    Ok(saturate(depth_dist_raw(depth, p, alpha)))
}

/// Pointwise Euclidean norm of three maps, clamped.
pub fn dist_2p5d<T: Real>(x_rel: &Tensor<T>, y_rel: &Tensor<T>, d_dist: &Tensor<T>) -> Result<Tensor<T>> {
    for other in [y_rel, d_dist] {
        if other.shape() != x_rel.shape() {
            return Err(Error::ShapeMismatch { left: x_rel.shape().to_vec(), right: other.shape().to_vec() });
        }
    }
    Ok(saturate(norm3(x_rel, y_rel, d_dist)))
}

/// Depth-similarity map `clamp(exp(β |D - D(p)|) - 1)`.
pub fn depth_sim<T: Real>(depth: &Tensor<T>, p: PointProposal<T>, beta: T) -> Result<Tensor<T>> {
    let (h, w) = check_unit_range(depth, "depth")?;
    p.check_inside(h, w)?;
    let dp = sample_bilinear(depth, p.x, p.y);
    Ok(saturate(depth.map(|v| (beta * (v - dp).abs()).exp() - T::one())))
}

/// Three-channel HHA re-encoding of a depth map, each channel in `[0, 1]`:
/// horizontal disparity, height above the fitted ground plane, and the angle
/// between the surface normal and the up direction (divided by π).
#[derive(Clone, Debug, PartialEq)]
pub struct HhaEncoding<T> {
    /// `3 x H x W`.
    pub channels: Tensor<T>,
}

impl<T: Real> HhaEncoding<T> {
    pub fn channel(&self, c: usize) -> Tensor<T> {
        self.channels.index_axis0(c)
    }
}

fn min_max_normalize<T: Real>(v: &mut [T]) {
    let lo = v.iter().copied().fold(T::infinity(), T::min);
    let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > T::zero() { ((*x - lo) / span).max(T::zero()).min(T::one()) } else { T::zero() };
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize3(a: V3) -> Option<V3> {
    let n = dot(a, a).sqrt();
    (n > 1e-300).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

fn solve3(m: [[f64; 3]; 3], rhs: V3) -> Option<V3> {
    let det = |m: [[f64; 3]; 3]| dot(m[0], cross3(m[1], m[2]));
    let d = det(m);
    let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if d.abs() <= 1e-12 * scale.powi(3) {
        return None;
    }
    // Cramer's rule on the (symmetric) normal equations
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = rhs[r];
        }
        *o = det(mk) / d;
    }
    Some(out)
}

/// HHA encoding of a normalized depth map.
///
/// The ground plane is fitted by least squares to the points farthest along
/// gravity (within 10% of the gravity-axis range). If that fit is singular it
/// falls back to the gravity-orthogonal plane through the farthest point.
pub fn hha_encode<T: Real>(depth: &Tensor<T>, camera: &Camera, gravity: [f64; 3]) -> Result<HhaEncoding<T>> {
    let (h, w) = check_unit_range(depth, "depth")?;
    camera.validate()?;
    let g = normalize3(gravity).ok_or_else(|| Error::invalid("gravity", "zero vector"))?;
    let n = h * w;
    let d: Vec<f64> = depth.data().iter().map(|v| v.as_f64()).collect();

    let mut disparity: Vec<T> = d.iter().map(|&v| T::lit(1.0 / v.max(1e-3))).collect();
    min_max_normalize(&mut disparity);

    let pts: Vec<V3> = (0..n)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let z = camera.near + d[i] * (camera.far - camera.near);
            [(c - camera.cx) * z / camera.fx, (r - camera.cy) * z / camera.fy, z]
        })
        .collect();

    // in-plane basis orthogonal to gravity
    let helper = if g[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize3(cross3(g, helper)).expect("non-parallel helper");
    let e2 = cross3(g, e1);
    let along: Vec<f64> = pts.iter().map(|&p| dot(p, g)).collect();
    let umax = along.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let umin = along.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 0.1 * (umax - umin);
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (p, &u) in pts.iter().zip(&along) {
        if u >= umax - tol {
            let row = [dot(*p, e1), dot(*p, e2), 1.0];
            for r in 0..3 {
                for c in 0..3 {
                    ata[r][c] += row[r] * row[c];
                }
                atb[r] += row[r] * u;
            }
        }
    }
    let plane = solve3(ata, atb).unwrap_or([0.0, 0.0, umax]);
    let denom = (1.0 + plane[0] * plane[0] + plane[1] * plane[1]).sqrt();
    let mut height: Vec<T> = pts
        .iter()
        .zip(&along)
        .map(|(p, &u)| T::lit((plane[0] * dot(*p, e1) + plane[1] * dot(*p, e2) + plane[2] - u) / denom))
        .collect();
    min_max_normalize(&mut height);

    let up = [-g[0], -g[1], -g[2]];
    let mut angle = Vec::with_capacity(n);
    for r in 0..h {
        for c in 0..w {
            let at = |rr: usize, cc: usize| pts[rr * w + cc];
            let sub = |a: V3, b: V3| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let tx = sub(at(r, (c + 1).min(w - 1)), at(r, c.saturating_sub(1)));
            let ty = sub(at((r + 1).min(h - 1), c), at(r.saturating_sub(1), c));
            let a = match normalize3(cross3(tx, ty)) {
                Some(mut nrm) => {
                    if dot(nrm, at(r, c)) > 0.0 {
                        nrm = [-nrm[0], -nrm[1], -nrm[2]];
                    }
                    dot(nrm, up).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
                }
                None => 0.0,
            };
            angle.push(T::lit(a));
        }
    }

    let mut data = disparity;
    data.extend(height);
    data.extend(angle);
    Ok(HhaEncoding { channels: Tensor::new(vec![3, h, w], data)? })
}

/// Per-channel distance maps `clamp(α (H^c - H^c(p)))`.
pub fn hha_dist<T: Real>(hha: &HhaEncoding<T>, p: PointProposal<T>, alpha: T) -> Result<[Tensor<T>; 3]> {
    let shape = hha.channels.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid("hha", format!("expected 3 x H x W, got {shape:?}")));
    }
    p.check_inside(shape[1], shape[2])?;
    let ch = |c: usize| -> Result<Tensor<T>> {
        let m = hha.channel(c);
        check_unit_range(&m, "hha")?;
        let at = sample_bilinear(&m, p.x, p.y);
        Ok(saturate(m.map(|v| alpha * (v - at))))
    };
    Ok([ch(0)?, ch(1)?, ch(2)?])
}

/// Output of [`encode`]; only the configured maps are present.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordConvMaps<T> {
    pub x_rel: Option<Tensor<T>>,
    pub y_rel: Option<Tensor<T>>,
    pub d_dist: Option<Tensor<T>>,
    pub f_25d: Option<Tensor<T>>,
    pub d_sim: Option<Tensor<T>>,
    pub h_dist: Option<[Tensor<T>; 3]>,
}

impl<T: Real> CoordConvMaps<T> {
    /// Present maps in canonical channel order with their names.
    pub fn named_channels(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = [
            ("x_rel", &self.x_rel),
            ("y_rel", &self.y_rel),
            ("d_dist", &self.d_dist),
            ("f_25d", &self.f_25d),
            ("d_sim", &self.d_sim),
        ]
        .into_iter()
        .filter_map(|(name, m)| m.as_ref().map(|t| (name, t)))
        .collect();
        if let Some(h) = &self.h_dist {
            out.push(("h_dist_1", &h[0]));
            out.push(("h_dist_2", &h[1]));
            out.push(("h_dist_3", &h[2]));
        }
        out
    }

    pub fn channel_count(&self) -> usize {
        self.named_channels().len()
    }

    /// Stack into a `C x H x W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = self.named_channels().into_iter().map(|(_, t)| t.clone()).collect();
        Tensor::stack(&parts)
    }
}

/// Compute every configured map for proposal `p` on depth map `depth`.
pub fn encode<T: Real>(depth: &Tensor<T>, p: PointProposal<T>, cfg: &CoordConvConfig) -> Result<CoordConvMaps<T>> {
    cfg.validate()?;
    let (h, w) = check_unit_range(depth, "depth")?;
    p.check_inside(h, w)?;
    let v = cfg.variants;
    let (xr, yr) = rel_raw(h, w, p, T::lit(cfg.radius));
    let dd = depth_dist_raw(depth, p, T::lit(cfg.alpha));
    let f25 = v.contains(CoordFeature::Dist25).then(|| saturate(norm3(&xr, &yr, &dd)));
    let rel = v.contains(CoordFeature::Rel);
    let d_sim = if v.contains(CoordFeature::DepthSim) { Some(depth_sim(depth, p, T::lit(cfg.beta))?) } else { None };
    let h_dist = if v.contains(CoordFeature::Hha) {
        let cam = cfg.camera.unwrap_or_else(|| Camera::for_image(h, w));
        Some(hha_dist(&hha_encode(depth, &cam, cfg.gravity)?, p, T::lit(cfg.alpha))?)
    } else {
        None
    };
    Ok(CoordConvMaps {
        x_rel: rel.then(|| saturate(xr)),
        y_rel: rel.then(|| saturate(yr)),
        d_dist: v.contains(CoordFeature::DepthDist).then(|| saturate(dd)),
        f_25d: f25,
        d_sim,
        h_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pp(x: f64, y: f64) -> PointProposal<f64> {
        PointProposal::new(x, y)
    }

    fn const_depth(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::full(&[h, w], v)
    }

    #[test]
    fn rel_examples() {
        let (x, y) = rel_coords(5, 5, pp(2.0, 2.0), 2.0).unwrap();
        assert_eq!(&x.data()[10..15], &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(x.get(&[2, 2]).unwrap(), 0.0);
        assert_eq!(y.get(&[2, 2]).unwrap(), 0.0);
        let (x, y) = rel_coords(4, 6, pp(1.0, 3.0), 7.0).unwrap();
        let (xr, yr) = rel_raw(4, 6, pp(1.0, 3.0), 7.0);
        assert_eq!(x, xr);
        assert_eq!(y, yr);
        assert!(rel_coords(5, 5, pp(5.0, 0.0), 2.0).is_err());
        assert!(rel_coords(5, 5, pp(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn depth_dist_examples() {
        let mut d = const_depth(3, 3, 0.4);
        d.set(&[0, 0], 0.7).unwrap();
        let dd = depth_dist(&d, pp(1.0, 1.0), 1.0).unwrap();
        assert!((dd.get(&[0, 0]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(dd.get(&[1, 1]).unwrap(), 0.0);
        let mut d = const_depth(3, 3, 0.2);
        d.set(&[2, 2], 0.7).unwrap();
        assert_eq!(depth_dist(&d, pp(0.0, 0.0), 4.0).unwrap().get(&[2, 2]).unwrap(), 1.0);
        let mut bad = const_depth(2, 2, 0.5);
        bad.set(&[0, 1], 1.5).unwrap();
        assert!(depth_dist(&bad, pp(0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn dist25_examples() {
        let m = |v: f64| Tensor::full(&[1, 1], v);
        assert!((dist_2p5d(&m(0.3), &m(0.4), &m(0.0)).unwrap().data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(dist_2p5d(&m(0.0), &m(0.0), &m(0.0)).unwrap().data()[0], 0.0);
        assert_eq!(dist_2p5d(&m(1.0), &m(1.0), &m(1.0)).unwrap().data()[0], 1.0);
        assert!(dist_2p5d(&m(1.0), &Tensor::zeros(&[2, 1]), &m(1.0)).is_err());
    }

    #[test]
    fn depth_sim_examples() {
        assert!(depth_sim(&const_depth(4, 4, 0.3), pp(1.0, 2.0), 3.0).unwrap().data().iter().all(|&v| v == 0.0));
        let mut d = const_depth(1, 2, 0.2);
        d.set(&[0, 1], 0.7).unwrap();
        let s = depth_sim(&d, pp(0.0, 0.0), 1.0).unwrap();
        assert!((s.get(&[0, 1]).unwrap() - 0.6487).abs() < 1e-4);
        assert_eq!(depth_sim(&d, pp(0.0, 0.0), 2.0).unwrap().get(&[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn hha_flat_has_constant_angle() {
        let d = const_depth(8, 10, 0.6);
        let hha = hha_encode(&d, &Camera::for_image(8, 10), [0.0, 0.0, 1.0]).unwrap();
        let a = hha.channel(2);
        assert!(a.data().iter().all(|&v| (v - a.data()[0]).abs() < 1e-12));
        for c in 0..3 {
            assert!(hha.channel(c).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hha_step_height_two_levels() {
        // far floor on the left half, a nearer box face on the right
        let d = Tensor::from_fn(&[12, 12], |i| if i[1] < 6 { 0.9 } else { 0.3 });
        let hha = hha_encode(&d, &Camera::for_image(12, 12), [0.0, 0.0, 1.0]).unwrap();
        let mut levels: Vec<f64> = hha.channel(1).into_data();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        assert_eq!(levels.len(), 2, "{levels:?}");
        assert!(levels[0].abs() < 1e-9 && (levels[1] - 1.0).abs() < 1e-9);
        // floor at zero height
        assert!(hha.channel(1).get(&[0, 0]).unwrap() < 1e-9);
    }

    #[test]
    fn hha_rejects_bad_inputs() {
        let d = const_depth(4, 4, 0.5);
        assert!(hha_encode(&d, &Camera::for_image(4, 4), [0.0, 0.0, 0.0]).is_err());
        let mut cam = Camera::for_image(4, 4);
        cam.fx = 0.0;
        assert!(hha_encode(&d, &cam, [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn hha_dist_examples() {
        let d = Tensor::from_fn(&[6, 6], |i| 0.2 + 0.1 * ((i[0] * 7 + i[1] * 3) % 5) as f64);
        let hha = hha_encode(&d, &Camera::for_image(6, 6), [0.0, 0.0, 1.0]).unwrap();
        let p = pp(2.0, 3.0);
        let maps = hha_dist(&hha, p, 1.0).unwrap();
        for (c, m) in maps.iter().enumerate() {
            assert_eq!(m.get(&[3, 2]).unwrap(), 0.0);
            // alpha = 1 on [0,1] channels never saturates
            let raw = hha.channel(c);
            let at = raw.get(&[3, 2]).unwrap();
            for (o, r) in m.data().iter().zip(raw.data()) {
                assert_eq!(*o, r - at);
            }
        }
        let flat = HhaEncoding { channels: Tensor::full(&[3, 4, 4], 0.5) };
        assert!(hha_dist(&flat, pp(1.0, 1.0), 3.0).unwrap().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn encode_channel_counts() {
        let d = const_depth(8, 8, 0.5);
        let p = pp(3.0, 4.0);
        let cfg = |v: &[CoordFeature]| CoordConvConfig::for_image(8, 8, FeatureSet::of(v));
        use CoordFeature::*;
        assert_eq!(encode(&d, p, &cfg(&[Rel])).unwrap().channel_count(), 2);
        assert_eq!(encode(&d, p, &cfg(&[Rel, DepthDist, Dist25])).unwrap().channel_count(), 4);
        let full = encode(&d, p, &cfg(&CoordFeature::ALL)).unwrap();
        assert_eq!(full.channel_count(), 8);
        assert_eq!(full.to_tensor().unwrap().shape(), &[8, 8, 8]);
        let names: Vec<_> = full.named_channels().iter().map(|c| c.0).collect();
        assert_eq!(names, ["x_rel", "y_rel", "d_dist", "f_25d", "d_sim", "h_dist_1", "h_dist_2", "h_dist_3"]);
        assert!(encode(&d, p, &cfg(&[Dist25])).is_err());
        assert!(encode(&d, p, &cfg(&[Rel, Dist25])).is_err());
        assert!(encode(&d, p, &cfg(&[])).is_err());
        assert_eq!(FeatureSet::of(&[Rel, Hha]).channel_count(), 5);
    }

    #[test]
    fn encode_uses_unclamped_inputs_for_norm() {
        // X_rel saturates at 1 but the norm is formed before clamping
        let d = const_depth(1, 9, 0.5);
        let mut cfg = CoordConvConfig::for_image(1, 9, FeatureSet::of(&[CoordFeature::Rel, CoordFeature::DepthDist, CoordFeature::Dist25]));
        cfg.radius = 4.0;
        let m = encode(&d, pp(0.0, 0.0), &cfg).unwrap();
        assert_eq!(m.x_rel.as_ref().unwrap().get(&[0, 8]).unwrap(), 1.0);
        assert_eq!(m.f_25d.as_ref().unwrap().get(&[0, 2]).unwrap(), 0.5);
    }

    #[test]
    fn config_json_shape() {
        let cfg = CoordConvConfig::for_image(64, 64, FeatureSet::of(&[CoordFeature::Rel, CoordFeature::DepthSim]));
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"R\":32.0"));
        assert!(s.contains("\"variants\":[\"rel\",\"depth_sim\"]"));
        let back: CoordConvConfig = serde_json::from_str(r#"{"R": 10, "alpha": 3, "beta": 0.5, "variants": ["hha", "rel"]}"#).unwrap();
        assert_eq!(back.variants, FeatureSet::of(&[CoordFeature::Rel, CoordFeature::Hha]));
        assert_eq!(back.gravity, [0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn disparity_monotone(vals in proptest::collection::vec(0.0..=1.0f64, 16)) {
            let d = Tensor::new(vec![4, 4], vals.clone()).unwrap();
            let hha = hha_encode(&d, &Camera::for_image(4, 4), [0.0, 0.0, 1.0]).unwrap();
            let disp = hha.channel(0);
            for i in 0..16 {
                for j in 0..16 {
                    if vals[i] < vals[j] {
                        prop_assert!(disp.data()[i] >= disp.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn f25_dominates_components(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let m = |v: f64| Tensor::full(&[1, 1], v);
            let n = norm3(&m(x), &m(y), &m(z)).data()[0];
            prop_assert!(n >= x.abs() && n >= y.abs() && n >= z.abs());
        }
    }
}
