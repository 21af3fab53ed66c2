use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize_depth, quantize_rgb, LabelMap, Scene};
use crate::error::{Error, Result};
use crate::grasp::{wrap_half_turn, GraspCandidate, LabeledGrasp};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BACKGROUND_DEPTH: f64 = 0.95;
pub const BACKGROUND_RGB: [f64; 3] = [0.25, 0.25, 0.27];
const MAX_ATTEMPTS: usize = 100;
const DEPTH_PLANES: [f64; 6] = [0.2, 0.32, 0.44, 0.56, 0.68, 0.8];
const MIN_OVERLAP: f64 = 0.4;
const SEPARATION_GAP: f64 = 3.0;
const WOOD: [f64; 3] = [0.62, 0.45, 0.28];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Capsule,
}

/// Placement policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Independent uniform placement, arbitrary colours and depths.
    #[default]
    Clutter,
    /// Similar-looking objects on at least three distinct depth planes, each
    /// overlapping an earlier one by at least 40% of the smaller footprint.
    DepthSeparated,
    /// Non-touching objects fully inside the image.
    WellSeparated,
}

/// A primitive in pixel coordinates: `(x, y)` is (column, row), `a >= b` are
/// half-extents along and across the major axis at angle `phi` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    pub depth: f64,
    pub albedo: [f64; 3],
}

impl SceneObject {
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.phi.to_radians().sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Whether the pixel centre `(px, py)` lies in the closed footprint.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let (u, v) = self.local(px, py);
        match self.kind {
            ShapeKind::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Capsule => {
                let du = (u.abs() - (self.a - self.b)).max(0.0);
                du * du + v * v <= self.b * self.b
            }
        }
    }

    fn shade(&self, px: f64, py: f64) -> f64 {
        let (u, v) = self.local(px, py);
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).min(1.0);
        0.75 + 0.25 * (1.0 - rho)
    }

    /// Footprint clipped to the image as a row-major mask.
    pub fn footprint(&self, height: usize, width: usize) -> Vec<bool> {
        let mut mask = vec![false; height * width];
        let r = self.a.hypot(self.b) + 1.0;
        let r0 = (self.y - r).floor().max(0.0) as usize;
        let r1 = ((self.y + r).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let c0 = (self.x - r).floor().max(0.0) as usize;
        let c1 = ((self.x + r).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        for row in r0..=r1 {
            for col in c0..=c1 {
                if self.covers(col as f64, row as f64) {
                    mask[row * width + col] = true;
                }
            }
        }
        mask
    }

    /// Ground-truth grasp across the minor axis at `(x, y)`.
    fn grasp_at(&self, x: f64, y: f64) -> GraspCandidate<f64> {
        GraspCandidate::new(x, y, self.a.max(2.0), 2.0 * self.b + 4.0, wrap_half_turn(self.phi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the major half-extent `a` in pixels.
    pub extent: [f64; 2],
    /// Range of `b / a`.
    pub aspect: [f64; 2],
    /// Std-dev of additive Gaussian depth noise.
    pub depth_noise: f64,
    pub rgb_noise: f64,
    /// Objects with fewer visible pixels are removed.
    pub min_visible_pixels: usize,
    pub shapes: Vec<ShapeKind>,
    pub preset: Preset,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::new(64, 64)
    }
}

impl GenConfig {
    pub fn new(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64;
        Self {
            height,
            width,
            min_objects: 2,
            max_objects: 5,
            extent: [s / 10.0, s / 5.0],
            aspect: [0.35, 0.8],
            depth_noise: 0.002,
            rgb_noise: 0.01,
            min_visible_pixels: (height * width / 300).max(8),
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Capsule],
            preset: Preset::Clutter,
        }
    }

    pub fn depth_separated(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64;
        Self {
            min_objects: 3,
            max_objects: 5,
            extent: [s / 8.0, s / 4.5],
            aspect: [0.4, 0.75],
            rgb_noise: 0.02,
            preset: Preset::DepthSeparated,
            ..Self::new(height, width)
        }
    }

    pub fn well_separated(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64;
        Self {
            min_objects: 2,
            max_objects: 4,
            extent: [s / 12.0, s / 7.0],
            aspect: [0.35, 0.7],
            preset: Preset::WellSeparated,
            ..Self::new(height, width)
        }
    }

    pub fn preset(preset: Preset, height: usize, width: usize) -> Self {
        match preset {
            Preset::Clutter => Self::new(height, width),
            Preset::DepthSeparated => Self::depth_separated(height, width),
            Preset::WellSeparated => Self::well_separated(height, width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::invalid("height/width", format!("{}x{} is below 32x32", self.height, self.width)));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects", format!("need 1 <= min <= max, got {}..{}", self.min_objects, self.max_objects)));
        }
        if self.max_objects > 255 {
            return Err(Error::invalid("max_objects", "instance ids are stored in 8 bits"));
        }
        if !(self.extent[0] > 0.0 && self.extent[0] <= self.extent[1] && self.extent[1].is_finite()) {
            return Err(Error::invalid("extent", format!("bad range {:?}", self.extent)));
        }
        if !(self.aspect[0] > 0.0 && self.aspect[0] <= self.aspect[1] && self.aspect[1] <= 1.0) {
            return Err(Error::invalid("aspect", format!("bad range {:?}", self.aspect)));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) || !(self.rgb_noise >= 0.0 && self.rgb_noise.is_finite()) {
            return Err(Error::invalid("depth_noise", "noise levels must be finite and non-negative"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("shapes", "at least one shape kind is required"));
        }
        if self.preset == Preset::DepthSeparated && (self.min_objects < 3 || self.max_objects > DEPTH_PLANES.len()) {
            return Err(Error::invalid("min_objects", "depth-separated scenes need between 3 and 6 objects"));
        }
        Ok(())
    }

    fn random_object(&self, rng: &mut ChaCha8Rng, x: f64, y: f64, depth: f64, albedo: [f64; 3]) -> SceneObject {
        let kind = self.shapes[rng.gen_range(0..self.shapes.len())];
        let a = rng.gen_range(self.extent[0]..=self.extent[1]);
        let b = (a * rng.gen_range(self.aspect[0]..=self.aspect[1])).max(1.0).min(a);
        SceneObject { kind, x, y, a, b, phi: rng.gen_range(0.0..180.0), depth, albedo }
    }

    fn sample_objects(&self, rng: &mut ChaCha8Rng) -> Option<Vec<SceneObject>> {
        let n = rng.gen_range(self.min_objects..=self.max_objects);
        let (wf, hf) = ((self.width - 1) as f64, (self.height - 1) as f64);
        let color = |rng: &mut ChaCha8Rng| [rng.gen_range(0.2..0.95), rng.gen_range(0.2..0.95), rng.gen_range(0.2..0.95)];
        match self.preset {
            Preset::Clutter => Some(
                (0..n)
                    .map(|_| {
                        let (x, y, d) = (rng.gen_range(0.0..=wf), rng.gen_range(0.0..=hf), rng.gen_range(0.15..0.85));
                        let c = color(rng);
                        self.random_object(rng, x, y, d, c)
                    })
                    .collect(),
            ),
            Preset::WellSeparated => {
                let mut objs: Vec<SceneObject> = Vec::with_capacity(n);
                for _ in 0..n {
                    let (d, c) = (rng.gen_range(0.3..0.8), color(rng));
                    let mut placed = None;
                    for _ in 0..200 {
                        let mut o = self.random_object(rng, 0.0, 0.0, d, c);
                        let m = o.a.hypot(o.b) + SEPARATION_GAP;
                        if 2.0 * m >= wf.min(hf) {
                            continue;
                        }
                        o.x = rng.gen_range(m..=wf - m);
                        o.y = rng.gen_range(m..=hf - m);
                        let far = |p: &SceneObject| (p.x - o.x).hypot(p.y - o.y) >= p.a.hypot(p.b) + o.a.hypot(o.b) + SEPARATION_GAP;
                        if objs.iter().all(far) {
                            placed = Some(o);
                            break;
                        }
                    }
                    objs.push(placed?);
                }
                Some(objs)
            }
            Preset::DepthSeparated => {
                let mut planes = DEPTH_PLANES;
                planes.shuffle(rng);
                let albedo = |rng: &mut ChaCha8Rng| WOOD.map(|v| v + rng.gen_range(-0.04..0.04));
                let c = albedo(rng);
                let (x0, y0) = (rng.gen_range(wf / 4.0..=3.0 * wf / 4.0), rng.gen_range(hf / 4.0..=3.0 * hf / 4.0));
                let first = self.random_object(rng, x0, y0, planes[0], c);
                let mut objs = vec![first];
                let mut areas = vec![first.footprint(self.height, self.width)];
                for &plane in planes.iter().take(n).skip(1) {
                    let c = albedo(rng);
                    let mut placed = None;
                    for _ in 0..64 {
                        let j = rng.gen_range(0..objs.len());
                        let mut o = self.random_object(rng, 0.0, 0.0, plane, c);
                        let r = rng.gen_range(0.0..=0.5 * (objs[j].a + o.a));
                        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                        o.x = objs[j].x + r * ang.cos();
                        o.y = objs[j].y + r * ang.sin();
                        if o.x < o.b || o.y < o.b || o.x > wf - o.b || o.y > hf - o.b {
                            continue;
                        }
                        let fp = o.footprint(self.height, self.width);
                        let (na, nb) = (count(&fp), count(&areas[j]));
                        let shared = fp.iter().zip(&areas[j]).filter(|(p, q)| **p && **q).count();
                        if na > 0 && shared as f64 >= MIN_OVERLAP * na.min(nb) as f64 {
                            placed = Some((o, fp));
                            break;
                        }
                    }
                    let (o, fp) = placed?;
                    objs.push(o);
                    areas.push(fp);
                }
                Some(objs)
            }
        }
    }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Index of the visible object per pixel (`None` for background). Nearer
/// depth wins, ties go to the lower index.
fn visibility(height: usize, width: usize, objects: &[SceneObject]) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for (i, o) in objects.iter().enumerate() {
        for (p, _) in o.footprint(height, width).iter().enumerate().filter(|(_, &m)| m) {
            if owner[p].is_none_or(|j| o.depth < objects[j].depth) {
                owner[p] = Some(i);
            }
        }
    }
    owner
}

/// Render primitives into a scene. Objects without any visible pixel are
/// dropped; the rest get instance ids in list order. Pixel noise depends only
/// on `seed`, so removing an object changes nothing outside its footprint.
pub fn render_objects<T: Real>(cfg: &GenConfig, objects: &[SceneObject], seed: u64) -> Result<Scene<T>> {
    let (h, w) = (cfg.height, cfg.width);
    let owner = visibility(h, w, objects);
    let mut visible = vec![0usize; objects.len()];
    owner.iter().flatten().for_each(|&i| visible[i] += 1);
    let kept: Vec<SceneObject> = objects.iter().zip(&visible).filter(|(_, &n)| n > 0).map(|(o, _)| *o).collect();
    let mut id_of = vec![0u32; objects.len()];
    let mut next = 0;
    for (i, &n) in visible.iter().enumerate() {
        if n > 0 {
            next += 1;
            id_of[i] = next;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut rgb = vec![T::zero(); 3 * h * w];
    let mut depth = vec![T::zero(); h * w];
    let mut labels = vec![0u32; h * w];
    for p in 0..h * w {
        let nd: f64 = rng.sample(StandardNormal);
        let nc: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let (px, py) = ((p % w) as f64, (p / w) as f64);
        let (d, color) = match owner[p] {
            Some(i) => {
                let o = &objects[i];
                labels[p] = id_of[i];
                let s = o.shade(px, py);
                (o.depth, o.albedo.map(|a| a * s))
            }
            None => (BACKGROUND_DEPTH, BACKGROUND_RGB),
        };
        depth[p] = quantize_depth(d + cfg.depth_noise * nd);
        for c in 0..3 {
            rgb[c * h * w + p] = quantize_rgb(color[c] + cfg.rgb_noise * nc[c]);
        }
    }
    let instances = LabelMap::new(h, w, labels)?;
    let mut grasps = Vec::with_capacity(kept.len());
    for (k, o) in kept.iter().enumerate() {
        let id = k as u32 + 1;
        let pix: Vec<usize> = (0..h * w).filter(|&p| instances.data()[p] == id).collect();
        let n = pix.len() as f64;
        let cx = pix.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
        let cy = pix.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
        let (gx, gy) = if instances.at_point(cx, cy) == Some(id) {
            (cx, cy)
        } else {
            let best = pix
                .iter()
                .copied()
                .min_by(|&p, &q| {
                    let d = |p: usize| ((p % w) as f64 - cx).powi(2) + ((p / w) as f64 - cy).powi(2);
                    d(p).total_cmp(&d(q))
                })
                .expect("visible object has pixels");
            ((best % w) as f64, (best / w) as f64)
        };
        let g = o.grasp_at(gx, gy);
        grasps.push(LabeledGrasp {
            grasp: GraspCandidate { x: T::lit(g.x), y: T::lit(g.y), w: T::lit(g.w), h: T::lit(g.h), theta: T::lit(g.theta), score: T::one() },
            instance_id: id,
        });
    }
    Ok(Scene {
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth: Tensor::new(vec![h, w], depth)?,
        instances,
        grasps,
        seed,
        objects: kept,
    })
}

/// Generate one scene; a pure function of `(cfg, seed)`.
pub fn generate_scene<T: Real>(cfg: &GenConfig, seed: u64) -> Result<Scene<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some(mut objects) = cfg.sample_objects(&mut rng) else { continue };
        loop {
            let owner = visibility(cfg.height, cfg.width, &objects);
            let mut visible = vec![0usize; objects.len()];
            owner.iter().flatten().for_each(|&i| visible[i] += 1);
            if visible.iter().all(|&n| n >= cfg.min_visible_pixels) {
                break;
            }
            let mut k = 0;
            objects.retain(|_| {
                k += 1;
                visible[k - 1] >= cfg.min_visible_pixels
            });
        }
        if objects.is_empty() {
            continue;
        }
        if cfg.preset == Preset::DepthSeparated {
            let mut planes: Vec<u64> = objects.iter().map(|o| o.depth.to_bits()).collect();
            planes.sort_unstable();
            planes.dedup();
            if planes.len() < 3 {
                continue;
            }
        }
        return render_objects(cfg, &objects, seed);
    }
    Err(Error::GenerationFailed(MAX_ATTEMPTS))
}

/// `count` scenes with seeds `seed, seed + 1, ...`, generated in parallel.
pub fn generate_batch<T: Real>(cfg: &GenConfig, seed: u64, count: usize) -> Result<Vec<Scene<T>>> {
    (0..count as u64).into_par_iter().map(|i| generate_scene(cfg, seed.wrapping_add(i))).collect()
}
