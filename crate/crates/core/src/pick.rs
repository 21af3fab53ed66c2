//! Mask-based grasp refinement and a simulated sequential picking loop.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coordconv::PointProposal;
use crate::error::{Error, Result};
use crate::grasp::{is_valid_grasp, select_top_candidates, GraspCandidate};
use crate::net::{Model, NetInput, Query};
use crate::scalar::Real;
use crate::scene::{render_objects, GenConfig, LabelMap, Scene, BACKGROUND_DEPTH, BACKGROUND_RGB};

/// Binary `H x W` mask of one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    pub id: u32,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>, id: u32) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch { left: vec![data.len()], right: vec![height, width] });
        }
        Ok(Self { height, width, data, id })
    }

    pub fn from_labels(labels: &LabelMap, id: u32) -> Self {
        Self { height: labels.height(), width: labels.width(), data: labels.mask(id), id }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Mask value at the pixel nearest to `(x, y)`; false outside the image.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, r) = (x.round(), y.round());
        c >= 0.0 && r >= 0.0 && c < self.width as f64 && r < self.height as f64 && self.get(r as usize, c as usize)
    }

    fn non_empty(&self) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::invalid("mask", "empty instance mask"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            _ => Err(Error::invalid("connectivity", format!("expected 4 or 8, got `{s}`"))),
        }
    }
}

/// Pixel counts of the connected components of `mask`, largest first.
pub fn component_sizes(mask: &InstanceMask, connectivity: Connectivity) -> Vec<usize> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut seen = vec![false; mask.data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut n = 0;
        while let Some(p) = queue.pop_front() {
            n += 1;
            let (r, c) = ((p / mask.width) as isize, (p % mask.width) as isize);
            for &(dr, dc) in offsets {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    continue;
                }
                let q = (rr * w + cc) as usize;
                if mask.data[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(n);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// True iff the largest connected component covers at least `ratio` of the
/// mask. A fragmented mask usually means the object is partly occluded.
pub fn continuity_check(mask: &InstanceMask, connectivity: Connectivity, ratio: f64) -> Result<bool> {
    mask.non_empty()?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("ratio", format!("must lie in [0, 1], got {ratio}")));
    }
    let sizes = component_sizes(mask, connectivity);
    Ok(sizes[0] as f64 >= ratio * mask.area() as f64)
}

/// Arithmetic mean of the mask pixel coordinates `(x, y)`.
pub fn mask_centroid(mask: &InstanceMask) -> Result<(f64, f64)> {
    mask.non_empty()?;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (p, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        sx += (p % mask.width) as f64;
        sy += (p / mask.width) as f64;
        n += 1.0;
    }
    Ok((sx / n, sy / n))
}

/// Centroid minus grasp centre.
pub fn centroid_offset<T: Real>(mask: &InstanceMask, g: &GraspCandidate<T>) -> Result<(f64, f64)> {
    let (cx, cy) = mask_centroid(mask)?;
    Ok((cx - g.x.as_f64(), cy - g.y.as_f64()))
}

/// Distance from `(x, y)` along `(dx, dy)` to the image border (pixel
/// edges at -0.5 and size - 0.5).
fn border_distance(x: f64, y: f64, dx: f64, dy: f64, h: usize, w: usize) -> f64 {
    let axis = |p: f64, d: f64, n: usize| {
        if d > 1e-12 {
            (n as f64 - 0.5 - p) / d
        } else if d < -1e-12 {
            (p + 0.5) / -d
        } else {
            f64::INFINITY
        }
    };
    axis(x, dx, w).min(axis(y, dy, h)).max(0.0)
}

/// Extent of the mask from `(x, y)` in direction `(dx, dy)`: unit steps are
/// taken until the sampled pixel leaves the mask; the last pixel inside
/// counts half.
fn march(mask: &InstanceMask, x: f64, y: f64, dx: f64, dy: f64) -> f64 {
    let mut t = 1.0;
    while mask.contains(x + t * dx, y + t * dy) {
        t += 1.0;
    }
    t - 0.5
}

/// Widen the gripper opening `h` to the mask extent perpendicular to the
/// plates plus `margin` on each side. The result never shrinks `h`, is
/// capped at the image chord through the centre, and keeps centre, plate
/// length, angle and score.
pub fn expand_gripper_width<T: Real>(g: &GraspCandidate<T>, mask: &InstanceMask, margin: f64) -> Result<GraspCandidate<T>> {
    mask.non_empty()?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid("margin", format!("must be finite and non-negative, got {margin}")));
    }
    let (x, y) = (g.x.as_f64(), g.y.as_f64());
    if !mask.contains(x, y) {
        return Err(Error::invalid("grasp", format!("centre ({x:.2}, {y:.2}) lies outside the instance mask")));
    }
    let th = g.theta.as_f64().to_radians();
    let (nx, ny) = (-th.sin(), th.cos());
    let span = march(mask, x, y, nx, ny) + march(mask, x, y, -nx, -ny) + 2.0 * margin;
    let chord = border_distance(x, y, nx, ny, mask.height, mask.width) + border_distance(x, y, -nx, -ny, mask.height, mask.width);
    let h = g.h.as_f64().max(span.min(chord));
    Ok(GraspCandidate { h: T::lit(h), ..*g })
}

/// Gripper plates of a grasp as two `w x thickness` rectangles just outside
/// the opening; true if any pixel of an instance other than `own` and the
/// background falls inside one.
pub fn plates_collide<T: Real>(g: &GraspCandidate<T>, labels: &LabelMap, own: u32, thickness: f64) -> bool {
    let (x, y, w, h) = (g.x.as_f64(), g.y.as_f64(), g.w.as_f64(), g.h.as_f64());
    let th = g.theta.as_f64().to_radians();
    let (ux, uy) = (th.cos(), th.sin());
    let (nx, ny) = (-uy, ux);
    let off = h / 2.0 + thickness / 2.0;
    let reach = (w / 2.0).hypot(off + thickness / 2.0).ceil() as isize + 1;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    for r in (cy - reach).max(0)..(cy + reach + 1).min(labels.height() as isize) {
        for c in (cx - reach).max(0)..(cx + reach + 1).min(labels.width() as isize) {
            let id = labels.get(r as usize, c as usize);
            if id == 0 || id == own {
                continue;
            }
            let (px, py) = (c as f64 - x, r as f64 - y);
            let along = px * ux + py * uy;
            let across = px * nx + py * ny;
            if along.abs() <= w / 2.0 && (across.abs() - off).abs() <= thickness / 2.0 {
                return true;
            }
        }
    }
    false
}

/// What the picking loop needs from a model.
pub trait GraspModel<T: Real> {
    /// Scored grasp candidates for the current scene.
    fn grasps(&mut self, scene: &Scene<T>) -> Result<Vec<GraspCandidate<T>>>;
    /// Instance mask selected by a point proposal.
    fn segment(&mut self, scene: &Scene<T>, p: PointProposal<T>) -> Result<InstanceMask>;
}

/// Ground-truth model: every visible object's grasp with confidence 1, in
/// instance order, and exact visible masks.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleModel;

impl<T: Real> GraspModel<T> for OracleModel {
    fn grasps(&mut self, scene: &Scene<T>) -> Result<Vec<GraspCandidate<T>>> {
        Ok(scene.grasps.iter().map(|g| g.grasp.with_score(T::one())).collect())
    }

    fn segment(&mut self, scene: &Scene<T>, p: PointProposal<T>) -> Result<InstanceMask> {
        let id = scene.instances.at_point(p.x.as_f64(), p.y.as_f64()).unwrap_or(0);
        if id == 0 {
            return InstanceMask::new(scene.height(), scene.width(), vec![false; scene.height() * scene.width()], 0);
        }
        Ok(InstanceMask::from_labels(&scene.instances, id))
    }
}

/// A trained network as picking model.
pub struct NetworkModel<T> {
    pub model: Model<T>,
    pub mask_threshold: f64,
    pub nms_iou: f64,
}

impl<T: Real> NetworkModel<T> {
    pub fn new(model: Model<T>) -> Self {
        Self { model, mask_threshold: 0.5, nms_iou: 0.3 }
    }
}

impl<T: Real> GraspModel<T> for NetworkModel<T> {
    fn grasps(&mut self, scene: &Scene<T>) -> Result<Vec<GraspCandidate<T>>> {
        let input = NetInput::from_scenes(&[scene])?;
        let (tape, out) = self.model.run(&input, &[])?;
        let all = self.model.decode_grasps(tape.value(out.grasp), 0)?;
        Ok(select_top_candidates(&all, T::zero(), T::lit(self.nms_iou)))
    }

    fn segment(&mut self, scene: &Scene<T>, p: PointProposal<T>) -> Result<InstanceMask> {
        let input = NetInput::from_scenes(&[scene])?;
        let (tape, out) = self.model.run(&input, &[Query { batch: 0, point: p }])?;
        let probs = tape.value(out.instance.expect("one query"));
        let hw = scene.height() * scene.width();
        let thr = T::lit(self.mask_threshold);
        let data = probs.data()[hw..2 * hw].iter().map(|&v| v > thr).collect();
        let id = scene.instances.at_point(p.x.as_f64(), p.y.as_f64()).unwrap_or(0);
        InstanceMask::new(scene.height(), scene.width(), data, id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PickConfig {
    /// Safety margin added on each side of the opening, in pixels.
    pub margin: f64,
    pub connectivity: Connectivity,
    pub continuity_ratio: f64,
    /// Candidates below this confidence count as "nothing detected".
    pub min_score: f64,
    /// Iteration cap as a multiple of the initial object count.
    pub max_iterations_factor: usize,
    pub plate_thickness: f64,
    /// When set and the scene carries its generating primitives, a removed
    /// object is deleted and the scene re-rendered, exposing what was
    /// beneath; otherwise its pixels are backfilled with the background.
    pub render: Option<GenConfig>,
}

impl Default for PickConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            connectivity: Connectivity::Eight,
            continuity_ratio: 0.95,
            min_score: 0.5,
            max_iterations_factor: 3,
            plate_thickness: 1.0,
            render: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Success,
    Failure,
    Skipped,
}

/// One iteration of the picking loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickStep {
    pub iteration: usize,
    pub candidate: GraspCandidate<f64>,
    pub refined: Option<GraspCandidate<f64>>,
    pub centroid_offset: Option<(f64, f64)>,
    pub decision: Decision,
    pub reason: String,
    /// Instance removed on success, in the ids of the scene at that step.
    pub removed: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PickOutcome {
    pub attempts: usize,
    pub skipped: usize,
    pub successes: usize,
    pub failures: usize,
    /// `100 * successes / attempts`, `None` without attempts.
    pub success_rate: Option<f64>,
    pub initial_objects: usize,
    pub remaining_objects: usize,
    pub iterations: usize,
}

fn cast_grasp<T: Real>(g: &GraspCandidate<T>) -> GraspCandidate<f64> {
    GraspCandidate { x: g.x.as_f64(), y: g.y.as_f64(), w: g.w.as_f64(), h: g.h.as_f64(), theta: g.theta.as_f64(), score: g.score.as_f64() }
}

fn remove_instance<T: Real>(scene: &Scene<T>, id: u32, cfg: &PickConfig) -> Result<Scene<T>> {
    if let Some(render) = &cfg.render {
        if scene.objects.len() == scene.num_instances() as usize {
            let mut objects = scene.objects.clone();
            objects.remove(id as usize - 1);
            return render_objects(render, &objects, scene.seed);
        }
    }
    let mut s = scene.clone();
    let hw = s.height() * s.width();
    for p in 0..hw {
        let l = s.instances.data()[p];
        if l == id {
            s.instances.data_mut()[p] = 0;
            s.depth.data_mut()[p] = T::lit(BACKGROUND_DEPTH);
            for c in 0..3 {
                s.rgb.data_mut()[c * hw + p] = T::lit(BACKGROUND_RGB[c]);
            }
        } else if l > id {
            s.instances.data_mut()[p] = l - 1;
        }
    }
    s.grasps.retain(|g| g.instance_id != id);
    for g in &mut s.grasps {
        if g.instance_id > id {
            g.instance_id -= 1;
        }
    }
    s.objects.clear();
    Ok(s)
}

/// Run the picking loop on one scene. Each iteration takes the most
/// confident untried candidate, segments with its centre as proposal,
/// skips fragmented masks, widens the opening and checks the refined grasp
/// against the remaining objects. Successful picks remove the object; tried
/// candidates are forgotten whenever the scene changes.
pub fn simulate_picking<T: Real, M: GraspModel<T>>(scene: &Scene<T>, model: &mut M, cfg: &PickConfig) -> Result<(PickOutcome, Vec<PickStep>)> {
    let initial = scene.num_instances() as usize;
    let cap = cfg.max_iterations_factor * initial;
    let mut scene = scene.clone();
    let mut tried: Vec<GraspCandidate<T>> = Vec::new();
    let mut out = PickOutcome { initial_objects: initial, ..Default::default() };
    let mut trace = Vec::new();
    let (h, w) = (scene.height(), scene.width());
    while out.iterations < cap && scene.num_instances() > 0 {
        let mut cands: Vec<GraspCandidate<T>> =
            model.grasps(&scene)?.into_iter().filter(|c| c.score.as_f64() >= cfg.min_score && !tried.contains(c)).collect();
        cands.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let Some(cand) = cands.first().copied() else { break };
        out.iterations += 1;
        tried.push(cand);
        let mut step = PickStep {
            iteration: out.iterations,
            candidate: cast_grasp(&cand),
            refined: None,
            centroid_offset: None,
            decision: Decision::Skipped,
            reason: String::new(),
            removed: None,
        };
        let centre = PointProposal::new(cand.x, cand.y);
        let mask = if centre.check_inside(h, w).is_ok() { Some(model.segment(&scene, centre)?) } else { None };
        let mask = match mask {
            Some(m) if m.area() > 0 && m.contains(cand.x.as_f64(), cand.y.as_f64()) => m,
            _ => {
                step.reason = "proposal does not select a mask".into();
                out.skipped += 1;
                trace.push(step);
                continue;
            }
        };
        if !continuity_check(&mask, cfg.connectivity, cfg.continuity_ratio)? {
            step.reason = "mask is not continuous".into();
            out.skipped += 1;
            trace.push(step);
            continue;
        }
        let refined = expand_gripper_width(&cand, &mask, cfg.margin)?;
        step.refined = Some(cast_grasp(&refined));
        step.centroid_offset = Some(centroid_offset(&mask, &refined)?);
        out.attempts += 1;
        let own = scene.instances.at_point(cand.x.as_f64(), cand.y.as_f64()).unwrap_or(0);
        let mut matched: Vec<u32> = scene.grasps.iter().filter(|g| is_valid_grasp(&refined, &g.grasp)).map(|g| g.instance_id).collect();
        matched.sort_by_key(|&id| (id != own, id));
        match matched.first().copied() {
            None => {
                step.decision = Decision::Failure;
                step.reason = "no remaining object accepts the grasp".into();
                out.failures += 1;
            }
            Some(id) if plates_collide(&refined, &scene.instances, id, cfg.plate_thickness) => {
                step.decision = Decision::Failure;
                step.reason = "gripper plates hit another object".into();
                out.failures += 1;
            }
            Some(id) => {
                step.decision = Decision::Success;
                step.removed = Some(id);
                out.successes += 1;
                scene = remove_instance(&scene, id, cfg)?;
                tried.clear();
            }
        }
        trace.push(step);
    }
    out.remaining_objects = scene.num_instances() as usize;
    out.success_rate = (out.attempts > 0).then(|| 100.0 * out.successes as f64 / out.attempts as f64);
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneObject, ShapeKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect_mask(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> InstanceMask {
        let data = (0..h * w).map(|p| (r0..r1).contains(&(p / w)) && (c0..c1).contains(&(p % w))).collect();
        InstanceMask::new(h, w, data, 1).unwrap()
    }

    #[test]
    fn continuity_examples() {
        let solid = rect_mask(20, 20, 2, 10, 3, 15);
        assert!(continuity_check(&solid, Connectivity::Eight, 0.95).unwrap());
        let mut two = rect_mask(20, 20, 2, 6, 2, 6);
        let other = rect_mask(20, 20, 12, 16, 12, 16);
        two.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a |= *b);
        assert!(!continuity_check(&two, Connectivity::Eight, 0.95).unwrap());
        assert!(continuity_check(&two, Connectivity::Eight, 0.5).unwrap());
        let empty = InstanceMask::new(4, 4, vec![false; 16], 1).unwrap();
        assert!(continuity_check(&empty, Connectivity::Four, 0.95).is_err());
    }

    #[test]
    fn speckle_is_tolerated() {
        let mut m = rect_mask(40, 40, 5, 25, 5, 25);
        for k in 0..8 {
            m.data[(30 + (k % 2) * 5) * 40 + 2 + 4 * k] = true;
        }
        assert!(m.area() == 408);
        assert_eq!(component_sizes(&m, Connectivity::Eight).len(), 9);
        assert!(continuity_check(&m, Connectivity::Eight, 0.95).unwrap());
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let mut m = InstanceMask::new(3, 3, vec![false; 9], 1).unwrap();
        m.data[0] = true;
        m.data[4] = true;
        assert_eq!(component_sizes(&m, Connectivity::Eight), vec![2]);
        assert_eq!(component_sizes(&m, Connectivity::Four), vec![1, 1]);
    }

    #[test]
    fn expand_on_axis_aligned_bar() {
        let m = rect_mask(40, 40, 10, 30, 5, 35);
        let g = GraspCandidate::new(20.0, 19.0, 10.0, 4.0, 0.0);
        let e = expand_gripper_width(&g, &m, 0.0).unwrap();
        assert_eq!(e.h, 20.0);
        assert_eq!((e.x, e.y, e.w, e.theta, e.score), (g.x, g.y, g.w, g.theta, g.score));
        assert_eq!(expand_gripper_width(&g, &m, 2.0).unwrap().h, 24.0);
        let wide = GraspCandidate::new(20.0, 19.0, 10.0, 30.0, 0.0);
        assert_eq!(expand_gripper_width(&wide, &m, 0.0).unwrap().h, 30.0);
        assert_eq!(expand_gripper_width(&e, &m, 0.0).unwrap(), e);
        let vertical = GraspCandidate::new(20.0f64, 19.0, 10.0, 4.0, 90.0);
        assert!((expand_gripper_width(&vertical, &m, 0.0).unwrap().h - 30.0).abs() < 1e-9);
        let outside = GraspCandidate::new(1.0, 1.0, 10.0, 4.0, 0.0);
        assert!(expand_gripper_width(&outside, &m, 0.0).is_err());
    }

    #[test]
    fn expand_is_capped_by_the_image() {
        let m = rect_mask(10, 10, 0, 10, 0, 10);
        let g = GraspCandidate::new(4.5f64, 4.5, 2.0, 1.0, 0.0);
        assert!((expand_gripper_width(&g, &m, 5.0).unwrap().h - 10.0).abs() < 1e-9);
    }

    #[test]
    fn centroid_examples() {
        let m = rect_mask(8, 8, 3, 5, 3, 5);
        assert_eq!(mask_centroid(&m).unwrap(), (3.5, 3.5));
        let g = GraspCandidate::new(3.0, 4.0, 2.0, 2.0, 0.0);
        assert_eq!(centroid_offset(&m, &g).unwrap(), (0.5, -0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<bool> = (0..144).map(|_| rng.gen_bool(0.3)).collect();
            let m = InstanceMask::new(12, 12, data.clone(), 1).unwrap();
            if m.area() == 0 {
                continue;
            }
            let pts: Vec<(f64, f64)> = (0..12).flat_map(|r| (0..12).map(move |c| (c as f64, r as f64))).zip(&data).filter(|(_, &d)| d).map(|(p, _)| p).collect();
            let n = pts.len() as f64;
            let (cx, cy) = mask_centroid(&m).unwrap();
            assert!((cx - pts.iter().map(|p| p.0).sum::<f64>() / n).abs() < 1e-12);
            assert!((cy - pts.iter().map(|p| p.1).sum::<f64>() / n).abs() < 1e-12);
        }
    }

    #[test]
    fn plates_detect_neighbours() {
        let mut labels = vec![0u32; 30 * 30];
        for r in 10..20 {
            for c in 10..20 {
                labels[r * 30 + c] = 1;
            }
        }
        let free = LabelMap::new(30, 30, labels.clone()).unwrap();
        let g = GraspCandidate::new(14.5, 14.5, 6.0, 12.0, 0.0);
        assert!(!plates_collide(&g, &free, 1, 1.0));
        labels[21 * 30 + 14] = 2;
        let blocked = LabelMap::new(30, 30, labels).unwrap();
        assert!(plates_collide(&g, &blocked, 1, 1.0));
        assert!(!plates_collide(&GraspCandidate::new(14.5, 14.5, 6.0, 12.0, 90.0), &blocked, 1, 1.0));
    }

    #[test]
    fn oracle_clears_well_separated_scenes() {
        let cfg = GenConfig::well_separated(64, 64);
        for seed in 0..10 {
            let scene: Scene<f64> = generate_scene(&cfg, seed).unwrap();
            let (out, trace) = simulate_picking(&scene, &mut OracleModel, &PickConfig::default()).unwrap();
            assert_eq!(out.success_rate, Some(100.0), "seed {seed}: {trace:?}");
            assert_eq!(out.remaining_objects, 0);
            assert_eq!(out.successes, out.initial_objects);
        }
    }

    #[test]
    fn occluded_object_is_skipped_until_exposed() {
        let cfg = GenConfig { depth_noise: 0.0, rgb_noise: 0.0, ..GenConfig::new(64, 64) };
        let bar = |x: f64, y: f64, a: f64, b: f64, phi: f64, depth: f64| SceneObject {
            kind: ShapeKind::Rectangle,
            x,
            y,
            a,
            b,
            phi,
            depth,
            albedo: [0.6, 0.45, 0.3],
        };
        let objects = vec![bar(32.0, 32.0, 20.0, 4.0, 0.0, 0.6), bar(32.0, 19.0, 17.0, 3.0, 90.0, 0.3)];
        let scene: Scene<f64> = render_objects(&cfg, &objects, 5).unwrap();
        let lower = InstanceMask::from_labels(&scene.instances, 1);
        assert!(!continuity_check(&lower, Connectivity::Eight, 0.95).unwrap());
        let pick = PickConfig { render: Some(cfg), ..PickConfig::default() };
        let (out, trace) = simulate_picking(&scene, &mut OracleModel, &pick).unwrap();
        assert!(out.skipped >= 1, "{trace:?}");
        assert_eq!(trace.iter().position(|s| s.decision == Decision::Skipped), Some(0));
        assert_eq!(out.remaining_objects, 0, "{trace:?}");
        assert_eq!(out.successes, 2);
    }

    #[test]
    fn loop_terminates_with_hopeless_model() {
        struct Stubborn;
        impl GraspModel<f64> for Stubborn {
            fn grasps(&mut self, _: &Scene<f64>) -> Result<Vec<GraspCandidate<f64>>> {
                Ok((0..50).map(|k| GraspCandidate::new(1.0 + k as f64 * 0.01, 1.0, 3.0, 3.0, 45.0).with_score(0.9)).collect())
            }
            fn segment(&mut self, s: &Scene<f64>, _: PointProposal<f64>) -> Result<InstanceMask> {
                Ok(InstanceMask::from_labels(&s.instances, 1))
            }
        }
        let scene: Scene<f64> = generate_scene(&GenConfig::new(48, 48), 1).unwrap();
        let (out, _) = simulate_picking(&scene, &mut Stubborn, &PickConfig::default()).unwrap();
        assert_eq!(out.iterations, 3 * scene.num_instances() as usize);
        assert_eq!(out.successes + out.failures, out.attempts);
    }
}
