//! Planar grasp rectangles: representation, orientation classes, exact
//! oriented IoU, the rectangle grasp criterion and region-proposal targets.
//!
//! Angles are in degrees. A grasp `(x, y, w, h, θ)` is a rectangle centred at
//! `(x, y)` whose `w` side runs along `(cos θ, sin θ)` (the plate length) and
//! whose `h` side is the gripper opening. Parallel-plate grasps are symmetric
//! under a half turn, so θ lives in `[0, 180)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Wrap an angle in degrees into `[0, 180)`.
pub fn wrap_half_turn<T: Real>(theta: T) -> T {
    let half = T::lit(180.0);
    let mut w = theta % half;
    if w < T::zero() {
        w += half;
    }
    if w >= half {
        w = T::zero();
    }
    w
}

/// Oriented grasp rectangle with confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
    /// Orientation in degrees, `[0, 180)`.
    pub theta: T,
    /// Confidence in `[0, 1]`.
    pub score: T,
}

impl<T: Real> GraspCandidate<T> {
    /// Builds a candidate with score 1, wrapping θ.
    pub fn new(x: T, y: T, w: T, h: T, theta: T) -> Self {
        Self { x, y, w, h, theta: wrap_half_turn(theta), score: T::one() }
    }

    pub fn with_score(mut self, score: T) -> Self {
        self.score = score;
        self
    }

    pub fn center(&self) -> Point<T> {
        Point::new(self.x, self.y)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_well_formed(&self) -> bool {
        let finite = [self.x, self.y, self.w, self.h, self.theta, self.score].iter().all(|v| v.is_finite());
        finite
            && self.w > T::zero()
            && self.h > T::zero()
            && self.theta >= T::zero()
            && self.theta < T::lit(180.0)
            && self.score >= T::zero()
            && self.score <= T::one()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_well_formed() {
            Ok(())
        } else {
            Err(Error::invalid("grasp", format!("malformed grasp {self:?}")))
        }
    }

    /// Counter-clockwise corners (positive shoelace area in `(x, y)`).
    pub fn corners(&self) -> [Point<T>; 4] {
        let (s, c) = self.theta.to_radians().sin_cos();
        let (hw, hh) = (self.w / T::lit(2.0), self.h / T::lit(2.0));
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| Point::new(self.x + u * c - v * s, self.y + u * s + v * c))
    }

    /// Whether a point lies inside the closed rectangle.
    pub fn contains(&self, p: Point<T>) -> bool {
        let (s, c) = self.theta.to_radians().sin_cos();
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / T::lit(2.0) && v.abs() <= self.h / T::lit(2.0)
    }

    /// Axis-aligned bounding box of the rotated rectangle.
    pub fn hull(&self) -> AaBox<T> {
        let pts = self.corners();
        let (mut x0, mut y0, mut x1, mut y1) = (pts[0].x, pts[0].y, pts[0].x, pts[0].y);
        for p in &pts[1..] {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        AaBox::from_corners(x0, y0, x1, y1)
    }
}

/// Corners of a grasp rectangle, counter-clockwise.
pub fn rect_corners<T: Real>(g: &GraspCandidate<T>) -> [Point<T>; 4] {
    g.corners()
}

fn cross<T: Real>(o: Point<T>, a: Point<T>, b: Point<T>) -> T {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area.
pub fn polygon_area<T: Real>(poly: &[Point<T>]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += a.x * b.y - b.x * a.y;
    }
    acc / T::lit(2.0)
}

/// Clip `subject` by the half-planes of the counter-clockwise convex polygon
/// `clip` (Sutherland-Hodgman).
pub fn clip_convex<T: Real>(subject: &[Point<T>], clip: &[Point<T>]) -> Vec<Point<T>> {
    let mut out: Vec<Point<T>> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let dc = cross(e0, e1, cur);
            let dp = cross(e0, e1, prev);
            let cur_in = dc >= T::zero();
            let prev_in = dp >= T::zero();
            if cur_in != prev_in {
                let t = dp / (dp - dc);
                out.push(Point::new(prev.x + (cur.x - prev.x) * t, prev.y + (cur.y - prev.y) * t));
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Exact intersection area of two grasp rectangles.
pub fn intersection_area<T: Real>(a: &GraspCandidate<T>, b: &GraspCandidate<T>) -> T {
    polygon_area(&clip_convex(&a.corners(), &b.corners())).abs()
}

/// Intersection over union of two oriented rectangles, in `[0, 1]`.
pub fn oriented_iou<T: Real>(a: &GraspCandidate<T>, b: &GraspCandidate<T>) -> T {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}

/// Smallest angle between two grasp orientations under half-turn symmetry,
/// in `[0, 90]`.
pub fn angle_diff<T: Real>(a: T, b: T) -> T {
    let d = wrap_half_turn(a - b);
    d.min(T::lit(180.0) - d)
}

/// Rectangle grasp criterion: angle within the limit (inclusive) and IoU
/// strictly above the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspCriterion {
    pub max_angle_deg: f64,
    pub min_iou: f64,
}

impl Default for GraspCriterion {
    fn default() -> Self {
        Self { max_angle_deg: 30.0, min_iou: 0.25 }
    }
}

impl GraspCriterion {
    pub fn accepts(&self, angle_deg: f64, iou: f64) -> bool {
        angle_deg <= self.max_angle_deg && iou > self.min_iou
    }

    pub fn is_valid<T: Real>(&self, pred: &GraspCandidate<T>, gt: &GraspCandidate<T>) -> bool {
        let angle = angle_diff(pred.theta, gt.theta).as_f64();
        // cheap reject before clipping
        if angle > self.max_angle_deg {
            return false;
        }
        self.accepts(angle, oriented_iou(pred, gt).as_f64())
    }
}

pub fn is_valid_grasp<T: Real>(pred: &GraspCandidate<T>, gt: &GraspCandidate<T>) -> bool {
    GraspCriterion::default().is_valid(pred, gt)
}

/// Ground-truth grasp annotated with the instance it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledGrasp<T> {
    pub grasp: GraspCandidate<T>,
    pub instance_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// `None` when every scene was excluded.
    pub percent: Option<f64>,
    pub matched: usize,
    pub total: usize,
    pub num_scenes: usize,
    /// Indices of scenes without predictions.
    pub excluded_scenes: Vec<usize>,
}

/// Greedy confidence-ordered matching of one scene's predictions (one
/// candidate per predicted object) against ground-truth objects. Returns the
/// matched object id per prediction, in the prediction's original order.
pub fn match_scene<T: Real>(
    preds: &[GraspCandidate<T>],
    gts: &[LabeledGrasp<T>],
    criterion: &GraspCriterion,
) -> Vec<Option<u32>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.partial_cmp(&preds[i].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut objects: Vec<u32> = gts.iter().map(|g| g.instance_id).collect();
    objects.sort_unstable();
    objects.dedup();
    let mut taken = vec![false; objects.len()];
    let mut result = vec![None; preds.len()];
    for i in order {
        for (k, &obj) in objects.iter().enumerate() {
            if taken[k] {
                continue;
            }
            if gts.iter().any(|g| g.instance_id == obj && criterion.is_valid(&preds[i], &g.grasp)) {
                taken[k] = true;
                result[i] = Some(obj);
                break;
            }
        }
    }
    result
}

/// Grasp accuracy over a set of scenes, pooled over predictions.
pub fn grasp_accuracy<T: Real>(
    preds: &[Vec<GraspCandidate<T>>],
    gts: &[Vec<LabeledGrasp<T>>],
    criterion: &GraspCriterion,
) -> Result<AccuracyReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "preds",
            format!("{} prediction scenes vs {} ground-truth scenes", preds.len(), gts.len()),
        ));
    }
    let mut report = AccuracyReport { num_scenes: preds.len(), ..Default::default() };
    for (s, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.is_empty() {
            report.excluded_scenes.push(s);
            continue;
        }
        report.total += p.len();
        report.matched += match_scene(p, g, criterion).iter().filter(|m| m.is_some()).count();
    }
    if report.total > 0 {
        report.percent = Some(100.0 * report.matched as f64 / report.total as f64);
    }
    Ok(report)
}

/// Keep candidates with score at least `min_score`, then greedily suppress
/// any candidate overlapping an already kept one by more than `nms_iou`.
/// The survivors stand for one predicted object each.
pub fn select_top_candidates<T: Real>(cands: &[GraspCandidate<T>], min_score: T, nms_iou: T) -> Vec<GraspCandidate<T>> {
    let mut sorted: Vec<GraspCandidate<T>> = cands.iter().copied().filter(|c| c.score >= min_score).collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<GraspCandidate<T>> = Vec::new();
    for c in sorted {
        if kept.iter().all(|k| oriented_iou(k, &c) <= nms_iou) {
            kept.push(c);
        }
    }
    kept
}

/// Orientation classes: 18 bins of 10 degrees over `[0, 180)`, numbered
/// `1..=18`, plus the invalid-proposal class `0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OrientationCodebook;

impl OrientationCodebook {
    pub const NUM_BINS: usize = 18;
    pub const BIN_WIDTH_DEG: f64 = 10.0;
    /// Class index of invalid proposals.
    pub const INVALID: usize = 0;
    /// Size of the classifier output (bins plus the invalid class).
    pub const NUM_CLASSES: usize = Self::NUM_BINS + 1;

    pub fn class_of<T: Real>(theta: T) -> usize {
        let bin = (wrap_half_turn(theta) / T::lit(Self::BIN_WIDTH_DEG)).floor().to_usize().unwrap_or(0);
        bin.min(Self::NUM_BINS - 1) + 1
    }

    /// Bin midpoint of a valid class.
    pub fn theta_of<T: Real>(class: usize) -> Result<T> {
        if class == Self::INVALID || class > Self::NUM_BINS {
            return Err(Error::invalid("class", format!("{class} is not an orientation class")));
        }
        Ok(T::lit((class as f64 - 0.5) * Self::BIN_WIDTH_DEG))
    }
}

pub fn theta_to_class<T: Real>(theta: T) -> usize {
    OrientationCodebook::class_of(theta)
}

pub fn class_to_theta<T: Real>(class: usize) -> Result<T> {
    OrientationCodebook::theta_of(class)
}

/// Axis-aligned box, centre and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> AaBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let two = T::lit(2.0);
        Self { x: (x0 + x1) / two, y: (y0 + y1) / two, w: x1 - x0, h: y1 - y0 }
    }

    pub fn iou(&self, other: &Self) -> T {
        let two = T::lit(2.0);
        let ix = ((self.x + self.w / two).min(other.x + other.w / two) - (self.x - self.w / two).max(other.x - other.w / two))
            .max(T::zero());
        let iy = ((self.y + self.h / two).min(other.y + other.h / two) - (self.y - self.h / two).max(other.y - other.h / two))
            .max(T::zero());
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    /// Regression targets `(t_x, t_y, t_w, t_h)` of `target` relative to this box.
    pub fn offsets_to(&self, x: T, y: T, w: T, h: T) -> [T; 4] {
        [(x - self.x) / self.w, (y - self.y) / self.h, (w / self.w).ln(), (h / self.h).ln()]
    }

    /// Inverse of [`AaBox::offsets_to`]: `(x, y, w, h)`.
    pub fn apply_offsets(&self, t: [T; 4]) -> [T; 4] {
        [self.x + t[0] * self.w, self.y + t[1] * self.h, self.w * t[2].exp(), self.h * t[3].exp()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProposalLabel<T> {
    /// Member of the valid set with regression targets and orientation class.
    Valid { offsets: [T; 4], class: usize, gt_index: usize },
    /// Member of the invalid set (class `OrientationCodebook::INVALID`).
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal<T> {
    /// Position in the proposal list handed to [`make_targets`].
    pub index: usize,
    pub anchor: AaBox<T>,
    pub label: ProposalLabel<T>,
}

impl<T: Real> Proposal<T> {
    pub fn target_class(&self) -> usize {
        match self.label {
            ProposalLabel::Valid { class, .. } => class,
            ProposalLabel::Invalid => OrientationCodebook::INVALID,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.label, ProposalLabel::Valid { .. })
    }
}

/// Assign every proposal to the valid set (best hull IoU `>= iou_pos`), the
/// invalid set (best IoU `< iou_neg`), or neither (omitted from the result).
pub fn make_targets<T: Real>(proposals: &[AaBox<T>], gts: &[GraspCandidate<T>], iou_pos: T, iou_neg: T) -> Result<Vec<Proposal<T>>> {
    if iou_neg > iou_pos {
        return Err(Error::invalid("iou_neg", format!("{iou_neg} exceeds iou_pos {iou_pos}")));
    }
    if let Some(a) = proposals.iter().find(|a| !(a.w > T::zero() && a.h > T::zero())) {
        return Err(Error::invalid("proposals", format!("degenerate proposal {a:?}")));
    }
    let hulls: Vec<AaBox<T>> = gts.iter().map(|g| g.hull()).collect();
    let mut out = Vec::with_capacity(proposals.len());
    for (index, anchor) in proposals.iter().enumerate() {
        let best = hulls
            .iter()
            .enumerate()
            .map(|(k, h)| (k, anchor.iou(h)))
            .fold(None, |acc: Option<(usize, T)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        let label = match best {
            Some((k, iou)) if iou >= iou_pos => {
                let g = &gts[k];
                ProposalLabel::Valid {
                    offsets: anchor.offsets_to(g.x, g.y, g.w, g.h),
                    class: theta_to_class(g.theta),
                    gt_index: k,
                }
            }
            Some((_, iou)) if iou >= iou_neg => continue,
            _ => ProposalLabel::Invalid,
        };
        out.push(Proposal { index, anchor: *anchor, label });
    }
    Ok(out)
}
