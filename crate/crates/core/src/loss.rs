//! Training losses with analytic gradients.
//!
//! * box regression: smooth-L1 on offsets, averaged over valid proposals
//! * orientation: cross-entropy over the 18 bins plus the invalid class,
//!   both sums normalized by the total proposal count
//! * semantic: log loss on the hardest quarter of pixels
//! * instance: normalized focal loss
//!
//! Logarithms are floored at [`LOG_FLOOR`]; losses report whether the floor
//! was hit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

fn floored_ln<T: Real>(q: T, floored: &mut bool) -> T {
    let eps = T::lit(LOG_FLOOR);
    if q < eps {
        *floored = true;
        eps.ln()
    } else {
        q.ln()
    }
}

/// `0.5 d²` inside the unit interval, `|d| - 0.5` outside. Returns the value
/// and its derivative.
pub fn smooth_l1<T: Real>(d: T) -> (T, T) {
    let one = T::one();
    let half = T::lit(0.5);
    if d.abs() < one {
        (half * d * d, d)
    } else {
        (d.abs() - half, d.signum())
    }
}

/// Box regression loss over the valid proposals. `pred[i]` and `target[i]`
/// are `(t_x, t_y, t_w, t_h)`. Returns the value and `∂L/∂pred`.
pub fn loss_box<T: Real>(pred: &[[T; 4]], target: &[[T; 4]]) -> Result<(T, Vec<[T; 4]>)> {
    if pred.len() != target.len() {
        return Err(Error::invalid("target", format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let mut g = [T::zero(); 4];
        for i in 0..4 {
            let (v, d) = smooth_l1(p[i] - t[i]);
            value += v;
            g[i] = d / n;
        }
        grad.push(g);
    }
    Ok((value / n, grad))
}

/// Row-wise softmax of an `R x C` logit matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = *logits.shape() else {
        return Err(Error::invalid("logits", format!("expected R x C, got {:?}", logits.shape())));
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotLoss<T> {
    pub value: T,
    /// `∂L/∂logits`, `R x C`.
    pub grad_logits: Tensor<T>,
    /// A target probability was below the log floor.
    pub floored: bool,
}

/// Orientation classification loss. `probs` is `R x C` (softmax rows),
/// `targets[r]` the class of proposal `r` (`0` for invalid proposals).
pub fn loss_rot<T: Real>(probs: &Tensor<T>, targets: &[usize]) -> Result<RotLoss<T>> {
    let [r, c] = *probs.shape() else {
        return Err(Error::invalid("probs", format!("expected R x C, got {:?}", probs.shape())));
    };
    if r != targets.len() {
        return Err(Error::invalid("targets", format!("{r} rows vs {} targets", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::invalid("targets", format!("class {t} out of range for {c} classes")));
    }
    for row in probs.data().chunks(c) {
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs() > T::lit(1e-6) || row.iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("probs", "rows must be probability distributions"));
        }
    }
    if r == 0 {
        return Ok(RotLoss { value: T::zero(), grad_logits: probs.clone(), floored: false });
    }
    let n = T::from_usize(r).unwrap();
    let mut floored = false;
    let mut value = T::zero();
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        value -= floored_ln(probs.data()[i * c + t], &mut floored);
        let row = &mut grad.data_mut()[i * c..(i + 1) * c];
        row[t] -= T::one();
        row.iter_mut().for_each(|g| *g /= n);
    }
    Ok(RotLoss { value: value / n, grad_logits: grad, floored })
}

/// Semantic labels: class index per pixel (`0..classes`), row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticTarget {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl SemanticTarget {
    pub fn new(labels: Vec<usize>, height: usize, width: usize, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid("labels", format!("{} labels for {height}x{width}", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("labels", format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { labels, height, width, classes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemLoss<T> {
    pub value: T,
    /// `∂L/∂P`, `N x H x W`.
    pub grad_probs: Tensor<T>,
    /// `∂L/∂logits` when `P = softmax(logits)` per pixel.
    pub grad_logits: Tensor<T>,
    /// Row-major indices of the selected (hardest) pixels.
    pub selection: Vec<usize>,
    /// Weight of each selected pixel; the weights sum to one.
    pub weight: T,
    pub floored: bool,
}

fn check_sem_shapes<T: Real>(probs: &Tensor<T>, target: &SemanticTarget) -> Result<()> {
    let want = [target.classes, target.height, target.width];
    if probs.shape() != want {
        return Err(Error::ShapeMismatch { left: probs.shape().to_vec(), right: want.to_vec() });
    }
    Ok(())
}

/// Pixels with the smallest probability of their true class: `⌊WH/4⌋` of
/// them (at least one), ties resolved in row-major order.
pub fn hardest_pixels<T: Real>(probs: &Tensor<T>, target: &SemanticTarget) -> Result<Vec<usize>> {
    check_sem_shapes(probs, target)?;
    let hw = target.height * target.width;
    let q = |i: usize| probs.data()[target.labels[i] * hw + i];
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| q(a).partial_cmp(&q(b)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate((hw / 4).max(1));
    order.sort_unstable();
    Ok(order)
}

/// Weighted per-pixel log loss over the hardest quarter of pixels.
pub fn loss_sem<T: Real>(probs: &Tensor<T>, target: &SemanticTarget) -> Result<SemLoss<T>> {
    let selection = hardest_pixels(probs, target)?;
    loss_sem_with_selection(probs, target, selection)
}

/// [`loss_sem`] with a fixed pixel selection (the selection is a constant of
/// the backward pass).
pub fn loss_sem_with_selection<T: Real>(probs: &Tensor<T>, target: &SemanticTarget, selection: Vec<usize>) -> Result<SemLoss<T>> {
    check_sem_shapes(probs, target)?;
    let hw = target.height * target.width;
    if selection.is_empty() || selection.iter().any(|&i| i >= hw) {
        return Err(Error::invalid("selection", "empty or out-of-range pixel selection"));
    }
    let weight = T::one() / T::from_usize(selection.len()).unwrap();
    let mut floored = false;
    let mut value = T::zero();
    let mut grad_probs = Tensor::zeros(probs.shape());
    let mut grad_logits = Tensor::zeros(probs.shape());
    let eps = T::lit(LOG_FLOOR);
    for &i in &selection {
        let y = target.labels[i];
        let q = probs.data()[y * hw + i];
        value -= weight * floored_ln(q, &mut floored);
        grad_probs.data_mut()[y * hw + i] = -weight / q.max(eps);
        for c in 0..target.classes {
            let p = probs.data()[c * hw + i];
            let onehot = if c == y { T::one() } else { T::zero() };
            grad_logits.data_mut()[c * hw + i] = weight * (p - onehot);
        }
    }
    Ok(SemLoss { value, grad_probs, grad_logits, selection, weight, floored })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NflLoss<T> {
    pub value: T,
    /// `∂L/∂Q` with the normalizer held constant.
    pub grad_q: Tensor<T>,
    /// `∂L/∂(z_correct - z_other)` for a two-way softmax producing `Q`.
    pub grad_logits: Tensor<T>,
    /// `Σ (1 - Q)^γ`.
    pub normalizer: T,
    pub floored: bool,
}

/// Focal weight `(1 - q)^γ`.
fn focal_weight<T: Real>(q: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        (T::one() - q).max(T::zero()).powf(gamma)
    }
}

/// Normalized focal loss on `Q`, the per-pixel probability of the correct
/// binary label.
pub fn loss_nfl<T: Real>(q: &Tensor<T>, gamma: T) -> Result<NflLoss<T>> {
    if !(gamma >= T::zero()) {
        return Err(Error::invalid("gamma", "focusing parameter must be non-negative"));
    }
    if q.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let eps = T::lit(LOG_FLOOR);
    let normalizer: T = q.data().iter().map(|&v| focal_weight(v.max(eps), gamma)).sum();
    loss_nfl_with_normalizer(q, gamma, normalizer)
}

/// [`loss_nfl`] with an externally fixed normalizer.
pub fn loss_nfl_with_normalizer<T: Real>(q: &Tensor<T>, gamma: T, normalizer: T) -> Result<NflLoss<T>> {
    if q.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::invalid("q", "probabilities must lie in [0, 1]"));
    }
    let eps = T::lit(LOG_FLOOR);
    if normalizer <= T::zero() {
        let z = Tensor::zeros(q.shape());
        return Ok(NflLoss { value: T::zero(), grad_q: z.clone(), grad_logits: z, normalizer, floored: false });
    }
    let mut floored = false;
    let mut value = T::zero();
    let mut grad_q = Tensor::zeros(q.shape());
    let mut grad_logits = Tensor::zeros(q.shape());
    for (i, &raw) in q.data().iter().enumerate() {
        let v = raw.max(eps);
        let ln = floored_ln(raw, &mut floored);
        let one_minus = T::one() - v;
        value -= focal_weight(v, gamma) * ln;
        // d/dq of (1-q)^γ ln q
        let dw = if gamma == T::zero() || one_minus <= T::zero() {
            T::zero()
        } else {
            -gamma * one_minus.powf(gamma - T::one()) * ln
        };
        let g = -(dw + focal_weight(v, gamma) / v) / normalizer;
        grad_q.data_mut()[i] = g;
        grad_logits.data_mut()[i] = g * v * one_minus;
    }
    Ok(NflLoss { value: value / normalizer, grad_q, grad_logits, normalizer, floored })
}

/// Per-term weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub grasp: f64,
    pub sem: f64,
    pub inst: f64,
}

impl LossWeights {
    pub fn new(grasp: f64, sem: f64, inst: f64) -> Result<Self> {
        let w = Self { grasp, sem, inst };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.grasp, self.sem, self.inst].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("lambda", format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { grasp: 1.0, sem: 1.0, inst: 1.0 }
    }
}

/// Term values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    #[serde(rename = "box")]
    pub box_: f64,
    pub rot: f64,
    pub sem: f64,
    pub inst: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: LossTerms,
    pub total: f64,
}

/// `λ_grasp (L_box + L_rot) + λ_sem L_sem + λ_inst L_inst`.
pub fn composite(terms: LossTerms, weights: &LossWeights) -> LossBundle {
    let total = weights.grasp * (terms.box_ + terms.rot) + weights.sem * terms.sem + weights.inst * terms.inst;
    LossBundle { terms, total }
}
