use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coordconv::PointProposal;
use crate::error::{Error, Result};
use crate::grasp::{grasp_accuracy, select_top_candidates, AccuracyReport, GraspCandidate, GraspCriterion};
use crate::net::{Model, NetInput, Query};
use crate::scalar::Real;
use crate::scene::{LabelMap, Scene};

/// Where the instance head's point proposals come from at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    /// The centre of each object's ground-truth grasp.
    #[default]
    GroundTruth,
    /// The centre of the most confident predicted grasp inside each object.
    GraspCenters,
}

impl FromStr for ProposalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" => Ok(ProposalSource::GroundTruth),
            "grasp_centers" | "grasp-centers" => Ok(ProposalSource::GraspCenters),
            _ => Err(Error::invalid("proposals", format!("unknown proposal source `{s}` (expected gt or grasp_centers)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub source: ProposalSource,
    /// Foreground probability above which a pixel joins the predicted mask.
    pub mask_threshold: f64,
    pub min_score: f64,
    pub nms_iou: f64,
    pub criterion: GraspCriterion,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { source: ProposalSource::GroundTruth, mask_threshold: 0.5, min_score: 0.5, nms_iou: 0.3, criterion: GraspCriterion::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: usize,
    /// IoU of the predicted mask per instance id (index 0 is instance 1).
    pub instance_ious: Vec<f64>,
    /// Mean over background and foreground of the class IoU.
    pub semantic_iou: f64,
    pub grasp_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: ProposalSource,
    pub num_scenes: usize,
    pub num_instances: usize,
    /// Mean instance IoU in percent, pooled over instances.
    pub instance_iou: f64,
    /// Mean per-scene semantic IoU in percent.
    pub semantic_iou: f64,
    pub grasp: AccuracyReport,
    pub per_scene: Vec<SceneEval>,
}

fn mask_iou(pred: impl Iterator<Item = bool>, target: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.zip(target) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Nearest mask pixel to the mask centroid.
fn centroid_pixel(labels: &LabelMap, id: u32) -> (usize, usize) {
    let w = labels.width();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (p, &v) in labels.data().iter().enumerate() {
        if v == id {
            sx += (p % w) as f64;
            sy += (p / w) as f64;
            n += 1.0;
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    let mut best = (0, 0, f64::INFINITY);
    for (p, &v) in labels.data().iter().enumerate() {
        let (x, y) = (p % w, p / w);
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if v == id && d < best.2 {
            best = (x, y, d);
        }
    }
    (best.0, best.1)
}

fn gt_proposal<T: Real>(scene: &Scene<T>, id: u32) -> PointProposal<T> {
    match scene.grasps_of(id).next() {
        Some(g) => PointProposal::new(g.grasp.x, g.grasp.y),
        None => {
            let (x, y) = centroid_pixel(&scene.instances, id);
            PointProposal::new(T::from_usize(x).unwrap(), T::from_usize(y).unwrap())
        }
    }
}

fn eval_scene<T: Real>(model: &Model<T>, scene: &Scene<T>, index: usize, cfg: &EvalConfig) -> Result<(SceneEval, Vec<GraspCandidate<T>>)> {
    let input = NetInput::from_scenes(&[scene])?;
    let (tape, out) = model.run(&input, &[])?;
    let (h, w) = (scene.height(), scene.width());
    let hw = h * w;

    let sem = tape.value(out.semantic);
    let classes = model.config.semantic_classes;
    let pred_class: Vec<usize> = (0..hw)
        .map(|i| (1..classes).fold(0, |b, c| if sem.data()[c * hw + i] > sem.data()[b * hw + i] { c } else { b }))
        .collect();
    let fg: Vec<bool> = scene.instances.data().iter().map(|&id| id > 0).collect();
    let ious: Vec<f64> = [false, true]
        .iter()
        .filter_map(|&c| mask_iou(pred_class.iter().map(|&k| (k > 0) == c), fg.iter().map(|&f| f == c)))
        .collect();
    let semantic_iou = if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };

    let all = model.decode_grasps(tape.value(out.grasp), 0)?;
    let selected = select_top_candidates(&all, T::lit(cfg.min_score), T::lit(cfg.nms_iou));

    let k = scene.num_instances();
    let mut proposals: Vec<Option<PointProposal<T>>> = Vec::with_capacity(k as usize);
    for id in 1..=k {
        proposals.push(match cfg.source {
            ProposalSource::GroundTruth => Some(gt_proposal(scene, id)),
            ProposalSource::GraspCenters => {
                let mut best: Option<&GraspCandidate<T>> = None;
                for c in &all {
                    let inside = PointProposal::new(c.x, c.y).check_inside(h, w).is_ok()
                        && scene.instances.at_point(c.x.as_f64(), c.y.as_f64()) == Some(id);
                    if inside && best.map_or(true, |b| c.score > b.score) {
                        best = Some(c);
                    }
                }
                best.map(|c| PointProposal::new(c.x, c.y))
            }
        });
    }
    let queries: Vec<Query<T>> = proposals.iter().flatten().map(|&point| Query { batch: 0, point }).collect();
    let mut instance_ious = vec![0.0; k as usize];
    if !queries.is_empty() {
        let (tape, out) = model.run(&input, &queries)?;
        let probs = tape.value(out.instance.expect("queries given"));
        let thr = T::lit(cfg.mask_threshold);
        let ids = (1..=k).filter(|&id| proposals[id as usize - 1].is_some());
        for (m, id) in ids.enumerate() {
            let fg = &probs.data()[(m * 2 + 1) * hw..(m * 2 + 2) * hw];
            instance_ious[id as usize - 1] =
                mask_iou(fg.iter().map(|&p| p > thr), scene.instances.data().iter().map(|&v| v == id)).unwrap_or(0.0);
        }
    }
    Ok((SceneEval { scene: index, instance_ious, semantic_iou, grasp_candidates: selected.len() }, selected))
}

/// Instance IoU, semantic IoU and grasp accuracy of `model` on `scenes`.
/// Scenes are processed in parallel; results do not depend on the thread
/// count.
pub fn evaluate<T: Real>(model: &Model<T>, scenes: &[Scene<T>], cfg: &EvalConfig) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("dataset", "no scenes to evaluate"));
    }
    let results: Vec<(SceneEval, Vec<GraspCandidate<T>>)> =
        scenes.par_iter().enumerate().map(|(i, s)| eval_scene(model, s, i, cfg)).collect::<Result<_>>()?;
    let all_ious: Vec<f64> = results.iter().flat_map(|(s, _)| s.instance_ious.iter().copied()).collect();
    let instance_iou = if all_ious.is_empty() { 0.0 } else { 100.0 * all_ious.iter().sum::<f64>() / all_ious.len() as f64 };
    let semantic_iou = 100.0 * results.iter().map(|(s, _)| s.semantic_iou).sum::<f64>() / results.len() as f64;
    let preds: Vec<Vec<GraspCandidate<T>>> = results.iter().map(|(_, p)| p.clone()).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.grasps.clone()).collect();
    let grasp = grasp_accuracy(&preds, &gts, &cfg.criterion)?;
    Ok(EvalReport {
        source: cfg.source,
        num_scenes: scenes.len(),
        num_instances: all_ious.len(),
        instance_iou,
        semantic_iou,
        grasp,
        per_scene: results.into_iter().map(|(s, _)| s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_iou_counts() {
        let p = [true, true, false, false];
        let t = [true, false, true, false];
        assert_eq!(mask_iou(p.into_iter(), t.into_iter()), Some(1.0 / 3.0));
        assert_eq!(mask_iou([false].into_iter(), [false].into_iter()), None);
    }

    #[test]
    fn centroid_of_ring_falls_back_to_mask() {
        let mut data = vec![0u32; 25];
        for (r, c) in [(1, 1), (1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2), (3, 3)] {
            data[r * 5 + c] = 1;
        }
        let labels = LabelMap::new(5, 5, data).unwrap();
        let (x, y) = centroid_pixel(&labels, 1);
        assert_eq!(labels.get(y, x), 1);
        assert_eq!((x, y), (2, 1));
    }
}
