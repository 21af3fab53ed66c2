//! Training loop, point-proposal sampling, evaluation and the coordinate
//! feature ablation.

mod ablation;
mod eval;

pub use ablation::{median, render_table, run_ablation, AblationCell, AblationRow, AblationTable, Delta};
pub use eval::{evaluate, EvalConfig, EvalReport, ProposalSource, SceneEval};

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormKind, Tape};
use crate::coordconv::{CoordFeature, FeatureSet, PointProposal};
use crate::error::{Error, Result};
use crate::grasp::{make_targets, ProposalLabel};
use crate::loss::{composite, loss_box, loss_nfl, loss_nfl_with_normalizer, loss_rot, loss_sem, loss_sem_with_selection, softmax_rows};
use crate::loss::{LossBundle, LossTerms, LossWeights, SemanticTarget};
use crate::net::{Model, ModelConfig, NetInput, NetOutput, Query, GRASP_OUTPUTS};
use crate::scalar::Real;
use crate::scene::{augment, generate_batch, read_scene, write_scene, GenConfig, Scene};
use crate::tensor::Tensor;

/// Coordinate feature configuration compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No coordinate maps.
    None,
    /// Relative coordinates.
    Relcc,
    /// Relative coordinates, depth distance and 2.5D distance.
    Depthcc,
    /// Relative coordinates and depth similarity.
    Depthsim,
    /// Relative coordinates and HHA distances.
    Hha,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::None, Variant::Relcc, Variant::Depthcc, Variant::Depthsim, Variant::Hha];

    pub fn features(self) -> FeatureSet {
        use CoordFeature::*;
        match self {
            Variant::None => FeatureSet::EMPTY,
            Variant::Relcc => FeatureSet::of(&[Rel]),
            Variant::Depthcc => FeatureSet::of(&[Rel, DepthDist, Dist25]),
            Variant::Depthsim => FeatureSet::of(&[Rel, DepthSim]),
            Variant::Hha => FeatureSet::of(&[Rel, Hha]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Relcc => "relcc",
            Variant::Depthcc => "depthcc",
            Variant::Depthsim => "depthsim",
            Variant::Hha => "hha",
        }
    }

    /// Published instance IoU (%) of the corresponding configuration on the
    /// real bin-picking data, for context only.
    pub fn reference_iou(self) -> f64 {
        match self {
            Variant::None => 83.01,
            Variant::Relcc => 85.63,
            Variant::Depthcc => 91.27,
            Variant::Depthsim => 90.91,
            Variant::Hha => 89.68,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("variant", format!("unknown variant `{s}` (expected none, relcc, depthcc, depthsim or hha)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub proposals_per_image: usize,
    pub weights: LossWeights,
    /// Focusing parameter of the instance loss.
    pub gamma: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Seed of the image-wise train/test split, independent of `seed`.
    pub split_seed: u64,
    pub train_fraction: f64,
    pub augment: bool,
    /// Anchor IoU thresholds of the grasp head targets.
    pub iou_pos: f64,
    pub iou_neg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            weight_decay: 1e-4,
            momentum: 0.9,
            nesterov: true,
            batch_size: 4,
            epochs: 30,
            proposals_per_image: 9,
            weights: LossWeights::default(),
            gamma: 2.0,
            seed: 0,
            variant: Variant::Depthcc,
            split_seed: 0,
            train_fraction: 0.8,
            augment: true,
            iou_pos: 0.4,
            iou_neg: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "need weight_decay >= 0 and momentum in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch", "batch size must be at least 1"));
        }
        if self.proposals_per_image == 0 {
            return Err(Error::invalid("proposals", "need at least one proposal per image"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", "must be non-negative"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid("train_fraction", "must lie in (0, 1]"));
        }
        if !(0.0 <= self.iou_neg && self.iou_neg <= self.iou_pos && self.iou_pos <= 1.0) {
            return Err(Error::invalid("iou_pos", "need 0 <= iou_neg <= iou_pos <= 1"));
        }
        self.weights.validate()
    }
}

/// `n` proposals, each a uniformly drawn pixel of a uniformly drawn
/// instance; returns the proposal and its instance id.
pub fn sample_proposals<T: Real, R: Rng>(scene: &Scene<T>, n: usize, rng: &mut R) -> Result<Vec<(PointProposal<T>, u32)>> {
    let k = scene.num_instances();
    if k == 0 {
        return Err(Error::invalid("scene", "no instances to sample proposals from"));
    }
    let w = scene.width();
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); k as usize];
    for (p, &id) in scene.instances.data().iter().enumerate() {
        if id > 0 {
            pixels[id as usize - 1].push(p);
        }
    }
    Ok((0..n)
        .map(|_| {
            let id = rng.gen_range(1..=k);
            let list = &pixels[id as usize - 1];
            let p = list[rng.gen_range(0..list.len())];
            (PointProposal::new(T::from_usize(p % w).unwrap(), T::from_usize(p / w).unwrap()), id)
        })
        .collect())
}

/// SGD with momentum; weight decay enters as `decay * param` added to the
/// gradient. With Nesterov the step is `g + μ v` after `v = μ v + g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Self { lr, momentum, weight_decay, nesterov, velocity: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
    }

    /// Apply one update. A non-finite gradient skips the step (returns
    /// `false`) and leaves parameters and momentum untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(Error::invalid("grads", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { left: p.shape().to_vec(), right: g.shape().to_vec() });
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            log::warn!("non-finite gradient, skipping step");
            return Ok(false);
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let (lr, mu, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + wd * *pi;
                *vi = mu * *vi + d;
                let step = if self.nesterov { d + mu * *vi } else { *vi };
                *pi -= lr * step;
            }
        }
        Ok(true)
    }
}

/// Loss quantities held fixed when re-evaluating a batch for finite
/// differences: the hardest-pixel selection per scene and the focal
/// normalizer per query.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen<T> {
    pub sem_selection: Vec<Vec<usize>>,
    pub nfl_normalizer: Vec<T>,
}

pub struct BatchLoss<T> {
    pub bundle: LossBundle,
    /// Gradient seeds for the network outputs, already λ-weighted.
    pub seeds: Vec<(crate::autodiff::Var, Tensor<T>)>,
    pub frozen: Frozen<T>,
}

fn foreground_target<T: Real>(scene: &Scene<T>, classes: usize) -> Result<SemanticTarget> {
    let labels = scene.instances.data().iter().map(|&id| usize::from(id > 0)).collect();
    SemanticTarget::new(labels, scene.height(), scene.width(), classes)
}

/// Composite loss of one forward pass and the gradient seeds that realize
/// it. `targets[m]` is the (batch index, instance id) selected by query `m`.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    out: &NetOutput,
    scenes: &[&Scene<T>],
    targets: &[(usize, u32)],
    cfg: &TrainConfig,
    frozen: Option<&Frozen<T>>,
) -> Result<BatchLoss<T>> {
    let mcfg = &model.config;
    let (h, w) = (mcfg.height, mcfg.width);
    let hw = h * w;
    let nb = scenes.len();
    let mut terms = LossTerms::default();
    let mut seeds = Vec::new();
    let mut new_frozen = Frozen { sem_selection: Vec::with_capacity(nb), nfl_normalizer: Vec::with_capacity(targets.len()) };

    let classes = mcfg.semantic_classes;
    let sem = tape.value(out.semantic);
    let mut sem_grad = vec![T::zero(); sem.len()];
    let lam_sem = T::lit(cfg.weights.sem) / T::from_usize(nb).unwrap();
    for (b, scene) in scenes.iter().enumerate() {
        let block = classes * hw;
        let probs = Tensor::new(vec![classes, h, w], sem.data()[b * block..(b + 1) * block].to_vec())?;
        let target = foreground_target(scene, classes)?;
        let l = match frozen {
            Some(f) => loss_sem_with_selection(&probs, &target, f.sem_selection[b].clone())?,
            None => loss_sem(&probs, &target)?,
        };
        terms.sem += l.value.as_f64() / nb as f64;
        for (g, &d) in sem_grad[b * block..(b + 1) * block].iter_mut().zip(l.grad_probs.data()) {
            *g = d * lam_sem;
        }
        new_frozen.sem_selection.push(l.selection);
    }
    seeds.push((out.semantic, Tensor::new(sem.shape().to_vec(), sem_grad)?));

    if let Some(inst) = out.instance {
        let probs = tape.value(inst);
        let m = targets.len();
        if probs.shape() != [m, 2, h, w] {
            return Err(Error::ShapeMismatch { left: probs.shape().to_vec(), right: vec![m, 2, h, w] });
        }
        let mut grad = vec![T::zero(); probs.len()];
        let lam = T::lit(cfg.weights.inst) / T::from_usize(m).unwrap();
        let gamma = T::lit(cfg.gamma);
        for (k, &(b, id)) in targets.iter().enumerate() {
            let labels = &scenes[b].instances;
            let q: Vec<T> = (0..hw)
                .map(|i| {
                    let c = usize::from(labels.data()[i] == id);
                    probs.data()[(k * 2 + c) * hw + i]
                })
                .collect();
            let q = Tensor::new(vec![h, w], q)?;
            let l = match frozen {
                Some(f) => loss_nfl_with_normalizer(&q, gamma, f.nfl_normalizer[k])?,
                None => loss_nfl(&q, gamma)?,
            };
            terms.inst += l.value.as_f64() / m as f64;
            for i in 0..hw {
                let c = usize::from(labels.data()[i] == id);
                grad[(k * 2 + c) * hw + i] = l.grad_q.data()[i] * lam;
            }
            new_frozen.nfl_normalizer.push(l.normalizer);
        }
        seeds.push((inst, Tensor::new(probs.shape().to_vec(), grad)?));
    }

    let raw = tape.value(out.grasp);
    let (gh, gw) = mcfg.grasp_grid();
    let cells = gh * gw;
    let anchors = mcfg.anchors::<T>();
    let (mut logits, mut classes_t, mut where_) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pred_box, mut target_box, mut where_box) = (Vec::new(), Vec::new(), Vec::new());
    let nc = GRASP_OUTPUTS - 4;
    for (b, scene) in scenes.iter().enumerate() {
        let gts: Vec<_> = scene.grasps.iter().map(|g| g.grasp).collect();
        let base = b * GRASP_OUTPUTS * cells;
        for p in make_targets(&anchors, &gts, T::lit(cfg.iou_pos), T::lit(cfg.iou_neg))? {
            let i = p.index;
            logits.extend((0..nc).map(|c| raw.data()[base + (4 + c) * cells + i]));
            classes_t.push(p.target_class());
            where_.push(base + i);
            if let ProposalLabel::Valid { offsets, .. } = p.label {
                pred_box.push([0, 1, 2, 3].map(|c| raw.data()[base + c * cells + i]));
                target_box.push(offsets);
                where_box.push(base + i);
            }
        }
    }
    let mut grasp_grad = vec![T::zero(); raw.len()];
    let lam_g = T::lit(cfg.weights.grasp);
    if !classes_t.is_empty() {
        let probs = softmax_rows(&Tensor::new(vec![classes_t.len(), nc], logits)?)?;
        let l = loss_rot(&probs, &classes_t)?;
        terms.rot = l.value.as_f64();
        for (r, &at) in where_.iter().enumerate() {
            for c in 0..nc {
                grasp_grad[at + (4 + c) * cells] += l.grad_logits.data()[r * nc + c] * lam_g;
            }
        }
    }
    let (bv, bg) = loss_box(&pred_box, &target_box)?;
    terms.box_ = bv.as_f64();
    for (g, &at) in bg.iter().zip(&where_box) {
        for c in 0..4 {
            grasp_grad[at + c * cells] += g[c] * lam_g;
        }
    }
    seeds.push((out.grasp, Tensor::new(raw.shape().to_vec(), grasp_grad)?));

    Ok(BatchLoss { bundle: composite(terms, &cfg.weights), seeds, frozen: new_frozen })
}

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "box")]
    pub box_: f64,
    pub rot: f64,
    pub sem: f64,
    pub inst: f64,
    pub total: f64,
    pub steps: usize,
    pub skipped_steps: usize,
}

/// Per-step outcome of [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub bundle: LossBundle,
    pub applied: bool,
}

/// Forward, backward and one optimizer update on a batch. A non-finite
/// forward value or gradient skips the update.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    scenes: &[&Scene<T>],
    proposals: &[Vec<(PointProposal<T>, u32)>],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let input = NetInput::from_scenes(scenes)?;
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (b, props) in proposals.iter().enumerate() {
        for &(point, id) in props {
            queries.push(Query { batch: b, point });
            targets.push((b, id));
        }
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let skipped = |e: Error| -> Result<StepOutcome> {
        match e {
            Error::NonFinite(_) => {
                log::warn!("non-finite value in step, skipping: {e}");
                Ok(StepOutcome { bundle: LossBundle { terms: LossTerms::default(), total: f64::NAN }, applied: false })
            }
            e => Err(e),
        }
    };
    let out = match model.forward(&mut tape, &bound, &input, &queries) {
        Ok(o) => o,
        Err(e) => return skipped(e),
    };
    let loss = batch_loss(model, &tape, &out, scenes, &targets, cfg, None)?;
    if !loss.bundle.total.is_finite() {
        log::warn!("non-finite loss, skipping step");
        return Ok(StepOutcome { bundle: loss.bundle, applied: false });
    }
    if let Err(e) = tape.backward(loss.seeds) {
        return skipped(e);
    }
    let grads: Vec<Tensor<T>> = bound
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let applied = opt.step(model.params.tensors_mut(), &grads)?;
    Ok(StepOutcome { bundle: loss.bundle, applied })
}

/// Model configuration for training on `height x width` scenes with the
/// coordinate features of `variant`.
pub fn model_config_for(height: usize, width: usize, variant: Variant) -> ModelConfig {
    ModelConfig::for_image(height, width).with_variants(variant.features())
}

/// Model choices that do not depend on the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub depth_input: bool,
    pub instance_channels: usize,
    pub style_hidden: Option<usize>,
    pub grasp_stride: usize,
    pub grasp_channels: usize,
    pub norm: NormKind,
    /// Relative-coordinate radius in pixels; `None` means `max(H, W) / 2`.
    pub radius: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let m = ModelConfig::for_image(64, 64);
        Self {
            encoder_channels: m.encoder_channels,
            encoder_strides: m.encoder_strides,
            depth_input: m.depth_input,
            instance_channels: m.instance_channels,
            style_hidden: m.style_hidden,
            grasp_stride: m.grasp_stride,
            grasp_channels: m.grasp_channels,
            norm: m.norm,
            radius: None,
            alpha: m.coordconv.alpha,
            beta: m.coordconv.beta,
        }
    }
}

impl ModelOptions {
    pub fn build(&self, height: usize, width: usize, variant: Variant) -> Result<ModelConfig> {
        let mut m = model_config_for(height, width, variant);
        m.encoder_channels = self.encoder_channels.clone();
        m.encoder_strides = self.encoder_strides.clone();
        m.depth_input = self.depth_input;
        m.instance_channels = self.instance_channels;
        m.style_hidden = self.style_hidden;
        m.grasp_stride = self.grasp_stride;
        m.grasp_channels = self.grasp_channels;
        m.norm = self.norm;
        if let Some(r) = self.radius {
            m.coordconv.radius = r;
        }
        m.coordconv.alpha = self.alpha;
        m.coordconv.beta = self.beta;
        m.validate()?;
        Ok(m)
    }
}

/// Everything that defines a training and evaluation run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelOptions,
    pub eval: EvalConfig,
}

/// Scene count, image size and default generator seed of the desk-scale
/// ablation dataset.
pub const ABLATION_SCENES: usize = 250;
pub const ABLATION_SIZE: usize = 64;
pub const ABLATION_DATA_SEED: u64 = 1000;

/// Split `scenes` into train and test sets with [`split_indices`].
pub fn split_dataset<T: Clone>(scenes: &[Scene<T>], split_seed: u64, train_fraction: f64) -> (Vec<Scene<T>>, Vec<Scene<T>>) {
    let (tr, te) = split_indices(scenes.len(), split_seed, train_fraction);
    (tr.iter().map(|&i| scenes[i].clone()).collect(), te.iter().map(|&i| scenes[i].clone()).collect())
}

/// The 250 depth-separated 64 x 64 scenes of the ablation, split 200 / 50.
pub fn ablation_dataset<T: Real>(seed: u64, cfg: &TrainConfig) -> Result<(Vec<Scene<T>>, Vec<Scene<T>>)> {
    let scenes = generate_batch(&GenConfig::depth_separated(ABLATION_SIZE, ABLATION_SIZE), seed, ABLATION_SCENES)?;
    Ok(split_dataset(&scenes, cfg.split_seed, cfg.train_fraction))
}

impl ExperimentConfig {
    /// Settings of the coordinate-feature ablation on 64 x 64 depth-separated
    /// scenes: 30 epochs, a relative-coordinate radius on the scale of the
    /// smaller objects, and a learning rate suited to the short schedule.
    pub fn desk_ablation() -> Self {
        Self {
            train: TrainConfig { epochs: 30, lr: ABLATION_LR, ..TrainConfig::default() },
            model: ModelOptions { radius: Some(ABLATION_RADIUS), ..ModelOptions::default() },
            eval: EvalConfig::default(),
        }
    }
}

const ABLATION_LR: f64 = 0.1;
const ABLATION_RADIUS: f64 = 8.0;

/// Train a fresh model on `scenes`, calling `on_epoch` after every epoch.
pub fn train<T: Real>(
    scenes: &[Scene<T>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("dataset", "no training scenes"));
    }
    for s in scenes {
        if s.height() != model_cfg.height || s.width() != model_cfg.width {
            return Err(Error::ShapeMismatch { left: vec![s.height(), s.width()], right: vec![model_cfg.height, model_cfg.width] });
        }
    }
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Sgd::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = EpochLog { epoch, box_: 0.0, rot: 0.0, sem: 0.0, inst: 0.0, total: 0.0, steps: 0, skipped_steps: 0 };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Scene<T>> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&scenes[i], rng.gen()) } else { Ok(scenes[i].clone()) })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|s| s.num_instances() > 0)
                .collect();
            if batch.is_empty() {
                continue;
            }
            let refs: Vec<&Scene<T>> = batch.iter().collect();
            let proposals =
                refs.iter().map(|s| sample_proposals(s, cfg.proposals_per_image, &mut rng)).collect::<Result<Vec<_>>>()?;
            let step = train_step(&mut model, &mut opt, &refs, &proposals, cfg)?;
            if step.applied {
                let t = step.bundle.terms;
                sum.box_ += t.box_;
                sum.rot += t.rot;
                sum.sem += t.sem;
                sum.inst += t.inst;
                sum.total += step.bundle.total;
                sum.steps += 1;
            } else {
                sum.skipped_steps += 1;
            }
        }
        let n = sum.steps.max(1) as f64;
        let log = EpochLog { box_: sum.box_ / n, rot: sum.rot / n, sem: sum.sem / n, inst: sum.inst / n, total: sum.total / n, ..sum };
        log::info!("epoch {epoch}: total {:.4} (box {:.4} rot {:.4} sem {:.4} inst {:.4})", log.total, log.box_, log.rot, log.sem, log.inst);
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Image-wise seeded split into (train, test) scene indices.
pub fn split_indices(n: usize, split_seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let k = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut test = idx.split_off(k);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

/// Name of the container directory of scene `i` in a dataset.
pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

pub fn write_dataset<T: Real>(dir: &Path, scenes: &[Scene<T>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(s, &dir.join(scene_dir_name(i)))?;
    }
    Ok(())
}

/// Read every scene container (a subdirectory holding `manifest.json`) of
/// `dir`, in file-name order.
pub fn read_dataset<T: Real>(dir: &Path) -> Result<Vec<Scene<T>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join(crate::scene::MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::format(dir, "no scene containers found"));
    }
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}

/// Finite-difference comparison of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel: f64,
    pub abs: f64,
    pub norm: f64,
}

impl GradCheck {
    /// Passes on relative error, or on absolute error when both gradients
    /// vanish up to finite-difference noise.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.rel < rel_tol || self.abs < abs_tol
    }
}

/// Norm-wise relative error between the analytic gradient of the batch
/// loss and a central finite difference, per parameter tensor. At most
/// `per_tensor` entries of each tensor are probed; the hardest-pixel
/// selection and focal normalizers are frozen at the unperturbed values.
pub fn gradient_check(
    model: &Model<f64>,
    scenes: &[&Scene<f64>],
    proposals: &[Vec<(PointProposal<f64>, u32)>],
    cfg: &TrainConfig,
    per_tensor: usize,
    step: f64,
) -> Result<Vec<GradCheck>> {
    let input = NetInput::from_scenes(scenes)?;
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (b, props) in proposals.iter().enumerate() {
        for &(point, id) in props {
            queries.push(Query { batch: b, point });
            targets.push((b, id));
        }
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &input, &queries)?;
    let loss = batch_loss(model, &tape, &out, scenes, &targets, cfg, None)?;
    let frozen = loss.frozen.clone();
    tape.backward(loss.seeds)?;
    let objective = |m: &Model<f64>| -> Result<f64> {
        let (tape, out) = m.run(&input, &queries)?;
        Ok(batch_loss(m, &tape, &out, scenes, &targets, cfg, Some(&frozen))?.bundle.total)
    };
    let mut probe = model.clone();
    let mut result = Vec::with_capacity(model.params.len());
    for (k, &v) in bound.vars().iter().enumerate() {
        let n = model.params.tensors()[k].len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let a = tape.grad(v).map_or(0.0, |g| g.data()[i]);
            let x0 = probe.params.tensors()[k].data()[i];
            probe.params.tensors_mut()[k].data_mut()[i] = x0 + step;
            let fp = objective(&probe)?;
            probe.params.tensors_mut()[k].data_mut()[i] = x0 - step;
            let fm = objective(&probe)?;
            probe.params.tensors_mut()[k].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * step);
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let abs = diff.sqrt();
        let rel = if scale == 0.0 { 0.0 } else { abs / scale };
        result.push(GradCheck { name: model.params.names()[k].clone(), rel, abs, norm: scale });
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
