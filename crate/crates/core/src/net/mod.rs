//! Encoder, semantic head, grid grasp head and point-conditioned instance
//! head built on the [`Tape`](crate::autodiff::Tape).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FeaturePoint, NormKind, Tape, Var};
use crate::coordconv::{encode, CoordConvConfig, FeatureSet, PointProposal};
use crate::error::{Error, Result};
use crate::grasp::{AaBox, GraspCandidate, OrientationCodebook};
use crate::scalar::Real;
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Fixed coordinate-map input slots of the instance head. Maps that a
/// variant does not compute stay zero, so every variant has the same
/// parameters.
pub const COORD_SLOTS: [&str; 8] = ["x_rel", "y_rel", "d_dist", "f_25d", "d_sim", "h_dist_1", "h_dist_2", "h_dist_3"];

/// Per grid cell: four box offsets then the orientation logits.
pub const GRASP_OUTPUTS: usize = 4 + OrientationCodebook::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub encoder_channels: Vec<usize>,
    /// One stride per encoder layer; the product is the feature stride.
    pub encoder_strides: Vec<usize>,
    /// Feed raw depth to the encoder as a fourth input channel.
    pub depth_input: bool,
    pub coordconv: CoordConvConfig,
    pub instance_channels: usize,
    /// Hidden width of the style MLP; `None` uses the feature width.
    pub style_hidden: Option<usize>,
    pub grasp_stride: usize,
    pub grasp_channels: usize,
    pub semantic_classes: usize,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_image(64, 64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
    /// AdaIN projection bias: scale 1 for the first half, shift 0 after.
    StyleBias { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ModelConfig {
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            encoder_channels: vec![8, 16, 32],
            encoder_strides: vec![2, 2, 1],
            depth_input: false,
            coordconv: CoordConvConfig::for_image(height, width, FeatureSet::EMPTY),
            instance_channels: 8,
            style_hidden: None,
            grasp_stride: 8,
            grasp_channels: 16,
            semantic_classes: 2,
            norm: NormKind::Instance,
        }
    }

    pub fn with_variants(mut self, variants: FeatureSet) -> Self {
        self.coordconv.variants = variants;
        self
    }

    pub fn variants(&self) -> FeatureSet {
        self.coordconv.variants
    }

    pub fn feature_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        let s = self.feature_stride();
        (self.height / s, self.width / s)
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn instance_input_channels(&self) -> usize {
        self.feature_channels() + COORD_SLOTS.len()
    }

    /// Width after the halving 1x1 convolution.
    pub fn instance_reduced_channels(&self) -> usize {
        self.instance_input_channels() / 2
    }

    pub fn grasp_grid(&self) -> (usize, usize) {
        (self.height / self.grasp_stride, self.width / self.grasp_stride)
    }

    fn input_channels(&self) -> usize {
        3 + usize::from(self.depth_input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("height/width", "image must be non-empty"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::invalid("encoder_channels", "need one stride per encoder layer"));
        }
        if self.encoder_channels.contains(&0) || self.encoder_strides.contains(&0) {
            return Err(Error::invalid("encoder_channels", "widths and strides must be positive"));
        }
        let s = self.feature_stride();
        if self.height % s != 0 || self.width % s != 0 {
            return Err(Error::invalid("encoder_strides", format!("feature stride {s} must divide {}x{}", self.height, self.width)));
        }
        if self.grasp_stride % s != 0 || self.height % self.grasp_stride != 0 || self.width % self.grasp_stride != 0 {
            return Err(Error::invalid("grasp_stride", format!("{} must be a multiple of {s} and divide the image", self.grasp_stride)));
        }
        if self.instance_channels == 0 || self.grasp_channels == 0 || self.style_hidden == Some(0) {
            return Err(Error::invalid("instance_channels", "head widths must be positive"));
        }
        if self.semantic_classes < 2 {
            return Err(Error::invalid("semantic_classes", "need at least 2 classes"));
        }
        if !self.variants().is_empty() {
            self.coordconv.validate()?;
        }
        Ok(())
    }

    /// Every parameter tensor in forward order. The list does not depend on
    /// the coordinate variant set since the instance head always reserves
    /// [`COORD_SLOTS`].
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, norm: bool| {
            out.push(ParamSpec { name: format!("{name}.w"), shape: vec![cout, cin, k, k], init: Init::He { fan_in: cin * k * k } });
            out.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zeros });
            if norm {
                out.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![cout], init: Init::Ones });
                out.push(ParamSpec { name: format!("{name}.beta"), shape: vec![cout], init: Init::Zeros });
            }
        };
        let mut cin = self.input_channels();
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            conv(&format!("enc{i}"), c, cin, 3, true);
            cin = c;
        }
        let f = self.feature_channels();
        conv("sem", self.semantic_classes, f, 1, false);
        conv("grasp.conv", self.grasp_channels, f, 3, true);
        conv("grasp.out", GRASP_OUTPUTS, self.grasp_channels, 1, false);
        let (ci, cr) = (self.instance_channels, self.instance_reduced_channels());
        conv("inst.reduce", cr, self.instance_input_channels(), 1, false);
        conv("inst.conv1", ci, cr, 3, true);
        conv("inst.conv2", ci, ci, 3, true);
        conv("inst.conv3", ci, ci, 3, true);
        conv("inst.conv4", ci, ci, 3, true);
        conv("inst.out", 2, ci, 1, false);
        let hidden = self.style_hidden.unwrap_or(f);
        out.push(ParamSpec { name: "inst.style1.w".into(), shape: vec![hidden, f], init: Init::He { fan_in: f } });
        out.push(ParamSpec { name: "inst.style1.b".into(), shape: vec![hidden], init: Init::Zeros });
        out.push(ParamSpec { name: "inst.style2.w".into(), shape: vec![2 * ci, hidden], init: Init::Zeros });
        out.push(ParamSpec { name: "inst.style2.b".into(), shape: vec![2 * ci], init: Init::StyleBias { channels: ci } });
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// One square anchor of side `2 x grasp_stride` per grid cell, row-major.
    pub fn anchors<T: Real>(&self) -> Vec<AaBox<T>> {
        let (gh, gw) = self.grasp_grid();
        let s = self.grasp_stride as f64;
        (0..gh * gw)
            .map(|i| {
                let (gy, gx) = ((i / gw) as f64, (i % gw) as f64);
                AaBox::new(T::lit((gx + 0.5) * s - 0.5), T::lit((gy + 0.5) * s - 0.5), T::lit(2.0 * s), T::lit(2.0 * s))
            })
            .collect()
    }
}

/// Named parameter tensors in [`ModelConfig::param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// He-uniform kernels, zero biases, identity normalization affine, and
    /// a style projection that starts at scale 1 / shift 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = cfg.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<T> = match s.init {
                Init::He { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::StyleBias { channels } => (0..n).map(|i| if i < channels { T::one() } else { T::zero() }).collect(),
            };
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data).expect("param shape matches data"));
        }
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid("params", "name and tensor counts differ"));
        }
        Ok(Self { names, tensors })
    }

    /// Check names and shapes against a configuration.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = cfg.param_specs();
        if specs.len() != self.names.len() {
            return Err(Error::invalid("params", format!("expected {} tensors, found {}", specs.len(), self.names.len())));
        }
        for (s, (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if &s.name != n || s.shape != t.shape() {
                return Err(Error::invalid("params", format!("expected {} {:?}, found {n} {:?}", s.name, s.shape, t.shape())));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Parameters registered on a tape.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Point proposal for the instance head, in image pixels of scene `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query<T> {
    pub batch: usize,
    pub point: PointProposal<T>,
}

/// Network input for a batch of scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    /// `B x 3 x H x W`.
    pub rgb: Tensor<T>,
    /// One `H x W` map per scene.
    pub depth: Vec<Tensor<T>>,
}

impl<T: Real> NetInput<T> {
    pub fn from_scenes(scenes: &[&Scene<T>]) -> Result<Self> {
        let rgb = Tensor::stack(&scenes.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>())?;
        Ok(Self { rgb, depth: scenes.iter().map(|s| s.depth.clone()).collect() })
    }

    pub fn batch(&self) -> usize {
        self.depth.len()
    }
}

pub struct NetOutput {
    /// `B x C x h x w` encoder features.
    pub features: Var,
    /// `B x N x H x W` class probabilities.
    pub semantic: Var,
    /// `B x GRASP_OUTPUTS x gh x gw` raw grasp head output.
    pub grasp: Var,
    /// `M x 2 x H x W` probabilities (channel 1 = selected instance), one per
    /// query; `None` without queries.
    pub instance: Option<Var>,
}

/// Mean over `stride x stride` blocks.
pub fn pool_map<T: Real>(map: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let [h, w] = match *map.shape() {
        [h, w] => [h, w],
        _ => return Err(Error::invalid("map", format!("expected H x W, got {:?}", map.shape()))),
    };
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid("stride", format!("{stride} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let inv = T::one() / T::from_usize(stride * stride).unwrap();
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        let mut acc = T::zero();
        for r in 0..stride {
            for c in 0..stride {
                acc += map.data()[(i[0] * stride + r) * w + i[1] * stride + c];
            }
        }
        acc * inv
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// The same model at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let tensors = self.params.tensors().iter().map(Tensor::cast).collect();
        let params = ModelParams::from_parts(self.params.names().to_vec(), tensors).expect("names and tensors align");
        Model { config: self.config.clone(), params }
    }

    /// Register every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        let index = self.params.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Bound { vars, index }
    }

    /// Coordinate maps of one proposal at feature resolution, laid out in
    /// [`COORD_SLOTS`] order (`8 x h x w`).
    pub fn coord_slots(&self, depth_feat: &Tensor<T>, p: PointProposal<T>) -> Result<Tensor<T>> {
        let (h, w) = self.config.feature_dims();
        let mut out = Tensor::zeros(&[COORD_SLOTS.len(), h, w]);
        if self.config.variants().is_empty() {
            return Ok(out);
        }
        let s = self.config.feature_stride();
        let cfg = self.config.coordconv.downsampled(s, self.config.height, self.config.width);
        let maps = encode(depth_feat, p.to_stride(s, h, w), &cfg)?;
        for (name, t) in maps.named_channels() {
            let slot = COORD_SLOTS.iter().position(|n| *n == name).expect("known coordinate map");
            out.data_mut()[slot * h * w..(slot + 1) * h * w].copy_from_slice(t.data());
        }
        Ok(out)
    }

    fn conv_block(&self, tape: &mut Tape<T>, b: &Bound, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, b.get(&format!("{name}.w")), Some(b.get(&format!("{name}.b"))), stride, 1)?;
        let y = tape.relu(y)?;
        tape.normalize(y, b.get(&format!("{name}.gamma")), b.get(&format!("{name}.beta")), self.config.norm)
    }

    fn conv1x1(&self, tape: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        tape.conv2d(x, b.get(&format!("{name}.w")), Some(b.get(&format!("{name}.b"))), 1, 0)
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, input: &NetInput<T>, queries: &[Query<T>]) -> Result<NetOutput> {
        let cfg = &self.config;
        let n = input.batch();
        if input.rgb.shape() != [n, 3, cfg.height, cfg.width] {
            return Err(Error::ShapeMismatch { left: input.rgb.shape().to_vec(), right: vec![n, 3, cfg.height, cfg.width] });
        }
        if let Some(d) = input.depth.iter().find(|d| d.shape() != [cfg.height, cfg.width]) {
            return Err(Error::ShapeMismatch { left: d.shape().to_vec(), right: vec![cfg.height, cfg.width] });
        }
        let image = if cfg.depth_input {
            let hw = cfg.height * cfg.width;
            let mut data = Vec::with_capacity(n * 4 * hw);
            for (k, d) in input.depth.iter().enumerate() {
                data.extend_from_slice(&input.rgb.data()[k * 3 * hw..(k + 1) * 3 * hw]);
                data.extend_from_slice(d.data());
            }
            Tensor::new(vec![n, 4, cfg.height, cfg.width], data)?
        } else {
            input.rgb.clone()
        };
        let mut x = tape.constant(image);
        for (i, &s) in cfg.encoder_strides.iter().enumerate() {
            x = self.conv_block(tape, b, x, &format!("enc{i}"), s)?;
        }
        let features = x;
        let fs = cfg.feature_stride();

        let sem = self.conv1x1(tape, b, features, "sem")?;
        let sem = tape.softmax(sem)?;
        let semantic = tape.upsample(sem, fs)?;

        let g = self.conv_block(tape, b, features, "grasp.conv", cfg.grasp_stride / fs)?;
        let grasp = self.conv1x1(tape, b, g, "grasp.out")?;

        let instance = if queries.is_empty() {
            None
        } else {
            Some(self.instance_head(tape, b, features, input, queries)?)
        };
        Ok(NetOutput { features, semantic, grasp, instance })
    }

    fn instance_head(&self, tape: &mut Tape<T>, b: &Bound, features: Var, input: &NetInput<T>, queries: &[Query<T>]) -> Result<Var> {
        let cfg = &self.config;
        let fs = cfg.feature_stride();
        let (h, w) = cfg.feature_dims();
        let pooled: Vec<Tensor<T>> =
            if cfg.variants().is_empty() { Vec::new() } else { input.depth.iter().map(|d| pool_map(d, fs)).collect::<Result<_>>()? };
        let mut slots = Vec::with_capacity(queries.len());
        let mut points = Vec::with_capacity(queries.len());
        for q in queries {
            if q.batch >= input.batch() {
                return Err(Error::invalid("queries", format!("batch index {} out of range", q.batch)));
            }
            q.point.check_inside(cfg.height, cfg.width)?;
            slots.push(if pooled.is_empty() { Tensor::zeros(&[COORD_SLOTS.len(), h, w]) } else { self.coord_slots(&pooled[q.batch], q.point)? });
            let pf = q.point.to_stride(fs, h, w);
            points.push(FeaturePoint { batch: q.batch, x: pf.x, y: pf.y });
        }
        let gathered = tape.gather(features, queries.iter().map(|q| q.batch).collect())?;
        let coords = tape.constant(Tensor::stack(&slots)?);
        let x = tape.concat(&[gathered, coords])?;
        let mut x = self.conv1x1(tape, b, x, "inst.reduce")?;
        for name in ["inst.conv1", "inst.conv2", "inst.conv3"] {
            x = self.conv_block(tape, b, x, name, 1)?;
        }
        let e = tape.extract_at(features, points)?;
        let s = tape.linear(e, b.get("inst.style1.w"), b.get("inst.style1.b"))?;
        let s = tape.relu(s)?;
        let style = tape.linear(s, b.get("inst.style2.w"), b.get("inst.style2.b"))?;
        let x = tape.adain(x, style)?;
        let x = self.conv_block(tape, b, x, "inst.conv4", 1)?;
        let x = self.conv1x1(tape, b, x, "inst.out")?;
        let x = tape.upsample(x, fs)?;
        tape.softmax(x)
    }

    /// Forward pass without gradients. Returns the tape and outputs.
    pub fn run(&self, input: &NetInput<T>, queries: &[Query<T>]) -> Result<(Tape<T>, NetOutput)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let index = self.params.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let out = self.forward(&mut tape, &Bound { vars, index }, input, queries)?;
        Ok((tape, out))
    }

    /// Decode the grasp head output of scene `batch` into one candidate per
    /// grid cell.
    pub fn decode_grasps(&self, raw: &Tensor<T>, batch: usize) -> Result<Vec<GraspCandidate<T>>> {
        let (gh, gw) = self.config.grasp_grid();
        if raw.shape().len() != 4 || raw.shape()[1..] != [GRASP_OUTPUTS, gh, gw] || batch >= raw.shape()[0] {
            return Err(Error::ShapeMismatch { left: raw.shape().to_vec(), right: vec![batch + 1, GRASP_OUTPUTS, gh, gw] });
        }
        let cells = gh * gw;
        let base = batch * GRASP_OUTPUTS * cells;
        let at = |ch: usize, i: usize| raw.data()[base + ch * cells + i];
        Ok(self
            .config
            .anchors::<T>()
            .iter()
            .enumerate()
            .map(|(i, anchor)| {
                let logits: Vec<T> = (0..OrientationCodebook::NUM_CLASSES).map(|c| at(4 + c, i)).collect();
                decode_cell(anchor, [at(0, i), at(1, i), at(2, i), at(3, i)], &logits)
            })
            .collect())
    }
}

/// Candidate of one grid cell: box from the anchor offsets, θ at the
/// midpoint of the most likely orientation class, confidence
/// `1 - P(invalid)`.
pub fn decode_cell<T: Real>(anchor: &AaBox<T>, offsets: [T; 4], logits: &[T]) -> GraspCandidate<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: T = e.iter().copied().sum();
    let best = (1..logits.len()).fold(1, |b, c| if logits[c] > logits[b] { c } else { b });
    let [x, y, w, h] = anchor.apply_offsets(offsets);
    let theta = OrientationCodebook::theta_of::<T>(best).expect("valid class");
    let score = (T::one() - e[OrientationCodebook::INVALID] / total).max(T::zero()).min(T::one());
    GraspCandidate::new(x, y, w, h, theta).with_score(score)
}
