//! Synthetic RGB-D clutter scenes with visible-surface instance masks and
//! ground-truth grasps.

mod augment;
mod gen;
mod io;

pub use augment::{augment, augment_with, default_max_shift};
pub use gen::{generate_batch, generate_scene, render_objects, GenConfig, Preset, SceneObject, ShapeKind, BACKGROUND_DEPTH, BACKGROUND_RGB};
pub use io::write_atomic;
pub use io::{read_grasps, read_scene, write_grasps, write_scene, GraspRecord, Manifest, GRASPS_FILE, MANIFEST_FILE, OBJECTS_FILE};

use crate::error::{Error, Result};
use crate::grasp::LabeledGrasp;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Integer label image, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch { left: vec![data.len()], right: vec![height, width] });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    /// Label at the pixel nearest to `(x, y)`, `None` outside the image.
    pub fn at_point(&self, x: f64, y: f64) -> Option<u32> {
        let (c, r) = (x.round(), y.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some(self.get(r as usize, c as usize))
    }

    /// Largest label present.
    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == id).collect()
    }

    pub fn count(&self, id: u32) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }
}

/// One RGB-D scene. `objects` holds the generating primitives in instance
/// order when the scene came straight from the generator; it is empty after
/// augmentation or when read from a container without `objects.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Tensor<T>,
    /// `H x W` normalized depth, smaller is nearer.
    pub depth: Tensor<T>,
    pub instances: LabelMap,
    pub grasps: Vec<LabeledGrasp<T>>,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl<T: Real> Scene<T> {
    pub fn height(&self) -> usize {
        self.instances.height()
    }

    pub fn width(&self) -> usize {
        self.instances.width()
    }

    pub fn num_instances(&self) -> u32 {
        self.instances.max_label()
    }

    /// Ground-truth grasps of one instance.
    pub fn grasps_of(&self, id: u32) -> impl Iterator<Item = &LabeledGrasp<T>> {
        self.grasps.iter().filter(move |g| g.instance_id == id)
    }

    /// Check shapes, value ranges, compact instance ids and grasp placement.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch { left: self.rgb.shape().to_vec(), right: vec![3, h, w] });
        }
        if self.depth.shape() != [h, w] {
            return Err(Error::ShapeMismatch { left: self.depth.shape().to_vec(), right: vec![h, w] });
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !self.rgb.data().iter().all(unit) || !self.depth.data().iter().all(unit) {
            return Err(Error::invalid("scene", "rgb and depth must lie in [0, 1]"));
        }
        for id in 1..=self.num_instances() {
            if self.instances.count(id) == 0 {
                return Err(Error::invalid("instances", format!("instance {id} owns no pixel")));
            }
        }
        for g in &self.grasps {
            g.grasp.validate()?;
            let at = self.instances.at_point(g.grasp.x.as_f64(), g.grasp.y.as_f64());
            if at != Some(g.instance_id) || g.instance_id == 0 {
                return Err(Error::invalid(
                    "grasps",
                    format!("grasp at ({}, {}) is not on instance {}", g.grasp.x, g.grasp.y, g.instance_id),
                ));
            }
        }
        Ok(())
    }
}

/// Convert a scene to another scalar type.
pub fn cast_scene<T: Real, U: Real>(s: &Scene<T>) -> Scene<U> {
    Scene {
        rgb: s.rgb.cast(),
        depth: s.depth.cast(),
        instances: s.instances.clone(),
        grasps: s
            .grasps
            .iter()
            .map(|g| LabeledGrasp {
                grasp: crate::grasp::GraspCandidate {
                    x: U::lit(g.grasp.x.as_f64()),
                    y: U::lit(g.grasp.y.as_f64()),
                    w: U::lit(g.grasp.w.as_f64()),
                    h: U::lit(g.grasp.h.as_f64()),
                    theta: U::lit(g.grasp.theta.as_f64()),
                    score: U::lit(g.grasp.score.as_f64()),
                },
                instance_id: g.instance_id,
            })
            .collect(),
        seed: s.seed,
        objects: s.objects.clone(),
    }
}

pub(crate) fn quantize_rgb<T: Real>(v: f64) -> T {
    T::lit((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub(crate) fn rgb_level<T: Real>(k: u8) -> T {
    T::lit(k as f64 / 255.0)
}

pub(crate) fn quantize_depth<T: Real>(v: f64) -> T {
    depth_level((v.clamp(0.0, 1.0) * 65535.0).round() as u16)
}

pub(crate) fn depth_level<T: Real>(k: u16) -> T {
    T::lit(k as f64 / 65535.0)
}
