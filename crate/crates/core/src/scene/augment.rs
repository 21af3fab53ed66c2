use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, Scene};
use crate::error::Result;
use crate::grasp::{wrap_half_turn, GraspCandidate, LabeledGrasp};
use crate::scalar::Real;
use crate::tensor::Tensor;

const FILL_DEPTH: f64 = 1.0;

/// Translation bound used by [`augment`]: 50 px at 400 px width, scaled.
pub fn default_max_shift(width: usize) -> f64 {
    50.0 * width as f64 / 400.0
}

/// Random rotation in `[0, 360)` degrees about the image centre followed by a
/// translation of up to [`default_max_shift`] pixels per axis.
pub fn augment<T: Real>(scene: &Scene<T>, seed: u64) -> Result<Scene<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = default_max_shift(scene.width());
    let rot = rng.gen_range(0.0..360.0);
    let shift = if m > 0.0 { (rng.gen_range(-m..=m), rng.gen_range(-m..=m)) } else { (0.0, 0.0) };
    augment_with(scene, rot, shift)
}

/// Rotate by `rot_deg` about the image centre, then translate by `(tx, ty)`
/// pixels. Images are resampled nearest-neighbour; uncovered pixels become
/// background (black, far depth). Grasps whose centres leave the image and
/// instances that vanish are dropped, and instance ids are compacted.
/// The generating primitives are not carried over.
pub fn augment_with<T: Real>(scene: &Scene<T>, rot_deg: f64, (tx, ty): (f64, f64)) -> Result<Scene<T>> {
    let (h, w) = (scene.height(), scene.width());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = rot_deg.to_radians().sin_cos();
    let forward = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx + tx, s * dx + c * dy + cy + ty)
    };

    let mut rgb = vec![T::zero(); 3 * h * w];
    let mut depth = vec![T::lit(FILL_DEPTH); h * w];
    let mut labels = vec![0u32; h * w];
    for row in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx - tx, row as f64 - cy - ty);
            let sx = (c * dx + s * dy + cx).round();
            let sy = (-s * dx + c * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (src, dst) = (sy as usize * w + sx as usize, row * w + col);
            depth[dst] = scene.depth.data()[src];
            labels[dst] = scene.instances.data()[src];
            for ch in 0..3 {
                rgb[ch * h * w + dst] = scene.rgb.data()[ch * h * w + src];
            }
        }
    }

    let mut remap = vec![0u32; scene.num_instances() as usize + 1];
    let mut present: Vec<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
    present.sort_unstable();
    present.dedup();
    for (k, &id) in present.iter().enumerate() {
        remap[id as usize] = k as u32 + 1;
    }
    labels.iter_mut().for_each(|l| *l = remap[*l as usize]);

    let grasps = scene
        .grasps
        .iter()
        .filter_map(|g| {
            let (x, y) = forward(g.grasp.x.as_f64(), g.grasp.y.as_f64());
            let id = remap[g.instance_id as usize];
            let inside = x.round() >= 0.0 && y.round() >= 0.0 && x.round() < w as f64 && y.round() < h as f64;
            (inside && id > 0).then(|| LabeledGrasp {
                grasp: GraspCandidate {
                    x: T::lit(x),
                    y: T::lit(y),
                    theta: T::lit(wrap_half_turn(g.grasp.theta.as_f64() + rot_deg)),
                    ..g.grasp
                },
                instance_id: id,
            })
        })
        .collect();

    Ok(Scene {
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth: Tensor::new(vec![h, w], depth)?,
        instances: LabelMap::new(h, w, labels)?,
        grasps,
        seed: scene.seed,
        objects: Vec::new(),
    })
}
