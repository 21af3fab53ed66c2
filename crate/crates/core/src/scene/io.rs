use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{depth_level, rgb_level, LabelMap, Scene, SceneObject};
use crate::error::{Error, Result};
use crate::grasp::{GraspCandidate, LabeledGrasp};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const RGB_FILE: &str = "rgb.ppm";
pub const DEPTH_FILE: &str = "depth.pgm";
pub const INSTANCES_FILE: &str = "instances.pgm";
pub const GRASPS_FILE: &str = "grasps.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OBJECTS_FILE: &str = "objects.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub num_instances: u32,
}

/// One line of a grasp file. `score` is present for predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
    #[serde(default)]
    pub instance_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl GraspRecord {
    pub fn from_labeled<T: Real>(g: &LabeledGrasp<T>, with_score: bool) -> Self {
        Self {
            x: g.grasp.x.as_f64(),
            y: g.grasp.y.as_f64(),
            w: g.grasp.w.as_f64(),
            h: g.grasp.h.as_f64(),
            theta_deg: g.grasp.theta.as_f64(),
            instance_id: g.instance_id,
            score: with_score.then(|| g.grasp.score.as_f64()),
        }
    }

    pub fn to_labeled<T: Real>(&self) -> Result<LabeledGrasp<T>> {
        let grasp = GraspCandidate {
            x: T::lit(self.x),
            y: T::lit(self.y),
            w: T::lit(self.w),
            h: T::lit(self.h),
            theta: T::lit(self.theta_deg),
            score: T::lit(self.score.unwrap_or(1.0)),
        };
        grasp.validate()?;
        Ok(LabeledGrasp { grasp, instance_id: self.instance_id })
    }
}

/// Write through a temporary sibling and rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn pnm_header(magic: &str, width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes()
}

/// Parse a binary PNM; returns `(width, height, maxval, payload)`.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, u32, &'a [u8])> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(bad(&format!("expected {magic} header")));
    }
    let mut pos = magic.len();
    let mut fields = [0u64; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos]).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    let [w, h, maxval] = fields;
    Ok((w as usize, h as usize, maxval as u32, &bytes[pos + 1..]))
}

fn expect_payload(payload: &[u8], want: usize, path: &Path) -> Result<()> {
    if payload.len() != want {
        return Err(Error::format(path, format!("expected {want} data bytes, found {}", payload.len())));
    }
    Ok(())
}

pub fn write_grasps<T: Real>(path: &Path, grasps: &[LabeledGrasp<T>], with_score: bool) -> Result<()> {
    let mut out = String::new();
    for g in grasps {
        out.push_str(&serde_json::to_string(&GraspRecord::from_labeled(g, with_score)).expect("grasp record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_grasps<T: Real>(path: &Path) -> Result<Vec<LabeledGrasp<T>>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: GraspRecord = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            rec.to_labeled().map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_scene<T: Real>(scene: &Scene<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (scene.height(), scene.width());
    if scene.num_instances() > 255 {
        return Err(Error::invalid("scene", "more than 255 instances cannot be stored"));
    }

    let mut rgb = pnm_header("P6", w, h, 255);
    for p in 0..h * w {
        for c in 0..3 {
            rgb.push((scene.rgb.data()[c * h * w + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_atomic(&dir.join(RGB_FILE), &rgb)?;

    let mut depth = pnm_header("P5", w, h, 65535);
    for &v in scene.depth.data() {
        let q = (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
        depth.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(&dir.join(DEPTH_FILE), &depth)?;

    let mut inst = pnm_header("P5", w, h, 255);
    inst.extend(scene.instances.data().iter().map(|&v| v as u8));
    write_atomic(&dir.join(INSTANCES_FILE), &inst)?;

    write_grasps(&dir.join(GRASPS_FILE), &scene.grasps, false)?;

    let objects = dir.join(OBJECTS_FILE);
    if scene.objects.is_empty() {
        if objects.exists() {
            fs::remove_file(&objects).map_err(|e| Error::io(&objects, e))?;
        }
    } else {
        write_atomic(&objects, &serde_json::to_vec_pretty(&scene.objects).expect("objects serialize"))?;
    }

    let manifest = Manifest { height: h, width: w, seed: scene.seed, num_instances: scene.num_instances() };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
}

pub fn read_scene<T: Real>(dir: &Path) -> Result<Scene<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let (h, w) = (manifest.height, manifest.width);
    let check_dims = |pw: usize, ph: usize, path: &Path| {
        if (pw, ph) != (w, h) {
            return Err(Error::format(path, format!("image is {pw}x{ph}, manifest says {w}x{h}")));
        }
        Ok(())
    };

    let path = dir.join(RGB_FILE);
    let bytes = read_file(&path)?;
    let (pw, ph, maxval, payload) = parse_pnm(&bytes, "P6", &path)?;
    check_dims(pw, ph, &path)?;
    if maxval != 255 {
        return Err(Error::format(&path, format!("expected maxval 255, found {maxval}")));
    }
    expect_payload(payload, 3 * h * w, &path)?;
    let mut rgb = vec![T::zero(); 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            rgb[c * h * w + p] = rgb_level(payload[3 * p + c]);
        }
    }

    let path = dir.join(DEPTH_FILE);
    let bytes = read_file(&path)?;
    let (pw, ph, maxval, payload) = parse_pnm(&bytes, "P5", &path)?;
    check_dims(pw, ph, &path)?;
    if maxval != 65535 {
        return Err(Error::format(&path, format!("expected 16-bit maxval 65535, found {maxval}")));
    }
    expect_payload(payload, 2 * h * w, &path)?;
    let depth: Vec<T> = payload.chunks_exact(2).map(|b| depth_level(u16::from_be_bytes([b[0], b[1]]))).collect();

    let path = dir.join(INSTANCES_FILE);
    let bytes = read_file(&path)?;
    let (pw, ph, maxval, payload) = parse_pnm(&bytes, "P5", &path)?;
    check_dims(pw, ph, &path)?;
    if maxval != 255 {
        return Err(Error::format(&path, format!("expected maxval 255, found {maxval}")));
    }
    expect_payload(payload, h * w, &path)?;
    let instances = LabelMap::new(h, w, payload.iter().map(|&v| v as u32).collect())?;
    if instances.max_label() != manifest.num_instances {
        return Err(Error::format(&path, format!("found {} instances, manifest says {}", instances.max_label(), manifest.num_instances)));
    }

    let grasps = read_grasps(&dir.join(GRASPS_FILE))?;

    let opath = dir.join(OBJECTS_FILE);
    let objects: Vec<SceneObject> = if opath.exists() {
        serde_json::from_slice(&read_file(&opath)?).map_err(|e| Error::format(&opath, e.to_string()))?
    } else {
        Vec::new()
    };

    Ok(Scene {
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth: Tensor::new(vec![h, w], depth)?,
        instances,
        grasps,
        seed: manifest.seed,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, GenConfig};
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("gskit-io-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tmpdir("rt");
        let s: Scene<f64> = generate_scene(&GenConfig::new(40, 36), 11).unwrap();
        write_scene(&s, &dir).unwrap();
        let r: Scene<f64> = read_scene(&dir).unwrap();
        assert_eq!(r.rgb, s.rgb);
        assert_eq!(r.depth, s.depth);
        assert_eq!(r.instances, s.instances);
        assert_eq!(r.grasps, s.grasps);
        assert_eq!(r.objects, s.objects);
        assert_eq!(r, s);
        let s32: Scene<f32> = generate_scene(&GenConfig::new(40, 36), 11).unwrap();
        write_scene(&s32, &dir).unwrap();
        assert_eq!(read_scene::<f32>(&dir).unwrap(), s32);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn depth_quantization() {
        let dir = tmpdir("q");
        let mut s: Scene<f64> = generate_scene(&GenConfig::new(32, 32), 1).unwrap();
        s.depth.data_mut()[0] = 0.5;
        write_scene(&s, &dir).unwrap();
        let bytes = fs::read(dir.join(DEPTH_FILE)).unwrap();
        let header = "P5\n32 32\n65535\n".len();
        let stored = u16::from_be_bytes([bytes[header], bytes[header + 1]]);
        assert!((stored as i32 - 32768).abs() <= 1);
        let r: Scene<f64> = read_scene(&dir).unwrap();
        assert!((r.depth.data()[0] - 0.5).abs() <= 0.5 / 65535.0);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_or_corrupt_files_are_named() {
        let dir = tmpdir("missing");
        let s: Scene<f64> = generate_scene(&GenConfig::new(32, 32), 2).unwrap();
        write_scene(&s, &dir).unwrap();
        fs::remove_file(dir.join(DEPTH_FILE)).unwrap();
        let err = read_scene::<f64>(&dir).unwrap_err().to_string();
        assert!(err.contains("depth.pgm"), "{err}");

        write_scene(&s, &dir).unwrap();
        fs::write(dir.join(INSTANCES_FILE), b"P5\n32 32\n255\nshort").unwrap();
        let err = read_scene::<f64>(&dir).unwrap_err().to_string();
        assert!(err.contains("instances.pgm"), "{err}");

        write_scene(&s, &dir).unwrap();
        fs::write(dir.join(GRASPS_FILE), "{\"x\": 1}\n").unwrap();
        let err = read_scene::<f64>(&dir).unwrap_err().to_string();
        assert!(err.contains("grasps.jsonl") && err.contains("line 1"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pnm_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let (w, h, m, payload) = parse_pnm(bytes, "P5", Path::new("x.pgm")).unwrap();
        assert_eq!((w, h, m, payload), (2, 1, 255, &b"\x01\x02"[..]));
    }

    #[test]
    fn prediction_records_keep_scores() {
        let dir = tmpdir("pred");
        fs::create_dir_all(&dir).unwrap();
        let g = LabeledGrasp { grasp: GraspCandidate::new(3.0, 4.0, 5.0, 6.0, 7.0).with_score(0.25), instance_id: 0 };
        let path = dir.join("pred.jsonl");
        write_grasps(&path, &[g], true).unwrap();
        assert_eq!(read_grasps::<f64>(&path).unwrap(), vec![g]);
        fs::remove_dir_all(&dir).unwrap();
    }
}
