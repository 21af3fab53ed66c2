use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gskit::coordconv::{encode as encode_maps, CoordConvConfig, FeatureSet, PointProposal};
use gskit::grasp::{grasp_accuracy, GraspCandidate, GraspCriterion, LabeledGrasp};
use gskit::net::{load_checkpoint, save_checkpoint, Model};
use gskit::pick::{simulate_picking, NetworkModel, OracleModel, PickConfig};
use gskit::scene::{generate_batch, read_grasps, read_scene, write_atomic, GenConfig, Preset, Scene, MANIFEST_FILE};
use gskit::train::{
    evaluate, read_dataset, render_table, run_ablation, split_dataset, train as train_model, write_dataset, ablation_dataset,
    ExperimentConfig, Variant, ABLATION_SIZE,
};
use gskit::Real;
use serde::Serialize;
use serde_json::{json, Value};

use crate::util::{create_dir, layered, path_string, read_config_file, to_json, write_json, write_jsonl, CliError, Run};
use crate::{AblateArgs, EncodeArgs, EvalArgs, GenArgs, GraspEvalArgs, PickArgs, Precision, Split, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.gskit";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const GRASP_EVAL: &str = "grasp_eval.json";
pub const PICK_OUTCOME: &str = "pick_outcome.json";
pub const PICK_TRACE: &str = "pick_trace.jsonl";

pub fn gen(a: GenArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("gen", argv);
    let file = read_config_file(a.common.config.as_deref())?;
    let file_preset = file.as_ref().and_then(|f| f.get("preset")).and_then(|p| serde_json::from_value::<Preset>(p.clone()).ok());
    let dim = |flag: Option<usize>, key: &str| flag.or_else(|| file.as_ref()?.get(key)?.as_u64().map(|v| v as usize)).unwrap_or(64);
    let (h, w) = (dim(a.height, "height"), dim(a.width, "width"));
    let preset = a.preset.map(Preset::from).or(file_preset).unwrap_or_default();
    let mut cfg = layered(GenConfig::preset(preset, h, w), file.as_ref())?;
    cfg.height = h;
    cfg.width = w;
    cfg.preset = preset;
    cfg.validate().map_err(CliError::config)?;
    if a.num == 0 {
        return Err(CliError::flag("--num", "must be at least 1"));
    }
    let scenes: Vec<Scene<f64>> = generate_batch(&cfg, a.seed, a.num)?;
    write_dataset(&a.out, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    run.finish(&a.out, Some(a.seed), &json!({"gen": cfg, "num": a.num}), &[], &[a.out.clone()], None)
}

/// Affine map of `[-1, 1]` onto the full 16-bit range.
fn to_u16(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16
}

fn pgm16(h: usize, w: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in data {
        out.extend_from_slice(&to_u16(v).to_be_bytes());
    }
    out
}

pub fn encode(a: EncodeArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("encode", argv);
    let scene: Scene<f64> = read_scene(&a.scene)?;
    let (h, w) = (scene.height(), scene.width());
    let file = read_config_file(a.common.config.as_deref())?;
    let mut cfg = layered(CoordConvConfig::for_image(h, w, FeatureSet::full()), file.as_ref())?;
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = &a.variants {
        cfg.variants = FeatureSet::of(v);
    }
    cfg.validate().map_err(CliError::config)?;
    let p = PointProposal::new(a.x, a.y);
    if p.check_inside(h, w).is_err() {
        return Err(CliError::flag("--x/--y", format!("({}, {}) lies outside the {w} x {h} image", a.x, a.y)));
    }
    let maps = encode_maps(&scene.depth, p, &cfg)?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in maps.named_channels() {
        let path = a.out.join(format!("{name}.pgm"));
        write_atomic(&path, &pgm16(h, w, t.data()))?;
        let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        entries.push(json!({"name": name, "file": format!("{name}.pgm"), "min": lo, "max": hi}));
        outputs.push(path);
    }
    let sidecar = json!({
        "mapping": {"from": [-1.0, 1.0], "to": [0, 65535], "encode": "p = round((v + 1) / 2 * 65535)", "decode": "v = 2 * p / 65535 - 1"},
        "proposal": {"x": a.x, "y": a.y},
        "height": h,
        "width": w,
        "config": cfg,
        "maps": entries,
    });
    let side = a.out.join("encode.json");
    write_json(&side, &sidecar)?;
    outputs.push(side);
    run.finish(&a.out, None, &cfg, &[&a.scene], &outputs, None)
}

fn select_split<T: Clone>(scenes: Vec<Scene<T>>, split: Split, exp: &ExperimentConfig) -> Vec<Scene<T>> {
    match split {
        Split::All => scenes,
        Split::Train => split_dataset(&scenes, exp.train.split_seed, exp.train.train_fraction).0,
        Split::Test => split_dataset(&scenes, exp.train.split_seed, exp.train.train_fraction).1,
    }
}

fn load_data<T: Real>(dir: &Path, split: Split, exp: &ExperimentConfig) -> Result<Vec<Scene<T>>, CliError> {
    let scenes = read_dataset::<T>(dir).map_err(|e| CliError::flag("--data", e))?;
    if scenes.is_empty() {
        return Err(CliError::flag("--data", format!("{} holds no scene containers", dir.display())));
    }
    let picked = select_split(scenes, split, exp);
    if picked.is_empty() {
        return Err(CliError::flag("--split", "selects no scenes"));
    }
    Ok(picked)
}

fn train_as<T: Real>(a: &TrainArgs, exp: &ExperimentConfig) -> Result<(Vec<gskit::train::EpochLog>, Vec<f64>, usize), CliError> {
    let scenes: Vec<Scene<T>> = load_data(&a.data, a.split, exp)?;
    let (h, w) = (scenes[0].height(), scenes[0].width());
    if scenes.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(CliError::flag("--data", "scenes differ in size"));
    }
    let model_cfg = exp.model.build(h, w, exp.train.variant).map_err(CliError::config)?;
    let mut times = Vec::new();
    let mut tick = Instant::now();
    let (model, logs) = train_model(&scenes, &model_cfg, &exp.train, |l| {
        times.push(tick.elapsed().as_secs_f64());
        tick = Instant::now();
        log::info!("epoch {} total {:.4} box {:.4} rot {:.4} sem {:.4} inst {:.4}", l.epoch, l.total, l.box_, l.rot, l.sem, l.inst);
    })?;
    save_checkpoint(&a.out.join(CHECKPOINT), &model, &serde_json::to_value(exp).expect("config serializes"))?;
    Ok((logs, times, scenes.len()))
}

pub fn train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("train", argv);
    let file = read_config_file(a.common.config.as_deref())?;
    let mut exp = layered(ExperimentConfig::default(), file.as_ref())?;
    let t = &mut exp.train;
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.proposals {
        t.proposals_per_image = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.no_augment {
        t.augment = false;
    }
    if let Some(r) = a.radius {
        exp.model.radius = Some(r);
    }
    exp.train.validate().map_err(CliError::config)?;
    create_dir(&a.out)?;
    let (logs, times, n) = match a.precision {
        Precision::F32 => train_as::<f32>(&a, &exp)?,
        Precision::F64 => train_as::<f64>(&a, &exp)?,
    };
    let log_path = a.out.join(TRAIN_LOG);
    write_jsonl(&log_path, &logs)?;
    let timing = json!({"epoch_seconds": times, "train_scenes": n});
    run.finish(&a.out, Some(exp.train.seed), &exp, &[&a.data], &[a.out.join(CHECKPOINT), log_path], Some(timing))
}

fn eval_as<T: Real>(a: &EvalArgs, exp: &ExperimentConfig, model: Model<f64>) -> Result<gskit::train::EvalReport, CliError> {
    let model: Model<T> = model.cast();
    let scenes: Vec<Scene<T>> = load_data(&a.data, a.split, exp)?;
    if scenes.iter().any(|s| (s.height(), s.width()) != (model.config.height, model.config.width)) {
        return Err(CliError::flag("--data", "scene size differs from the checkpoint's input size"));
    }
    Ok(evaluate(&model, &scenes, &exp.eval)?)
}

pub fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("eval", argv);
    let ckpt = load_checkpoint::<f64>(&a.checkpoint).map_err(|e| CliError::flag("--checkpoint", e))?;
    let base: ExperimentConfig = serde_json::from_value(ckpt.train.clone()).unwrap_or_default();
    let file = read_config_file(a.common.config.as_deref())?;
    let mut exp = layered(base, file.as_ref())?;
    if let Some(s) = a.proposals {
        exp.eval.source = s;
    }
    if let Some(t) = a.mask_threshold {
        exp.eval.mask_threshold = t;
    }
    if !(exp.eval.mask_threshold > 0.0 && exp.eval.mask_threshold < 1.0) {
        return Err(CliError::flag("--mask-threshold", "must lie in (0, 1)"));
    }
    let report = match a.precision {
        Precision::F32 => eval_as::<f32>(&a, &exp, ckpt.model)?,
        Precision::F64 => eval_as::<f64>(&a, &exp, ckpt.model)?,
    };
    create_dir(&a.out)?;
    let path = a.out.join(EVAL_REPORT);
    write_json(&path, &report)?;
    println!(
        "instance IoU {:.2}%  semantic IoU {:.2}%  grasp accuracy {}",
        report.instance_iou,
        report.semantic_iou,
        report.grasp.percent.map_or("n/a".to_string(), |p| format!("{p:.2}%"))
    );
    run.finish(&a.out, Some(exp.train.seed), &exp, &[&a.checkpoint, &a.data], &[path], None)
}

fn ablate_as<T: Real>(a: &AblateArgs, exp: &ExperimentConfig) -> Result<gskit::train::AblationTable, CliError> {
    let (train_set, test_set): (Vec<Scene<T>>, Vec<Scene<T>>) = match &a.data {
        Some(dir) => {
            let all = read_dataset::<T>(dir).map_err(|e| CliError::flag("--data", e))?;
            split_dataset(&all, exp.train.split_seed, exp.train.train_fraction)
        }
        None => ablation_dataset(a.seed, &exp.train)?,
    };
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CliError::flag("--data", "need at least one training and one test scene"));
    }
    let (h, w) = (train_set[0].height(), train_set[0].width());
    let base = exp.model.build(h, w, Variant::None).map_err(CliError::config)?;
    Ok(run_ablation(&train_set, &test_set, &base, &a.variants, &a.seeds, &exp.train, &exp.eval)?)
}

pub fn ablate(a: AblateArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("ablate", argv);
    let file = read_config_file(a.common.config.as_deref())?;
    let mut exp = layered(ExperimentConfig::desk_ablation(), file.as_ref())?;
    if let Some(v) = a.epochs {
        exp.train.epochs = v;
    }
    if let Some(v) = a.lr {
        exp.train.lr = v;
    }
    if let Some(r) = a.radius {
        exp.model.radius = Some(r);
    }
    exp.train.validate().map_err(CliError::config)?;
    if a.variants.is_empty() {
        return Err(CliError::flag("--variants", "need at least one variant"));
    }
    if a.seeds.is_empty() {
        return Err(CliError::flag("--seeds", "need at least one seed"));
    }
    let table = match a.precision {
        Precision::F32 => ablate_as::<f32>(&a, &exp)?,
        Precision::F64 => ablate_as::<f64>(&a, &exp)?,
    };
    let text = render_table(&table);
    print!("{text}");
    create_dir(&a.out)?;
    let (json_path, txt_path) = (a.out.join(ABLATION_JSON), a.out.join(ABLATION_TXT));
    write_json(&json_path, &table)?;
    write_atomic(&txt_path, text.as_bytes())?;
    let config = json!({
        "experiment": exp,
        "variants": a.variants,
        "seeds": a.seeds,
        "data": a.data.as_deref().map(path_string),
        "data_seed": a.data.is_none().then_some(a.seed),
        "image_size": a.data.is_none().then_some(ABLATION_SIZE),
    });
    let inputs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    run.finish(&a.out, Some(a.seed), &config, &inputs, &[json_path, txt_path], None)
}

/// One grasps.jsonl per scene: the file itself, a scene container, or the
/// sorted scene containers and .jsonl files inside a directory.
fn grasp_files(path: &Path, flag: &str) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let own = path.join(gskit::scene::GRASPS_FILE);
    if own.is_file() {
        return Ok(vec![own]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::flag(flag, format!("{}: {e}", path.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::Runtime(e.to_string()))?.path();
        let inner = p.join(gskit::scene::GRASPS_FILE);
        if inner.is_file() {
            files.push(inner);
        } else if p.is_file() && p.extension().is_some_and(|x| x == "jsonl") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::flag(flag, format!("no grasp files under {}", path.display())));
    }
    Ok(files)
}

#[derive(Serialize)]
struct GraspEvalReport {
    grasp_accuracy_percent: Option<f64>,
    num_scenes: usize,
    excluded_scenes: Vec<usize>,
    matched: usize,
    total: usize,
    pred_files: Vec<String>,
    gt_files: Vec<String>,
}

pub fn grasp_eval(a: GraspEvalArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("grasp-eval", argv);
    let file = read_config_file(a.common.config.as_deref())?;
    let mut crit = layered(GraspCriterion::default(), file.as_ref())?;
    if let Some(v) = a.max_angle {
        crit.max_angle_deg = v;
    }
    if let Some(v) = a.min_iou {
        crit.min_iou = v;
    }
    if !(crit.max_angle_deg >= 0.0 && crit.max_angle_deg <= 90.0) {
        return Err(CliError::flag("--max-angle", "must lie in [0, 90]"));
    }
    if !(crit.min_iou >= 0.0 && crit.min_iou < 1.0) {
        return Err(CliError::flag("--min-iou", "must lie in [0, 1)"));
    }
    let pred_files = grasp_files(&a.pred, "--pred")?;
    let gt_files = grasp_files(&a.gt, "--gt")?;
    if pred_files.len() != gt_files.len() {
        return Err(CliError::Validation(format!(
            "--pred has {} scenes but --gt has {}",
            pred_files.len(),
            gt_files.len()
        )));
    }
    let mut preds: Vec<Vec<GraspCandidate<f64>>> = Vec::new();
    let mut gts: Vec<Vec<LabeledGrasp<f64>>> = Vec::new();
    for (p, g) in pred_files.iter().zip(&gt_files) {
        preds.push(read_grasps::<f64>(p).map_err(|e| CliError::flag("--pred", e))?.into_iter().map(|l| l.grasp).collect());
        gts.push(read_grasps::<f64>(g).map_err(|e| CliError::flag("--gt", e))?);
    }
    let r = grasp_accuracy(&preds, &gts, &crit)?;
    let report = GraspEvalReport {
        grasp_accuracy_percent: r.percent,
        num_scenes: r.num_scenes,
        excluded_scenes: r.excluded_scenes,
        matched: r.matched,
        total: r.total,
        pred_files: pred_files.iter().map(|p| path_string(p)).collect(),
        gt_files: gt_files.iter().map(|p| path_string(p)).collect(),
    };
    create_dir(&a.out)?;
    let path = a.out.join(GRASP_EVAL);
    write_json(&path, &report)?;
    print!("{}", String::from_utf8(to_json(&report)).expect("utf-8"));
    run.finish(&a.out, None, &crit, &[&a.pred, &a.gt], &[path], None)
}

fn pick_as<T: Real>(a: &PickArgs, cfg: &PickConfig) -> Result<(Value, Vec<Value>), CliError> {
    let scene: Scene<T> = read_scene(&a.scene).map_err(|e| CliError::flag("--scene", e))?;
    let (outcome, steps) = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint::<f64>(path).map_err(|e| CliError::flag("--checkpoint", e))?;
            let mut model = NetworkModel::new(ckpt.model.cast::<T>());
            if (model.model.config.height, model.model.config.width) != (scene.height(), scene.width()) {
                return Err(CliError::flag("--scene", "scene size differs from the checkpoint's input size"));
            }
            simulate_picking(&scene, &mut model, cfg)?
        }
        None => simulate_picking(&scene, &mut OracleModel, cfg)?,
    };
    let steps = steps.iter().map(|s| serde_json::to_value(s).expect("step serializes")).collect();
    Ok((serde_json::to_value(outcome).expect("outcome serializes"), steps))
}

pub fn pick(a: PickArgs, argv: &[String]) -> Result<(), CliError> {
    let run = Run::start("pick", argv);
    let file = read_config_file(a.common.config.as_deref())?;
    let mut cfg = layered(PickConfig::default(), file.as_ref())?;
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.connectivity {
        cfg.connectivity = v;
    }
    if let Some(v) = a.continuity_ratio {
        cfg.continuity_ratio = v;
    }
    if let Some(v) = a.min_score {
        cfg.min_score = v;
    }
    if !(cfg.margin >= 0.0 && cfg.margin.is_finite()) {
        return Err(CliError::flag("--margin", "must be a non-negative number"));
    }
    if !(cfg.continuity_ratio > 0.0 && cfg.continuity_ratio <= 1.0) {
        return Err(CliError::flag("--continuity-ratio", "must lie in (0, 1]"));
    }
    if cfg.max_iterations_factor == 0 {
        return Err(CliError::flag("--config", "max_iterations_factor must be at least 1"));
    }
    if let Some(p) = a.rerender {
        let m: gskit::scene::Manifest = serde_json::from_slice(
            &fs::read(a.scene.join(MANIFEST_FILE)).map_err(|e| CliError::flag("--scene", e))?,
        )
        .map_err(|e| CliError::flag("--scene", e))?;
        cfg.render = Some(GenConfig::preset(p.into(), m.height, m.width));
    }
    let (outcome, steps) = match a.precision {
        Precision::F32 => pick_as::<f32>(&a, &cfg)?,
        Precision::F64 => pick_as::<f64>(&a, &cfg)?,
    };
    create_dir(&a.out)?;
    let (out_path, trace_path) = (a.out.join(PICK_OUTCOME), a.out.join(PICK_TRACE));
    write_json(&out_path, &outcome)?;
    write_jsonl(&trace_path, &steps)?;
    print!("{}", String::from_utf8(to_json(&outcome)).expect("utf-8"));
    let mut inputs: Vec<&Path> = vec![&a.scene];
    inputs.extend(a.checkpoint.as_deref());
    let config = json!({"pick": cfg, "oracle": a.oracle});
    run.finish(&a.out, None, &config, &inputs, &[out_path, trace_path], None)
}
