use std::fs;

use gskit::net::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use gskit::scene::{generate_batch, read_scene, write_scene, GenConfig, Preset};
use gskit::train::{evaluate, read_dataset, train, write_dataset, EvalConfig, ExperimentConfig, TrainConfig};
use gskit::{Error, Scene64};

fn tiny_train() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn dataset_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes: Vec<Scene64> = generate_batch(&GenConfig::preset(Preset::Clutter, 32, 40), 5, 4).unwrap();
    write_dataset(tmp.path(), &scenes).unwrap();
    let back: Vec<Scene64> = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, scenes);
    let f32s: Vec<gskit::Scene32> = read_dataset(tmp.path()).unwrap();
    assert_eq!(f32s.len(), 4);
    assert_eq!(f32s[1].instances, scenes[1].instances);
    assert_eq!(f32s[1].grasps.len(), scenes[1].grasps.len());
}

#[test]
fn reading_a_missing_scene_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(read_scene::<f64>(&tmp.path().join("nope")).is_err());
    let s: Vec<Scene64> = generate_batch(&GenConfig::preset(Preset::WellSeparated, 32, 32), 1, 1).unwrap();
    let dir = tmp.path().join("s");
    write_scene(&s[0], &dir).unwrap();
    fs::write(dir.join("manifest.json"), "{}").unwrap();
    assert!(read_scene::<f64>(&dir).is_err());
}

#[test]
fn checkpoint_round_trip_and_precision_cast() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.gskit");
    let model: Model<f64> = Model::new(ModelConfig::for_image(32, 32), 4).unwrap();
    let train_json = serde_json::to_value(ExperimentConfig::default()).unwrap();
    save_checkpoint(&path, &model, &train_json).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.train, train_json);
    let narrow = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(narrow.model, model.cast::<f32>());

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));
    fs::write(&path, &fs::read(tmp.path().join("m.gskit")).unwrap()[..20]).unwrap();
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let scenes: Vec<gskit::Scene32> = generate_batch(&GenConfig::depth_separated(32, 32), 9, 6).unwrap();
    let mcfg = ModelConfig::for_image(32, 32);
    let cfg = TrainConfig { lr: 0.05, epochs: 6, augment: false, ..tiny_train() };
    let mut seen = 0;
    let (a, log_a) = train(&scenes, &mcfg, &cfg, |_| seen += 1).unwrap();
    let (b, log_b) = train(&scenes, &mcfg, &cfg, |_| {}).unwrap();
    assert_eq!(seen, 6);
    assert_eq!(log_a, log_b);
    assert_eq!(a, b);
    assert!(a.params.all_finite());
    assert!(log_a.last().unwrap().total < log_a[0].total, "{log_a:?}");

    let (c, _) = train(&scenes, &mcfg, &TrainConfig { seed: cfg.seed + 1, ..cfg.clone() }, |_| {}).unwrap();
    assert_ne!(a, c);

    let r = evaluate(&a, &scenes, &EvalConfig::default()).unwrap();
    assert_eq!(r.num_scenes, 6);
    assert_eq!(r.num_instances, scenes.iter().map(|s| s.num_instances() as usize).sum::<usize>());
    assert!((0.0..=100.0).contains(&r.instance_iou));
    assert!((0.0..=100.0).contains(&r.semantic_iou));
}

#[test]
fn training_rejects_mismatched_sizes_and_empty_data() {
    let scenes: Vec<Scene64> = generate_batch(&GenConfig::preset(Preset::Clutter, 32, 32), 1, 1).unwrap();
    let mcfg = ModelConfig::for_image(40, 40);
    assert!(matches!(train(&scenes, &mcfg, &tiny_train(), |_| {}), Err(Error::ShapeMismatch { .. })));
    assert!(train::<f64>(&[], &ModelConfig::for_image(32, 32), &tiny_train(), |_| {}).is_err());
    let bad = TrainConfig { lr: -1.0, ..tiny_train() };
    assert!(train(&scenes, &ModelConfig::for_image(32, 32), &bad, |_| {}).is_err());
}
