use super::*;
use crate::scene::{generate_batch, GenConfig};

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![4, 6, 8],
        instance_channels: 4,
        grasp_channels: 4,
        ..model_config_for(32, 32, variant)
    }
}

fn scenes(n: usize, seed: u64) -> Vec<Scene<f64>> {
    generate_batch(&GenConfig::depth_separated(32, 32), seed, n).unwrap()
}

#[test]
fn sgd_plain_step() {
    let mut p: Vec<Tensor<f64>> = vec![Tensor::scalar(1.0)];
    let mut opt = Sgd::new(0.1, 0.0, 0.0, false);
    assert!(opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap());
    assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
}

#[test]
fn sgd_nesterov_matches_hand_recursion() {
    let (lr, mu, wd, g) = (0.1, 0.9, 0.1, 0.5);
    let mut p: Vec<Tensor<f64>> = vec![Tensor::scalar(1.0)];
    let mut opt = Sgd::new(lr, mu, wd, true);
    let (mut x, mut v) = (1.0f64, 0.0f64);
    for _ in 0..5 {
        opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        let d = g + wd * x;
        v = mu * v + d;
        x -= lr * (d + mu * v);
        assert!((p[0].data()[0] - x).abs() < 1e-14);
    }
    let mut q = vec![Tensor::scalar(1.0)];
    let mut two = Sgd::new(lr, mu, wd, true);
    two.step(&mut q, &[Tensor::scalar(g)]).unwrap();
    two.step(&mut q, &[Tensor::scalar(g)]).unwrap();
    assert!((q[0].data()[0] - 0.725566).abs() < 1e-12);
}

#[test]
fn sgd_skips_non_finite() {
    let mut p: Vec<Tensor<f64>> = vec![Tensor::scalar(1.0)];
    let mut opt = Sgd::new(0.1, 0.9, 0.0, true);
    assert!(!opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap());
    assert_eq!(p[0].data()[0], 1.0);
    assert!(opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap());
    assert!((p[0].data()[0] - (1.0 - 0.1 * 1.9)).abs() < 1e-15);
}

#[test]
fn split_is_partition() {
    let (train, test) = split_indices(250, 3, 0.8);
    assert_eq!((train.len(), test.len()), (200, 50));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..250).collect::<Vec<_>>());
    assert_eq!(split_indices(250, 3, 0.8), (train, test.clone()));
    assert_ne!(split_indices(250, 4, 0.8).1, test);
}

#[test]
fn proposals_fall_on_their_instance() {
    let s = &scenes(1, 5)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = s.num_instances() as usize;
    let props = sample_proposals(s, 3000, &mut rng).unwrap();
    let mut counts = vec![0usize; k];
    for (p, id) in &props {
        assert_eq!(s.instances.at_point(p.x, p.y), Some(*id));
        counts[*id as usize - 1] += 1;
    }
    let expect = 3000.0 / k as f64;
    for c in counts {
        assert!((c as f64 - expect).abs() < 5.0 * expect.sqrt(), "{c} vs {expect}");
    }
}

#[test]
fn variant_parse_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("depth".parse::<Variant>().is_err());
    assert_eq!(Variant::Depthcc.features().channel_count(), 4);
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let data = scenes(2, 11);
    let refs: Vec<&Scene<f64>> = data.iter().collect();
    let cfg = TrainConfig::default();
    let mut model = Model::new(tiny_model(Variant::Depthcc), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = model.params.names().iter().position(|n| n == "inst.style2.w").unwrap();
    for v in model.params.tensors_mut()[k].data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let props: Vec<_> = refs.iter().map(|s| sample_proposals(s, 2, &mut rng).unwrap()).collect();
    let errs = gradient_check(&model, &refs, &props, &cfg, 3, 1e-6).unwrap();
    for c in &errs {
        assert!(c.passes(1e-4, 1e-8), "{c:?}");
        assert!(c.name.starts_with("inst.conv3.") || c.norm > 1e-4, "{c:?}");
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = scenes(8, 21);
    let mcfg = tiny_model(Variant::Relcc);
    let cfg = TrainConfig { epochs: 6, batch_size: 4, proposals_per_image: 3, seed: 4, ..TrainConfig::default() };
    let (m1, logs1) = train(&data, &mcfg, &cfg, |_| {}).unwrap();
    let (m2, logs2) = train(&data, &mcfg, &cfg, |_| {}).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(logs1, logs2);
    assert!(logs1.iter().all(|l| l.total.is_finite() && l.skipped_steps == 0));
    assert!(logs1.last().unwrap().total < logs1[0].total, "{logs1:?}");

    let report = evaluate(&m1, &data[..3], &EvalConfig::default()).unwrap();
    assert_eq!(report.num_scenes, 3);
    assert!((0.0..=100.0).contains(&report.instance_iou));
    let report2 = evaluate(&m2, &data[..3], &EvalConfig { source: ProposalSource::GraspCenters, ..EvalConfig::default() }).unwrap();
    assert_eq!(report2.num_instances, report.num_instances);
}

#[test]
fn dataset_round_trip() {
    let dir = std::env::temp_dir().join(format!("gskit-dataset-{}", std::process::id()));
    let data = scenes(3, 2);
    write_dataset(&dir, &data).unwrap();
    let back: Vec<Scene<f64>> = read_dataset(&dir).unwrap();
    assert_eq!(back, data);
    fs::remove_dir_all(&dir).unwrap();
    assert!(read_dataset::<f64>(&dir).is_err());
}
