use fundus_core::autodiff::ParamStore;
use fundus_core::dataset_io::{generate_synthetic, RunConfig, WorkingSample};
use fundus_core::detector::{detection_map50, train_detector, InferenceConfig};
use fundus_core::pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(cfg: &RunConfig, n: usize) -> Vec<WorkingSample> {
    let pp = cfg.preprocess();
    generate_synthetic(&cfg.synth(), n)
        .unwrap()
        .iter()
        .map(|s| pp.sample(&s.image, &s.annotation.clone().with_prior_boxes(&cfg.priors()).unwrap()).unwrap())
        .collect()
}

fn no_augment(cfg: RunConfig) -> RunConfig {
    RunConfig { aug_translate: 0.0, aug_shear_deg: 0.0, aug_scale_min: 1.0, aug_scale_max: 1.0, aug_flip_prob: 0.0, ..cfg }
}

#[test]
fn overfits_four_images() {
    let cfg = no_augment(RunConfig { det_epochs: 40, feature_dim: 64, ..RunConfig::default() });
    let train = samples(&cfg, 4);
    let det = pipeline::detector(&cfg).unwrap();
    let mut store = ParamStore::new();
    det.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let logs = train_detector(&det, &mut store, &train, &[], &pipeline::detector_train_config(&cfg), |_| {}).unwrap();
    assert!(logs.last().unwrap().loss < logs[0].loss);
    let map = detection_map50(&det, &store, None, &train, &InferenceConfig::default()).unwrap();
    assert_eq!(map, 1.0);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = RunConfig { det_epochs: 2, det_lr: 0.0, ..RunConfig::default() };
    let train = samples(&cfg, 3);
    let det = pipeline::detector(&cfg).unwrap();
    let mut store = ParamStore::new();
    det.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let before = store.clone();
    train_detector(&det, &mut store, &train, &[], &pipeline::detector_train_config(&cfg), |_| {}).unwrap();
    for (name, t) in before.iter() {
        assert_eq!(store.require(name).unwrap().data(), t.data(), "{name}");
    }
}
