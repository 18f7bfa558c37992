use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Adam, GradCheckOptions, ParamStore, Tape};
use crate::error::Error;
use crate::geometry::{BBox, LandmarkClass};
use crate::imaging::{CropAffine, Image};

fn noise(rng: &mut ChaCha8Rng, side: u32) -> Image {
    Image::from_fn(side, side, 3, |_, _, _| rng.random_range(0.0..1.0))
}

fn trainable(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store.iter().filter(|(_, t)| t.requires_grad).map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

#[test]
fn centre_output_maps_to_box_centre() {
    let reg = CropRegressor::new(LandmarkClass::OpticDisc, 16).unwrap();
    let a = CropAffine { region: BBox::from_center(40.0, 25.0, 12.0, 8.0).unwrap(), out_size: 16 };
    let p = reg.to_image(&[0.5, 0.5], Some(&a)).unwrap();
    assert_eq!((p.x, p.y, p.class), (40.0, 25.0, LandmarkClass::OpticDisc));
    assert!(matches!(reg.to_image(&[0.5, 0.5], None), Err(Error::Contract(_))));
}

#[test]
fn predictions_stay_inside_the_crop_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reg = CropRegressor::new(LandmarkClass::Fovea, 16).unwrap();
    let mut store = ParamStore::new();
    reg.init(&mut store, &mut rng);
    let w = store.get_mut("regressor.fovea.head.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v *= 1e3);
    let img = noise(&mut rng, 48);
    for _ in 0..20 {
        let (cx, cy) = (rng.random_range(0.0..48.0), rng.random_range(0.0..48.0));
        let b = BBox::from_center(cx, cy, rng.random_range(4.0..20.0), rng.random_range(4.0..20.0)).unwrap();
        let p = reg.regress_in_box(&store, &img, &b).unwrap();
        assert!(b.contains(p.x, p.y), "{p:?} outside {b:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reg = CropRegressor::new(LandmarkClass::OpticDisc, 16).unwrap();
    let mut store = ParamStore::new();
    reg.init(&mut store, &mut rng);
    let before = trainable(&store);
    let imgs = [noise(&mut rng, 16), noise(&mut rng, 16)];
    let refs: Vec<&Image> = imgs.iter().collect();
    fit_batch(&reg.net, &mut store, &refs, &[0.2, 0.3, 0.7, 0.6], &Adam { lr: 0.0, ..Adam::default() }, 0.1).unwrap();
    assert_eq!(trainable(&store), before);
}

#[test]
fn overfits_four_crops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reg = CropRegressor::new(LandmarkClass::OpticDisc, 16).unwrap();
    let mut store = ParamStore::new();
    reg.init(&mut store, &mut rng);
    let imgs: Vec<Image> = (0..4).map(|_| noise(&mut rng, 16)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let targets = [0.2, 0.8, 0.5, 0.5, 0.9, 0.1, 0.35, 0.6];
    let adam = Adam { lr: 3e-3, ..Adam::default() };
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = fit_batch(&reg.net, &mut store, &refs, &targets, &adam, 0.1).unwrap();
        if last < 1e-4 {
            break;
        }
    }
    assert!(last < 1e-4, "MSE {last}");
}

#[test]
fn direct_baseline_overfits_four_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reg = DirectRegressor::new(32).unwrap();
    let mut store = ParamStore::new();
    reg.init(&mut store, &mut rng);
    let imgs: Vec<Image> = (0..4).map(|_| noise(&mut rng, 32)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let targets: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..0.9)).collect();
    let adam = Adam { lr: 3e-3, ..Adam::default() };
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = fit_batch(&reg.net, &mut store, &refs, &targets, &adam, 0.1).unwrap();
        if last < 1e-4 {
            break;
        }
    }
    assert!(last < 1e-4, "MSE {last}");
    let points = reg.predict(&store, &imgs[0]).unwrap();
    assert_eq!(points[1].class, LandmarkClass::Fovea);
}

fn check_net(net: &CnnRegressor, seed: u64, side: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    // Larger head weights than the default init so every tensor's gradient is well above noise.
    let w = store.get_mut(&net.name("head.w")).unwrap();
    w.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    let imgs: Vec<Image> = (0..3).map(|_| noise(&mut rng, side)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let x = net.batch_tensor(&refs).unwrap();
    let targets: Vec<f64> = (0..3 * net.outputs).map(|_| rng.random_range(0.0..1.0)).collect();
    let report = grad_check(
        &store,
        |tape: &mut Tape, s| {
            let x = tape.constant(x.clone());
            let (y, _) = net.forward(tape, s, x, Phase::Train)?;
            mse(tape, y, &targets)
        },
        GradCheckOptions { max_coords_per_tensor: Some(16), seed, ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn crop_regressor_gradient_check() {
    for seed in 0..3 {
        check_net(&CropRegressor::new(LandmarkClass::OpticDisc, 8).unwrap().net, seed, 8);
    }
}

#[test]
fn direct_baseline_gradient_check() {
    check_net(&DirectRegressor::new(16).unwrap().net, 7, 16);
}

#[test]
fn training_one_class_leaves_the_other_untouched() {
    use crate::dataset_io::{generate_synthetic, Preprocess, SynthConfig};
    use crate::geometry::{BoxPriors, ImageSize};
    use crate::imaging::ClaheParams;

    let synth = SynthConfig { width: 64, height: 48, disc_radius_min: 3.0, disc_radius_max: 4.0, ..SynthConfig::default() };
    let pp = Preprocess {
        working: ImageSize::square(32),
        clahe: ClaheParams { tiles_x: 2, tiles_y: 2, ..ClaheParams::default() },
        priors: BoxPriors::default(),
    };
    let data: Vec<_> = generate_synthetic(&synth, 4)
        .unwrap()
        .iter()
        .map(|s| pp.sample(&s.image, &s.annotation.clone().with_prior_boxes(&pp.priors).unwrap()).unwrap())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let od = CropRegressor::new(LandmarkClass::OpticDisc, 8).unwrap();
    let fv = CropRegressor::new(LandmarkClass::Fovea, 8).unwrap();
    let mut all = ParamStore::new();
    od.init(&mut all, &mut rng);
    fv.init(&mut all, &mut rng);
    let od_before = all.subset("regressor.od.");
    let fovea_before = all.subset("regressor.fovea.");

    let mut fovea_store = all.subset("regressor.fovea.");
    let cfg = RegressorTrainConfig { epochs: 2, batch: 2, ..RegressorTrainConfig::default() };
    let log = train_crop_regressor(&fv, &mut fovea_store, &data, &cfg).unwrap();
    assert_eq!(log.epoch_loss.len(), 2);
    all.merge_prefixed("", &fovea_store);
    assert_eq!(trainable(&all.subset("regressor.od.")), trainable(&od_before));
    assert_ne!(trainable(&all.subset("regressor.fovea.")), trainable(&fovea_before));
}
