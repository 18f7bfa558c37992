use fundus_core::autodiff::{Adam, ParamStore, Tape, Tensor};
use fundus_core::geometry::{iou, BBox, Detection, LandmarkClass};
use fundus_core::relation::{dedup_targets, DedupConfig, DuplicateRemoval, GateMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const D_IN: usize = 6;

struct Scene {
    dets: Vec<Detection>,
    feats: Tensor,
    gt: Vec<(LandmarkClass, BBox)>,
}

/// Per class: one ground-truth box, five jittered duplicates of it and three
/// confident distractors elsewhere. Only the first feature separates real
/// objects from distractors, and only noisily.
fn scene(rng: &mut ChaCha8Rng) -> Scene {
    let noise = Normal::new(0.0, 0.4).unwrap();
    let mut dets = Vec::new();
    let mut rows = Vec::new();
    let mut gt = Vec::new();
    for class in LandmarkClass::ALL {
        let side = rng.random_range(16.0..24.0);
        let (gx, gy) = (rng.random_range(20.0..100.0), rng.random_range(20.0..100.0));
        let g = BBox::from_center(gx, gy, side, side).unwrap();
        gt.push((class, g));
        for k in 0..8 {
            let real = k < 5;
            let (cx, cy, s, score) = if real {
                let j = side * 0.12;
                (gx + rng.random_range(-j..j), gy + rng.random_range(-j..j), side * rng.random_range(0.9..1.1), rng.random_range(0.3..0.9))
            } else {
                let far = loop {
                    let p = (rng.random_range(0.0..120.0), rng.random_range(0.0..120.0));
                    if (p.0 - gx).abs() > 2.0 * side || (p.1 - gy).abs() > 2.0 * side {
                        break p;
                    }
                };
                (far.0, far.1, side, rng.random_range(0.45..1.0))
            };
            dets.push(Detection { class, score, bbox: BBox::from_center(cx, cy, s, s).unwrap() });
            let mut f: Vec<f64> = (0..D_IN).map(|_| noise.sample(rng)).collect();
            f[0] += if real { 1.0 } else { -1.0 };
            rows.extend(f);
        }
    }
    let feats = Tensor::new(&[dets.len(), D_IN], rows).unwrap();
    Scene { dets, feats, gt }
}

fn top_hits(scene: &Scene, dets: &[Detection]) -> bool {
    scene.gt.iter().all(|(class, g)| {
        let best = dets.iter().filter(|d| d.class == *class).max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        iou(&best.bbox, g) >= 0.5
    })
}

#[test]
fn learned_duplicate_removal_recovers_ground_truth_on_held_out_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let train: Vec<Scene> = (0..120).map(|_| scene(&mut rng)).collect();
    let test: Vec<Scene> = (0..100).map(|_| scene(&mut rng)).collect();

    let cfg = DedupConfig { d_dr: 16, heads: 2, d_k: 8, d_g: 32, d_rank: 16 };
    let dr = DuplicateRemoval::new("dr.", D_IN, cfg).unwrap();
    let mut store = ParamStore::new();
    dr.init(&mut store, &mut rng);
    let adam = Adam { lr: 3e-3, ..Adam::default() };
    for _epoch in 0..15 {
        for s in &train {
            let targets = dedup_targets(&s.dets, &s.gt);
            let mut tape = Tape::new();
            let f = tape.constant(s.feats.clone());
            let loss = dr.loss(&mut tape, &store, &s.dets, f, &targets).unwrap();
            let grads = tape.backward(loss).unwrap();
            store.zero_grads();
            store.accumulate_grads(&grads).unwrap();
            store.adam_step(&adam).unwrap();
        }
    }

    let mut raw = 0;
    let mut learned = 0;
    for s in &test {
        raw += top_hits(s, &dr.rescore(&store, &s.dets, &s.feats, GateMode::ForcedOpen).unwrap()) as usize;
        learned += top_hits(s, &dr.rescore(&store, &s.dets, &s.feats, GateMode::Learned).unwrap()) as usize;
    }
    eprintln!("top box matches ground truth: raw scores {raw}/100, learned gate {learned}/100");
    assert!(learned >= 90, "learned duplicate removal hit only {learned}/100");
    assert!(learned > raw);
}
