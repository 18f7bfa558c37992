// Exhaustive AP: for every prefix of the ranking, redo the matching from
// scratch, then integrate the precision envelope over each recall level.

use fundus_core::evaluation::{ImageBox, ImageDetection};
use fundus_core::geometry::{iou, BBox, Detection, LandmarkClass};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn true_positives(ranked: &[&ImageDetection], gts: &[&ImageBox], thr: f64) -> usize {
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0;
    for d in ranked {
        // At most one GT per (image, class), so the first eligible one is the match.
        if let Some(j) = (0..gts.len()).find(|&j| !claimed[j] && gts[j].image == d.image && iou(&d.det.bbox, &gts[j].bbox) >= thr) {
            claimed[j] = true;
            tp += 1;
        }
    }
    tp
}

pub fn exhaustive_ap(dets: &[ImageDetection], gts: &[ImageBox], thr: f64, class: LandmarkClass) -> f64 {
    let gts: Vec<&ImageBox> = gts.iter().filter(|g| g.class == class).collect();
    let mut ranked: Vec<&ImageDetection> = dets.iter().filter(|d| d.det.class == class).collect();
    // Stable: equal scores keep input order.
    ranked.sort_by(|a, b| b.det.score.partial_cmp(&a.det.score).unwrap());
    if gts.is_empty() {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked[..k], &gts, thr);
            (tp as f64 / gts.len() as f64, tp as f64 / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// At most 5 images and 4 detections per image, coarse scores so ties happen.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<ImageDetection>, Vec<ImageBox>) {
    let images = rng.random_range(1..=5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for image in 0..images {
        for class in LandmarkClass::ALL {
            if rng.random_bool(0.8) {
                gts.push(ImageBox { image, class, bbox: BBox::new(10.0, 10.0, 30.0, 30.0).unwrap() });
            }
        }
        for _ in 0..rng.random_range(0..=4) {
            let (dx, dy) = (rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
            let score = rng.random_range(0..6) as f64 / 5.0;
            let class = LandmarkClass::ALL[rng.random_range(0..2)];
            dets.push(ImageDetection {
                image,
                det: Detection { class, score, bbox: BBox::new(10.0 + dx, 10.0 + dy, 30.0 + dx, 30.0 + dy).unwrap() },
            });
        }
    }
    (dets, gts)
}
