use crate::error::{Error, Result};
use crate::geometry::{iou, rescale_box, rescale_point, Annotation, BBox, Detection, ImageSize, LandmarkClass, LandmarkPoint};

/// A detection tagged with the index of the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub det: Detection,
}

/// A ground-truth box tagged with its image index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBox {
    pub image: usize,
    pub class: LandmarkClass,
    pub bbox: BBox,
}

/// A stage-two landmark prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedPoint {
    pub point: LandmarkPoint,
    /// Set when the detector produced no usable box for this class.
    pub fallback: bool,
}

/// Predictions for one image next to its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    /// Ground truth in native resolution, boxes included.
    pub gt: Annotation,
    /// Resolution the predictions are expressed in.
    pub working: ImageSize,
    pub detections: Vec<Detection>,
    pub points: Vec<PredictedPoint>,
}

impl EvalRecord {
    pub fn point(&self, class: LandmarkClass) -> Option<&PredictedPoint> {
        self.points.iter().find(|p| p.point.class == class)
    }
}

/// Per-detection true/false-positive flags after greedy matching in
/// descending score order (stable, so ties keep input order).
fn match_flags(dets: &[ImageDetection], gts: &[ImageBox], thr: f64, class: LandmarkClass) -> (Vec<bool>, usize) {
    let gt: Vec<&ImageBox> = gts.iter().filter(|g| g.class == class).collect();
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].det.class == class).collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score));
    let mut used = vec![false; gt.len()];
    let mut flags = Vec::with_capacity(order.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.image != d.image {
                continue;
            }
            let v = iou(&d.det.bbox, &g.bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        flags.push(best.is_some());
    }
    (flags, gt.len())
}

/// Area under the all-point interpolated precision/recall curve for `class`.
///
/// With no ground truth of the class the result is 1 when there are also no
/// detections and 0 otherwise; callers drop such classes from means.
pub fn average_precision(dets: &[ImageDetection], gts: &[ImageBox], iou_thresh: f64, class: LandmarkClass) -> f64 {
    let (flags, n_gt) = match_flags(dets, gts, iou_thresh, class);
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            ap += (recall[k] - prev) * precision[k];
            prev = recall[k];
        }
    }
    ap
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class: LandmarkClass,
    /// AP at each of [`coco_thresholds`].
    pub ap: [f64; 10],
    pub gt_count: usize,
}

impl ClassAp {
    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn ap75(&self) -> f64 {
        self.ap[5]
    }

    pub fn ap50_95(&self) -> f64 {
        self.ap.iter().sum::<f64>() / 10.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSuite {
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub per_class: Vec<ClassAp>,
    /// Classes with no ground truth anywhere, left out of the means.
    pub excluded: Vec<LandmarkClass>,
}

/// Detections and GT boxes of all records, both in native resolution.
pub fn pooled(records: &[EvalRecord]) -> Result<(Vec<ImageDetection>, Vec<ImageBox>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let native = r.gt.frame;
        if native.width == 0 || native.height == 0 {
            return Err(Error::data(format!("record {} has no native resolution", r.image_id)));
        }
        for d in &r.detections {
            dets.push(ImageDetection { image: i, det: Detection { bbox: rescale_box(&d.bbox, r.working, native), ..*d } });
        }
        for class in LandmarkClass::ALL {
            if let Some(b) = r.gt.bbox(class) {
                gts.push(ImageBox { image: i, class, bbox: *b });
            }
        }
    }
    Ok((dets, gts))
}

pub fn map_suite(records: &[EvalRecord]) -> Result<MapSuite> {
    if records.is_empty() {
        return Err(Error::data("no records to evaluate"));
    }
    let (dets, gts) = pooled(records)?;
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for class in LandmarkClass::ALL {
        let gt_count = gts.iter().filter(|g| g.class == class).count();
        if gt_count == 0 {
            log::warn!("no {class} ground truth in any record; class excluded from mAP");
            excluded.push(class);
            continue;
        }
        let ap = coco_thresholds().map(|t| average_precision(&dets, &gts, t, class));
        per_class.push(ClassAp { class, ap, gt_count });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(MapSuite { map_50_95: mean(ClassAp::ap50_95), map_50: mean(ClassAp::ap50), map_75: mean(ClassAp::ap75), per_class, excluded })
}

/// Native-resolution distance between a record's prediction and ground truth.
pub fn point_distance(record: &EvalRecord, class: LandmarkClass) -> Result<Option<f64>> {
    let Some(gt) = record.gt.point(class) else { return Ok(None) };
    let pred = record.point(class).ok_or_else(|| Error::data(format!("{} has no {class} prediction", record.image_id)))?;
    let native = rescale_point(&pred.point, record.working, record.gt.frame);
    Ok(Some(native.distance(gt)))
}

/// Mean Euclidean distance in native pixels over the records that have
/// ground truth for `class`; fallback predictions are included.
pub fn mean_euclidean(records: &[EvalRecord], class: LandmarkClass) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        if let Some(d) = point_distance(r, class)? {
            total += d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data(format!("no {class} ground truth to measure against")));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxPriors;

    fn d(image: usize, score: f64, x: f64) -> ImageDetection {
        ImageDetection {
            image,
            det: Detection { class: LandmarkClass::OpticDisc, score, bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap() },
        }
    }

    fn g(image: usize) -> ImageBox {
        ImageBox { image, class: LandmarkClass::OpticDisc, bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap() }
    }

    #[test]
    fn ap_examples() {
        let od = LandmarkClass::OpticDisc;
        assert_eq!(average_precision(&[d(0, 0.9, 0.5)], &[g(0)], 0.5, od), 1.0);
        assert_eq!(average_precision(&[], &[g(0)], 0.5, od), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5, od), 1.0);
        // Ranked: hit, miss, hit over two GTs → 0.5·1 + 0.5·(2/3).
        let dets = [d(0, 0.9, 0.0), d(1, 0.8, 50.0), d(1, 0.7, 1.0)];
        let ap = average_precision(&dets, &[g(0), g(1)], 0.5, od);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn each_gt_matches_once() {
        let od = LandmarkClass::OpticDisc;
        let dets = [d(0, 0.9, 0.0), d(0, 0.8, 0.0)];
        assert_eq!(average_precision(&dets, &[g(0)], 0.5, od), 1.0);
        let (flags, _) = match_flags(&dets, &[g(0)], 0.5, od);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn three_four_five() {
        let mut recs = Vec::new();
        for (i, (x, y)) in [(0.0, 0.0), (3.0, 4.0)].into_iter().enumerate() {
            let mut gt = Annotation::new(format!("r{i}"), ImageSize::new(10, 10));
            gt.set_point(LandmarkPoint::new(x, y, LandmarkClass::Fovea));
            recs.push(EvalRecord {
                image_id: gt.image_id.clone(),
                gt,
                working: ImageSize::new(10, 10),
                detections: vec![],
                points: vec![PredictedPoint { point: LandmarkPoint::new(0.0, 0.0, LandmarkClass::Fovea), fallback: false }],
            });
        }
        assert_eq!(mean_euclidean(&recs, LandmarkClass::Fovea).unwrap(), 2.5);
    }

    fn record(i: usize, native: ImageSize, working: ImageSize, offset: f64) -> EvalRecord {
        let mut gt = Annotation::new(format!("img{i}"), native);
        gt.set_point(LandmarkPoint::new(60.0 + i as f64, 50.0, LandmarkClass::OpticDisc));
        gt.set_point(LandmarkPoint::new(120.0, 70.0 - i as f64, LandmarkClass::Fovea));
        let gt = gt.with_prior_boxes(&BoxPriors::default()).unwrap();
        let work = gt.rescaled(working);
        let detections = LandmarkClass::ALL
            .iter()
            .map(|&c| {
                let b = work.bbox(c).unwrap();
                Detection { class: c, score: 0.9, bbox: b.translated(offset * b.width(), 0.0) }
            })
            .collect();
        let points = work.points().map(|p| PredictedPoint { point: *p, fallback: false }).collect();
        EvalRecord { image_id: gt.image_id.clone(), gt, working, detections, points }
    }

    #[test]
    fn perfect_records_score_one() {
        let native = ImageSize::new(192, 128);
        let recs: Vec<_> = (0..4).map(|i| record(i, native, ImageSize::square(128), 0.0)).collect();
        let m = map_suite(&recs).unwrap();
        assert_eq!((m.map_50_95, m.map_50, m.map_75), (1.0, 1.0, 1.0));
        assert!(mean_euclidean(&recs, LandmarkClass::OpticDisc).unwrap() < 1e-12);
    }

    #[test]
    fn threshold_straddle() {
        // Shifting a box by s·w along x gives IoU (1−s)/(1+s) = 0.538 for s = 0.3.
        let native = ImageSize::square(512);
        let recs: Vec<_> = (0..3).map(|i| record(i, native, native, 0.3)).collect();
        for c in LandmarkClass::ALL {
            let v = iou(recs[0].gt.bbox(c).unwrap(), &recs[0].detections[c.label() - 1].bbox);
            assert!(v > 0.5 && v < 0.55, "{v}");
        }
        let m = map_suite(&recs).unwrap();
        assert_eq!((m.map_50, m.map_75), (1.0, 0.0));
    }
}
