use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::assign_targets;
use super::loss::{class_loss, detection_loss};
use super::model::{AnchorPredictions, Detector};
use super::select::{select_final, FinalDetection};
use crate::autodiff::{Adam, ParamStore, Sgd, Tape, Tensor};
use crate::dataset_io::WorkingSample;
use crate::error::{Error, Result};
use crate::evaluation::{map_suite, EvalRecord};
use crate::geometry::{Annotation, BBox, Detection, LandmarkClass};
use crate::imaging::{random_augment, AugmentConfig, Image};
use crate::relation::{classical_nms, dedup_targets, DuplicateRemoval, GateMode};

/// Final-stage duplicate handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DedupMode {
    Learned,
    /// Learned module present but its gate held at 1.
    Open,
    Nms,
}

impl std::str::FromStr for DedupMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(DedupMode::Learned),
            "open" => Ok(DedupMode::Open),
            "nms" => Ok(DedupMode::Nms),
            _ => Err(format!("expected learned, open or nms, got {s:?}")),
        }
    }
}

impl std::fmt::Display for DedupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DedupMode::Learned => "learned",
            DedupMode::Open => "open",
            DedupMode::Nms => "nms",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub sgd: Sgd,
    pub neg_pos_ratio: f64,
    pub augment: AugmentConfig,
    /// Images per optimiser step.
    pub batch: usize,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    /// Fraction of the epochs after which the learning rate drops tenfold.
    pub lr_drop_at: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 15,
            sgd: Sgd { lr: 0.003, momentum: 0.9, weight_decay: 1e-4 },
            neg_pos_ratio: 3.0,
            augment: AugmentConfig::default(),
            batch: 1,
            clip_norm: 10.0,
            lr_drop_at: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_map50: Option<f64>,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        match self.val_map50 {
            Some(m) => format!("epoch={} loss={:.6} val_mAP50={:.4}", self.epoch, self.loss, m),
            None => format!("epoch={} loss={:.6} val_mAP50=na", self.epoch, self.loss),
        }
    }
}

pub fn gt_boxes(ann: &Annotation) -> Vec<(LandmarkClass, BBox)> {
    LandmarkClass::ALL.iter().filter_map(|&c| ann.bbox(c).map(|b| (c, *b))).collect()
}

/// Proposal and final-head losses for one image, with gradients recorded.
pub fn image_loss(
    det: &Detector,
    tape: &mut Tape,
    store: &ParamStore,
    img: &Image,
    ann: &Annotation,
    ratio: f64,
) -> Result<crate::autodiff::Var> {
    let labels = assign_targets(det.grid.anchors(), &gt_boxes(ann))?;
    let x = tape.constant(det.input_tensor(img)?);
    let out = det.forward(tape, store, x)?;
    let main = detection_loss(tape, out.logits, out.deltas, &labels, ratio)?.total;
    let pre = class_loss(tape, out.pre_logits, &labels, ratio)?;
    tape.add(main, pre)
}

fn augmented(sample: &WorkingSample, det: &Detector, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<(Image, Annotation)> {
    let (img, ann, _) = random_augment(&sample.image, &sample.annotation, rng, cfg)?;
    Ok((img, ann.with_prior_boxes(&det.cfg.priors)?))
}

/// SGD over augmented images. `on_epoch` sees each log line as it is produced.
pub fn train_detector(
    det: &Detector,
    store: &mut ParamStore,
    train: &[WorkingSample],
    val: &[WorkingSample],
    cfg: &DetectorTrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::data("detector training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("detector batch must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let drop_after = (cfg.lr_drop_at * cfg.epochs as f64).round() as usize;
    for epoch in 1..=cfg.epochs {
        let sgd = if epoch > drop_after { Sgd { lr: cfg.sgd.lr * 0.1, ..cfg.sgd } } else { cfg.sgd };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            store.zero_grads();
            for &i in chunk {
                let (img, ann) = augmented(&train[i], det, &mut rng, &cfg.augment)?;
                let mut tape = Tape::new();
                let loss = image_loss(det, &mut tape, store, &img, &ann, cfg.neg_pos_ratio)?;
                total += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                store.accumulate_grads(&grads)?;
            }
            store.scale_grads(1.0 / chunk.len() as f64);
            let norm = store.grad_norm();
            if norm > cfg.clip_norm {
                store.scale_grads(cfg.clip_norm / norm);
            }
            store.sgd_step(&sgd)?;
        }
        let val_map50 = if val.is_empty() { None } else { Some(detection_map50(det, store, None, val, &InferenceConfig::default())?) };
        let log = EpochLog { epoch, loss: total / train.len() as f64, val_map50 };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub mode: DedupMode,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Candidates per class handed to duplicate removal.
    pub candidates: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { mode: DedupMode::Open, nms_iou: 0.5, score_threshold: 0.01, candidates: 16 }
    }
}

/// Learned duplicate removal and its parameters.
pub type Dedup<'a> = (&'a DuplicateRemoval, &'a ParamStore);

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    /// Candidates straight from the detector.
    pub raw: Vec<Detection>,
    /// After duplicate removal and the score threshold.
    pub kept: Vec<Detection>,
    pub finals: [FinalDetection; 2],
}

fn candidate_features(pred: &AnchorPredictions, cand: &[(usize, Detection)]) -> Result<Tensor> {
    let d = pred.features.shape()[1];
    let rows: Vec<f64> = cand.iter().flat_map(|(a, _)| pred.features.row(*a).to_vec()).collect();
    Tensor::new(&[cand.len(), d], rows)
}

pub fn detect(det: &Detector, store: &ParamStore, dedup: Option<Dedup<'_>>, img: &Image, cfg: &InferenceConfig) -> Result<ImageDetections> {
    let pred = det.predict(store, img)?;
    let cand = pred.candidates(cfg.candidates);
    let raw: Vec<Detection> = cand.iter().map(|(_, d)| *d).collect();
    let rescored = match cfg.mode {
        DedupMode::Nms => classical_nms_per_class(&raw, cfg.nms_iou),
        DedupMode::Open => raw.clone(),
        DedupMode::Learned => {
            let (dr, dr_store) = dedup.ok_or_else(|| Error::config("learned duplicate removal needs its checkpoint"))?;
            dr.rescore(dr_store, &raw, &candidate_features(&pred, &cand)?, GateMode::Learned)?
        }
    };
    let kept: Vec<Detection> = rescored.into_iter().filter(|d| d.score >= cfg.score_threshold).collect();
    let finals = select_final(&kept, &raw, det.cfg.working, &det.cfg.priors);
    Ok(ImageDetections { raw, kept, finals })
}

fn classical_nms_per_class(dets: &[Detection], thr: f64) -> Vec<Detection> {
    // The suppression never crosses classes.
    let mut out = Vec::new();
    for class in LandmarkClass::ALL {
        let same: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
        out.extend(classical_nms(&same, thr).into_iter().map(|i| same[i]));
    }
    out
}

pub fn eval_record(sample: &WorkingSample, working: crate::geometry::ImageSize, finals: &[FinalDetection]) -> EvalRecord {
    EvalRecord {
        image_id: sample.native.image_id.clone(),
        gt: sample.native.clone(),
        working,
        detections: finals.iter().map(|f| f.det).collect(),
        points: Vec::new(),
    }
}

/// mAP at IoU 0.5 of the final one-per-class detections.
pub fn detection_map50(
    det: &Detector,
    store: &ParamStore,
    dedup: Option<Dedup<'_>>,
    samples: &[WorkingSample],
    cfg: &InferenceConfig,
) -> Result<f64> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let d = detect(det, store, dedup, &s.image, cfg)?;
        records.push(eval_record(s, det.cfg.working, &d.finals));
    }
    Ok(map_suite(&records)?.map_50)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupTrainConfig {
    pub epochs: usize,
    pub adam: Adam,
    pub candidates: usize,
    /// Augmented views per training image, in addition to the image itself.
    pub augmented_views: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

struct DedupExample {
    dets: Vec<Detection>,
    feats: Tensor,
    targets: Vec<f64>,
}

/// Fits the duplicate-removal gate on a frozen detector's candidates.
/// Returns the mean loss per epoch.
pub fn train_dedup(
    det: &Detector,
    det_store: &ParamStore,
    dr: &DuplicateRemoval,
    dr_store: &mut ParamStore,
    train: &[WorkingSample],
    cfg: &DedupTrainConfig,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::data("duplicate-removal training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::new();
    for s in train {
        let mut views = vec![(s.image.clone(), s.annotation.clone())];
        for _ in 0..cfg.augmented_views {
            views.push(augmented(s, det, &mut rng, &cfg.augment)?);
        }
        for (img, ann) in views {
            let pred = det.predict(det_store, &img)?;
            let cand = pred.candidates(cfg.candidates);
            let dets: Vec<Detection> = cand.iter().map(|(_, d)| *d).collect();
            let targets = dedup_targets(&dets, &gt_boxes(&ann));
            examples.push(DedupExample { feats: candidate_features(&pred, &cand)?, dets, targets });
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = &examples[i];
            let mut tape = Tape::new();
            let f = tape.constant(ex.feats.clone());
            let loss = dr.loss(&mut tape, dr_store, &ex.dets, f, &ex.targets)?;
            total += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            dr_store.zero_grads();
            dr_store.accumulate_grads(&grads)?;
            dr_store.adam_step(&cfg.adam)?;
        }
        losses.push(total / examples.len() as f64);
    }
    Ok(losses)
}
