//! Stage wiring shared by the CLI and the end-to-end tests.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_checkpoint, save_checkpoint, Adam, ParamStore, Sgd};
use crate::dataset_io::{RunConfig, WorkingSample};
use crate::detector::{
    detect, train_dedup, train_detector, DedupMode, DedupTrainConfig, Detector, DetectorConfig, DetectorTrainConfig, EpochLog, FinalSource,
    InferenceConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{EvalRecord, MetricReport, PredictedPoint};
use crate::geometry::{rescale_box, rescale_point, Annotation, BBox, Detection, ImageSize, LandmarkClass, LandmarkPoint};
use crate::imaging::Image;
use crate::regressor::{train_crop_regressor, train_direct_baseline, CropRegressor, DirectRegressor, RegressorLog, RegressorTrainConfig};
use crate::relation::DuplicateRemoval;

pub const DEDUP_PREFIX: &str = "dr.";

/// Separate RNG streams per stage, all derived from the run seed.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage);
    r
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

pub fn detector(cfg: &RunConfig) -> Result<Detector> {
    Detector::new(DetectorConfig {
        working: ImageSize::square(cfg.working_size),
        priors: cfg.priors(),
        d_f: cfg.feature_dim,
        relation: cfg.relation_enabled.then(|| cfg.relation()),
        top_k: cfg.top_k,
        norm_mean: cfg.norm_mean,
        norm_std: cfg.norm_std,
    })
}

pub fn dedup(cfg: &RunConfig) -> Result<DuplicateRemoval> {
    DuplicateRemoval::new(DEDUP_PREFIX, cfg.feature_dim, cfg.dedup_config())
}

pub fn regressors(cfg: &RunConfig) -> Result<[CropRegressor; 2]> {
    Ok([CropRegressor::new(LandmarkClass::OpticDisc, cfg.reg_crop_size)?, CropRegressor::new(LandmarkClass::Fovea, cfg.reg_crop_size)?])
}

pub fn baseline(cfg: &RunConfig) -> Result<DirectRegressor> {
    let mut b = DirectRegressor::new(cfg.working_size)?;
    b.net.norm_mean = cfg.norm_mean;
    b.net.norm_std = cfg.norm_std;
    Ok(b)
}

pub fn inference_config(cfg: &RunConfig) -> InferenceConfig {
    InferenceConfig { mode: cfg.dedup, nms_iou: cfg.nms_iou, score_threshold: cfg.score_threshold, candidates: cfg.top_k }
}

pub fn detector_train_config(cfg: &RunConfig) -> DetectorTrainConfig {
    DetectorTrainConfig {
        epochs: cfg.det_epochs,
        sgd: Sgd { lr: cfg.det_lr, momentum: cfg.det_momentum, weight_decay: cfg.det_weight_decay },
        neg_pos_ratio: cfg.det_neg_pos_ratio,
        augment: cfg.augment(),
        batch: cfg.det_batch,
        seed: stage_seed(cfg.seed, 1),
        ..DetectorTrainConfig::default()
    }
}

fn regressor_train_config(cfg: &RunConfig, epochs: usize, lr: f64, batch: usize, stage: u64) -> RegressorTrainConfig {
    RegressorTrainConfig {
        epochs,
        adam: Adam { lr, ..Adam::default() },
        batch,
        jitter: cfg.reg_jitter,
        augment: cfg.augment(),
        bn_momentum: cfg.reg_bn_momentum,
        seed: stage_seed(cfg.seed, stage),
    }
}

/// Trains the detector, then the duplicate-removal gate on its frozen
/// candidates. The returned store holds `detector.*` and `dr.*`, rounded to
/// checkpoint precision.
pub fn train_detector_stage(
    cfg: &RunConfig,
    train: &[WorkingSample],
    val: &[WorkingSample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let det = detector(cfg)?;
    let mut store = ParamStore::new();
    det.init(&mut store, &mut stage_rng(cfg.seed, 1));
    let logs = train_detector(&det, &mut store, train, val, &detector_train_config(cfg), on_epoch)?;
    store.round_to_f32();

    let dr = dedup(cfg)?;
    let mut dr_store = ParamStore::new();
    dr.init(&mut dr_store, &mut stage_rng(cfg.seed, 2));
    let dcfg = DedupTrainConfig {
        epochs: cfg.dr_epochs,
        adam: Adam { lr: cfg.dr_lr, ..Adam::default() },
        candidates: cfg.top_k,
        augmented_views: 1,
        augment: cfg.augment(),
        seed: stage_seed(cfg.seed, 2),
    };
    let losses = train_dedup(&det, &store, &dr, &mut dr_store, train, &dcfg)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("duplicate removal loss {first:.4} -> {last:.4}");
    }
    store.merge_prefixed("", &dr_store);
    store.round_to_f32();
    Ok((store.subset(""), logs))
}

/// Both crop regressors; each trains on its own store.
pub fn train_regressor_stage(cfg: &RunConfig, train: &[WorkingSample]) -> Result<(ParamStore, Vec<RegressorLog>)> {
    let mut all = ParamStore::new();
    let mut logs = Vec::new();
    for (i, reg) in regressors(cfg)?.iter().enumerate() {
        let mut store = ParamStore::new();
        reg.init(&mut store, &mut stage_rng(cfg.seed, 3 + i as u64));
        let tc = regressor_train_config(cfg, cfg.reg_epochs, cfg.reg_lr, cfg.reg_batch, 3 + i as u64);
        logs.push(train_crop_regressor(reg, &mut store, train, &tc)?);
        all.merge_prefixed("", &store);
    }
    all.round_to_f32();
    Ok((all.subset(""), logs))
}

pub fn train_baseline_stage(cfg: &RunConfig, train: &[WorkingSample]) -> Result<(ParamStore, RegressorLog)> {
    let b = baseline(cfg)?;
    let mut store = ParamStore::new();
    b.init(&mut store, &mut stage_rng(cfg.seed, 5));
    let tc = regressor_train_config(cfg, cfg.base_epochs, cfg.base_lr, cfg.base_batch, 5);
    let log = train_direct_baseline(&b, &mut store, train, &tc)?;
    store.round_to_f32();
    Ok((store.subset(""), log))
}

/// Loaded models for two-stage inference.
pub struct TwoStage {
    pub cfg: RunConfig,
    pub detector: Detector,
    pub dedup: DuplicateRemoval,
    pub det_store: ParamStore,
    pub regressors: [CropRegressor; 2],
    pub reg_store: ParamStore,
}

fn require_prefix(store: &ParamStore, prefix: &str, what: &str) -> Result<()> {
    if store.names().any(|n| n.starts_with(prefix)) {
        Ok(())
    } else {
        Err(Error::data(format!("{what} checkpoint has no {prefix}* tensors")))
    }
}

impl TwoStage {
    pub fn new(cfg: &RunConfig, det_store: ParamStore, reg_store: ParamStore) -> Result<Self> {
        require_prefix(&det_store, crate::detector::PREFIX, "detector")?;
        require_prefix(&reg_store, "regressor.", "regressor")?;
        if cfg.dedup == DedupMode::Learned {
            require_prefix(&det_store, DEDUP_PREFIX, "detector")?;
        }
        Ok(TwoStage { cfg: cfg.clone(), detector: detector(cfg)?, dedup: dedup(cfg)?, det_store, regressors: regressors(cfg)?, reg_store })
    }

    pub fn load(cfg: &RunConfig, det: &Path, reg: &Path) -> Result<Self> {
        let load = |p: &Path, what: &str| {
            load_checkpoint(p).map_err(|e| match e {
                Error::Io(io) => Error::data(format!("cannot read {what} checkpoint {}: {io}", p.display())),
                other => other,
            })
        };
        Self::new(cfg, load(det, "detector")?, load(reg, "regressor")?)
    }

    /// Detection then crop regression on one preprocessed working image.
    pub fn predict_working(&self, img: &Image) -> Result<[StagePrediction; 2]> {
        let d = detect(&self.detector, &self.det_store, Some((&self.dedup, &self.det_store)), img, &inference_config(&self.cfg))?;
        let mut out = Vec::with_capacity(2);
        for (f, reg) in d.finals.iter().zip(&self.regressors) {
            let point = reg.regress_in_box(&self.reg_store, img, &f.det.bbox)?;
            out.push(StagePrediction { class: reg.class, detection: Some(f.det), point, source: f.source });
        }
        Ok([out[0], out[1]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePrediction {
    pub class: LandmarkClass,
    /// `None` for the direct baseline.
    pub detection: Option<Detection>,
    pub point: LandmarkPoint,
    pub source: FinalSource,
}

/// One image's predictions in native pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub image_id: String,
    pub native: ImageSize,
    pub classes: [StagePrediction; 2],
}

fn to_native(p: &[StagePrediction; 2], working: ImageSize, native: ImageSize) -> [StagePrediction; 2] {
    p.map(|s| StagePrediction {
        detection: s.detection.map(|d| Detection { bbox: rescale_box(&d.bbox, working, native), ..d }),
        point: rescale_point(&s.point, working, native),
        ..s
    })
}

pub fn predict_two_stage(models: &TwoStage, samples: &[WorkingSample]) -> Result<Vec<ImagePrediction>> {
    let working = ImageSize::square(models.cfg.working_size);
    samples
        .iter()
        .map(|s| {
            let p = models.predict_working(&s.image)?;
            Ok(ImagePrediction {
                image_id: s.native.image_id.clone(),
                native: s.native.native_size,
                classes: to_native(&p, working, s.native.native_size),
            })
        })
        .collect()
}

pub fn predict_baseline(cfg: &RunConfig, store: &ParamStore, samples: &[WorkingSample]) -> Result<Vec<ImagePrediction>> {
    require_prefix(store, crate::regressor::DIRECT_PREFIX, "baseline")?;
    let b = baseline(cfg)?;
    let working = ImageSize::square(cfg.working_size);
    samples
        .iter()
        .map(|s| {
            let pts = b.predict(store, &s.image)?;
            let p = pts.map(|point| StagePrediction { class: point.class, detection: None, point, source: FinalSource::Detected });
            Ok(ImagePrediction {
                image_id: s.native.image_id.clone(),
                native: s.native.native_size,
                classes: to_native(&p, working, s.native.native_size),
            })
        })
        .collect()
}

pub const PREDICTION_HEADER: &str = "image,class,score,x_min,y_min,x_max,y_max,x,y,source";

fn source_name(s: FinalSource) -> &'static str {
    match s {
        FinalSource::Detected => "detected",
        FinalSource::RawAnchor => "raw_anchor",
        FinalSource::Default => "default",
    }
}

fn parse_source(s: &str) -> Option<FinalSource> {
    match s {
        "detected" => Some(FinalSource::Detected),
        "raw_anchor" => Some(FinalSource::RawAnchor),
        "default" => Some(FinalSource::Default),
        _ => None,
    }
}

/// Native-pixel predictions, boxes empty for the baseline.
pub fn predictions_csv(preds: &[ImagePrediction]) -> String {
    let mut s = String::from(PREDICTION_HEADER);
    s.push('\n');
    for p in preds {
        for c in &p.classes {
            let det = match c.detection {
                Some(d) => format!("{:.6},{:.3},{:.3},{:.3},{:.3}", d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max),
                None => ",,,,".to_string(),
            };
            let _ = writeln!(s, "{},{},{det},{:.3},{:.3},{}", p.image_id, c.class.name(), c.point.x, c.point.y, source_name(c.source));
        }
    }
    s
}

/// Parsed predictions file: per image id, each class's detection and point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    pub rows: std::collections::BTreeMap<String, Vec<(Option<Detection>, PredictedPoint)>>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read predictions {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTION_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header {PREDICTION_HEADER:?}") }),
    }
    let mut table = PredictionTable::default();
    for (i, line) in lines {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: &str| Error::Parse { line: line_no, msg: m.to_string() };
        if f.len() != 10 {
            return Err(bad("expected 10 fields"));
        }
        let class = LandmarkClass::parse(f[1]).ok_or_else(|| bad("unknown class"))?;
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(&format!("bad number {s:?}")));
        let detection = if f[2..7].iter().all(|s| s.is_empty()) {
            None
        } else {
            let bbox = BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?).map_err(|e| bad(&e.to_string()))?;
            Some(Detection { class, score: num(f[2])?, bbox })
        };
        let source = parse_source(f[9]).ok_or_else(|| bad("unknown source"))?;
        let point = PredictedPoint { point: LandmarkPoint::new(num(f[7])?, num(f[8])?, class), fallback: source != FinalSource::Detected };
        table.rows.entry(f[0].to_string()).or_default().push((detection, point));
    }
    Ok(table)
}

/// Joins predictions with native ground truth. Every annotated image must
/// have predictions.
pub fn evaluation_records(table: &PredictionTable, gts: &[Annotation]) -> Result<Vec<EvalRecord>> {
    gts.iter()
        .map(|gt| {
            let rows = table.rows.get(&gt.image_id).ok_or_else(|| Error::data(format!("no predictions for {}", gt.image_id)))?;
            Ok(EvalRecord {
                image_id: gt.image_id.clone(),
                gt: gt.clone(),
                working: gt.frame,
                detections: rows.iter().filter_map(|(d, _)| *d).collect(),
                points: rows.iter().map(|(_, p)| *p).collect(),
            })
        })
        .collect()
}

pub fn evaluate_predictions(path: &Path, gts: &[Annotation]) -> Result<MetricReport> {
    MetricReport::compute(&evaluation_records(&read_predictions(path)?, gts)?)
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(store, path)
}
