//! Anchor-grid detector with a relation block over the top proposals.

mod anchors;
mod loss;
mod model;
mod select;
mod train;

pub use self::anchors::{assign_targets, scaled_deltas, unscaled_deltas, AnchorGrid, AnchorLabel, DELTA_SCALE, NEGATIVE_IOU, POSITIVE_IOU};
pub use self::loss::{box_loss, class_loss, class_weights, detection_loss, LossParts};
pub use self::model::{
    AnchorPredictions, Detector, DetectorConfig, DetectorOutputs, BACKBONE_CHANNELS, BACKBONE_STRIDES, NUM_CLASSES, PREFIX, STRIDE,
};
pub use self::select::{select_final, FinalDetection, FinalSource};
pub use self::train::{
    detect, detection_map50, eval_record, gt_boxes, image_loss, train_dedup, train_detector, Dedup, DedupMode, DedupTrainConfig,
    DetectorTrainConfig, EpochLog, ImageDetections, InferenceConfig,
};
