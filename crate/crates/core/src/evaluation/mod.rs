//! Detection AP suites, landmark distances, reports and overlays.

mod metrics;
mod overlay;
mod report;

pub use metrics::{
    average_precision, coco_thresholds, map_suite, mean_euclidean, point_distance, pooled, ClassAp, EvalRecord, ImageBox, ImageDetection,
    MapSuite, PredictedPoint,
};
pub use overlay::{draw_box, draw_point, render_overlay, GREEN, RED};
pub use report::{ImageDistance, MetricReport};
