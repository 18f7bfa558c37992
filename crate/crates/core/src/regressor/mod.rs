//! Per-class crop regressors and the direct-regression baseline.

mod models;
mod net;
mod train;

pub use self::models::{class_prefix, CropRegressor, DirectRegressor, CROP_CHANNELS, DIRECT_CHANNELS, DIRECT_PREFIX};
pub use self::net::{mse, CnnRegressor, Phase};
pub use self::train::{fit_batch, train_crop_regressor, train_direct_baseline, RegressorLog, RegressorTrainConfig};

#[cfg(test)]
mod tests;
