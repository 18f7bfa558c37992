use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::models::{CropRegressor, DirectRegressor};
use super::net::{mse, CnnRegressor, Phase};
use crate::autodiff::{Adam, ParamStore, Tape};
use crate::dataset_io::WorkingSample;
use crate::error::{Error, Result};
use crate::geometry::{Annotation, LandmarkClass};
use crate::imaging::{random_augment, AugmentConfig, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub adam: Adam,
    pub batch: usize,
    /// Box translation jitter as a fraction of the box size, per axis.
    pub jitter: f64,
    pub augment: AugmentConfig,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            epochs: 20,
            adam: Adam::default(),
            batch: 8,
            jitter: 0.1,
            augment: AugmentConfig::default(),
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressorLog {
    /// Mean training MSE per epoch.
    pub epoch_loss: Vec<f64>,
    /// Crops dropped because the target fell outside them.
    pub skipped: usize,
}

/// One Adam step on a batch; returns the batch loss.
pub fn fit_batch(
    net: &CnnRegressor,
    store: &mut ParamStore,
    imgs: &[&Image],
    targets: &[f64],
    adam: &Adam,
    bn_momentum: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(net.batch_tensor(imgs)?);
    let (y, stats) = net.forward(&mut tape, store, x, Phase::Train)?;
    let loss = mse(&mut tape, y, targets)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&grads)?;
    store.adam_step(adam)?;
    net.update_stats(store, &stats, bn_momentum)?;
    Ok(value)
}

fn check(train: &[WorkingSample], cfg: &RegressorTrainConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::data("regressor training set is empty"));
    }
    if cfg.batch < 2 {
        return Err(Error::config("regressor batches need at least 2 images for batch norm"));
    }
    Ok(())
}

fn augmented(s: &WorkingSample, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<(Image, Annotation)> {
    let (img, ann, _) = random_augment(&s.image, &s.annotation, rng, cfg)?;
    Ok((img, ann))
}

/// Minibatch loop shared by both regressors: `make` turns one sample into
/// an input image and target row, or `None` to skip it.
fn run_epochs(
    net: &CnnRegressor,
    store: &mut ParamStore,
    train: &[WorkingSample],
    cfg: &RegressorTrainConfig,
    mut make: impl FnMut(&WorkingSample, &mut ChaCha8Rng) -> Result<Option<(Image, Vec<f64>)>>,
) -> Result<RegressorLog> {
    check(train, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = RegressorLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut items = Vec::with_capacity(order.len());
        for &i in &order {
            match make(&train[i], &mut rng)? {
                Some(item) => items.push(item),
                None => log.skipped += 1,
            }
        }
        let (mut sum, mut count) = (0.0, 0usize);
        // A trailing singleton cannot be batch-normalised; fold it into the previous batch.
        let mut chunks: Vec<&[(Image, Vec<f64>)]> = items.chunks(cfg.batch).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
            let n = chunks.len();
            let start = (n - 1) * cfg.batch;
            chunks[n - 1] = &items[start..];
        }
        for c in chunks {
            if c.len() < 2 {
                continue;
            }
            let imgs: Vec<&Image> = c.iter().map(|(i, _)| i).collect();
            let targets: Vec<f64> = c.iter().flat_map(|(_, t)| t.iter().copied()).collect();
            sum += fit_batch(net, store, &imgs, &targets, &cfg.adam, cfg.bn_momentum)? * c.len() as f64;
            count += c.len();
        }
        log.epoch_loss.push(if count == 0 { f64::NAN } else { sum / count as f64 });
    }
    if log.skipped > 0 {
        log::warn!("{}: skipped {} crops whose target fell outside", net.prefix, log.skipped);
    }
    Ok(log)
}

/// Crops around jittered ground-truth boxes of augmented images.
pub fn train_crop_regressor(
    reg: &CropRegressor,
    store: &mut ParamStore,
    train: &[WorkingSample],
    cfg: &RegressorTrainConfig,
) -> Result<RegressorLog> {
    let class = reg.class;
    run_epochs(&reg.net, store, train, cfg, |s, rng| {
        let (img, ann) = augmented(s, rng, &cfg.augment)?;
        let Some(p) = ann.point(class).copied() else { return Ok(None) };
        let Some(b) = ann.bbox(class).copied() else { return Ok(None) };
        let (dx, dy) = (cfg.jitter * b.width(), cfg.jitter * b.height());
        let region = b.translated(rng.random_range(-dx..=dx), rng.random_range(-dy..=dy));
        let (c, a) = reg.crop(&img, &region)?;
        let (u, v) = a.image_to_normalized(p.x, p.y);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Ok(None);
        }
        Ok(Some((c, vec![u, v])))
    })
}

pub fn train_direct_baseline(
    reg: &DirectRegressor,
    store: &mut ParamStore,
    train: &[WorkingSample],
    cfg: &RegressorTrainConfig,
) -> Result<RegressorLog> {
    let frame = reg.frame_affine();
    run_epochs(&reg.net, store, train, cfg, |s, rng| {
        let (img, ann) = augmented(s, rng, &cfg.augment)?;
        let mut t = Vec::with_capacity(4);
        for class in LandmarkClass::ALL {
            let Some(p) = ann.point(class) else { return Ok(None) };
            let (u, v) = frame.image_to_normalized(p.x, p.y);
            t.extend([u, v]);
        }
        Ok(Some((img, t)))
    })
}
