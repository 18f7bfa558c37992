use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use crate::detector::DedupMode;
use crate::error::{Error, Result};
use crate::geometry::BoxPriors;
use crate::imaging::{AugmentConfig, ClaheParams};
use crate::relation::{DedupConfig, DuplicateRemoval, RelationConfig};

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u32, u64, usize, bool, DedupMode);

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }

    fn render(&self) -> String {
        // Debug formatting round-trips exactly.
        format!("{self:?}")
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run. Loaded from `key = value` lines.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as Value>::parse_value(value)
                            .map_err(|m| Error::config(format!("{key}: {m}")))?;
                    } )*
                    _ => return Err(Error::config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical text form: every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( let _ = writeln!(s, "{} = {}", stringify!($field), Value::render(&self.$field)); )*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    /// Side of the square working image.
    working_size: u32 = 128,
    box_half_od: f64 = 48.0,
    box_half_fovea: f64 = 40.0,

    clahe_tiles_x: u32 = 8,
    clahe_tiles_y: u32 = 8,
    clahe_clip: f64 = 0.01,
    clahe_bins: usize = 256,
    norm_mean: f64 = 0.5,
    norm_std: f64 = 0.25,

    aug_translate: f64 = 0.05,
    aug_shear_deg: f64 = 5.0,
    aug_scale_min: f64 = 0.9,
    aug_scale_max: f64 = 1.1,
    aug_flip_prob: f64 = 0.5,

    feature_dim: usize = 128,
    relation_heads: usize = 4,
    relation_dk: usize = 32,
    relation_dg: usize = 64,
    /// Off trains the ablated detector: no relation block in the head.
    relation_enabled: bool = true,
    top_k: usize = 16,
    dedup: DedupMode = DedupMode::Learned,
    dedup_dim: usize = 32,
    dedup_heads: usize = 2,
    nms_iou: f64 = 0.5,
    score_threshold: f64 = 0.01,

    det_epochs: usize = 15,
    det_lr: f64 = 0.003,
    det_momentum: f64 = 0.9,
    det_weight_decay: f64 = 1e-4,
    det_neg_pos_ratio: f64 = 3.0,
    det_batch: usize = 1,
    dr_lr: f64 = 1e-3,
    dr_epochs: usize = 10,

    reg_crop_size: u32 = 64,
    reg_jitter: f64 = 0.1,
    reg_epochs: usize = 20,
    reg_lr: f64 = 1e-3,
    reg_batch: usize = 8,
    reg_bn_momentum: f64 = 0.1,

    base_epochs: usize = 20,
    base_lr: f64 = 1e-3,
    base_batch: usize = 8,

    synth_width: u32 = 192,
    synth_height: u32 = 128,
    synth_disc_min: f64 = 8.0,
    synth_disc_max: f64 = 11.0,
    synth_offset_mean: f64 = 2.4,
    synth_offset_std: f64 = 0.2,
    synth_angle_std_deg: f64 = 10.0,
    synth_strokes: usize = 6,
    synth_noise: f64 = 0.02,
    synth_texture: f64 = 0.04,
    synth_train_fraction: f64 = 0.8,
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// sha256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.working_size < 16 || !self.working_size.is_multiple_of(16) {
            return bad("working_size must be a positive multiple of 16");
        }
        if !(self.box_half_od > 0.0 && self.box_half_fovea > 0.0) {
            return bad("box half-sizes must be positive");
        }
        if !(self.norm_std > 0.0) {
            return bad("norm_std must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..1.0).contains(&self.score_threshold) {
            return bad("nms_iou must be in [0, 1] and score_threshold in [0, 1)");
        }
        if self.det_batch == 0 || self.reg_batch < 2 || self.base_batch == 0 {
            return bad("batch sizes must be positive (regressor batches need at least 2 for batch norm)");
        }
        if self.det_lr < 0.0 || self.dr_lr < 0.0 || self.reg_lr < 0.0 || self.base_lr < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.det_momentum) || self.det_weight_decay < 0.0 || !(self.det_neg_pos_ratio > 0.0) {
            return bad("invalid detector optimiser settings");
        }
        if self.reg_crop_size < 8 || !self.reg_crop_size.is_multiple_of(4) || !(0.0..0.5).contains(&self.reg_jitter) {
            return bad("reg_crop_size must be a multiple of 4 of at least 8 and reg_jitter in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.reg_bn_momentum) {
            return bad("reg_bn_momentum must be in [0, 1]");
        }
        if !(0.0 < self.synth_train_fraction && self.synth_train_fraction <= 1.0) {
            return bad("synth_train_fraction must be in (0, 1]");
        }
        self.clahe_params();
        self.augment().validate()?;
        self.relation().validate()?;
        DuplicateRemoval::new("", 1, self.dedup_config())?;
        Ok(())
    }

    pub fn priors(&self) -> BoxPriors {
        BoxPriors { optic_disc_half: self.box_half_od, fovea_half: self.box_half_fovea }
    }

    pub fn clahe_params(&self) -> ClaheParams {
        ClaheParams { tiles_x: self.clahe_tiles_x, tiles_y: self.clahe_tiles_y, clip_limit: self.clahe_clip, bins: self.clahe_bins }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            translate: self.aug_translate,
            shear_deg: self.aug_shear_deg,
            scale_min: self.aug_scale_min,
            scale_max: self.aug_scale_max,
            flip_prob: self.aug_flip_prob,
            max_attempts: 10,
        }
    }

    pub fn relation(&self) -> RelationConfig {
        RelationConfig { d_f: self.feature_dim, heads: self.relation_heads, d_k: self.relation_dk, d_g: self.relation_dg }
    }

    pub fn dedup_config(&self) -> DedupConfig {
        DedupConfig { d_dr: self.dedup_dim, heads: self.dedup_heads, ..DedupConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let cfg = RunConfig { det_lr: 0.1 + 0.2, dedup: DedupMode::Nms, relation_enabled: false, ..RunConfig::default() };
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nseed = 7   # trailing\n det_epochs=3\n").unwrap();
        assert_eq!((cfg.seed, cfg.det_epochs), (7, 3));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let e = RunConfig::parse("seed = 1\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 2") && m.contains("learning_rate")), "{e}");
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("det_lr = nan"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed 3"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_inconsistent_dims() {
        assert!(RunConfig::parse("feature_dim = 130").is_err());
        assert!(RunConfig::parse("working_size = 100").is_err());
        assert!(RunConfig::parse("norm_std = 0").is_err());
    }
}
