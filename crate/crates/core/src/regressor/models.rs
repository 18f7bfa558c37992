use rand::Rng;

use super::net::CnnRegressor;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize, LandmarkClass, LandmarkPoint};
use crate::imaging::{crop, pixel_block, CropAffine, Image};

pub const CROP_CHANNELS: [usize; 2] = [16, 32];
pub const DIRECT_CHANNELS: [usize; 3] = [16, 32, 32];

pub fn class_prefix(class: LandmarkClass) -> String {
    match class {
        LandmarkClass::OpticDisc => "regressor.od.".into(),
        LandmarkClass::Fovea => "regressor.fovea.".into(),
    }
}

pub const DIRECT_PREFIX: &str = "baseline.direct.";

/// Second stage for one class: crop-normalised `(u, v)` from a detected box.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRegressor {
    pub class: LandmarkClass,
    pub net: CnnRegressor,
}

impl CropRegressor {
    pub fn new(class: LandmarkClass, crop_size: u32) -> Result<Self> {
        Ok(CropRegressor { class, net: CnnRegressor::new(class_prefix(class), &CROP_CHANNELS, crop_size, 2)? })
    }

    pub fn crop_size(&self) -> u32 {
        self.net.input
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
    }

    pub fn crop(&self, img: &Image, region: &BBox) -> Result<(Image, CropAffine)> {
        crop(img, region, self.crop_size())
    }

    /// Maps a network output through the crop's affine.
    pub fn to_image(&self, uv: &[f64], affine: Option<&CropAffine>) -> Result<LandmarkPoint> {
        let a = affine.ok_or_else(|| Error::contract("crop regression needs the crop-to-image affine"))?;
        let (x, y) = a.normalized_to_image(uv[0], uv[1]);
        Ok(LandmarkPoint::new(x, y, self.class))
    }

    pub fn regress_center(&self, store: &ParamStore, crop_img: &Image, affine: Option<&CropAffine>) -> Result<LandmarkPoint> {
        let out = self.net.predict(store, &[crop_img])?;
        self.to_image(&out[0], affine)
    }

    /// Crop `region` out of a working image and regress inside it.
    pub fn regress_in_box(&self, store: &ParamStore, img: &Image, region: &BBox) -> Result<LandmarkPoint> {
        let (c, a) = self.crop(img, region)?;
        self.regress_center(store, &c, Some(&a))
    }
}

/// Baseline: both centres straight from the whole working image.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRegressor {
    pub net: CnnRegressor,
}

impl DirectRegressor {
    pub fn new(working: u32) -> Result<Self> {
        Ok(DirectRegressor { net: CnnRegressor::new(DIRECT_PREFIX, &DIRECT_CHANNELS, working, 4)? })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
    }

    /// The whole frame as a crop region, so outputs use the crop convention.
    pub fn frame_affine(&self) -> CropAffine {
        let s = self.net.input;
        CropAffine { region: pixel_block(0, 0, s, s).expect("positive side"), out_size: s }
    }

    pub fn frame(&self) -> ImageSize {
        ImageSize::square(self.net.input)
    }

    pub fn to_points(&self, out: &[f64]) -> [LandmarkPoint; 2] {
        let a = self.frame_affine();
        let p = |i: usize, class| {
            let (x, y) = a.normalized_to_image(out[2 * i], out[2 * i + 1]);
            LandmarkPoint::new(x, y, class)
        };
        [p(0, LandmarkClass::OpticDisc), p(1, LandmarkClass::Fovea)]
    }

    pub fn predict(&self, store: &ParamStore, img: &Image) -> Result<[LandmarkPoint; 2]> {
        let out = self.net.predict(store, &[img])?;
        Ok(self.to_points(&out[0]))
    }
}
