use super::image::Image;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Maps crop coordinates back to the source image.
///
/// Crop pixel `u` covers `[u − 0.5, u + 0.5]` and its centre sits at
/// `x_min + (u + 0.5)·sx`; normalised crop coordinates `t ∈ [0, 1]` map to
/// `x_min + t·width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropAffine {
    pub region: BBox,
    pub out_size: u32,
}

impl CropAffine {
    pub fn step(&self) -> (f64, f64) {
        (self.region.width() / self.out_size as f64, self.region.height() / self.out_size as f64)
    }

    /// Source-image position of crop pixel centre `(u, v)`.
    pub fn pixel_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (sx, sy) = self.step();
        (self.region.x_min + (u + 0.5) * sx, self.region.y_min + (v + 0.5) * sy)
    }

    pub fn image_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.step();
        ((x - self.region.x_min) / sx - 0.5, (y - self.region.y_min) / sy - 0.5)
    }

    pub fn normalized_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (self.region.x_min + u * self.region.width(), self.region.y_min + v * self.region.height())
    }

    pub fn image_to_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.region.x_min) / self.region.width(), (y - self.region.y_min) / self.region.height())
    }
}

/// The box `[x_min, x_max]×[y_min, y_max]` sampled bilinearly onto an
/// `out_size²` grid; samples outside the image are zero.
pub fn crop(img: &Image, region: &BBox, out_size: u32) -> Result<(Image, CropAffine)> {
    if !(region.width() > 0.0 && region.height() > 0.0) || !region.area().is_finite() {
        return Err(Error::geometry(format!("crop box {region:?} has no area")));
    }
    if out_size == 0 {
        return Err(Error::dim("crop size must be positive"));
    }
    let affine = CropAffine { region: *region, out_size };
    let mut out = Image::filled(out_size, out_size, img.channels(), 0.0);
    for v in 0..out_size {
        for u in 0..out_size {
            let (x, y) = affine.pixel_to_image(u as f64, v as f64);
            for c in 0..img.channels() as usize {
                out.set(u, v, c, img.sample_zero(x, y, c));
            }
        }
    }
    Ok((out, affine))
}

/// The box whose crop reproduces pixels `[x0, x1) × [y0, y1)` exactly.
pub fn pixel_block(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<BBox> {
    BBox::new(x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 - 0.5, y1 as f64 - 0.5)
}
