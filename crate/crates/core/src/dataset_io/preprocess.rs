use crate::error::Result;
use crate::geometry::{Annotation, BoxPriors, ImageSize};
use crate::imaging::{clahe, load_image, resize_bilinear, ClaheParams, Image};

use super::records::DatasetRecord;

/// Resize to the working resolution, then CLAHE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub working: ImageSize,
    pub clahe: ClaheParams,
    pub priors: BoxPriors,
}

/// A preprocessed image with its ground truth in working coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingSample {
    pub image: Image,
    pub annotation: Annotation,
    /// Ground truth as loaded, in native pixels.
    pub native: Annotation,
}

impl Preprocess {
    pub fn image(&self, img: &Image) -> Result<Image> {
        let rgb = img.to_rgb();
        let small = if rgb.size() == self.working { rgb } else { resize_bilinear(&rgb, self.working.width, self.working.height)? };
        clahe(&small, &self.clahe)
    }

    pub fn annotation(&self, native: &Annotation) -> Result<Annotation> {
        native.rescaled(self.working).with_prior_boxes(&self.priors)
    }

    pub fn sample(&self, img: &Image, native: &Annotation) -> Result<WorkingSample> {
        Ok(WorkingSample { image: self.image(img)?, annotation: self.annotation(native)?, native: native.clone() })
    }

    pub fn record(&self, rec: &DatasetRecord) -> Result<WorkingSample> {
        self.sample(&load_image(&rec.image_path)?, &rec.annotation)
    }

    pub fn records(&self, recs: &[DatasetRecord]) -> Result<Vec<WorkingSample>> {
        recs.iter().map(|r| self.record(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{LandmarkClass, LandmarkPoint};

    #[test]
    fn working_annotation_matches_rescaled_priors() {
        let pp = Preprocess { working: ImageSize::square(128), clahe: ClaheParams::default(), priors: BoxPriors::default() };
        let mut a = Annotation::new("a", ImageSize::new(192, 128));
        a.set_point(LandmarkPoint::new(96.0, 64.0, LandmarkClass::OpticDisc));
        let native = a.with_prior_boxes(&pp.priors).unwrap();
        let s = pp.sample(&Image::filled(192, 128, 1, 0.3), &native).unwrap();
        assert_eq!((s.image.width(), s.image.height(), s.image.channels()), (128, 128, 3));
        let b = s.annotation.optic_disc_box.unwrap();
        assert!((b.width() - 24.0).abs() < 1e-12 && (b.height() - 24.0).abs() < 1e-12);
        let back = native.rescaled(pp.working).optic_disc_box.unwrap();
        assert!((back.x_min - b.x_min).abs() < 1e-12);
    }
}
