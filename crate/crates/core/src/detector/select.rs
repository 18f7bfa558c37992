use crate::geometry::{center_to_box, BoxPriors, Detection, ImageSize, LandmarkClass, LandmarkPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalSource {
    Detected,
    /// No surviving detection; best raw anchor for the class.
    RawAnchor,
    /// Nothing at all; a prior-sized box at the image centre.
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalDetection {
    pub det: Detection,
    pub source: FinalSource,
}

impl FinalDetection {
    pub fn is_fallback(&self) -> bool {
        self.source != FinalSource::Detected
    }
}

fn best(dets: &[Detection], class: LandmarkClass) -> Option<Detection> {
    // First of equal scores wins.
    dets.iter().filter(|d| d.class == class).fold(None, |b: Option<Detection>, d| match b {
        Some(b) if b.score >= d.score => Some(b),
        _ => Some(*d),
    })
}

/// Exactly one box per class, in `LandmarkClass::ALL` order.
pub fn select_final(dets: &[Detection], raw: &[Detection], frame: ImageSize, priors: &BoxPriors) -> [FinalDetection; 2] {
    LandmarkClass::ALL.map(|class| {
        if let Some(det) = best(dets, class) {
            return FinalDetection { det, source: FinalSource::Detected };
        }
        if let Some(det) = best(raw, class) {
            return FinalDetection { det, source: FinalSource::RawAnchor };
        }
        let (cx, cy) = ((frame.width as f64 - 1.0) / 2.0, (frame.height as f64 - 1.0) / 2.0);
        let bbox = center_to_box(&LandmarkPoint::new(cx, cy, class), frame, priors).expect("centre is inside the frame");
        FinalDetection { det: Detection { class, score: 0.0, bbox }, source: FinalSource::Default }
    })
}
