use crate::error::{Error, Result};
use crate::geometry::{encode_box, iou, BBox, BoxPriors, ImageSize, LandmarkClass};

/// Box deltas are regressed multiplied by these factors.
pub const DELTA_SCALE: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Anchors on a regular grid; anchor `t · cells + cell` is template `t`
/// centred on `cell` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub stride: u32,
    pub size: ImageSize,
    /// `(width, height)` per template.
    pub templates: Vec<(f64, f64)>,
    anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn new(size: ImageSize, stride: u32, templates: &[(f64, f64)]) -> Result<Self> {
        if stride == 0 || !size.width.is_multiple_of(stride) || !size.height.is_multiple_of(stride) {
            return Err(Error::config(format!("{size} input is not a multiple of stride {stride}")));
        }
        if templates.is_empty() || templates.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::config("anchor templates must have positive sizes"));
        }
        let (gx, gy) = (size.width / stride, size.height / stride);
        let s = stride as f64;
        let mut anchors = Vec::with_capacity(templates.len() * (gx * gy) as usize);
        for &(w, h) in templates {
            for j in 0..gy {
                for i in 0..gx {
                    let cx = i as f64 * s + (s - 1.0) / 2.0;
                    let cy = j as f64 * s + (s - 1.0) / 2.0;
                    anchors.push(BBox::from_center(cx, cy, w, h)?);
                }
            }
        }
        Ok(AnchorGrid { stride, size, templates: templates.to_vec(), anchors })
    }

    /// One template per class, sized like that class's prior box.
    pub fn for_priors(size: ImageSize, stride: u32, priors: &BoxPriors) -> Result<Self> {
        let t: Vec<(f64, f64)> = LandmarkClass::ALL
            .iter()
            .map(|&c| {
                let (hx, hy) = priors.half_size(c, size);
                (2.0 * hx, 2.0 * hy)
            })
            .collect();
        Self::new(size, stride, &t)
    }

    pub fn cells_x(&self) -> usize {
        (self.size.width / self.stride) as usize
    }

    pub fn cells_y(&self) -> usize {
        (self.size.height / self.stride) as usize
    }

    pub fn cells(&self) -> usize {
        self.cells_x() * self.cells_y()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn template_of(&self, anchor: usize) -> usize {
        anchor / self.cells()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Negative,
    Ignored,
    /// Matched to ground truth `gt`; `label` is the class label (1 or 2).
    Positive {
        gt: usize,
        label: usize,
        deltas: [f64; 4],
    },
}

impl AnchorLabel {
    /// Class target for the cross-entropy (0 = background).
    pub fn class_target(&self) -> usize {
        match self {
            AnchorLabel::Positive { label, .. } => *label,
            _ => 0,
        }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

pub fn scaled_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    let d = encode_box(anchor, target)?;
    Ok([d[0] * DELTA_SCALE[0], d[1] * DELTA_SCALE[1], d[2] * DELTA_SCALE[2], d[3] * DELTA_SCALE[3]])
}

pub fn unscaled_deltas(d: &[f64]) -> [f64; 4] {
    [d[0] / DELTA_SCALE[0], d[1] / DELTA_SCALE[1], d[2] / DELTA_SCALE[2], d[3] / DELTA_SCALE[3]]
}

/// First index of the maximum; NaN-free inputs assumed.
fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    values.enumerate().fold(None, |best, (i, v)| match best {
        Some((_, b)) if b >= v => best,
        _ => Some((i, v)),
    })
}

/// Positive at IoU ≥ 0.5 with the best-overlapping ground truth, negative
/// below 0.3, ignored in between; then every ground truth claims its best
/// anchor (later ground truths win shared anchors).
pub fn assign_targets(anchors: &[BBox], gts: &[(LandmarkClass, BBox)]) -> Result<Vec<AnchorLabel>> {
    let mut out = Vec::with_capacity(anchors.len());
    for a in anchors {
        let label = match argmax(gts.iter().map(|(_, g)| iou(a, g))) {
            Some((g, v)) if v >= POSITIVE_IOU => {
                AnchorLabel::Positive { gt: g, label: gts[g].0.label(), deltas: scaled_deltas(a, &gts[g].1)? }
            }
            Some((_, v)) if v >= NEGATIVE_IOU => AnchorLabel::Ignored,
            _ => AnchorLabel::Negative,
        };
        out.push(label);
    }
    for (g, (class, b)) in gts.iter().enumerate() {
        if let Some((a, _)) = argmax(anchors.iter().map(|a| iou(a, b))) {
            out[a] = AnchorLabel::Positive { gt: g, label: class.label(), deltas: scaled_deltas(&anchors[a], b)? };
        }
    }
    Ok(out)
}
