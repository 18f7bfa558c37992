//! Boxes, landmark points, and the coordinate transforms between them.
//!
//! Coordinates are continuous pixel units with the origin at the centre of the
//! top-left pixel, x to the right and y downward.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LandmarkClass {
    OpticDisc,
    Fovea,
}

impl LandmarkClass {
    pub const ALL: [LandmarkClass; 2] = [LandmarkClass::OpticDisc, LandmarkClass::Fovea];

    /// Index in detector class outputs; 0 is background.
    pub fn label(self) -> usize {
        match self {
            LandmarkClass::OpticDisc => 1,
            LandmarkClass::Fovea => 2,
        }
    }

    pub fn from_label(label: usize) -> Option<Self> {
        match label {
            1 => Some(LandmarkClass::OpticDisc),
            2 => Some(LandmarkClass::Fovea),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LandmarkClass::OpticDisc => "optic_disc",
            LandmarkClass::Fovea => "fovea",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "optic_disc" | "od" => Some(LandmarkClass::OpticDisc),
            "fovea" | "fov" => Some(LandmarkClass::Fovea),
            _ => None,
        }
    }
}

impl fmt::Display for LandmarkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub const fn new(width: u32, height: u32) -> Self {
        ImageSize { width, height }
    }

    pub const fn square(side: u32) -> Self {
        ImageSize { width: side, height: side }
    }

    /// Whether `(x, y)` lies on the pixel-centre grid `[0, w−1] × [0, h−1]`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkPoint {
    pub x: f64,
    pub y: f64,
    pub class: LandmarkClass,
}

impl LandmarkPoint {
    pub fn new(x: f64, y: f64, class: LandmarkClass) -> Self {
        LandmarkPoint { x, y, class }
    }

    pub fn distance(&self, other: &LandmarkPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !(x_max > x_min && y_max > y_min) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::geometry(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clips to `[0, w−1] × [0, h−1]`. Returns `None` if nothing is left.
    pub fn clipped(&self, size: ImageSize) -> Option<BBox> {
        let (w, h) = ((size.width - 1) as f64, (size.height - 1) as f64);
        BBox::new(self.x_min.max(0.0), self.y_min.max(0.0), self.x_max.min(w), self.y_max.min(h)).ok()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox { x_min: self.x_min + dx, y_min: self.y_min + dy, x_max: self.x_max + dx, y_max: self.y_max + dy }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox { x_min: self.x_min * sx, y_min: self.y_min * sy, x_max: self.x_max * sx, y_max: self.y_max * sy }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Ground-truth box half-sizes, expressed at a 512-pixel working side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPriors {
    pub optic_disc_half: f64,
    pub fovea_half: f64,
}

impl Default for BoxPriors {
    fn default() -> Self {
        BoxPriors { optic_disc_half: 48.0, fovea_half: 40.0 }
    }
}

impl BoxPriors {
    pub const REFERENCE_SIDE: f64 = 512.0;

    /// Half-sizes `(x, y)` for a class at the given working size.
    pub fn half_size(&self, class: LandmarkClass, working: ImageSize) -> (f64, f64) {
        let base = match class {
            LandmarkClass::OpticDisc => self.optic_disc_half,
            LandmarkClass::Fovea => self.fovea_half,
        };
        (base * working.width as f64 / Self::REFERENCE_SIDE, base * working.height as f64 / Self::REFERENCE_SIDE)
    }
}

/// Square (at square working sizes) class-sized box around a landmark,
/// clipped to the image.
pub fn center_to_box(p: &LandmarkPoint, working: ImageSize, priors: &BoxPriors) -> Result<BBox> {
    if !p.x.is_finite() || !p.y.is_finite() || !working.contains(p.x, p.y) {
        return Err(Error::geometry(format!("point ({}, {}) outside {working} image", p.x, p.y)));
    }
    let (hx, hy) = priors.half_size(p.class, working);
    let raw = BBox { x_min: p.x - hx, y_min: p.y - hy, x_max: p.x + hx, y_max: p.y + hy };
    raw.clipped(working).ok_or_else(|| Error::geometry("box vanished after clipping"))
}

pub fn rescale_point(p: &LandmarkPoint, from: ImageSize, to: ImageSize) -> LandmarkPoint {
    LandmarkPoint { x: p.x * (to.width as f64 / from.width as f64), y: p.y * (to.height as f64 / from.height as f64), class: p.class }
}

pub fn rescale_box(b: &BBox, from: ImageSize, to: ImageSize) -> BBox {
    b.scaled(to.width as f64 / from.width as f64, to.height as f64 / from.height as f64)
}

/// Anchor-relative box parameterisation `(Δcx/w_a, Δcy/h_a, log w/w_a, log h/h_a)`.
pub fn encode_box(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::geometry(format!("anchor {anchor:?} has non-positive size")));
    }
    let (cxa, cya) = anchor.center();
    let (cx, cy) = target.center();
    Ok([(cx - cxa) / wa, (cy - cya) / ha, (target.width() / wa).ln(), (target.height() / ha).ln()])
}

pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::geometry(format!("anchor {anchor:?} has non-positive size")));
    }
    let (cxa, cya) = anchor.center();
    let cx = cxa + deltas[0] * wa;
    let cy = cya + deltas[1] * ha;
    let w = wa * deltas[2].exp();
    let h = ha * deltas[3].exp();
    BBox::from_center(cx, cy, w, h)
}

/// Guard inside the log for coincident centres.
pub const GEOMETRY_EPS: f64 = 1e-3;

/// Scale- and translation-invariant geometry of `m` relative to `n`.
pub fn relative_geometry(m: &BBox, n: &BBox) -> [f64; 4] {
    let (cxm, cym) = m.center();
    let (cxn, cyn) = n.center();
    let (wm, hm, wn, hn) = (m.width(), m.height(), n.width(), n.height());
    [((cxm - cxn).abs() / wn + GEOMETRY_EPS).ln(), ((cym - cyn).abs() / hn + GEOMETRY_EPS).ln(), (wm / wn).ln(), (hm / hn).ln()]
}

/// Ground truth for one image.
///
/// Coordinates are in the `frame` resolution; `native_size` is the resolution
/// of the source image on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub native_size: ImageSize,
    pub frame: ImageSize,
    pub optic_disc: Option<LandmarkPoint>,
    pub fovea: Option<LandmarkPoint>,
    pub optic_disc_box: Option<BBox>,
    pub fovea_box: Option<BBox>,
}

impl Annotation {
    pub fn new(image_id: impl Into<String>, native_size: ImageSize) -> Self {
        Annotation {
            image_id: image_id.into(),
            native_size,
            frame: native_size,
            optic_disc: None,
            fovea: None,
            optic_disc_box: None,
            fovea_box: None,
        }
    }

    pub fn point(&self, class: LandmarkClass) -> Option<&LandmarkPoint> {
        match class {
            LandmarkClass::OpticDisc => self.optic_disc.as_ref(),
            LandmarkClass::Fovea => self.fovea.as_ref(),
        }
    }

    pub fn bbox(&self, class: LandmarkClass) -> Option<&BBox> {
        match class {
            LandmarkClass::OpticDisc => self.optic_disc_box.as_ref(),
            LandmarkClass::Fovea => self.fovea_box.as_ref(),
        }
    }

    pub fn set_point(&mut self, p: LandmarkPoint) {
        match p.class {
            LandmarkClass::OpticDisc => self.optic_disc = Some(p),
            LandmarkClass::Fovea => self.fovea = Some(p),
        }
    }

    pub fn points(&self) -> impl Iterator<Item = &LandmarkPoint> {
        self.optic_disc.iter().chain(self.fovea.iter())
    }

    /// Regenerates both boxes from the points with [`center_to_box`].
    pub fn with_prior_boxes(mut self, priors: &BoxPriors) -> Result<Self> {
        self.optic_disc_box = self.optic_disc.map(|p| center_to_box(&p, self.frame, priors)).transpose()?;
        self.fovea_box = self.fovea.map(|p| center_to_box(&p, self.frame, priors)).transpose()?;
        Ok(self)
    }

    /// Same annotation expressed in another frame resolution.
    pub fn rescaled(&self, to: ImageSize) -> Annotation {
        let from = self.frame;
        Annotation {
            image_id: self.image_id.clone(),
            native_size: self.native_size,
            frame: to,
            optic_disc: self.optic_disc.map(|p| rescale_point(&p, from, to)),
            fovea: self.fovea.map(|p| rescale_point(&p, from, to)),
            optic_disc_box: self.optic_disc_box.map(|b| rescale_box(&b, from, to)),
            fovea_box: self.fovea_box.map(|b| rescale_box(&b, from, to)),
        }
    }

    /// Checks that every box contains its point.
    pub fn validate(&self) -> Result<()> {
        for class in LandmarkClass::ALL {
            if let (Some(p), Some(b)) = (self.point(class), self.bbox(class)) {
                if !b.contains(p.x, p.y) {
                    return Err(Error::geometry(format!("{class} box does not contain its point for {}", self.image_id)));
                }
            }
        }
        Ok(())
    }
}

/// One scored box from the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: LandmarkClass,
    pub score: f64,
    pub bbox: BBox,
}
