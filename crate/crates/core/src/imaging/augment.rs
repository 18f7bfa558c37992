use rand::Rng;

use super::image::Image;
use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox, LandmarkPoint};

/// `dst = A · (x, y, 1)ᵀ` with `A` a 2×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = AffineTransform { m };
        if t.det().abs() <= 1e-9 {
            return Err(Error::geometry(format!("affine map is singular (det {})", t.det())));
        }
        Ok(t)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform { m: [[1.0, 0.0, dx], [0.0, 1.0, dy]] }
    }

    /// Mirror about the vertical centre line of a `width`-pixel image.
    pub fn hflip(width: u32) -> Self {
        AffineTransform { m: [[-1.0, 0.0, (width - 1) as f64], [0.0, 1.0, 0.0]] }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let d = self.det();
        if d.abs() <= 1e-9 {
            return Err(Error::geometry("affine map is singular"));
        }
        let [[a, b, tx], [c, e, ty]] = self.m;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Ok(AffineTransform { m: [[ia, ib, -(ia * tx + ib * ty)], [ic, ie, -(ic * tx + ie * ty)]] })
    }

    pub fn apply_point(&self, p: &LandmarkPoint) -> LandmarkPoint {
        let (x, y) = self.apply(p.x, p.y);
        LandmarkPoint::new(x, y, p.class)
    }

    /// Axis-aligned hull of the four transformed corners.
    pub fn apply_box(&self, b: &BBox) -> BBox {
        let corners = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)];
        let pts: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| self.apply(x, y)).collect();
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
        BBox {
            x_min: fold(f64::min, f64::INFINITY, |p| p.0),
            y_min: fold(f64::min, f64::INFINITY, |p| p.1),
            x_max: fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            y_max: fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        }
    }

    pub fn apply_annotation(&self, ann: &Annotation) -> Annotation {
        Annotation {
            optic_disc: ann.optic_disc.map(|p| self.apply_point(&p)),
            fovea: ann.fovea.map(|p| self.apply_point(&p)),
            optic_disc_box: ann.optic_disc_box.map(|b| self.apply_box(&b)),
            fovea_box: ann.fovea_box.map(|b| self.apply_box(&b)),
            ..ann.clone()
        }
    }
}

/// Inverse-mapped bilinear warp; destination pixels that land outside the
/// source read as zero.
pub fn warp_affine(img: &Image, t: &AffineTransform) -> Result<Image> {
    let inv = t.inverse()?;
    let mut out = Image::filled(img.width(), img.height(), img.channels(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for c in 0..img.channels() as usize {
                out.set(x, y, c, img.sample_zero(sx, sy, c));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the corresponding side.
    pub translate: f64,
    pub shear_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub max_attempts: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { translate: 0.05, shear_deg: 5.0, scale_min: 0.9, scale_max: 1.1, flip_prob: 0.5, max_attempts: 10 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { translate: 0.0, shear_deg: 0.0, scale_min: 1.0, scale_max: 1.0, flip_prob: 0.0, max_attempts: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.translate >= 0.0
            && (0.0..89.0).contains(&self.shear_deg)
            && self.scale_min > 0.0
            && self.scale_max >= self.scale_min
            && (0.0..=1.0).contains(&self.flip_prob);
        if !ok {
            return Err(Error::config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Draws one transform about the image centre: flip, then shear, then scale,
/// then translate.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32, cfg: &AugmentConfig) -> AffineTransform {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let shear = symmetric(rng, cfg.shear_deg).to_radians().tan();
    let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let tx = symmetric(rng, cfg.translate) * width as f64;
    let ty = symmetric(rng, cfg.translate) * height as f64;
    let f = if flip { -1.0 } else { 1.0 };
    // Linear part S · H · F with H = [[1, shear], [0, 1]].
    let (a, b, c, d) = (scale * f, scale * shear, 0.0, scale);
    AffineTransform { m: [[a, b, cx + tx - (a * cx + b * cy)], [c, d, cy + ty - (c * cx + d * cy)]] }
}

/// Random augmentation that keeps every landmark inside the frame, falling
/// back to the identity after `max_attempts` rejected draws.
pub fn random_augment<R: Rng + ?Sized>(
    img: &Image,
    ann: &Annotation,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Image, Annotation, AffineTransform)> {
    for _ in 0..cfg.max_attempts {
        let t = sample_transform(rng, img.width(), img.height(), cfg);
        let moved = t.apply_annotation(ann);
        if moved.points().all(|p| img.size().contains(p.x, p.y)) {
            if t == AffineTransform::IDENTITY {
                return Ok((img.clone(), moved, t));
            }
            return Ok((warp_affine(img, &t)?, moved, t));
        }
    }
    Ok((img.clone(), ann.clone(), AffineTransform::IDENTITY))
}
