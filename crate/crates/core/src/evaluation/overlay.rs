use crate::geometry::{Annotation, BBox, Detection, LandmarkPoint};
use crate::imaging::Image;

pub const RED: [f32; 3] = [1.0, 0.0, 0.0];
pub const GREEN: [f32; 3] = [0.0, 1.0, 0.0];
/// Stroke width in pixels.
pub const STROKE: i64 = 3;
/// Half-length of a point marker's arms.
const ARM: i64 = 6;

fn paint(img: &mut Image, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    for (c, v) in color.iter().enumerate() {
        img.set(x as u32, y as u32, c, *v);
    }
}

fn fill(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, color: [f32; 3]) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            paint(img, x, y, color);
        }
    }
}

/// Rectangle outline with a `STROKE`-wide band centred on each edge.
pub fn draw_box(img: &mut Image, b: &BBox, color: [f32; 3]) {
    let r = STROKE / 2;
    let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
    let (x1, y1) = (b.x_max.round() as i64, b.y_max.round() as i64);
    fill(img, x0 - r, y0 - r, x1 + r, y0 + r, color);
    fill(img, x0 - r, y1 - r, x1 + r, y1 + r, color);
    fill(img, x0 - r, y0 - r, x0 + r, y1 + r, color);
    fill(img, x1 - r, y0 - r, x1 + r, y1 + r, color);
}

/// Plus-shaped marker with `STROKE`-wide arms.
pub fn draw_point(img: &mut Image, p: &LandmarkPoint, color: [f32; 3]) {
    let r = STROKE / 2;
    let (x, y) = (p.x.round() as i64, p.y.round() as i64);
    fill(img, x - ARM, y - r, x + ARM, y + r, color);
    fill(img, x - r, y - ARM, x + r, y + ARM, color);
}

/// Ground truth in red, then predictions in green on top. `gt` and the
/// predictions must be in the image's own resolution.
pub fn render_overlay(img: &Image, gt: &Annotation, dets: &[Detection], points: &[LandmarkPoint]) -> Image {
    let mut out = img.to_rgb();
    for class in crate::geometry::LandmarkClass::ALL {
        if let Some(b) = gt.bbox(class) {
            draw_box(&mut out, b, RED);
        }
    }
    for p in gt.points() {
        draw_point(&mut out, p, RED);
    }
    for d in dets {
        draw_box(&mut out, &d.bbox, GREEN);
    }
    for p in points {
        draw_point(&mut out, p, GREEN);
    }
    out
}
