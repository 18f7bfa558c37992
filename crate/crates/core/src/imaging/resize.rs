use super::image::Image;
use crate::error::{Error, Result};

/// Source sample positions and weights along one axis (align-corners=false).
fn axis_taps(src: u32, dst: u32) -> Vec<(u32, u32, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as u32;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with edge clamping.
pub fn resize_bilinear(img: &Image, out_w: u32, out_h: u32) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    let xs = axis_taps(img.width(), out_w);
    let ys = axis_taps(img.height(), out_h);
    let c = img.channels() as usize;
    let mut out = Image::filled(out_w, out_h, img.channels(), 0.0);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p00 = img.get(x0, y0, ch) as f64;
                let p10 = img.get(x1, y0, ch) as f64;
                let p01 = img.get(x0, y1, ch) as f64;
                let p11 = img.get(x1, y1, ch) as f64;
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                out.set(ox as u32, oy as u32, ch, (top + (bottom - top) * fy) as f32);
            }
        }
    }
    Ok(out)
}
