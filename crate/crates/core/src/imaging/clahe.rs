use super::image::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Per-bin ceiling as a fraction of the tile's pixel count.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles_x: 8, tiles_y: 8, clip_limit: 0.01, bins: 256 }
    }
}

#[inline]
pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64).floor() as usize).min(bins - 1)
}

/// Tile `i` of `n` along an axis of length `len` spans `[start, end)`.
#[inline]
pub(crate) fn tile_span(i: u32, n: u32, len: u32) -> (u32, u32) {
    (((i as u64 * len as u64) / n as u64) as u32, (((i + 1) as u64 * len as u64) / n as u64) as u32)
}

#[inline]
pub(crate) fn tile_center(i: u32, n: u32, len: u32) -> f64 {
    let (s, e) = tile_span(i, n, len);
    (s as f64 + e as f64 - 1.0) / 2.0
}

/// Clipped, redistributed CDF of a histogram divided by the pixel count.
pub(crate) fn clipped_cdf(hist: &[u32], n: u32, clip_limit: f64) -> Option<Vec<f64>> {
    if n == 0 {
        return None;
    }
    let bins = hist.len();
    let clip = clip_limit * n as f64;
    let mut excess = 0.0;
    for &h in hist {
        if h as f64 > clip {
            excess += h as f64 - clip;
        }
    }
    let share = excess / bins as f64;
    let mut acc = 0.0;
    let mut map = Vec::with_capacity(bins);
    for &h in hist {
        acc += (h as f64).min(clip) + share;
        map.push(acc / n as f64);
    }
    Some(map)
}

/// Neighbouring tiles and blend weight for a pixel coordinate along one axis.
#[inline]
pub(crate) fn blend_axis(p: u32, n: u32, len: u32) -> (u32, u32, f64) {
    let x = p as f64;
    if x <= tile_center(0, n, len) {
        return (0, 0, 0.0);
    }
    if x >= tile_center(n - 1, n, len) {
        return (n - 1, n - 1, 0.0);
    }
    let mut i = 0;
    while x >= tile_center(i + 1, n, len) {
        i += 1;
    }
    let (c0, c1) = (tile_center(i, n, len), tile_center(i + 1, n, len));
    (i, i + 1, (x - c0) / (c1 - c0))
}

#[inline]
pub(crate) fn apply_map(map: &Option<Vec<f64>>, v: f32, bins: usize) -> f64 {
    match map {
        Some(m) => m[bin_of(v, bins)],
        None => v as f64,
    }
}

#[inline]
pub(crate) fn bilerp(m00: f64, m10: f64, m01: f64, m11: f64, wx: f64, wy: f64) -> f64 {
    (1.0 - wy) * ((1.0 - wx) * m00 + wx * m10) + wy * ((1.0 - wx) * m01 + wx * m11)
}

/// Contrast-limited adaptive equalisation of a single plane.
pub fn clahe_plane(plane: &[f32], width: u32, height: u32, p: &ClaheParams) -> Result<Vec<f32>> {
    if p.tiles_x == 0 || p.tiles_y == 0 || p.bins == 0 {
        return Err(Error::config("CLAHE needs at least one tile and one bin"));
    }
    if width < p.tiles_x || height < p.tiles_y {
        return Err(Error::dim(format!("{width}x{height} image is too small for a {}x{} tile grid", p.tiles_x, p.tiles_y)));
    }
    if !(p.clip_limit > 0.0) {
        return Err(Error::config("CLAHE clip limit must be positive"));
    }
    let mut maps = Vec::with_capacity((p.tiles_x * p.tiles_y) as usize);
    for ty in 0..p.tiles_y {
        let (y0, y1) = tile_span(ty, p.tiles_y, height);
        for tx in 0..p.tiles_x {
            let (x0, x1) = tile_span(tx, p.tiles_x, width);
            let mut hist = vec![0u32; p.bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(plane[(y * width + x) as usize], p.bins)] += 1;
                }
            }
            maps.push(clipped_cdf(&hist, (x1 - x0) * (y1 - y0), p.clip_limit));
        }
    }
    let xs: Vec<_> = (0..width).map(|x| blend_axis(x, p.tiles_x, width)).collect();
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        let (ty0, ty1, wy) = blend_axis(y, p.tiles_y, height);
        for x in 0..width {
            let (tx0, tx1, wx) = xs[x as usize];
            let v = plane[(y * width + x) as usize];
            let m = |tx: u32, ty: u32| apply_map(&maps[(ty * p.tiles_x + tx) as usize], v, p.bins);
            let r = bilerp(m(tx0, ty0), m(tx1, ty0), m(tx0, ty1), m(tx1, ty1), wx, wy);
            out[(y * width + x) as usize] = r.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// CLAHE on grayscale images, or on the luma of RGB images with chroma kept
/// by scaling each channel by the luma gain.
pub fn clahe(img: &Image, p: &ClaheParams) -> Result<Image> {
    let l = img.luma();
    let eq = clahe_plane(&l, img.width(), img.height(), p)?;
    if img.channels() == 1 {
        return Image::new(img.width(), img.height(), 1, eq);
    }
    let mut out = img.clone();
    for (i, px) in out.pixels_mut().chunks_exact_mut(3).enumerate() {
        let (before, after) = (l[i], eq[i]);
        if before > 0.0 {
            let gain = after / before;
            for v in px.iter_mut() {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        } else {
            px.fill(after);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::luma;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: u32, h: u32, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..w * h).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(32, 24, 1, 0.3);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| v == first));
    }

    fn global_he(plane: &[f32], bins: usize) -> Vec<f32> {
        plane
            .iter()
            .map(|&v| {
                let below = plane.iter().filter(|&&u| bin_of(u, bins) <= bin_of(v, bins)).count();
                (below as f64 / plane.len() as f64) as f32
            })
            .collect()
    }

    #[test]
    fn single_tile_without_clipping_is_global_he() {
        let plane = random_plane(20, 13, 3);
        let p = ClaheParams { tiles_x: 1, tiles_y: 1, clip_limit: 1.0, bins: 256 };
        assert_eq!(clahe_plane(&plane, 20, 13, &p).unwrap(), global_he(&plane, 256));
    }

    #[test]
    fn rgb_keeps_hue_ratios() {
        let img = Image::from_fn(16, 16, 3, |x, y, c| 0.1 + 0.02 * (x + y) as f32 * [1.0, 0.5, 0.25][c]);
        let out = clahe(&img, &ClaheParams { tiles_x: 2, tiles_y: 2, ..ClaheParams::default() }).unwrap();
        for i in 0..256 {
            let a = &img.pixels()[i * 3..i * 3 + 3];
            let b = &out.pixels()[i * 3..i * 3 + 3];
            if b.iter().all(|&v| v < 1.0) {
                assert!((b[1] / b[0] - a[1] / a[0]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn too_small_for_grid() {
        assert!(clahe_plane(&[0.0; 12], 4, 3, &ClaheParams::default()).is_err());
    }

    #[test]
    fn lumas_are_used_for_rgb() {
        let img = Image::from_fn(8, 8, 3, |x, _, _| x as f32 / 8.0);
        let gray = Image::new(8, 8, 1, img.luma()).unwrap();
        let p = ClaheParams { tiles_x: 2, tiles_y: 2, ..ClaheParams::default() };
        let a = clahe(&img, &p).unwrap();
        let b = clahe(&gray, &p).unwrap();
        for i in 0..64 {
            assert!((luma(a.pixels()[3 * i], a.pixels()[3 * i + 1], a.pixels()[3 * i + 2]) - b.pixels()[i]).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn output_in_unit_range_and_tile_maps_monotone(seed in any::<u64>(), tx in 1u32..4, ty in 1u32..4) {
            let plane = random_plane(12, 10, seed);
            let p = ClaheParams { tiles_x: tx, tiles_y: ty, clip_limit: 0.05, bins: 32 };
            let out = clahe_plane(&plane, 12, 10, &p).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut hist = vec![0u32; 32];
            for &v in &plane[..] { hist[bin_of(v, 32)] += 1; }
            let map = clipped_cdf(&hist, 120, 0.05).unwrap();
            prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
