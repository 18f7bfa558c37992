// Scalar per-pixel CLAHE: every output pixel rebuilds the histograms of
// the tiles it blends, straight from the definition.

use fundus_core::imaging::ClaheParams;

fn span(i: u32, n: u32, len: u32) -> (u32, u32) {
    ((i * len) / n, ((i + 1) * len) / n)
}

fn center(i: u32, n: u32, len: u32) -> f64 {
    let (s, e) = span(i, n, len);
    (s as f64 + e as f64 - 1.0) / 2.0
}

fn tile_value(plane: &[f32], w: u32, h: u32, tx: u32, ty: u32, v: f32, p: &ClaheParams) -> f64 {
    let (x0, x1) = span(tx, p.tiles_x, w);
    let (y0, y1) = span(ty, p.tiles_y, h);
    let n = (x1 - x0) * (y1 - y0);
    if n == 0 {
        return v as f64;
    }
    let bin = |u: f32| ((u as f64 * p.bins as f64).floor() as usize).min(p.bins - 1);
    let mut counts = vec![0u32; p.bins];
    for y in y0..y1 {
        for x in x0..x1 {
            counts[bin(plane[(y * w + x) as usize])] += 1;
        }
    }
    let clip = p.clip_limit * n as f64;
    let excess: f64 = counts.iter().map(|&c| c as f64).filter(|&c| c > clip).fold(0.0, |a, c| a + (c - clip));
    let share = excess / p.bins as f64;
    let mut cdf = 0.0;
    for &c in &counts[..=bin(v)] {
        cdf += (c as f64).min(clip) + share;
    }
    cdf / n as f64
}

fn neighbours(pos: u32, n: u32, len: u32) -> (u32, u32, f64) {
    let x = pos as f64;
    let last = n - 1;
    if x <= center(0, n, len) {
        (0, 0, 0.0)
    } else if x >= center(last, n, len) {
        (last, last, 0.0)
    } else {
        let i = (0..last).rev().find(|&i| x >= center(i, n, len)).unwrap();
        let (a, b) = (center(i, n, len), center(i + 1, n, len));
        (i, i + 1, (x - a) / (b - a))
    }
}

pub fn clahe_reference(plane: &[f32], w: u32, h: u32, p: &ClaheParams) -> Vec<f32> {
    let mut out = Vec::with_capacity(plane.len());
    for y in 0..h {
        for x in 0..w {
            let v = plane[(y * w + x) as usize];
            let (ax, bx, wx) = neighbours(x, p.tiles_x, w);
            let (ay, by, wy) = neighbours(y, p.tiles_y, h);
            let t = |tx, ty| tile_value(plane, w, h, tx, ty, v, p);
            let top = (1.0 - wx) * t(ax, ay) + wx * t(bx, ay);
            let bottom = (1.0 - wx) * t(ax, by) + wx * t(bx, by);
            out.push(((1.0 - wy) * top + wy * bottom).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Plain histogram equalisation: the fraction of pixels in a bin at or below `v`'s.
pub fn global_he(plane: &[f32], bins: usize) -> Vec<f32> {
    let bin = |u: f32| ((u as f64 * bins as f64).floor() as usize).min(bins - 1);
    plane
        .iter()
        .map(|&v| {
            let below = plane.iter().filter(|&&u| bin(u) <= bin(v)).count();
            (below as f64 / plane.len() as f64) as f32
        })
        .collect()
}
