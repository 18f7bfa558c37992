use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::ImageSize;

/// Interleaved row-major image with values in `[0, 1]`.
///
/// Pixel `(x, y)` has its centre at continuous coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("image must be at least 1x1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != width as usize * height as usize * channels as usize {
            return Err(Error::dim(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width as usize * height as usize * channels as usize,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data("pixel values must lie in [0, 1]"));
        }
        Ok(Image { width, height, channels, pixels })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: f32) -> Self {
        Image { width, height, channels, pixels: vec![value.clamp(0.0, 1.0); width as usize * height as usize * channels as usize] }
    }

    /// Builds an image from a per-pixel closure returning one value per channel.
    pub fn from_fn(width: u32, height: u32, channels: u8, mut f: impl FnMut(u32, u32, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels as usize {
                    pixels.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Image { width, height, channels, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: usize) -> f32 {
        self.pixels[(y as usize * self.width as usize + x as usize) * self.channels as usize + c]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: usize, v: f32) {
        let i = (y as usize * self.width as usize + x as usize) * self.channels as usize + c;
        self.pixels[i] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at continuous `(x, y)`. Out-of-image taps read as zero.
    pub fn sample_zero(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let tap = |ix: f64, iy: f64| -> f64 {
            if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
                0.0
            } else {
                self.get(ix as u32, iy as u32, c) as f64
            }
        };
        let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
        let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Luma plane (`0.299 R + 0.587 G + 0.114 B`), or the single channel.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect()
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, pixels }
    }

    /// Per-channel arithmetic means.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.channels as usize;
        let mut sums = vec![0.0f64; c];
        for px in self.pixels.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = (self.width as f64) * (self.height as f64);
        sums.iter().map(|s| s / n).collect()
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }
}

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// `(pixel − mean) / std` per channel, returned as a `[C×H×W]` tensor.
pub fn normalize(img: &Image, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = img.channels() as usize;
    if mean.len() != c || std.len() != c {
        return Err(Error::config(format!("normalisation needs {c} means and stds")));
    }
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::config("normalisation std must be positive"));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; c * w * h];
    for (i, px) in img.pixels().chunks_exact(c).enumerate() {
        for ch in 0..c {
            data[ch * w * h + i] = (px[ch] as f64 - mean[ch]) / std[ch];
        }
    }
    Tensor::new(&[c, h, w], data)
}
