use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use super::image::Image;
use crate::error::{Error, Result};

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: e.to_string() }
}

/// Reads an 8-bit PNG or PPM, keeping grayscale images single-channel.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynamic = image::ImageReader::open(path)
        .map_err(|e| image_error(path, e))?
        .with_guessed_format()
        .map_err(|e| image_error(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    let (width, height) = (dynamic.width(), dynamic.height());
    match dynamic {
        DynamicImage::ImageLuma8(g) => Image::new(width, height, 1, g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        other => {
            let rgb = other.to_rgb8();
            Image::new(width, height, 3, rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_dynamic(img: &Image) -> Result<DynamicImage> {
    let raw: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width(), img.height());
    Ok(if img.channels() == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).ok_or_else(|| Error::dim("pixel buffer size mismatch"))?)
    } else {
        let buf: RgbImage = ImageBuffer::from_raw(w, h, raw).ok_or_else(|| Error::dim("pixel buffer size mismatch"))?;
        DynamicImage::ImageRgb8(buf)
    })
}

/// Writes an 8-bit image; the format follows the extension (`.png`, `.ppm`/`.pgm`).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("ppm") | Some("pgm") | Some("pnm") => image::ImageFormat::Pnm,
        _ => return Err(image_error(path, "unsupported image extension (use .png or .ppm)")),
    };
    to_dynamic(img)?.save_with_format(path, format).map_err(|e| image_error(path, e))
}
