//! 8-bit magnitude image export (PGM and PNG) with window/level mapping.

use igrog::{ComplexArray, Error, Result};
use std::io::Write;
use std::path::Path;

/// Map magnitudes to 8-bit gray with the given window/level; defaults to the
/// 99th-percentile auto window.
pub fn to_gray(img: &ComplexArray, window: Option<f64>, level: Option<f64>) -> (Vec<u8>, usize, usize) {
    assert_eq!(img.ndim(), 2, "image export expects a 2D array");
    let h = img.shape()[0];
    let w = img.shape()[1];
    let mags: Vec<f64> = img.iter().map(|v| v.norm()).collect();
    let auto_window = {
        let mut sorted = mags.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = sorted[((sorted.len() - 1) as f64 * 0.99) as usize];
        if p99 > 0.0 {
            p99
        } else {
            1.0
        }
    };
    let window = window.unwrap_or(auto_window);
    let level = level.unwrap_or(window / 2.0);
    let lo = level - window / 2.0;
    let gray: Vec<u8> = mags
        .iter()
        .map(|&m| (((m - lo) / window).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (gray, w, h)
}

pub fn write_pgm(path: &Path, img: &ComplexArray, window: Option<f64>, level: Option<f64>) -> Result<()> {
    let (gray, w, h) = to_gray(img, window, level);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&gray)?;
    Ok(())
}

pub fn write_png(path: &Path, img: &ComplexArray, window: Option<f64>, level: Option<f64>) -> Result<()> {
    let (gray, w, h) = to_gray(img, window, level);
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    writer
        .write_image_data(&gray)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}

/// Real-valued map export (g-factor and similar).
pub fn write_png_real(path: &Path, map: &ndarray::ArrayD<f64>, max: Option<f64>) -> Result<()> {
    assert_eq!(map.ndim(), 2);
    let h = map.shape()[0];
    let w = map.shape()[1];
    let peak = max.unwrap_or_else(|| map.iter().cloned().fold(0.0f64, f64::max)).max(1e-12);
    let gray: Vec<u8> = map.iter().map(|&v| ((v / peak).clamp(0.0, 1.0) * 255.0) as u8).collect();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    writer
        .write_image_data(&gray)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}
