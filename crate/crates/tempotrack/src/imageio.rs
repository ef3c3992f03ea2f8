//! 8-bit RGB image buffers, PNG round-trips, box overlays and tiny line
//! plots for the metric curves.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::boxes::BBox;
use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB8.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for p in img.pixels.chunks_exact_mut(3) {
            p.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0f64; 3];
        for p in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += p[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| ModelError::io(path.display().to_string(), e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ModelError::load(path.display().to_string(), e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| ModelError::load(path.display().to_string(), e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path.display().to_string(), e))?;
        RgbImage::decode_png(&bytes).map_err(|e| ModelError::load(path.display().to_string(), e))
    }

    /// Decode PNG bytes to RGB8. Never panics on malformed input.
    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        let decoder = png::Decoder::new(bytes);
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (width, height) = (info.width as usize, info.height as usize);
        if width == 0 || height == 0 || width * height > (1 << 26) {
            return Err(format!("unreasonable image dimensions {width}x{height}"));
        }
        let pixels = match info.color_type {
            png::ColorType::Rgb => buf
                .get(..width * height * 3)
                .ok_or("truncated rgb payload")?
                .to_vec(),
            png::ColorType::Rgba => buf
                .get(..width * height * 4)
                .ok_or("truncated rgba payload")?
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf
                .get(..width * height)
                .ok_or("truncated grayscale payload")?
                .iter()
                .flat_map(|&v| [v, v, v])
                .collect(),
            other => return Err(format!("unsupported png color type {other:?}")),
        };
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }
}

/// Draw a 1-px rectangle outline (pixel coordinates, center-size box).
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (x, y, w, h) = b.to_xywh();
    let x0 = x.round().max(0.0) as usize;
    let y0 = y.round().max(0.0) as usize;
    let x1 = ((x + w).round() as usize).min(img.width.saturating_sub(1));
    let y1 = ((y + h).round() as usize).min(img.height.saturating_sub(1));
    for xx in x0..=x1.min(img.width.saturating_sub(1)) {
        img.put(xx, y0, color);
        img.put(xx, y1, color);
    }
    for yy in y0..=y1.min(img.height.saturating_sub(1)) {
        img.put(x0, yy, color);
        img.put(x1, yy, color);
    }
}

/// Render a simple curve plot (x in [0, x_max], y in [0, 1]) to an image.
pub fn render_curve(points: &[(f64, f64)], x_max: f64, title_color: [u8; 3]) -> RgbImage {
    let (w, h, margin) = (400usize, 300usize, 30usize);
    let mut img = RgbImage::filled(w, h, [255, 255, 255]);
    // axes
    for x in margin..w - margin {
        img.put(x, h - margin, [0, 0, 0]);
    }
    for y in margin..h - margin {
        img.put(margin, y, [0, 0, 0]);
    }
    let to_px = |x: f64, y: f64| {
        let px = margin as f64 + (x / x_max) * (w - 2 * margin) as f64;
        let py = (h - margin) as f64 - y.clamp(0.0, 1.0) * (h - 2 * margin) as f64;
        (px, py)
    };
    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0].0, pair[0].1);
        let (x1, y1) = to_px(pair[1].0, pair[1].1);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            img.put(
                (x0 + (x1 - x0) * t) as usize,
                (y0 + (y1 - y0) * t) as usize,
                title_color,
            );
        }
    }
    img
}
