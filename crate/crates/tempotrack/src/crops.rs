//! Crop geometry: square context windows around a box, bilinear resampling
//! to the model input sides, and the exact inverse mapping back to image
//! coordinates.

use tempotrack_tensor::{Scalar, Tensor};

use crate::boxes::BBox;
use crate::error::{ModelError, Result};
use crate::imageio::RgbImage;

/// Context area multipliers relative to the target box area.
#[derive(Clone, Copy, Debug)]
pub struct CropSpec {
    pub area_factor_template: f64,
    pub area_factor_search: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            area_factor_template: 2.0,
            area_factor_search: 4.0,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.area_factor_template <= 0.0 || self.area_factor_search <= self.area_factor_template {
            return Err(ModelError::Config(format!(
                "crop factors must satisfy 0 < template ({}) < search ({})",
                self.area_factor_template, self.area_factor_search
            )));
        }
        Ok(())
    }
}

/// Square source window in image pixels. Knows how to map boxes between
/// normalized crop coordinates and image coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropWindow {
    /// Window centered on the box with side sqrt(area_factor * w * h).
    pub fn around(b: &BBox, area_factor: f64) -> Result<Self> {
        b.validate().map_err(|_| {
            ModelError::Input(format!("cannot crop around degenerate box ({}, {})", b.w, b.h))
        })?;
        Ok(CropWindow {
            cx: b.cx,
            cy: b.cy,
            side: (area_factor * b.w * b.h).sqrt(),
        })
    }

    pub fn left(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// Normalized-crop box -> image pixels.
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            self.left() + b.cx * self.side,
            self.top() + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Image-pixel box -> normalized crop coordinates.
    pub fn from_image(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.left()) / self.side,
            (b.cy - self.top()) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }
}

pub struct Crop<F: Scalar> {
    /// `[3, out_side, out_side]`, values in [0, 1].
    pub tensor: Tensor<F>,
    pub window: CropWindow,
    /// True when any sample fell outside the frame and was mean-padded.
    pub padded: bool,
}

/// Bilinear crop-and-resize. Out-of-frame samples take the per-channel frame
/// mean.
pub fn crop_and_resize<F: Scalar>(img: &RgbImage, window: &CropWindow, out_side: usize) -> Result<Crop<F>> {
    if window.side <= 0.0 {
        return Err(ModelError::Input(format!("empty crop window (side {})", window.side)));
    }
    let means = img.channel_means();
    let scale = window.side / out_side as f64;
    let mut data = vec![F::ZERO; 3 * out_side * out_side];
    let mut padded = false;
    for oy in 0..out_side {
        for ox in 0..out_side {
            // sample position in continuous pixel-index space
            let sx = window.left() + (ox as f64 + 0.5) * scale - 0.5;
            let sy = window.top() + (oy as f64 + 0.5) * scale - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = [0f64; 3];
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let w = wx * wy;
                    if w == 0.0 {
                        continue;
                    }
                    let xi = x0 + dx;
                    let yi = y0 + dy;
                    let sample = if xi >= 0.0 && yi >= 0.0 && (xi as usize) < img.width && (yi as usize) < img.height {
                        let p = img.get(xi as usize, yi as usize);
                        [p[0] as f64, p[1] as f64, p[2] as f64]
                    } else {
                        padded = true;
                        means
                    };
                    for c in 0..3 {
                        acc[c] += w * sample[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * out_side * out_side + oy * out_side + ox] = F::from_f64(acc[c] / 255.0);
            }
        }
    }
    Ok(Crop {
        tensor: Tensor::new(vec![3, out_side, out_side], data)?,
        window: *window,
        padded,
    })
}

/// Identical geometry applied to an aligned RGB/TIR pair.
pub fn crop_pair<F: Scalar>(
    rgb: &RgbImage,
    tir: &RgbImage,
    window: &CropWindow,
    out_side: usize,
) -> Result<(Crop<F>, Crop<F>)> {
    Ok((
        crop_and_resize(rgb, window, out_side)?,
        crop_and_resize(tir, window, out_side)?,
    ))
}
