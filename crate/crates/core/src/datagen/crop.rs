use serde::{Deserialize, Serialize};

use super::{BBox, Frame};
use crate::error::{invalid, Result};

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;

/// Square frame region resampled to `out x out` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Crop pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox::new(
            (b.cx - self.cx) * s + self.out as f64 / 2.0,
            (b.cy - self.cy) * s + self.out as f64 / 2.0,
            b.w * s,
            b.h * s,
        )
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox::new(
            (b.cx - self.out as f64 / 2.0) / s + self.cx,
            (b.cy - self.out as f64 / 2.0) / s + self.cy,
            b.w / s,
            b.h / s,
        )
    }
}

/// Random perturbation of training crops: the center moves by up to
/// `center * sqrt(w h)` per axis and the side scales by `exp(U(-scale, scale))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub center: f64,
    pub scale: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { center: 0.0, scale: 0.0 };
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            center: 1.0,
            scale: 0.15,
        }
    }
}

/// Bilinear resample of the square `side` region centered at `(cx, cy)`;
/// samples outside the frame read the frame's channel mean.
pub fn crop_region(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Result<(Frame, CropWindow)> {
    if !(side > 0.0 && side.is_finite()) || out == 0 {
        return invalid(format!("crop side {side} / output {out} invalid"));
    }
    let mean = frame.channel_mean();
    let (fw, fh) = (frame.width as isize, frame.height as isize);
    let fetch = |x: isize, y: isize, c: usize| {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            mean[c]
        } else {
            frame.get(x as usize, y as usize, c)
        }
    };
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let step = side / out as f64;
    let mut pixels = Vec::with_capacity(3 * out * out);
    for i in 0..out {
        let ys = y0 + (i as f64 + 0.5) * step - 0.5;
        let yf = ys.floor();
        let ty = ys - yf;
        let yi = yf as isize;
        for j in 0..out {
            let xs = x0 + (j as f64 + 0.5) * step - 0.5;
            let xf = xs.floor();
            let tx = xs - xf;
            let xi = xf as isize;
            for c in 0..3 {
                let top = fetch(xi, yi, c) * (1.0 - tx) + fetch(xi + 1, yi, c) * tx;
                let bottom = fetch(xi, yi + 1, c) * (1.0 - tx) + fetch(xi + 1, yi + 1, c) * tx;
                pixels.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    let crop = Frame::new(out, out, pixels, frame.domain_tag)?;
    Ok((crop, CropWindow { cx, cy, side, out }))
}

fn crop_around(frame: &Frame, bbox: &BBox, factor: f64, out: usize) -> Result<(Frame, CropWindow)> {
    bbox.check_in_frame(frame.width, frame.height)?;
    crop_region(frame, bbox.cx, bbox.cy, factor * bbox.area().sqrt(), out)
}

/// Square crop of side `2 sqrt(w h)` around the box.
pub fn crop_template(frame: &Frame, bbox: &BBox, out: usize) -> Result<(Frame, CropWindow)> {
    crop_around(frame, bbox, TEMPLATE_FACTOR, out)
}

/// Square crop of side `4 sqrt(w h)` around the box.
pub fn crop_search(frame: &Frame, bbox: &BBox, out: usize) -> Result<(Frame, CropWindow)> {
    crop_around(frame, bbox, SEARCH_FACTOR, out)
}
