//! Synthetic tracking data: frames and boxes, procedural scenes, crops,
//! heatmap labels and ratio-controlled sampling.

mod crop;
mod labels;
pub(crate) mod sampler;
mod scene;

pub use crop::{crop_region, crop_search, crop_template, CropWindow, Jitter, SEARCH_FACTOR, TEMPLATE_FACTOR};
pub use labels::{make_labels, HeadGeometry, LabelMaps};
pub use sampler::{
    build_pools, choose_pools, sample_batch, Batch, PoolConfig, PoolSet, SampleOrigin, SamplePair, SamplePool, DEFAULT_RATIOS,
};
pub use scene::{generate_sequence, BackgroundStyle, Scene, SceneConfig, Sequence, TargetShape};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in pixel units, center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }

    /// Fails unless the box is valid and overlaps the `width x height` frame.
    pub fn check_in_frame(&self, width: usize, height: usize) -> Result<()> {
        if !self.is_valid() {
            return invalid(format!("degenerate box {self:?}"));
        }
        let frame = BBox::from_corners(0.0, 0.0, width as f64, height as f64);
        if self.intersection(&frame) <= 0.0 {
            return invalid(format!("box {self:?} lies outside the {width}x{height} frame"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Fog,
    Dark,
    Rain,
}

impl DomainTag {
    pub const TARGETS: [DomainTag; 3] = [DomainTag::Fog, DomainTag::Dark, DomainTag::Rain];

    pub fn name(&self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Fog => "fog",
            DomainTag::Dark => "dark",
            DomainTag::Rain => "rain",
        }
    }

    pub fn is_target(&self) -> bool {
        *self != DomainTag::Source
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(DomainTag::Source),
            "fog" => Ok(DomainTag::Fog),
            "dark" => Ok(DomainTag::Dark),
            "rain" => Ok(DomainTag::Rain),
            other => Err(Error::Config(format!("unknown domain '{other}'"))),
        }
    }
}

/// RGB frame, row-major interleaved `[y][x][c]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub domain_tag: DomainTag,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, domain_tag: DomainTag) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "{} pixel values for a {width}x{height} RGB frame",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            domain_tag,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            pixels,
            domain_tag: DomainTag::Source,
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn with_tag(mut self, tag: DomainTag) -> Self {
        self.domain_tag = tag;
        self
    }

    pub fn check_range(&self) -> Result<()> {
        match self.pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => invalid(format!("pixel value {} at index {i} outside [0, 1]", self.pixels[i])),
            None => Ok(()),
        }
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.pixels.chunks(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        m.map(|v| v / n)
    }

    /// `[3, H, W]` tensor with values mapped by `(v - 0.5) / 0.25`.
    pub fn to_input(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = (self.get(x, y, c) - 0.5) * 4.0;
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("frame shape")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8], tag: DomainTag) -> Result<Self> {
        Frame::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect(), tag)
    }

    /// Writes a binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::{ExtendedColorType, ImageEncoder};
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path, tag: DomainTag) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Frame::from_rgb8(w as usize, h as usize, img.as_raw(), tag)
    }
}
