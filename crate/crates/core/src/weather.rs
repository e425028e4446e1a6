//! Parametric weather corruptions (fog, darkness, rain) and SSIM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DomainTag, Frame};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeatherKind {
    Fog,
    Dark,
    Rain,
}

impl WeatherKind {
    pub fn domain(&self) -> DomainTag {
        match self {
            WeatherKind::Fog => DomainTag::Fog,
            WeatherKind::Dark => DomainTag::Dark,
            WeatherKind::Rain => DomainTag::Rain,
        }
    }

    pub fn for_domain(tag: DomainTag) -> Option<WeatherKind> {
        match tag {
            DomainTag::Source => None,
            DomainTag::Fog => Some(WeatherKind::Fog),
            DomainTag::Dark => Some(WeatherKind::Dark),
            DomainTag::Rain => Some(WeatherKind::Rain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherParams {
    pub kind: WeatherKind,
    /// Attenuation at the top row; transmission is `exp(-fog_beta * d)` with
    /// `d` rising linearly from 0 at the bottom row to 1 at the top.
    pub fog_beta: f64,
    pub airlight: [f64; 3],
    pub gamma: f64,
    pub brightness: f64,
    /// Streaks per 1000 pixels.
    pub rain_density: f64,
    /// Streak direction in degrees from vertical.
    pub rain_angle: f64,
    pub rain_alpha: f64,
    pub seed: u64,
}

impl WeatherParams {
    /// Default severity for a domain; identity parameters for the source.
    pub fn for_kind(kind: WeatherKind, seed: u64) -> Self {
        let neutral = WeatherParams {
            kind,
            fog_beta: 0.0,
            airlight: [0.85, 0.85, 0.85],
            gamma: 1.0,
            brightness: 1.0,
            rain_density: 0.0,
            rain_angle: 15.0,
            rain_alpha: 0.0,
            seed,
        };
        match kind {
            WeatherKind::Fog => WeatherParams {
                fog_beta: 1.0,
                ..neutral
            },
            WeatherKind::Dark => WeatherParams {
                gamma: 2.5,
                brightness: 0.6,
                ..neutral
            },
            WeatherKind::Rain => WeatherParams {
                rain_density: 60.0,
                rain_alpha: 0.9,
                ..neutral
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fog_beta >= 0.0
            && self.airlight.iter().all(|a| (0.0..=1.0).contains(a))
            && self.gamma >= 1.0
            && self.brightness > 0.0
            && self.brightness <= 1.0
            && self.rain_density >= 0.0
            && self.rain_angle.is_finite()
            && (0.0..=1.0).contains(&self.rain_alpha);
        if ok {
            Ok(())
        } else {
            invalid(format!("weather parameters out of range: {self:?}"))
        }
    }
}

fn prepare(frame: &Frame, params: &WeatherParams) -> Result<()> {
    params.validate()?;
    frame.check_range()
}

pub fn apply_fog(frame: &Frame, params: &WeatherParams) -> Result<Frame> {
    prepare(frame, params)?;
    let mut out = frame.clone();
    let h = frame.height;
    for y in 0..h {
        let depth = if h > 1 { (h - 1 - y) as f64 / (h - 1) as f64 } else { 1.0 };
        let t = (-params.fog_beta * depth).exp();
        for x in 0..frame.width {
            for c in 0..3 {
                let v = frame.get(x, y, c) * t + params.airlight[c] * (1.0 - t);
                out.set(x, y, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out.with_tag(DomainTag::Fog))
}

pub fn apply_dark(frame: &Frame, params: &WeatherParams) -> Result<Frame> {
    prepare(frame, params)?;
    let mut out = frame.clone();
    for v in out.pixels.iter_mut() {
        *v = (params.brightness * v.powf(params.gamma)).clamp(0.0, 1.0);
    }
    Ok(out.with_tag(DomainTag::Dark))
}

const STREAK_COLOR: [f64; 3] = [0.92, 0.93, 0.97];

/// Alpha-blended overlay of seeded anti-aliased line streaks.
pub fn apply_rain(frame: &Frame, params: &WeatherParams) -> Result<Frame> {
    prepare(frame, params)?;
    let mut out = frame.clone().with_tag(DomainTag::Rain);
    let (w, h) = (frame.width, frame.height);
    let count = (params.rain_density * (w * h) as f64 / 1000.0).round() as usize;
    if count == 0 || params.rain_alpha == 0.0 {
        return Ok(out);
    }
    let mut mask = vec![0.0f64; w * h];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let theta = params.rain_angle.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    for _ in 0..count {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let len = rng.gen_range(4.0..10.0);
        let steps = (len * 2.0) as usize;
        for s in 0..=steps {
            let d = s as f64 * 0.5;
            let (x, y) = (x0 + dx * d, y0 + dy * d);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let m = &mut mask[y as usize * w + x as usize];
                *m = m.max(1.0);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let a = params.rain_alpha * mask[y * w + x];
            if a > 0.0 {
                for c in 0..3 {
                    let v = frame.get(x, y, c) * (1.0 - a) + STREAK_COLOR[c] * a;
                    out.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

pub fn apply(frame: &Frame, params: &WeatherParams) -> Result<Frame> {
    match params.kind {
        WeatherKind::Fog => apply_fog(frame, params),
        WeatherKind::Dark => apply_dark(frame, params),
        WeatherKind::Rain => apply_rain(frame, params),
    }
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all `8 x 8` windows (stride 1) and the three channels,
/// with uniform window weights. Frames smaller than a window use one
/// window covering the whole frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "ssim of {}x{} vs {}x{} frames",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let n = (ww * wh) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (p, q) = (a.get(x, y, c), b.get(x, y, c));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}
