use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, DomainTag, Frame};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BackgroundStyle {
    Meadow,
    Urban,
    Desert,
    Harbor,
}

impl BackgroundStyle {
    pub const ALL: [BackgroundStyle; 4] = [
        BackgroundStyle::Meadow,
        BackgroundStyle::Urban,
        BackgroundStyle::Desert,
        BackgroundStyle::Harbor,
    ];

    fn base(&self) -> [f64; 3] {
        match self {
            BackgroundStyle::Meadow => [0.32, 0.52, 0.28],
            BackgroundStyle::Urban => [0.48, 0.48, 0.50],
            BackgroundStyle::Desert => [0.70, 0.60, 0.42],
            BackgroundStyle::Harbor => [0.30, 0.42, 0.60],
        }
    }

    /// Spatial frequency range of the background gratings (radians/pixel).
    fn frequencies(&self) -> (f64, f64) {
        match self {
            BackgroundStyle::Meadow => (0.15, 0.45),
            BackgroundStyle::Urban => (0.05, 0.20),
            BackgroundStyle::Desert => (0.02, 0.10),
            BackgroundStyle::Harbor => (0.08, 0.30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    /// Range of `sqrt(w * h)` of the target in pixels.
    pub target_size: (f64, f64),
    pub aspect: (f64, f64),
    pub shape: Option<TargetShape>,
    /// Upper bound on the per-frame center speed in pixels.
    pub max_speed: f64,
    pub persistence: f64,
    pub speed_noise: f64,
    /// Standard deviation of the per-frame log-scale change.
    pub scale_drift: f64,
    pub style: BackgroundStyle,
    pub distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            length: 50,
            target_size: (12.0, 22.0),
            aspect: (0.6, 1.6),
            shape: None,
            max_speed: 2.5,
            persistence: 0.85,
            speed_noise: 0.8,
            scale_drift: 0.01,
            style: BackgroundStyle::Meadow,
            distractors: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.target_size;
        let max_side = hi * self.aspect.0.max(self.aspect.1).sqrt();
        if self.width == 0 || self.height == 0 || self.length == 0 {
            return invalid("scene needs non-zero frame size and length");
        }
        if !(lo > 0.0 && lo <= hi) || !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return invalid(format!("bad target size range {:?} / aspect {:?}", self.target_size, self.aspect));
        }
        if max_side + 2.0 >= self.width.min(self.height) as f64 {
            return invalid(format!(
                "target side up to {max_side:.1}px does not fit a {}x{} frame",
                self.width, self.height
            ));
        }
        if self.max_speed < 0.0 || self.scale_drift < 0.0 || !(0.0..=1.0).contains(&self.persistence) {
            return invalid("motion parameters out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    x: f64,
    y: f64,
    r: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Appearance {
    shape: TargetShape,
    color: [f64; 3],
    stripe: [f64; 3],
    stripe_dir: (f64, f64),
    stripe_freq: f64,
}

/// Recipe for one synthetic video; frames are rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cfg: SceneConfig,
    pub seed: u64,
    base: [f64; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
    target: Appearance,
    boxes: Vec<BBox>,
    distractors: Vec<(Appearance, Vec<BBox>)>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated colors: one channel high, one low
    let hi = rng.gen_range(0.75..0.95);
    let lo = rng.gen_range(0.05..0.2);
    let mid = rng.gen_range(0.05..0.95);
    let mut c = [hi, lo, mid];
    let k = rng.gen_range(0..3);
    c.rotate_left(k);
    if rng.gen_bool(0.5) {
        c.swap(0, 1);
    }
    c
}

fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let (lo, hi) = cfg.target_size;
    let mut size = rng.gen_range(lo..=hi);
    let aspect = rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
    let (mut w, mut h) = (size * aspect.sqrt(), size / aspect.sqrt());
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let mut cx = rng.gen_range(w / 2.0 + 1.0..fw - w / 2.0 - 1.0);
    let mut cy = rng.gen_range(h / 2.0 + 1.0..fh - h / 2.0 - 1.0);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let start = rng.gen_range(0.0..=1.0) * cfg.max_speed;
    let (mut vx, mut vy) = (start * angle.cos(), start * angle.sin());
    let mut boxes = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            vx = cfg.persistence * vx + cfg.speed_noise * cfg.max_speed / 2.5 * noise.sample(rng);
            vy = cfg.persistence * vy + cfg.speed_noise * cfg.max_speed / 2.5 * noise.sample(rng);
            let speed = (vx * vx + vy * vy).sqrt();
            if speed > cfg.max_speed {
                vx *= cfg.max_speed / speed;
                vy *= cfg.max_speed / speed;
            }
            if cfg.scale_drift > 0.0 {
                size = (size * (cfg.scale_drift * noise.sample(rng)).exp()).clamp(lo, hi);
                w = size * aspect.sqrt();
                h = size / aspect.sqrt();
            }
            cx += vx;
            cy += vy;
            let (xmin, xmax) = (w / 2.0 + 1.0, fw - w / 2.0 - 1.0);
            let (ymin, ymax) = (h / 2.0 + 1.0, fh - h / 2.0 - 1.0);
            if cx < xmin {
                cx = 2.0 * xmin - cx;
                vx = -vx;
            }
            if cx > xmax {
                cx = 2.0 * xmax - cx;
                vx = -vx;
            }
            if cy < ymin {
                cy = 2.0 * ymin - cy;
                vy = -vy;
            }
            if cy > ymax {
                cy = 2.0 * ymax - cy;
                vy = -vy;
            }
            cx = cx.clamp(xmin, xmax);
            cy = cy.clamp(ymin, ymax);
        }
        boxes.push(BBox::new(cx, cy, w, h));
    }
    boxes
}

fn appearance(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Appearance {
    let shape = cfg.shape.unwrap_or(if rng.gen_bool(0.5) {
        TargetShape::Rect
    } else {
        TargetShape::Ellipse
    });
    let color = random_color(rng);
    let stripe = color.map(|c| (c * 0.45).clamp(0.0, 1.0));
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    Appearance {
        shape,
        color,
        stripe,
        stripe_dir: (theta.cos(), theta.sin()),
        stripe_freq: rng.gen_range(0.5..1.0),
    }
}

/// Fraction of the unit pixel at `(px, py)` covered by the shape.
fn coverage(shape: TargetShape, b: &BBox, px: usize, py: usize) -> f64 {
    let (x0, y0) = (px as f64, py as f64);
    match shape {
        TargetShape::Rect => {
            let ix = ((x0 + 1.0).min(b.x2()) - x0.max(b.x1())).max(0.0);
            let iy = ((y0 + 1.0).min(b.y2()) - y0.max(b.y1())).max(0.0);
            ix * iy
        }
        TargetShape::Ellipse => {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = (x0 + (sx as f64 + 0.5) / 4.0 - b.cx) / (b.w / 2.0);
                    let y = (y0 + (sy as f64 + 0.5) / 4.0 - b.cy) / (b.h / 2.0);
                    if x * x + y * y <= 1.0 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / 16.0
        }
    }
}

impl Scene {
    pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = cfg.style.base().map(|c| (c + rng.gen_range(-0.06..0.06)).clamp(0.05, 0.95));
        let (flo, fhi) = cfg.style.frequencies();
        let gratings = (0..3)
            .map(|_| {
                let k = rng.gen_range(flo..fhi);
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let a = rng.gen_range(0.04..0.10);
                Grating {
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: [a * rng.gen_range(0.6..1.4), a * rng.gen_range(0.6..1.4), a * rng.gen_range(0.6..1.4)],
                }
            })
            .collect();
        let blobs = (0..6)
            .map(|_| Blob {
                x: rng.gen_range(0.0..cfg.width as f64),
                y: rng.gen_range(0.0..cfg.height as f64),
                r: rng.gen_range(6.0..20.0),
                color: base.map(|c| (c + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)),
            })
            .collect();
        let target = appearance(cfg, &mut rng);
        let boxes = trajectory(cfg, &mut rng);
        let distractors = (0..cfg.distractors)
            .map(|_| {
                let mut a = appearance(cfg, &mut rng);
                a.color = a.color.map(|c| c * 0.8 + 0.1);
                (a, trajectory(cfg, &mut rng))
            })
            .collect();
        Ok(Scene {
            cfg: cfg.clone(),
            seed,
            base,
            gratings,
            blobs,
            target,
            boxes,
            distractors,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn annotation(&self, t: usize) -> BBox {
        self.boxes[t]
    }

    fn background(&self, x: usize, y: usize) -> [f64; 3] {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = self.base;
        for g in &self.gratings {
            let s = (g.kx * fx + g.ky * fy + g.phase).sin();
            for k in 0..3 {
                c[k] += g.amp[k] * s;
            }
        }
        for b in &self.blobs {
            let d2 = (fx - b.x).powi(2) + (fy - b.y).powi(2);
            let wgt = (-d2 / (2.0 * b.r * b.r)).exp() * 0.8;
            for k in 0..3 {
                c[k] = c[k] * (1.0 - wgt) + b.color[k] * wgt;
            }
        }
        c
    }

    fn paint(frame: &mut Frame, look: &Appearance, b: &BBox) {
        let x0 = b.x1().floor().max(0.0) as usize;
        let y0 = b.y1().floor().max(0.0) as usize;
        let x1 = (b.x2().ceil() as usize).min(frame.width);
        let y1 = (b.y2().ceil() as usize).min(frame.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let cov = coverage(look.shape, b, x, y);
                if cov <= 0.0 {
                    continue;
                }
                let u = (x as f64 + 0.5 - b.cx) * look.stripe_dir.0 + (y as f64 + 0.5 - b.cy) * look.stripe_dir.1;
                let fg = if (u * look.stripe_freq).sin() > 0.0 {
                    look.color
                } else {
                    look.stripe
                };
                for c in 0..3 {
                    let v = frame.get(x, y, c);
                    frame.set(x, y, c, v * (1.0 - cov) + fg[c] * cov);
                }
            }
        }
    }

    /// Frame `t` with distractors but without the target.
    pub fn render_background(&self, t: usize) -> Frame {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut pixels = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.extend(self.background(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        let mut frame = Frame {
            width: w,
            height: h,
            pixels,
            domain_tag: DomainTag::Source,
        };
        for (look, traj) in &self.distractors {
            Self::paint(&mut frame, look, &traj[t]);
        }
        frame
    }

    pub fn render(&self, t: usize) -> Frame {
        let mut frame = self.render_background(t);
        Self::paint(&mut frame, &self.target, &self.boxes[t]);
        frame
    }

    /// Per-pixel target coverage in `[0, 1]`, row-major.
    pub fn target_mask(&self, t: usize) -> Vec<f64> {
        let b = self.boxes[t];
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut m = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                m[y * w + x] = coverage(self.target.shape, &b, x, y);
            }
        }
        m
    }
}

/// Rendered video with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    /// Present iff the frames are from the source domain.
    pub annotations: Option<Vec<BBox>>,
    pub seed: u64,
}

impl Sequence {
    pub fn domain_tag(&self) -> DomainTag {
        self.frames.first().map_or(DomainTag::Source, |f| f.domain_tag)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Renders a labelled source-domain sequence.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<Sequence> {
    let scene = Scene::generate(cfg, seed)?;
    Ok(Sequence {
        frames: (0..scene.len()).map(|t| scene.render(t)).collect(),
        annotations: Some(scene.boxes.clone()),
        seed,
    })
}
