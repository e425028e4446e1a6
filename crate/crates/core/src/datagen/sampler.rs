use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_region, crop_template, CropWindow, Jitter, SEARCH_FACTOR};
use super::scene::{BackgroundStyle, Scene, SceneConfig};
use super::{BBox, DomainTag, Frame};
use crate::error::{Error, Result};
use crate::weather::{self, WeatherKind, WeatherParams};

/// Four source styles at weight 1, three corrupted pools at weight 4.
pub const DEFAULT_RATIOS: [f64; 7] = [1.0, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub pool: usize,
    pub scene: usize,
    pub frame: usize,
}

/// Template and search crops of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub template: Frame,
    pub search: Frame,
    /// Ground truth in search-crop pixels; never set for target domains.
    pub label_box: Option<BBox>,
    pub domain_tag: DomainTag,
    pub window: CropWindow,
    pub origin: SampleOrigin,
}

/// Frames of one domain, rendered and corrupted on demand.
#[derive(Debug, Clone)]
pub struct SamplePool {
    pub name: String,
    pub domain: DomainTag,
    scenes: Vec<Scene>,
    templates: Vec<Frame>,
    entries: Vec<(usize, usize)>,
    weather: Option<WeatherParams>,
    template_size: usize,
    search_size: usize,
}

/// Per-frame corruption seed so streak layouts differ between frames.
pub(crate) fn frame_seed(base: u64, scene_seed: u64, frame: usize) -> u64 {
    base ^ scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (frame as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl SamplePool {
    /// Pool over `frames` of each scene; templates come from frame 0.
    pub fn new(
        name: impl Into<String>,
        domain: DomainTag,
        scenes: Vec<Scene>,
        frames: std::ops::Range<usize>,
        weather: Option<WeatherParams>,
        template_size: usize,
        search_size: usize,
    ) -> Result<SamplePool> {
        if domain.is_target() != weather.is_some() {
            return Err(Error::Config(format!("pool {domain} and its corruption disagree")));
        }
        let mut templates = Vec::with_capacity(scenes.len());
        let mut entries = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            let first = Self::frame_of(s, 0, weather.as_ref())?;
            templates.push(crop_template(&first, &s.annotation(0), template_size)?.0);
            for t in frames.clone().filter(|&t| t < s.len()) {
                entries.push((i, t));
            }
        }
        Ok(SamplePool {
            name: name.into(),
            domain,
            scenes,
            templates,
            entries,
            weather,
            template_size,
            search_size,
        })
    }

    fn frame_of(scene: &Scene, t: usize, weather: Option<&WeatherParams>) -> Result<Frame> {
        let clean = scene.render(t);
        match weather {
            None => Ok(clean),
            Some(p) => weather::apply(&clean, &p.with_seed(frame_seed(p.seed, scene.seed, t))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn template_size(&self) -> usize {
        self.template_size
    }

    pub fn frame(&self, scene: usize, t: usize) -> Result<Frame> {
        Self::frame_of(&self.scenes[scene], t, self.weather.as_ref())
    }

    /// Draws one example with a jittered search crop around the true box.
    pub fn draw(&self, pool_index: usize, jitter: &Jitter, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
        if self.entries.is_empty() {
            return Err(Error::Config(format!("pool '{}' is empty", self.name)));
        }
        let (si, t) = self.entries[rng.gen_range(0..self.entries.len())];
        let scene = &self.scenes[si];
        let gt = scene.annotation(t);
        let size = gt.area().sqrt();
        let dx = if jitter.center > 0.0 { rng.gen_range(-jitter.center..=jitter.center) } else { 0.0 };
        let dy = if jitter.center > 0.0 { rng.gen_range(-jitter.center..=jitter.center) } else { 0.0 };
        let ds = if jitter.scale > 0.0 { rng.gen_range(-jitter.scale..=jitter.scale) } else { 0.0 };
        let frame = self.frame(si, t)?;
        let (search, window) = crop_region(
            &frame,
            gt.cx + dx * size,
            gt.cy + dy * size,
            SEARCH_FACTOR * size * ds.exp(),
            self.search_size,
        )?;
        let label_box = (!self.domain.is_target()).then(|| window.box_to_crop(&gt));
        Ok(SamplePair {
            template: self.templates[si].clone(),
            search,
            label_box,
            domain_tag: self.domain,
            window,
            origin: SampleOrigin {
                pool: pool_index,
                scene: si,
                frame: t,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub scene: SceneConfig,
    pub scenes_per_style: usize,
    pub target_clips: usize,
    pub clip_len: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            scenes_per_style: 40,
            target_clips: 8,
            clip_len: 6,
            template_size: 32,
            search_size: 64,
        }
    }
}

/// Source pools (one per background style) followed by one corrupted pool
/// per target domain.
#[derive(Debug, Clone)]
pub struct PoolSet {
    pub pools: Vec<SamplePool>,
}

impl PoolSet {
    pub fn source_frames(&self) -> usize {
        self.pools.iter().filter(|p| !p.domain.is_target()).map(|p| p.len()).sum()
    }

    pub fn target_frames(&self) -> usize {
        self.pools.iter().filter(|p| p.domain.is_target()).map(|p| p.len()).sum()
    }

    pub fn index_of(&self, domain: DomainTag) -> Option<usize> {
        self.pools.iter().position(|p| p.domain == domain)
    }

    pub fn refs(&self) -> Vec<&SamplePool> {
        self.pools.iter().collect()
    }
}

/// Builds the pools. Target clips are corrupted copies of the first
/// `clip_len` frames of source scenes, taken round-robin over styles.
pub fn build_pools(cfg: &PoolConfig, weather: &[WeatherParams], seed: u64) -> Result<PoolSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::new();
    for style in BackgroundStyle::ALL {
        let scene_cfg = SceneConfig {
            style,
            ..cfg.scene.clone()
        };
        let scenes = (0..cfg.scenes_per_style)
            .map(|_| Scene::generate(&scene_cfg, rng.gen()))
            .collect::<Result<Vec<_>>>()?;
        pools.push(SamplePool::new(
            format!("source-{style:?}").to_lowercase(),
            DomainTag::Source,
            scenes,
            0..cfg.scene.length,
            None,
            cfg.template_size,
            cfg.search_size,
        )?);
    }
    for kind in [WeatherKind::Fog, WeatherKind::Dark, WeatherKind::Rain] {
        let params = weather
            .iter()
            .find(|p| p.kind == kind)
            .copied()
            .unwrap_or_else(|| WeatherParams::for_kind(kind, seed));
        let scenes: Vec<Scene> = (0..cfg.target_clips)
            .map(|k| {
                let src = &pools[k % BackgroundStyle::ALL.len()];
                let n = src.scenes.len().max(1);
                src.scenes[(k / BackgroundStyle::ALL.len() + rng.gen_range(0..n)) % n].clone()
            })
            .collect();
        pools.push(SamplePool::new(
            kind.domain().name(),
            kind.domain(),
            scenes,
            0..cfg.clip_len,
            Some(params),
            cfg.template_size,
            cfg.search_size,
        )?);
    }
    Ok(PoolSet { pools })
}

/// Labelled and unlabelled halves of one mini-batch.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub source: Vec<SamplePair>,
    pub target: Vec<SamplePair>,
    pub pool_counts: Vec<usize>,
}

/// Pool index of each of `count` draws, proportional to `ratios`.
pub fn choose_pools(pools: &[&SamplePool], ratios: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ratios.len() != pools.len() {
        return Err(Error::Config(format!("{} ratios for {} pools", ratios.len(), pools.len())));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("sampling ratios must be non-negative, got {ratios:?}")));
    }
    for (p, &r) in pools.iter().zip(ratios) {
        if r > 0.0 && p.is_empty() {
            return Err(Error::Config(format!("pool '{}' is empty but has ratio {r}", p.name)));
        }
    }
    let dist = WeightedIndex::new(ratios).map_err(|e| Error::Config(format!("sampling ratios: {e}")))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Draws `batch_size` examples with pool frequencies proportional to
/// `ratios`, split into source (labelled) and target (unlabelled) parts.
pub fn sample_batch(
    pools: &[&SamplePool],
    ratios: &[f64],
    batch_size: usize,
    jitter: &Jitter,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let picks = choose_pools(pools, ratios, batch_size, rng)?;
    let mut batch = Batch {
        pool_counts: vec![0; pools.len()],
        ..Default::default()
    };
    for p in picks {
        batch.pool_counts[p] += 1;
        let s = pools[p].draw(p, jitter, rng)?;
        if s.domain_tag.is_target() {
            batch.target.push(s);
        } else {
            batch.source.push(s);
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PoolConfig {
        PoolConfig {
            scene: SceneConfig {
                length: 6,
                ..Default::default()
            },
            scenes_per_style: 2,
            target_clips: 2,
            clip_len: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_pools_respect_frame_budget() {
        let cfg = PoolConfig::default();
        let source = 4 * cfg.scenes_per_style * cfg.scene.length;
        let target = 3 * cfg.target_clips * cfg.clip_len;
        assert!((target as f64) < 0.02 * source as f64);
    }

    #[test]
    fn target_samples_have_no_labels() {
        let set = build_pools(&small_cfg(), &[], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&set.refs(), &DEFAULT_RATIOS, 24, &Jitter::default(), &mut rng).unwrap();
        assert!(b.target.iter().all(|s| s.label_box.is_none() && s.domain_tag.is_target()));
        assert!(b.source.iter().all(|s| s.label_box.is_some()));
        assert_eq!(b.source.len() + b.target.len(), 24);
        assert_eq!(set.source_frames(), 4 * 2 * 6);
        assert_eq!(set.target_frames(), 3 * 2 * 3);
    }

    #[test]
    fn ratio_edge_cases() {
        let set = build_pools(&small_cfg(), &[], 3).unwrap();
        let refs = set.refs();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut only = [0.0; 7];
        only[5] = 1.0;
        assert!(choose_pools(&refs, &only, 200, &mut rng).unwrap().iter().all(|&p| p == 5));
        let mut skip = DEFAULT_RATIOS;
        skip[0] = 0.0;
        assert!(!choose_pools(&refs, &skip, 2000, &mut rng).unwrap().contains(&0));
        assert!(matches!(choose_pools(&refs, &[1.0; 3], 5, &mut rng), Err(Error::Config(_))));
        assert!(choose_pools(&refs, &[0.0; 7], 5, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let set = build_pools(&small_cfg(), &[], 5).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            sample_batch(&set.refs(), &DEFAULT_RATIOS, 8, &Jitter::default(), &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
    }
}
