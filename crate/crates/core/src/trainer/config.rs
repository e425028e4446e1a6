use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Jitter, PoolConfig, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::tca::PsotConfig;
use crate::weather::{WeatherKind, WeatherParams};

/// When the teacher absorbs the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaFrequency {
    PerEpoch,
    PerBatch,
    EveryKEpochs(usize),
}

impl fmt::Display for EmaFrequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmaFrequency::PerEpoch => write!(f, "per-epoch"),
            EmaFrequency::PerBatch => write!(f, "per-batch"),
            EmaFrequency::EveryKEpochs(k) => write!(f, "every-{k}-epochs"),
        }
    }
}

impl FromStr for EmaFrequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-epoch" => Ok(EmaFrequency::PerEpoch),
            "per-batch" => Ok(EmaFrequency::PerBatch),
            _ => s
                .strip_prefix("every-")
                .and_then(|r| r.strip_suffix("-epochs"))
                .and_then(|k| k.parse().ok())
                .filter(|k| *k > 0)
                .map(EmaFrequency::EveryKEpochs)
                .ok_or_else(|| Error::Config(format!("unknown ema_frequency '{s}'"))),
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub alpha: f64,
    pub ema_frequency: EmaFrequency,
    /// Source-only epochs producing the checkpoint stage 1 starts from.
    pub pretrain_epochs: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Pseudo-label acceptance threshold on the teacher peak score.
    pub tau: f64,
    pub pseudo_labels: bool,
    /// Sampling weights of the pools: four source styles, then fog, dark, rain.
    pub ratios: Vec<f64>,
    pub jitter: Jitter,
    pub psot: PsotConfig,
    pub model: ModelConfig,
    pub data: PoolConfig,
    pub weather: [WeatherParams; 3],
    /// Held-out sequences per evaluation suite.
    pub eval_sequences: usize,
    pub eval_length: usize,
    /// Sequences of the per-epoch adapter convergence suite.
    pub convergence_sequences: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.99,
            ema_frequency: EmaFrequency::PerEpoch,
            pretrain_epochs: 60,
            epochs_stage1: 40,
            epochs_stage2: 10,
            steps_per_epoch: 10,
            lr: 4e-4,
            pretrain_lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            weights: LossWeights::default(),
            tau: 0.6,
            pseudo_labels: true,
            ratios: DEFAULT_RATIOS.to_vec(),
            jitter: Jitter::default(),
            psot: PsotConfig::default(),
            model: ModelConfig::default(),
            data: PoolConfig::default(),
            weather: [
                WeatherParams::for_kind(WeatherKind::Fog, 0),
                WeatherParams::for_kind(WeatherKind::Dark, 0),
                WeatherParams::for_kind(WeatherKind::Rain, 0),
            ],
            eval_sequences: 24,
            eval_length: 40,
            convergence_sequences: 8,
            eval_seed: 1000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for {key}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.ratios.len() != 7 || self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("ratios must be 7 non-negative weights, got {:?}", self.ratios)));
        }
        if self.eval_sequences == 0 || self.eval_length < 2 {
            return Err(Error::Config("evaluation needs at least one sequence of two frames".into()));
        }
        if let EmaFrequency::EveryKEpochs(0) = self.ema_frequency {
            return Err(Error::Config("ema every 0 epochs".into()));
        }
        self.weights.validate()?;
        self.model.validate()?;
        for (p, kind) in self.weather.iter().zip([WeatherKind::Fog, WeatherKind::Dark, WeatherKind::Rain]) {
            if p.kind != kind {
                return Err(Error::Config(format!("weather slot for {kind:?} holds {:?}", p.kind)));
            }
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        let [fog, dark, rain] = &mut self.weather;
        match k {
            "seed" => self.seed = parse(k, v)?,
            "alpha" => self.alpha = parse(k, v)?,
            "ema_frequency" => self.ema_frequency = v.parse()?,
            "pretrain_epochs" => self.pretrain_epochs = parse(k, v)?,
            "epochs_stage1" => self.epochs_stage1 = parse(k, v)?,
            "epochs_stage2" => self.epochs_stage2 = parse(k, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "w_cls" => self.weights.w_cls = parse(k, v)?,
            "beta" => self.weights.beta = parse(k, v)?,
            "gamma_w" => self.weights.gamma_w = parse(k, v)?,
            "lambda" => self.weights.lambda = parse(k, v)?,
            "tau" => self.tau = parse(k, v)?,
            "pseudo_labels" => self.pseudo_labels = parse_bool(k, v)?,
            "ratios" => {
                self.ratios = v
                    .split(|c| c == ',' || c == ':')
                    .map(|r| parse(k, r))
                    .collect::<Result<_>>()?
            }
            "jitter_center" => self.jitter.center = parse(k, v)?,
            "jitter_scale" => self.jitter.scale = parse(k, v)?,
            "epsilon" => self.psot.sinkhorn.epsilon = parse(k, v)?,
            "sinkhorn_iters" => self.psot.sinkhorn.max_iter = parse(k, v)?,
            "anchored" => self.psot.anchored = parse_bool(k, v)?,
            "embed_dim" => self.model.encoder.embed_dim = parse(k, v)?,
            "depth" => self.model.encoder.depth = parse(k, v)?,
            "heads" => self.model.encoder.heads = parse(k, v)?,
            "head_channels" => self.model.head.channels = parse(k, v)?,
            "bank_tokens" => self.model.adapter.bank_tokens = parse(k, v)?,
            "scenes_per_style" => self.data.scenes_per_style = parse(k, v)?,
            "sequence_length" => self.data.scene.length = parse(k, v)?,
            "target_clips" => self.data.target_clips = parse(k, v)?,
            "clip_len" => self.data.clip_len = parse(k, v)?,
            "distractors" => self.data.scene.distractors = parse(k, v)?,
            "fog_beta" => fog.fog_beta = parse(k, v)?,
            "airlight" => fog.airlight = [parse(k, v)?; 3],
            "dark_gamma" => dark.gamma = parse(k, v)?,
            "dark_brightness" => dark.brightness = parse(k, v)?,
            "rain_density" => rain.rain_density = parse(k, v)?,
            "rain_alpha" => rain.rain_alpha = parse(k, v)?,
            "rain_angle" => rain.rain_angle = parse(k, v)?,
            "eval_sequences" => self.eval_sequences = parse(k, v)?,
            "eval_length" => self.eval_length = parse(k, v)?,
            "convergence_sequences" => self.convergence_sequences = parse(k, v)?,
            "eval_seed" => self.eval_seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{k}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file body: one setting per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every settable key with its current value, in `key=value` form.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let [fog, dark, rain] = &self.weather;
        let ratios: Vec<String> = self.ratios.iter().map(|r| r.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("alpha", self.alpha.to_string()),
            ("ema_frequency", self.ema_frequency.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("epochs_stage1", self.epochs_stage1.to_string()),
            ("epochs_stage2", self.epochs_stage2.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("lr", self.lr.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("w_cls", w.w_cls.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma_w", w.gamma_w.to_string()),
            ("lambda", w.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("pseudo_labels", self.pseudo_labels.to_string()),
            ("ratios", ratios.join(",")),
            ("jitter_center", self.jitter.center.to_string()),
            ("jitter_scale", self.jitter.scale.to_string()),
            ("epsilon", self.psot.sinkhorn.epsilon.to_string()),
            ("sinkhorn_iters", self.psot.sinkhorn.max_iter.to_string()),
            ("anchored", self.psot.anchored.to_string()),
            ("embed_dim", self.model.encoder.embed_dim.to_string()),
            ("depth", self.model.encoder.depth.to_string()),
            ("heads", self.model.encoder.heads.to_string()),
            ("head_channels", self.model.head.channels.to_string()),
            ("bank_tokens", self.model.adapter.bank_tokens.to_string()),
            ("scenes_per_style", self.data.scenes_per_style.to_string()),
            ("sequence_length", self.data.scene.length.to_string()),
            ("target_clips", self.data.target_clips.to_string()),
            ("clip_len", self.data.clip_len.to_string()),
            ("distractors", self.data.scene.distractors.to_string()),
            ("fog_beta", fog.fog_beta.to_string()),
            ("airlight", fog.airlight[0].to_string()),
            ("dark_gamma", dark.gamma.to_string()),
            ("dark_brightness", dark.brightness.to_string()),
            ("rain_density", rain.rain_density.to_string()),
            ("rain_alpha", rain.rain_alpha.to_string()),
            ("rain_angle", rain.rain_angle.to_string()),
            ("eval_sequences", self.eval_sequences.to_string()),
            ("eval_length", self.eval_length.to_string()),
            ("convergence_sequences", self.convergence_sequences.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of the full configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
