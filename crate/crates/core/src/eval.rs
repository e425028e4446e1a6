//! One-pass evaluation, success and precision metrics, ablation tables and
//! metric exports.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{crop_search, crop_template, BBox, BackgroundStyle, DomainTag, Frame, Scene, SceneConfig};
use crate::datagen::sampler::frame_seed;
use crate::error::{Error, Result};
use crate::model::{decode_box, predict, stack_frames, ModelConfig};
use crate::numerics::{ParameterSet, Tensor};
use crate::weather::{self, WeatherKind, WeatherParams};

/// Number of IoU thresholds `0, 0.05, .., 1`.
pub const SUCCESS_THRESHOLDS: usize = 21;
pub const DEFAULT_PRECISION_PX: f64 = 5.0;
/// IoU at or above this counts as exact overlap at threshold 1.
const EXACT_IOU: f64 = 1.0 - 1e-12;
const EVAL_BATCH: usize = 32;
const SUITE_STREAM: u64 = 0xE7A1;

pub fn thresholds() -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS).map(|k| k as f64 / 20.0).collect()
}

/// Fraction of frames with IoU above `theta`; at `theta = 1` frames with
/// exact overlap count.
pub fn success_rate(ious: &[f64], theta: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let hits = if theta >= 1.0 {
        ious.iter().filter(|&&v| v >= EXACT_IOU).count()
    } else {
        ious.iter().filter(|&&v| v > theta).count()
    };
    hits as f64 / ious.len() as f64
}

pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    thresholds().into_iter().map(|t| success_rate(ious, t)).collect()
}

/// Fraction of frames with center error `<= px`.
pub fn precision(errors: &[f64], px: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= px).count() as f64 / errors.len() as f64
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Video with per-frame ground truth.
pub trait FrameSource {
    fn name(&self) -> String;
    fn domain(&self) -> DomainTag;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn size(&self) -> (usize, usize);
    fn frame(&self, t: usize) -> Result<Frame>;
    fn annotation(&self, t: usize) -> BBox;
}

/// Held-out scene, optionally corrupted frame by frame.
#[derive(Debug, Clone)]
pub struct EvalSequence {
    pub name: String,
    pub scene: Scene,
    pub weather: Option<WeatherParams>,
}

impl FrameSource for EvalSequence {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn domain(&self) -> DomainTag {
        self.weather.map_or(DomainTag::Source, |w| w.kind.domain())
    }

    fn len(&self) -> usize {
        self.scene.len()
    }

    fn size(&self) -> (usize, usize) {
        (self.scene.cfg.width, self.scene.cfg.height)
    }

    fn frame(&self, t: usize) -> Result<Frame> {
        let clean = self.scene.render(t);
        match &self.weather {
            None => Ok(clean),
            Some(p) => weather::apply(&clean, &p.with_seed(frame_seed(p.seed, self.scene.seed, t))),
        }
    }

    fn annotation(&self, t: usize) -> BBox {
        self.scene.annotation(t)
    }
}

/// `count` held-out scenes over all background styles. The same `seed`
/// yields the same geometry for every domain.
pub fn eval_suite(cfg: &SceneConfig, weather: Option<WeatherParams>, count: usize, seed: u64) -> Result<Vec<EvalSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUITE_STREAM);
    let tag = weather.map_or(DomainTag::Source, |w| w.kind.domain());
    (0..count)
        .map(|k| {
            let style = BackgroundStyle::ALL[k % BackgroundStyle::ALL.len()];
            let scene = Scene::generate(&SceneConfig { style, ..cfg.clone() }, rng.gen())?;
            Ok(EvalSequence {
                name: format!("{tag}-{k:03}"),
                scene,
                weather,
            })
        })
        .collect()
}

/// Suite for a domain using the matching entry of `weather`.
pub fn domain_suite(cfg: &SceneConfig, domain: DomainTag, weather: &[WeatherParams], count: usize, seed: u64) -> Result<Vec<EvalSequence>> {
    let params = match WeatherKind::for_domain(domain) {
        None => None,
        Some(kind) => Some(
            weather
                .iter()
                .find(|p| p.kind == kind)
                .copied()
                .unwrap_or_else(|| WeatherParams::for_kind(kind, seed)),
        ),
    };
    eval_suite(cfg, params, count, seed)
}

pub trait Tracker {
    fn init(&mut self, frame: &Frame, bbox: &BBox) -> Result<()>;
    fn track(&mut self, frame: &Frame) -> Result<BBox>;
}

/// Per-frame scores of one sequence, frames after the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub domain: DomainTag,
    pub predictions: Vec<BBox>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

impl SequenceResult {
    pub fn score(name: String, domain: DomainTag, predictions: Vec<BBox>, truth: &[BBox]) -> Self {
        let ious = predictions.iter().zip(truth).map(|(p, g)| p.iou(g)).collect();
        let center_errors = predictions.iter().zip(truth).map(|(p, g)| p.center_distance(g)).collect();
        Self {
            name,
            domain,
            predictions,
            ious,
            center_errors,
        }
    }

    pub fn success_curve(&self) -> Vec<f64> {
        success_curve(&self.ious)
    }

    pub fn auc(&self) -> f64 {
        mean(&self.success_curve())
    }
}

/// Initializes from the first annotation, tracks every later frame and
/// scores it.
pub fn run_ope(tracker: &mut dyn Tracker, seq: &dyn FrameSource) -> Result<SequenceResult> {
    if seq.len() < 2 {
        return Err(Error::Validation(format!("sequence {} has fewer than two frames", seq.name())));
    }
    tracker.init(&seq.frame(0)?, &seq.annotation(0))?;
    let mut predictions = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        predictions.push(tracker.track(&seq.frame(t)?)?);
    }
    let truth: Vec<BBox> = (1..seq.len()).map(|t| seq.annotation(t)).collect();
    Ok(SequenceResult::score(seq.name(), seq.domain(), predictions, &truth))
}

/// Metrics averaged over sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sequences: Vec<SequenceResult>,
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision_px: f64,
    pub precision: f64,
    /// Mean IoU.
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

impl EvalResult {
    pub fn from_sequences(sequences: Vec<SequenceResult>, precision_px: f64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Validation("no sequences to aggregate".into()));
        }
        let n = sequences.len() as f64;
        let mut success = vec![0.0; SUCCESS_THRESHOLDS];
        for s in &sequences {
            for (acc, v) in success.iter_mut().zip(s.success_curve()) {
                *acc += v / n;
            }
        }
        let avg = |f: &dyn Fn(&SequenceResult) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        let precision = avg(&|s| precision(&s.center_errors, precision_px));
        let ao = avg(&|s| mean(&s.ious));
        let sr50 = avg(&|s| success_rate(&s.ious, 0.5));
        let sr75 = avg(&|s| success_rate(&s.ious, 0.75));
        Ok(Self {
            auc: mean(&success),
            thresholds: thresholds(),
            success,
            precision_px,
            precision,
            ao,
            sr50,
            sr75,
            sequences,
        })
    }

    pub fn precision_at(&self, px: f64) -> f64 {
        let n = self.sequences.len() as f64;
        self.sequences.iter().map(|s| precision(&s.center_errors, px)).sum::<f64>() / n
    }
}

pub fn evaluate_tracker(tracker: &mut dyn Tracker, seqs: &[&dyn FrameSource]) -> Result<EvalResult> {
    let results = seqs.iter().map(|s| run_ope(tracker, *s)).collect::<Result<Vec<_>>>()?;
    EvalResult::from_sequences(results, DEFAULT_PRECISION_PX)
}

/// Keeps a prediction usable as the next crop center.
fn sanitize(b: &BBox, width: usize, height: usize) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox::new(b.cx.clamp(0.0, w), b.cy.clamp(0.0, h), b.w.clamp(2.0, w), b.h.clamp(2.0, h))
}

/// Model-backed tracker over one sequence at a time.
pub struct ModelTracker<'a> {
    pub cfg: ModelConfig,
    pub params: &'a ParameterSet,
    pub adapter: Option<String>,
    template: Option<Tensor>,
    last: BBox,
    size: (usize, usize),
}

impl<'a> ModelTracker<'a> {
    pub fn new(cfg: ModelConfig, params: &'a ParameterSet, adapter: Option<String>) -> Self {
        Self {
            cfg,
            params,
            adapter,
            template: None,
            last: BBox::new(0.0, 0.0, 1.0, 1.0),
            size: (0, 0),
        }
    }
}

impl Tracker for ModelTracker<'_> {
    fn init(&mut self, frame: &Frame, bbox: &BBox) -> Result<()> {
        let (z, _) = crop_template(frame, bbox, self.cfg.encoder.template_size)?;
        self.template = Some(stack_frames(&[&z])?);
        self.last = *bbox;
        self.size = (frame.width, frame.height);
        Ok(())
    }

    fn track(&mut self, frame: &Frame) -> Result<BBox> {
        let z = self
            .template
            .as_ref()
            .ok_or_else(|| Error::Validation("tracker used before init".into()))?;
        let (x, window) = crop_search(frame, &self.last, self.cfg.encoder.search_size)?;
        let resp = predict(&self.cfg, self.params, z, &stack_frames(&[&x])?, self.adapter.as_deref())?;
        let d = decode_box(&resp, 0, &self.cfg.geometry());
        self.last = sanitize(&window.box_to_frame(&d.bbox), self.size.0, self.size.1);
        Ok(self.last)
    }
}

/// Batched equivalent of running a [`ModelTracker`] over each sequence.
pub fn evaluate_model<S: FrameSource>(
    cfg: &ModelConfig,
    params: &ParameterSet,
    adapter: Option<&str>,
    seqs: &[S],
) -> Result<EvalResult> {
    let mut results = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        results.extend(evaluate_chunk(cfg, params, adapter, chunk)?);
    }
    EvalResult::from_sequences(results, DEFAULT_PRECISION_PX)
}

fn evaluate_chunk<S: FrameSource>(cfg: &ModelConfig, params: &ParameterSet, adapter: Option<&str>, seqs: &[S]) -> Result<Vec<SequenceResult>> {
    let geom = cfg.geometry();
    let mut templates = Vec::with_capacity(seqs.len());
    let mut last = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Validation(format!("sequence {} has fewer than two frames", s.name())));
        }
        templates.push(crop_template(&s.frame(0)?, &s.annotation(0), cfg.encoder.template_size)?.0);
        last.push(s.annotation(0));
    }
    let mut predictions: Vec<Vec<BBox>> = vec![Vec::new(); seqs.len()];
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    for t in 1..longest {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| t < seqs[i].len()).collect();
        let mut crops = Vec::with_capacity(active.len());
        let mut windows = Vec::with_capacity(active.len());
        for &i in &active {
            let (x, w) = crop_search(&seqs[i].frame(t)?, &last[i], cfg.encoder.search_size)?;
            crops.push(x);
            windows.push(w);
        }
        let z = stack_frames(&active.iter().map(|&i| &templates[i]).collect::<Vec<_>>())?;
        let x = stack_frames(&crops.iter().collect::<Vec<_>>())?;
        let resp = predict(cfg, params, &z, &x, adapter)?;
        for (k, &i) in active.iter().enumerate() {
            let d = decode_box(&resp, k, &geom);
            let (w, h) = seqs[i].size();
            last[i] = sanitize(&windows[k].box_to_frame(&d.bbox), w, h);
            predictions[i].push(last[i]);
        }
    }
    Ok(seqs
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            let truth: Vec<BBox> = (1..s.len()).map(|t| s.annotation(t)).collect();
            SequenceResult::score(s.name(), s.domain(), p, &truth)
        })
        .collect())
}

/// One configuration of an ablation grid across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Median minus the baseline median, when a baseline row exists.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows sorted by name; `cells` pairs each name with `(seed, auc)` results.
    pub fn new(cells: Vec<(String, Vec<(u64, f64)>)>, baseline: &str) -> Result<Self> {
        let mut rows: Vec<AblationRow> = cells
            .into_iter()
            .map(|(name, runs)| {
                if runs.is_empty() {
                    return Err(Error::Validation(format!("ablation cell '{name}' has no runs")));
                }
                let aucs: Vec<f64> = runs.iter().map(|r| r.1).collect();
                Ok(AblationRow {
                    name,
                    seeds: runs.iter().map(|r| r.0).collect(),
                    median: median(&aucs),
                    min: aucs.iter().copied().fold(f64::INFINITY, f64::min),
                    max: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    aucs,
                    delta: None,
                })
            })
            .collect::<Result<_>>()?;
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(base) = rows.iter().find(|r| r.name == baseline).map(|r| r.median) {
            for r in &mut rows {
                r.delta = Some(r.median - base);
            }
        }
        Ok(Self {
            baseline: baseline.to_string(),
            rows,
        })
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,seeds,median_auc,min_auc,max_auc,spread,delta_vs_baseline,aucs\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
            let aucs: Vec<String> = r.aucs.iter().map(|a| format!("{a:.6}")).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.name,
                seeds.join(" "),
                r.median,
                r.min,
                r.max,
                r.max - r.min,
                r.delta.map_or(String::new(), |d| format!("{d:.6}")),
                aucs.join(" ")
            ));
        }
        out
    }
}

/// Runs `run(name, config, seed)` for every cell and seed.
pub fn ablate<C>(
    configs: &[(String, C)],
    seeds: &[u64],
    baseline: &str,
    mut run: impl FnMut(&str, &C, u64) -> Result<f64>,
) -> Result<AblationTable> {
    let mut cells = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let runs = seeds
            .iter()
            .map(|&s| run(name, cfg, s).map(|auc| (s, auc)))
            .collect::<Result<Vec<_>>>()?;
        cells.push((name.clone(), runs));
    }
    AblationTable::new(cells, baseline)
}

/// JSON summary written next to the curve CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub run_id: String,
    pub name: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub sequences: usize,
    pub auc: f64,
    pub precision_px: f64,
    pub precision: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    /// Per-epoch target AUC of adapter training, if any.
    pub convergence: Vec<f64>,
}

fn run_id(fingerprint: &str, seeds: &[u64], success: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(fingerprint.as_bytes());
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    for v in success {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..6])
}

/// Paths written by [`export_metrics`].
#[derive(Debug, Clone)]
pub struct ExportedFiles {
    pub success_csv: PathBuf,
    pub precision_csv: PathBuf,
    pub convergence_csv: Option<PathBuf>,
    pub summary_json: PathBuf,
}

/// Writes `{name}_success.csv`, `{name}_precision.csv`, optionally
/// `{name}_convergence.csv`, and `{name}_summary.json` into `dir`.
pub fn export_metrics(
    dir: &Path,
    name: &str,
    result: &EvalResult,
    fingerprint: &str,
    seeds: &[u64],
    convergence: &[f64],
) -> Result<(MetricsSummary, ExportedFiles)> {
    if result.sequences.is_empty() {
        return Err(Error::Validation("nothing to export".into()));
    }
    fs::create_dir_all(dir)?;
    let mut success = String::from("threshold,success\n");
    for (t, s) in result.thresholds.iter().zip(&result.success) {
        success.push_str(&format!("{t:.2},{s:.17e}\n"));
    }
    let mut prec = String::from("pixels,precision\n");
    for px in 0..=20 {
        prec.push_str(&format!("{px},{:.17e}\n", result.precision_at(px as f64)));
    }
    let files = ExportedFiles {
        success_csv: dir.join(format!("{name}_success.csv")),
        precision_csv: dir.join(format!("{name}_precision.csv")),
        convergence_csv: (!convergence.is_empty()).then(|| dir.join(format!("{name}_convergence.csv"))),
        summary_json: dir.join(format!("{name}_summary.json")),
    };
    fs::write(&files.success_csv, success)?;
    fs::write(&files.precision_csv, prec)?;
    if let Some(p) = &files.convergence_csv {
        let mut body = String::from("epoch,auc\n");
        for (e, a) in convergence.iter().enumerate() {
            body.push_str(&format!("{},{a:.17e}\n", e + 1));
        }
        fs::write(p, body)?;
    }
    let summary = MetricsSummary {
        run_id: run_id(fingerprint, seeds, &result.success),
        name: name.to_string(),
        config_fingerprint: fingerprint.to_string(),
        seeds: seeds.to_vec(),
        sequences: result.sequences.len(),
        auc: result.auc,
        precision_px: result.precision_px,
        precision: result.precision,
        ao: result.ao,
        sr50: result.sr50,
        sr75: result.sr75,
        thresholds: result.thresholds.clone(),
        success: result.success.clone(),
        convergence: convergence.to_vec(),
    };
    fs::write(&files.summary_json, serde_json::to_string_pretty(&summary)?)?;
    Ok((summary, files))
}

pub fn load_summary(path: &Path) -> Result<MetricsSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_grid() {
        let t = thresholds();
        assert_eq!(t.len(), 21);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[10], 0.5);
        assert_eq!(t[20], 1.0);
    }

    #[test]
    fn success_counts_strictly_above() {
        let ious = [0.0, 0.5, 0.51, 1.0];
        assert_eq!(success_rate(&ious, 0.0), 0.75);
        assert_eq!(success_rate(&ious, 0.5), 0.5);
        assert_eq!(success_rate(&ious, 1.0), 0.25);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
