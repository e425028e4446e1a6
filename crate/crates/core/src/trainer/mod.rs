//! Source pretraining, mean-teacher adaptation (stage 1) and frozen-backbone
//! adapter training (stage 2).

mod config;

pub use config::{EmaFrequency, TrainConfig};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_labels, sample_batch, BBox, Batch, DomainTag, HeadGeometry, LabelMaps, PoolSet, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{focal_loss, giou_loss, l1_box, total_loss, LossReport, SupervisedTerms};
use crate::model::{
    adapter_prefix, boxes_at, decode_box, forward, init_adapter, init_params, predict, scores_of, stack_frames,
    update_running_stats, BnMode, Checkpoint, ModelConfig, ResponseMap, ResponseVars,
};
use crate::numerics::{AdamW, ParameterSet, Tape, Tensor};
use crate::tca::{psot_loss, Cell};

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_STAGE1: u64 = 3;
const STREAM_STAGE2: u64 = 4;
const STREAM_ADAPTER: u64 = 5;

/// Independent random stream `stream` of a run seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut ParameterSet, student: &ParameterSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    teacher.ema_blend(student, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Teacher box in search-crop pixels.
    pub bbox: BBox,
    pub cell: Cell,
    pub confidence: f64,
    pub accepted: bool,
}

/// Decodes every sample of a teacher response; accepts peaks `>= tau`.
pub fn pseudo_labels_from(resp: &ResponseMap, tau: f64, geom: &HeadGeometry) -> Vec<PseudoLabel> {
    (0..resp.len())
        .map(|i| {
            let d = decode_box(resp, i, geom);
            PseudoLabel {
                bbox: d.bbox,
                cell: d.cell,
                confidence: d.score,
                accepted: d.score >= tau,
            }
        })
        .collect()
}

/// Evaluation-mode teacher forward on a target batch, without gradients.
pub fn make_pseudo_labels(
    model: &ModelConfig,
    teacher: &ParameterSet,
    batch: &[SamplePair],
    tau: f64,
) -> Result<(ResponseMap, Vec<PseudoLabel>)> {
    let (z, x) = inputs(batch)?;
    let resp = predict(model, teacher, &z, &x, None)?;
    let labels = pseudo_labels_from(&resp, tau, &model.geometry());
    Ok((resp, labels))
}

fn inputs(pairs: &[SamplePair]) -> Result<(Tensor, Tensor)> {
    let z: Vec<_> = pairs.iter().map(|p| &p.template).collect();
    let x: Vec<_> = pairs.iter().map(|p| &p.search).collect();
    Ok((stack_frames(&z)?, stack_frames(&x)?))
}

fn source_labels(pairs: &[SamplePair], geom: &HeadGeometry) -> Result<Vec<LabelMaps>> {
    pairs
        .iter()
        .map(|p| {
            p.label_box
                .map(|b| make_labels(&b, geom))
                .ok_or_else(|| Error::Validation("source sample without label".into()))
        })
        .collect()
}

/// Focal, L1 and GIoU terms for `samples` of a response against `labels`.
pub fn supervised_terms<'t>(
    tape: &'t Tape,
    resp: &ResponseVars<'t>,
    samples: &[usize],
    labels: &[LabelMaps],
    geom: &HeadGeometry,
) -> Result<SupervisedTerms<'t>> {
    if samples.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0))?;
        return Ok(SupervisedTerms {
            cls: zero,
            l1: zero,
            giou: zero,
        });
    }
    let g = geom.grid;
    let mut cls = Vec::with_capacity(samples.len() * g * g);
    let mut gt = Vec::with_capacity(samples.len() * 4);
    for l in labels {
        cls.extend_from_slice(l.cls_map.data());
        gt.extend_from_slice(&l.target);
    }
    let cls = Tensor::new(&[samples.len(), g, g], cls)?;
    let picks: Vec<(usize, Cell)> = samples.iter().zip(labels).map(|(&i, l)| (i, l.peak)).collect();
    let pred = boxes_at(resp, &picks, geom)?;
    let gt = tape.constant(Tensor::new(&[samples.len(), 4], gt)?)?;
    Ok(SupervisedTerms {
        cls: focal_loss(scores_of(resp, samples)?, &cls)?,
        l1: l1_box(pred, gt)?,
        giou: giou_loss(pred, gt)?,
    })
}

/// Loss summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub accepted: usize,
    pub targets: usize,
}

impl StepReport {
    pub fn log_line(&self, stage: &str, epoch: usize, step: usize) -> String {
        format!("{stage} {epoch} {} {}/{}", self.loss.log_line(step), self.accepted, self.targets)
    }
}

fn with_context(stage: &str, epoch: usize, step: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} ({stage}, epoch {epoch}, step {step})")),
        other => other,
    }
}

fn source_only(ratios: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = ratios.iter().enumerate().map(|(i, &v)| if i < 4 { v } else { 0.0 }).collect();
    if r.iter().all(|&v| v == 0.0) {
        r[..4].iter_mut().for_each(|v| *v = 1.0);
    }
    r
}

/// Supervised step on a labelled batch; BN statistics are refreshed.
fn supervised_step(model: &ModelConfig, params: &mut ParameterSet, opt: &mut AdamW, pairs: &[SamplePair], adapter: Option<&str>, mode: BnMode) -> Result<StepReport> {
    let geom = model.geometry();
    let tape = Tape::new();
    let p = params.bind(&tape)?;
    let (z, x) = inputs(pairs)?;
    let out = forward(model, &p, tape.constant(z)?, tape.constant(x)?, adapter, mode)?;
    let labels = source_labels(pairs, &geom)?;
    let samples: Vec<usize> = (0..pairs.len()).collect();
    let terms = supervised_terms(&tape, &out.resp, &samples, &labels, &geom)?;
    let (loss, mut report) = total_loss(&terms, None, None, &Default::default())?;
    let grads = tape.backward(loss)?;
    report.grad_norm = Some(grads.global_norm());
    opt.step(params, &grads)?;
    update_running_stats(params, &out.bn_stats, model.head.bn_momentum)?;
    Ok(StepReport {
        loss: report,
        accepted: 0,
        targets: 0,
    })
}

/// Source-only training from a fresh initialization.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParameterSet,
    pub log: Vec<String>,
}

pub fn pretrain(cfg: &TrainConfig, pools: &PoolSet) -> Result<Pretrained> {
    cfg.validate()?;
    let mut params = init_params(&cfg.model, &mut rng_stream(cfg.seed, STREAM_INIT))?;
    let mut rng = rng_stream(cfg.seed, STREAM_PRETRAIN);
    let mut opt = AdamW::new(cfg.pretrain_lr, cfg.weight_decay);
    let ratios = source_only(&cfg.ratios);
    let refs = pools.refs();
    let mut log = Vec::new();
    for epoch in 1..=cfg.pretrain_epochs {
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(&refs, &ratios, cfg.batch_size, &cfg.jitter, &mut rng)?;
            let r = supervised_step(&cfg.model, &mut params, &mut opt, &batch.source, None, BnMode::Train)
                .map_err(with_context("pretrain", epoch, step))?;
            log.push(r.log_line("pretrain", epoch, step));
        }
    }
    Ok(Pretrained { params, log })
}

/// Mutable state of the teacher-student loop.
#[derive(Debug, Clone)]
pub struct Stage1State {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub opt: AdamW,
}

impl Stage1State {
    /// Teacher starts as a copy of the student.
    pub fn new(init: &ParameterSet, cfg: &TrainConfig) -> Self {
        Self {
            student: init.clone(),
            teacher: init.clone(),
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
        }
    }
}

/// Shared step of both stages. `adapter` is the student adapter prefix;
/// `mode` the student BN mode. The teacher always runs in evaluation mode.
fn adaptation_step(
    cfg: &TrainConfig,
    student: &mut ParameterSet,
    teacher: &ParameterSet,
    opt: &mut AdamW,
    batch: &Batch,
    adapter: Option<&str>,
    mode: BnMode,
) -> Result<StepReport> {
    let model = &cfg.model;
    let geom = model.geometry();
    let use_psot = cfg.weights.lambda > 0.0;
    let tape = Tape::new();
    let p = student.bind(&tape)?;
    let mut bn_stats = Vec::new();

    let src_terms = if batch.source.is_empty() {
        supervised_terms(&tape, &dummy_resp(&tape)?, &[], &[], &geom)?
    } else {
        let (z, x) = inputs(&batch.source)?;
        let out = forward(model, &p, tape.constant(z)?, tape.constant(x)?, adapter, mode)?;
        bn_stats.extend(out.bn_stats);
        let labels = source_labels(&batch.source, &geom)?;
        let samples: Vec<usize> = (0..batch.source.len()).collect();
        supervised_terms(&tape, &out.resp, &samples, &labels, &geom)?
    };

    let mut tgt_terms = None;
    let mut psot = None;
    let mut accepted = 0;
    if !batch.target.is_empty() && (cfg.pseudo_labels || use_psot) {
        let (t_resp, pseudo) = make_pseudo_labels(model, teacher, &batch.target, cfg.tau)?;
        let keep: Vec<usize> = if cfg.pseudo_labels {
            (0..pseudo.len()).filter(|&i| pseudo[i].accepted).collect()
        } else {
            Vec::new()
        };
        accepted = keep.len();
        if !keep.is_empty() || use_psot {
            let (z, x) = inputs(&batch.target)?;
            let out = forward(model, &p, tape.constant(z)?, tape.constant(x)?, adapter, mode)?;
            bn_stats.extend(out.bn_stats);
            if !keep.is_empty() {
                let labels: Vec<LabelMaps> = keep.iter().map(|&i| make_labels(&pseudo[i].bbox, &geom)).collect();
                tgt_terms = Some(supervised_terms(&tape, &out.resp, &keep, &labels, &geom)?);
            }
            if use_psot {
                let teacher_scores = tape.constant(t_resp.scores)?;
                psot = Some(psot_loss(out.resp.scores, teacher_scores, &cfg.psot)?.0);
            }
        }
    }

    let (loss, mut report) = total_loss(&src_terms, tgt_terms.as_ref(), psot, &cfg.weights)?;
    let grads = tape.backward(loss)?;
    report.grad_norm = Some(grads.global_norm());
    opt.step(student, &grads)?;
    if mode == BnMode::Train {
        update_running_stats(student, &bn_stats, model.head.bn_momentum)?;
    }
    Ok(StepReport {
        loss: report,
        accepted,
        targets: batch.target.len(),
    })
}

fn dummy_resp(tape: &Tape) -> Result<ResponseVars<'_>> {
    let z = tape.constant(Tensor::zeros(&[1, 1, 1]))?;
    Ok(ResponseVars {
        scores: z,
        offsets: z,
        sizes: z,
    })
}

/// One stage-1 step: supervised source loss, pseudo-labelled target loss
/// and the alignment loss against the teacher, then one student update.
/// EMA is applied by the caller.
pub fn train_step_stage1(state: &mut Stage1State, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    let Stage1State { student, teacher, opt } = state;
    adaptation_step(cfg, student, teacher, opt, batch, None, BnMode::Train)
}

#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub initial_teacher: ParameterSet,
    /// Student parameters at each EMA application, in order.
    pub snapshots: Vec<ParameterSet>,
    pub log: Vec<String>,
}

pub fn train_stage1(cfg: &TrainConfig, init: &ParameterSet, pools: &PoolSet, record_snapshots: bool) -> Result<Stage1Run> {
    cfg.validate()?;
    let mut state = Stage1State::new(init, cfg);
    let mut rng = rng_stream(cfg.seed, STREAM_STAGE1);
    let refs = pools.refs();
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let ema = |state: &mut Stage1State, snapshots: &mut Vec<ParameterSet>| -> Result<()> {
        if record_snapshots {
            snapshots.push(state.student.clone());
        }
        ema_update(&mut state.teacher, &state.student, cfg.alpha)
    };
    for epoch in 1..=cfg.epochs_stage1 {
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(&refs, &cfg.ratios, cfg.batch_size, &cfg.jitter, &mut rng)?;
            let r = train_step_stage1(&mut state, &batch, cfg).map_err(with_context("stage1", epoch, step))?;
            log.push(r.log_line("stage1", epoch, step));
            if cfg.ema_frequency == EmaFrequency::PerBatch {
                ema(&mut state, &mut snapshots)?;
            }
        }
        let due = match cfg.ema_frequency {
            EmaFrequency::PerEpoch => true,
            EmaFrequency::EveryKEpochs(k) => epoch % k == 0,
            EmaFrequency::PerBatch => false,
        };
        if due {
            ema(&mut state, &mut snapshots)?;
        }
    }
    Ok(Stage1Run {
        student: state.student,
        teacher: state.teacher,
        initial_teacher: init.clone(),
        snapshots,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub domain: DomainTag,
    /// Adapter entries only, named under the domain prefix.
    pub adapter: ParameterSet,
    pub log: Vec<String>,
    /// Target-domain AUC after each epoch, when an evaluator is supplied.
    pub epoch_auc: Vec<f64>,
    /// Adapter gradient norm of the first step.
    pub first_grad_norm: f64,
    /// Digest of every non-adapter entry after training.
    pub base_digest: String,
}

/// Per-epoch evaluator: receives the merged parameters and adapter prefix.
pub type EpochEval<'a> = dyn FnMut(&ParameterSet, &str) -> Result<f64> + 'a;

/// Trains one domain adapter against the frozen stage-1 model, which also
/// serves as the teacher. Only adapter entries change.
pub fn train_stage2_dca(
    cfg: &TrainConfig,
    frozen: &ParameterSet,
    domain: DomainTag,
    pools: &PoolSet,
    mut eval: Option<&mut EpochEval<'_>>,
) -> Result<Stage2Run> {
    cfg.validate()?;
    if !domain.is_target() {
        return Err(Error::Config("adapters are trained for target domains only".into()));
    }
    let pool = pools
        .index_of(domain)
        .ok_or_else(|| Error::Config(format!("no {domain} pool")))?;
    let prefix = adapter_prefix(domain);
    let teacher = frozen.clone();
    let mut params = frozen.clone();
    params.remove_prefix("adapter.");
    params.freeze_all();
    let adapter = init_adapter(&cfg.model, domain, &mut rng_stream(cfg.seed, STREAM_ADAPTER))?;
    params.merge(&adapter)?;
    let mut ratios = source_only(&cfg.ratios);
    ratios[pool] = cfg.ratios[pool].max(f64::MIN_POSITIVE);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = rng_stream(cfg.seed, STREAM_STAGE2 + 16 * pool as u64);
    let refs = pools.refs();
    let mut log = Vec::new();
    let mut epoch_auc = Vec::new();
    let mut first_grad_norm = f64::NAN;
    for epoch in 1..=cfg.epochs_stage2 {
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(&refs, &ratios, cfg.batch_size, &cfg.jitter, &mut rng)?;
            let r = adaptation_step(cfg, &mut params, &teacher, &mut opt, &batch, Some(&prefix), BnMode::Eval)
                .map_err(with_context("stage2", epoch, step))?;
            if first_grad_norm.is_nan() {
                first_grad_norm = r.loss.grad_norm.unwrap_or(0.0);
            }
            log.push(r.log_line("stage2", epoch, step));
        }
        if let Some(f) = eval.as_deref_mut() {
            let auc = f(&params, &prefix)?;
            log.push(format!("stage2 {epoch} auc {auc:.17e}"));
            epoch_auc.push(auc);
        }
    }
    let adapter = params.select(&format!("{prefix}."));
    params.remove_prefix("adapter.");
    Ok(Stage2Run {
        domain,
        base_digest: params.digest(),
        adapter,
        log,
        epoch_auc,
        first_grad_norm,
    })
}

/// Stage 2 starting from a checkpoint file on disk.
pub fn train_stage2_from_checkpoint(
    cfg: &TrainConfig,
    path: &Path,
    domain: DomainTag,
    pools: &PoolSet,
    eval: Option<&mut EpochEval<'_>>,
) -> Result<(Checkpoint, Stage2Run)> {
    let ck = Checkpoint::load_expecting(path, &cfg.model.fingerprint())?;
    let run = train_stage2_dca(cfg, ck.group(BACKBONE_GROUP)?, domain, pools, eval)?;
    Ok((ck, run))
}

pub const BACKBONE_GROUP: &str = "backbone";

/// Checkpoint holding a trained backbone and head.
pub fn backbone_checkpoint(model: &ModelConfig, params: &ParameterSet) -> Checkpoint {
    let mut base = params.clone();
    base.remove_prefix("adapter.");
    Checkpoint::new(model.fingerprint()).with_group(BACKBONE_GROUP, base)
}

/// Writes the configuration, metrics log and checkpoint of a run.
pub fn write_run(dir: &Path, cfg: &TrainConfig, log: &[String], checkpoint: Option<&Checkpoint>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut body = log.join("\n");
    body.push('\n');
    fs::write(dir.join("metrics.log"), body)?;
    if let Some(ck) = checkpoint {
        ck.save(&dir.join("model.ckpt"))?;
    }
    Ok(())
}

/// Writes EMA snapshots as `snapshots/student_NNNN.ckpt` plus the initial teacher.
pub fn write_snapshots(dir: &Path, model: &ModelConfig, run: &Stage1Run) -> Result<()> {
    let d = dir.join("snapshots");
    fs::create_dir_all(&d)?;
    Checkpoint::new(model.fingerprint())
        .with_group("teacher", run.initial_teacher.clone())
        .save(&d.join("teacher_init.ckpt"))?;
    for (k, s) in run.snapshots.iter().enumerate() {
        Checkpoint::new(model.fingerprint())
            .with_group("student", s.clone())
            .save(&d.join(format!("student_{k:04}.ckpt")))?;
    }
    Ok(())
}
