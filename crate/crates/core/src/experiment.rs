//! Named pipeline configurations and a per-seed runner that shares
//! pretraining and stage-1 results between them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datagen::{build_pools, DomainTag, PoolSet, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::{domain_suite, evaluate_model, EvalResult, EvalSequence};
use crate::model::{adapter_prefix, Checkpoint};
use crate::numerics::ParameterSet;
use crate::trainer::{pretrain, train_stage1, train_stage2_dca, Stage1Run, Stage2Run, TrainConfig};

/// Pipeline configurations of the component ablation, cumulative left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Source-only training with the same step budget.
    Baseline,
    /// Mean teacher with pseudo-labels on target data.
    Pseudo,
    /// Pseudo-labels plus the transport alignment loss.
    Tca,
    /// Pseudo-labels plus the domain adapter, no alignment loss.
    Dca,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Pseudo, Variant::Tca, Variant::Dca, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Pseudo => "pseudo",
            Variant::Tca => "tca",
            Variant::Dca => "dca",
            Variant::Full => "full",
        }
    }

    pub fn uses_adapter(&self) -> bool {
        matches!(self, Variant::Dca | Variant::Full)
    }

    /// Stage-1 configuration derived from the full-pipeline settings.
    pub fn stage1_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Baseline => {
                c.pseudo_labels = false;
                c.weights.lambda = 0.0;
                c.ratios.iter_mut().skip(4).for_each(|r| *r = 0.0);
            }
            Variant::Pseudo | Variant::Dca => c.weights.lambda = 0.0,
            Variant::Tca | Variant::Full => {}
        }
        c
    }

    pub fn stage2_config(&self, base: &TrainConfig) -> Option<TrainConfig> {
        match self {
            Variant::Dca => Some(self.stage1_config(base)),
            Variant::Full => Some(base.clone()),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

fn digest(s: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Scene settings of the evaluation suites.
pub fn eval_scene(cfg: &TrainConfig) -> SceneConfig {
    SceneConfig {
        length: cfg.eval_length,
        ..cfg.data.scene.clone()
    }
}

pub fn eval_sequences(cfg: &TrainConfig, domain: DomainTag, count: usize) -> Result<Vec<EvalSequence>> {
    domain_suite(&eval_scene(cfg), domain, &cfg.weather, count, cfg.eval_seed)
}

/// Trains what one seed needs, once, and evaluates on request. With a
/// cache directory, trained parameters are stored under their
/// configuration fingerprint and reused.
pub struct Runner {
    pub base: TrainConfig,
    pub pools: PoolSet,
    pub cache: Option<PathBuf>,
    /// Run logs by key, in order of completion.
    pub logs: BTreeMap<String, Vec<String>>,
    pretrained: Option<ParameterSet>,
    stage1: BTreeMap<String, Stage1Run>,
    stage2: BTreeMap<String, Stage2Run>,
    suites: BTreeMap<(DomainTag, usize), Vec<EvalSequence>>,
}

impl Runner {
    pub fn new(base: TrainConfig, cache: Option<PathBuf>) -> Result<Self> {
        base.validate()?;
        let pools = build_pools(&base.data, &base.weather, base.seed)?;
        Ok(Self {
            base,
            pools,
            cache,
            logs: BTreeMap::new(),
            pretrained: None,
            stage1: BTreeMap::new(),
            stage2: BTreeMap::new(),
            suites: BTreeMap::new(),
        })
    }

    fn cache_path(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|d| d.join(format!("{kind}-{}.ckpt", &key[..16])))
    }

    fn load_cached(&self, kind: &str, key: &str) -> Option<Checkpoint> {
        let p = self.cache_path(kind, key)?;
        Checkpoint::load_expecting(&p, key).ok()
    }

    fn store(&self, kind: &str, key: &str, ck: Checkpoint) -> Result<()> {
        if let Some(p) = self.cache_path(kind, key) {
            std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
            ck.save(&p)?;
        }
        Ok(())
    }

    /// Pretraining depends on everything but the stage-1 and stage-2 knobs.
    fn pretrain_key(&self) -> String {
        let mut c = self.base.clone();
        c.epochs_stage1 = 0;
        c.epochs_stage2 = 0;
        c.lr = 1.0;
        c.weights.lambda = 0.0;
        c.tau = 1.0;
        c.pseudo_labels = false;
        c.alpha = 0.0;
        c.ema_frequency = crate::trainer::EmaFrequency::PerEpoch;
        c.ratios.iter_mut().skip(4).for_each(|r| *r = 0.0);
        c.fingerprint()
    }

    pub fn pretrained(&mut self) -> Result<&ParameterSet> {
        if self.pretrained.is_none() {
            let key = self.pretrain_key();
            let params = match self.load_cached("pretrain", &key) {
                Some(ck) => ck.group("params")?.clone(),
                None => {
                    let run = pretrain(&self.base, &self.pools)?;
                    self.logs.insert("pretrain".into(), run.log);
                    self.store("pretrain", &key, Checkpoint::new(key.clone()).with_group("params", run.params.clone()))?;
                    run.params
                }
            };
            self.pretrained = Some(params);
        }
        Ok(self.pretrained.as_ref().expect("set above"))
    }

    /// Stage-1 run for `cfg`, which must share this runner's pretraining.
    pub fn stage1(&mut self, cfg: &TrainConfig) -> Result<&Stage1Run> {
        let key = format!("{}{}", self.pretrain_key(), cfg.fingerprint());
        if !self.stage1.contains_key(&key) {
            let hashed = digest(&key);
            let run = match self.load_cached("stage1", &hashed) {
                Some(ck) => Stage1Run {
                    student: ck.group("student")?.clone(),
                    teacher: ck.group("teacher")?.clone(),
                    initial_teacher: ck.group("initial")?.clone(),
                    snapshots: Vec::new(),
                    log: Vec::new(),
                },
                None => {
                    let init = self.pretrained()?.clone();
                    let run = train_stage1(cfg, &init, &self.pools, false)?;
                    self.store(
                        "stage1",
                        &hashed,
                        Checkpoint::new(hashed.clone())
                            .with_group("student", run.student.clone())
                            .with_group("teacher", run.teacher.clone())
                            .with_group("initial", run.initial_teacher.clone()),
                    )?;
                    run
                }
            };
            self.logs.insert(format!("stage1-{}", &hashed[..8]), run.log.clone());
            self.stage1.insert(key.clone(), run);
        }
        Ok(&self.stage1[&key])
    }

    pub fn suite(&mut self, domain: DomainTag, count: usize) -> Result<&[EvalSequence]> {
        if !self.suites.contains_key(&(domain, count)) {
            let s = eval_sequences(&self.base, domain, count)?;
            self.suites.insert((domain, count), s);
        }
        Ok(&self.suites[&(domain, count)])
    }

    /// Stage-2 adapter for `domain` on top of the stage-1 student of `s1`.
    /// Records per-epoch AUC on the convergence suite when it is non-empty.
    pub fn stage2(&mut self, s1: &TrainConfig, s2: &TrainConfig, domain: DomainTag) -> Result<&Stage2Run> {
        let convergence = s2.convergence_sequences > 0;
        let key = digest(&format!(
            "{}{}{}{domain}",
            self.pretrain_key(),
            s1.fingerprint(),
            s2.fingerprint()
        ));
        if !self.stage2.contains_key(&key) {
            let frozen = self.stage1(s1)?.student.clone();
            let run = match self.load_cached("stage2", &key) {
                Some(ck) => Stage2Run {
                    domain,
                    adapter: ck.group("adapter")?.clone(),
                    log: Vec::new(),
                    epoch_auc: Vec::new(),
                    first_grad_norm: f64::NAN,
                    base_digest: self
                        .cache_path("stage2", &key)
                        .and_then(|p| std::fs::read_to_string(p.with_extension("digest")).ok())
                        .unwrap_or_default(),
                },
                None => {
                    let model = s2.model;
                    let suite = if convergence {
                        self.suite(domain, s2.convergence_sequences)?.to_vec()
                    } else {
                        Vec::new()
                    };
                    let mut eval = |p: &ParameterSet, prefix: &str| -> Result<f64> {
                        Ok(evaluate_model(&model, p, Some(prefix), &suite)?.auc)
                    };
                    let cb: Option<&mut crate::trainer::EpochEval<'_>> = if convergence { Some(&mut eval) } else { None };
                    let run = train_stage2_dca(s2, &frozen, domain, &self.pools, cb)?;
                    self.store("stage2", &key, Checkpoint::new(key.clone()).with_group("adapter", run.adapter.clone()))?;
                    if let Some(p) = self.cache_path("stage2", &key) {
                        std::fs::write(p.with_extension("digest"), &run.base_digest)?;
                    }
                    run
                }
            };
            self.logs.insert(format!("stage2-{}", &key[..8]), run.log.clone());
            self.stage2.insert(key.clone(), run);
        }
        Ok(&self.stage2[&key])
    }

    /// Parameters and adapter prefix of `variant` for `domain`.
    pub fn model_for(&mut self, variant: Variant, domain: DomainTag) -> Result<(ParameterSet, Option<String>)> {
        let base = self.base.clone();
        self.model_for_cell(&base, variant, domain)
    }

    /// Like [`Runner::model_for`] with stage settings taken from `cell`
    /// instead of the runner's base configuration.
    pub fn model_for_cell(&mut self, cell: &TrainConfig, variant: Variant, domain: DomainTag) -> Result<(ParameterSet, Option<String>)> {
        let s1 = variant.stage1_config(cell);
        let mut params = self.stage1(&s1)?.student.clone();
        match variant.stage2_config(cell) {
            Some(s2) if domain.is_target() => {
                let adapter = self.stage2(&s1, &s2, domain)?.adapter.clone();
                params.merge(&adapter)?;
                Ok((params, Some(adapter_prefix(domain))))
            }
            _ => Ok((params, None)),
        }
    }

    pub fn evaluate_params(&mut self, params: &ParameterSet, adapter: Option<&str>, domain: DomainTag) -> Result<EvalResult> {
        let model = self.base.model;
        let n = self.base.eval_sequences;
        let suite = self.suite(domain, n)?;
        evaluate_model(&model, params, adapter, suite)
    }

    pub fn evaluate(&mut self, variant: Variant, domain: DomainTag) -> Result<EvalResult> {
        let base = self.base.clone();
        self.evaluate_cell(&base, variant, domain)
    }

    pub fn evaluate_cell(&mut self, cell: &TrainConfig, variant: Variant, domain: DomainTag) -> Result<EvalResult> {
        let (params, adapter) = self.model_for_cell(cell, variant, domain)?;
        self.evaluate_params(&params, adapter.as_deref(), domain)
    }
}
