//! Self-checks shared by the command line and the test suites: finite
//! difference checks of every differentiable component and an optimal
//! transport benchmark against the exact linear program.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::DomainTag;
use crate::error::Result;
use crate::losses::{focal_loss, giou_loss, l1_box};
use crate::model::{
    dca_forward, encode, head_forward, init_adapter, init_params, AdapterConfig, BnMode, EncoderConfig, HeadConfig,
    ModelConfig,
};
use crate::numerics::{grad_check, GradCheckConfig, ParameterSet, Tape, Tensor, Var};
use crate::tca::{lp_oracle, psot_objective, sinkhorn, solve_psot, PsotConfig, SinkhornConfig};

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub params_checked: usize,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Small model used for finite-difference checks.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            template_size: 8,
            search_size: 16,
            mlp_ratio: 2,
        },
        head: HeadConfig {
            channels: 4,
            layers: 2,
            ..HeadConfig::default()
        },
        adapter: AdapterConfig {
            bank_tokens: 3,
            init_std: 0.5,
        },
    }
}

fn weighted_sum<'t>(tape: &'t Tape, x: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    let w = Tensor::randn(&x.shape(), 1.0, rng);
    x.mul(tape.constant(w)?)?.sum()
}

fn entry(name: &str, tol: f64, report: crate::numerics::GradCheckReport) -> GradEntry {
    GradEntry {
        name: name.to_string(),
        max_rel_err: report.max_rel_err(),
        tol,
        params_checked: report.params.iter().filter(|p| !p.frozen).count(),
    }
}

/// Gradient checks of the losses, the transport loss, the adapter, the
/// encoder and the head.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig {
        eps: 1e-6,
        floor_scale: 1e-5,
        ..Default::default()
    };
    let mut out = Vec::new();

    let mut p = ParameterSet::new();
    p.insert("score", Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.05..0.95)))?;
    p.insert("pred", Tensor::from_fn(&[3, 4], |i| if i % 4 < 2 { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.1..0.4) }))?;
    let target = Tensor::from_fn(&[3, 4, 4], |i| if i % 16 == 5 { 1.0 } else { rng.gen_range(0.0..0.9) });
    let gt = Tensor::from_fn(&[3, 4], |i| if i % 4 < 2 { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.1..0.4) });
    let r = grad_check(|_, b| focal_loss(b.get("score")?, &target), &p.select("score"), &cfg)?;
    out.push(entry("focal", 1e-4, r));
    let r = grad_check(|t, b| l1_box(b.get("pred")?, t.constant(gt.clone())?), &p.select("pred"), &cfg)?;
    out.push(entry("l1", 1e-4, r));
    let r = grad_check(|t, b| giou_loss(b.get("pred")?, t.constant(gt.clone())?), &p.select("pred"), &cfg)?;
    out.push(entry("giou", 1e-4, r));

    let s = Tensor::from_fn(&[5, 3, 3], |_| rng.gen_range(0.05..0.95));
    let t = Tensor::from_fn(&[5, 3, 3], |_| rng.gen_range(0.05..0.95));
    for anchored in [false, true] {
        let pc = PsotConfig {
            anchored,
            ..Default::default()
        };
        let sol = solve_psot(&s, &t, &pc)?;
        let mut p = ParameterSet::new();
        p.insert("s", s.clone())?;
        p.insert("t", t.clone())?;
        let r = grad_check(
            |_, b| psot_objective(b.get("s")?, b.get("t")?, &sol),
            &p,
            &GradCheckConfig {
                max_coords: 45,
                ..cfg.clone()
            },
        )?;
        out.push(entry(if anchored { "psot-anchored" } else { "psot" }, 1e-3, r));
    }

    let model = tiny_model();
    let base = init_params(&model, &mut rng)?;
    let adapter = init_adapter(&model, DomainTag::Fog, &mut rng)?;
    let e = model.encoder;
    let z = Tensor::from_fn(&[2, 3, e.template_size, e.template_size], |_| rng.gen_range(-1.0..1.0));
    let x = Tensor::from_fn(&[2, 3, e.search_size, e.search_size], |_| rng.gen_range(-1.0..1.0));

    let wseed: u64 = rng.gen();

    let prefix = "adapter.fog";
    let r = grad_check(
        |tape, b| {
            let mut wr = ChaCha8Rng::seed_from_u64(wseed);
            let o = dca_forward(&model, b, prefix, tape.constant(x.clone())?)?;
            weighted_sum(tape, o.tokens, &mut wr)?.add(weighted_sum(tape, o.weights, &mut wr)?)
        },
        &adapter,
        &cfg,
    )?;
    out.push(entry("dca", 1e-4, r));

    let backbone = base.select("backbone.");
    let r = grad_check(
        |tape, b| {
            let mut wr = ChaCha8Rng::seed_from_u64(wseed);
            let y = encode(&e, b, tape.constant(z.clone())?, tape.constant(x.clone())?, None)?;
            weighted_sum(tape, y, &mut wr)
        },
        &backbone,
        &cfg,
    )?;
    out.push(entry("encoder", 1e-4, r));

    let head = base.select("head.");
    let g = e.grid();
    let feat = Tensor::from_fn(&[2, e.embed_dim, g, g], |_| rng.gen_range(-1.0..1.0));
    let r = grad_check(
        |tape, b| {
            let mut wr = ChaCha8Rng::seed_from_u64(wseed);
            let o = head_forward(&model.head, b, tape.constant(feat.clone())?, BnMode::Train)?;
            weighted_sum(tape, o.resp.scores, &mut wr)?
                .add(weighted_sum(tape, o.resp.offsets, &mut wr)?)?
                .add(weighted_sum(tape, o.resp.sizes, &mut wr)?)
        },
        &head,
        &cfg,
    )?;
    out.push(entry("head", 1e-4, r));
    Ok(out)
}

/// Worst-case statistics of entropic transport against the exact optimum.
#[derive(Debug, Clone, Serialize)]
pub struct OtBenchReport {
    pub instances: usize,
    pub epsilon: f64,
    /// Largest `(sinkhorn - lp) / lp`.
    pub max_rel_excess: f64,
    /// Smallest `sinkhorn - lp`.
    pub min_excess: f64,
    pub max_residual: f64,
    pub max_abs_gap: f64,
    /// Largest `|mean(mu)|`.
    pub max_gauge: f64,
    pub all_converged: bool,
    pub seconds: f64,
}

fn random_marginal(n: usize, uniform: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if uniform {
        return vec![1.0 / n as f64; n];
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut m: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let head: f64 = m[..n - 1].iter().sum();
    m[n - 1] = 1.0 - head;
    m
}

/// `instances` random problems with `N` cycling through 2, 3, 4 and
/// alternating uniform and random marginals.
pub fn ot_bench(instances: usize, epsilon: f64, seed: u64) -> Result<OtBenchReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SinkhornConfig {
        epsilon,
        ..Default::default()
    };
    let mut rep = OtBenchReport {
        instances,
        epsilon,
        max_rel_excess: f64::NEG_INFINITY,
        min_excess: f64::INFINITY,
        max_residual: 0.0,
        max_abs_gap: 0.0,
        max_gauge: 0.0,
        all_converged: true,
        seconds: 0.0,
    };
    for k in 0..instances {
        let n = 2 + k % 3;
        let c: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        let uniform = (k / 3) % 2 == 0;
        let a = random_marginal(n, uniform, &mut rng);
        let b = random_marginal(n, uniform, &mut rng);
        let r = sinkhorn(&c, &a, &b, &cfg)?;
        let lp = lp_oracle(&c, &a, &b)?.cost;
        let cost = r.plan.cost(&c);
        rep.max_rel_excess = rep.max_rel_excess.max((cost - lp) / lp);
        rep.min_excess = rep.min_excess.min(cost - lp);
        rep.max_residual = rep.max_residual.max(r.potentials.residual);
        rep.max_abs_gap = rep.max_abs_gap.max(r.primal_dual_gap(&c, &a, &b).abs());
        rep.max_gauge = rep.max_gauge.max((r.potentials.mu.iter().sum::<f64>() / n as f64).abs());
        rep.all_converged &= r.converged;
    }
    rep.seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}
