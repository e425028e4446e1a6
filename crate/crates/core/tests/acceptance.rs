//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Set `UMDA_ACCEPTANCE_CACHE=DIR` to reuse
//! trained parameters between invocations.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umda_core::datagen::{build_pools, DomainTag};
use umda_core::diagnostics::{gradient_suite, ot_bench};
use umda_core::eval::{evaluate_model, median};
use umda_core::experiment::{eval_sequences, Runner, Variant};
use umda_core::numerics::{ParameterSet, Tensor};
use umda_core::tca::{confidence_batch, cost_map, Network};
use umda_core::trainer::{pretrain, train_stage1, train_stage2_dca, EmaFrequency, Stage1Run, TrainConfig};
use umda_core::Result;

struct Outcome {
    name: &'static str,
    pass: bool,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass }
}

fn ot_criteria(out: &mut Vec<Outcome>) -> Result<()> {
    let r = ot_bench(200, 0.01, 2024)?;
    let pass = r.max_rel_excess <= 0.02 && r.min_excess >= -1e-9 && r.max_residual < 1e-9 && r.seconds < 10.0;
    out.push(report(
        "ot-correctness",
        pass,
        format!(
            "200 instances, max excess {:.3}%, min excess {:.2e}, max residual {:.2e}, {:.2}s",
            100.0 * r.max_rel_excess,
            r.min_excess,
            r.max_residual,
            r.seconds
        ),
    ));
    let pass = r.max_abs_gap < 1e-6 && r.max_gauge == 0.0 && r.all_converged;
    out.push(report(
        "dual-consistency",
        pass,
        format!("max |gap| {:.2e}, max |mean(mu)| {:e}, converged {}", r.max_abs_gap, r.max_gauge, r.all_converged),
    ));
    Ok(())
}

fn gradient_criterion(out: &mut Vec<Outcome>) -> Result<()> {
    let start = Instant::now();
    let suite = gradient_suite(7)?;
    let secs = start.elapsed().as_secs_f64();
    let worst: Vec<String> = suite.iter().map(|e| format!("{} {:.1e}", e.name, e.max_rel_err)).collect();
    let pass = suite.len() == 8 && suite.iter().all(|e| e.passed()) && secs < 120.0;
    out.push(report("gradient-suite", pass, format!("{} in {secs:.1}s", worst.join(", "))));
    Ok(())
}

fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_overrides(&[
        "scenes_per_style=2",
        "sequence_length=10",
        "target_clips=2",
        "clip_len=4",
        "batch_size=4",
        "steps_per_epoch=3",
        "pretrain_epochs=2",
        "epochs_stage1=4",
        "epochs_stage2=2",
        "eval_sequences=3",
        "eval_length=8",
        "convergence_sequences=2",
        "alpha=0.8",
    ])
    .expect("valid overrides");
    c.seed = seed;
    c
}

fn replay_matches(run: &Stage1Run, alpha: f64) -> bool {
    let mut teacher = run.initial_teacher.clone();
    for snap in &run.snapshots {
        for (name, s) in snap.iter() {
            let t = teacher.get_mut(name).expect("same schema");
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = alpha * *a + (1.0 - alpha) * b;
            }
        }
    }
    run.teacher
        .iter()
        .all(|(name, t)| t.data().iter().zip(teacher.get(name).expect("same schema").data()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn ema_exactness(out: &mut Vec<Outcome>) -> Result<()> {
    let mut checked = Vec::new();
    let mut pass = true;
    for freq in [EmaFrequency::PerBatch, EmaFrequency::PerEpoch, EmaFrequency::EveryKEpochs(2)] {
        let mut cfg = small_config(3);
        cfg.ema_frequency = freq;
        let pools = build_pools(&cfg.data, &cfg.weather, cfg.seed)?;
        let init = pretrain(&cfg, &pools)?.params;
        let run = train_stage1(&cfg, &init, &pools, true)?;
        let ok = replay_matches(&run, cfg.alpha) && !run.snapshots.is_empty();
        pass &= ok;
        checked.push(format!("{freq}: {} updates {}", run.snapshots.len(), if ok { "exact" } else { "MISMATCH" }));
    }
    out.push(report("ema-exactness", pass, checked.join(", ")));
    Ok(())
}

fn peak(m: &Tensor, i: usize, cells: usize) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..cells {
        let v = m.data()[i * cells + k];
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

fn cost_map_criterion(out: &mut Vec<Outcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (h, w) = (8usize, 8usize);
    let mut worst = 0.0f64;
    let mut maxima_ok = true;
    let trials = 300;
    for trial in 0..trials {
        let n = 1 + trial % 16;
        let coarse = trial % 3 == 0;
        let mut draw = || -> Tensor {
            Tensor::from_fn(&[n, h, w], |_| {
                let v: f64 = rng.gen();
                if coarse {
                    (v * 3.0).floor() / 3.0
                } else {
                    v
                }
            })
        };
        let (s, t) = (draw(), draw());
        let c = cost_map(&confidence_batch(&s, None, Network::Student)?, &confidence_batch(&t, None, Network::Teacher)?)?;
        let mut conf = vec![0.0; n * n];
        let mut pos = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (ki, vi) = peak(&s, i, h * w);
                let (kj, vj) = peak(&t, j, h * w);
                conf[i * n + j] = (vi - vj).abs();
                let dr = (ki / w) as f64 - (kj / w) as f64;
                let dc = (ki % w) as f64 - (kj % w) as f64;
                pos[i * n + j] = (dr * dr + dc * dc).sqrt();
            }
        }
        if n == 1 {
            conf[0] = 0.0;
            pos[0] = 0.0;
        }
        let cmax = conf.iter().copied().fold(0.0, f64::max);
        let pmax = pos.iter().copied().fold(0.0, f64::max);
        for k in 0..n * n {
            let wc = if cmax > 0.0 { conf[k] / cmax } else { 0.0 };
            let wp = if pmax > 0.0 { pos[k] / pmax } else { 0.0 };
            worst = worst
                .max((c.conf[k] - wc).abs())
                .max((c.pos[k] - wp).abs())
                .max((c.total[k] - wc - wp).abs());
        }
        let cm = c.conf.iter().copied().fold(0.0, f64::max);
        let pm = c.pos.iter().copied().fold(0.0, f64::max);
        maxima_ok &= (if cmax > 0.0 { cm == 1.0 } else { cm == 0.0 }) && (if pmax > 0.0 { pm == 1.0 } else { pm == 0.0 });
    }
    out.push(report(
        "cost-map-equivalence",
        worst < 1e-12 && maxima_ok,
        format!("{trials} batches N<=16, max deviation {worst:.1e}, normalized maxima {}", if maxima_ok { "ok" } else { "WRONG" }),
    ));
    Ok(())
}

fn determinism(out: &mut Vec<Outcome>) -> Result<()> {
    let once = || -> Result<(Vec<String>, f64)> {
        let cfg = small_config(11);
        let pools = build_pools(&cfg.data, &cfg.weather, cfg.seed)?;
        let pre = pretrain(&cfg, &pools)?;
        let s1 = train_stage1(&cfg, &pre.params, &pools, false)?;
        let suite = eval_sequences(&cfg, DomainTag::Fog, cfg.convergence_sequences)?;
        let mut eval = |p: &ParameterSet, prefix: &str| -> Result<f64> { Ok(evaluate_model(&cfg.model, p, Some(prefix), &suite)?.auc) };
        let s2 = train_stage2_dca(&cfg, &s1.student, DomainTag::Fog, &pools, Some(&mut eval))?;
        let mut log = pre.log;
        log.extend(s1.log);
        log.extend(s2.log);
        let auc = evaluate_model(&cfg.model, &s1.student, None, &eval_sequences(&cfg, DomainTag::Source, cfg.eval_sequences)?)?.auc;
        Ok((log, auc))
    };
    let (a, auc_a) = once()?;
    let (b, auc_b) = once()?;
    let pass = a == b && auc_a.to_bits() == auc_b.to_bits();
    out.push(report("determinism", pass, format!("{} log lines, identical {}", a.len(), pass)));
    Ok(())
}

fn fmt_med(v: &[f64]) -> String {
    format!("{:.4} [{}]", median(v), v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
}

fn training_criteria(out: &mut Vec<Outcome>) -> Result<()> {
    let cache = std::env::var_os("UMDA_ACCEPTANCE_CACHE").map(PathBuf::from);
    let trend_seeds: Vec<u64> = (0..5).collect();
    let mut fog = std::collections::BTreeMap::<Variant, Vec<f64>>::new();
    let mut frozen_auc = Vec::new();
    let mut adapted_auc = Vec::new();
    let mut digests_ok = true;
    let mut per_epoch = Vec::new();
    let mut every5 = Vec::new();
    let mut gaps: [Vec<f64>; 3] = Default::default();
    let mut clean = Vec::new();

    let start = Instant::now();
    let mut grid_secs = 0.0;
    for &seed in &trend_seeds {
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut runner = Runner::new(base.clone(), cache.clone())?;
        let t0 = Instant::now();
        for v in Variant::ALL {
            let auc = runner.evaluate(v, DomainTag::Fog)?.auc;
            eprintln!("seed {seed} {v} fog AUC {auc:.4} ({:.0}s)", start.elapsed().as_secs_f64());
            fog.entry(v).or_default().push(auc);
        }
        grid_secs += t0.elapsed().as_secs_f64();
        if seed >= 3 {
            continue;
        }

        let s1 = Variant::Full.stage1_config(&base);
        let s2 = Variant::Full.stage2_config(&base).expect("full has a second stage");
        let frozen_digest = runner.stage1(&s1)?.student.digest();
        let run_digest = runner.stage2(&s1, &s2, DomainTag::Fog)?.base_digest.clone();
        digests_ok &= run_digest == frozen_digest;
        let (frozen, _) = runner.model_for(Variant::Tca, DomainTag::Fog)?;
        frozen_auc.push(runner.evaluate_params(&frozen, None, DomainTag::Fog)?.auc);
        adapted_auc.push(fog[&Variant::Full][seed as usize]);

        per_epoch.push(fog[&Variant::Tca][seed as usize]);
        let mut slow = base.clone();
        slow.ema_frequency = EmaFrequency::EveryKEpochs(5);
        every5.push(runner.evaluate_cell(&slow, Variant::Tca, DomainTag::Fog)?.auc);

        let src = runner.evaluate(Variant::Baseline, DomainTag::Source)?.auc;
        clean.push(src);
        for (k, d) in DomainTag::TARGETS.into_iter().enumerate() {
            let auc = if d == DomainTag::Fog {
                fog[&Variant::Baseline][seed as usize]
            } else {
                runner.evaluate(Variant::Baseline, d)?.auc
            };
            gaps[k].push(src - auc);
        }
    }

    let full = median(&fog[&Variant::Full]);
    let baseline = median(&fog[&Variant::Baseline]);
    let cached = cache.is_some();
    let timing_ok = cached || grid_secs < 3600.0;
    let partial: Vec<String> = Variant::ALL.iter().map(|v| format!("{v} {}", fmt_med(&fog[v]))).collect();
    out.push(report(
        "adaptation-trend",
        full > baseline && full - baseline >= 0.05 && timing_ok,
        format!(
            "fog over 5 seeds: {}; full - baseline {:+.4}; grid {:.0} min{}",
            partial.join("; "),
            full - baseline,
            grid_secs / 60.0,
            if cached { " (cache enabled)" } else { "" }
        ),
    ));
    out.push(report(
        "freeze-contract",
        digests_ok && median(&adapted_auc) >= median(&frozen_auc),
        format!(
            "frozen bytes {}, fog AUC with adapter {} vs frozen without {}",
            if digests_ok { "identical" } else { "CHANGED" },
            fmt_med(&adapted_auc),
            fmt_med(&frozen_auc)
        ),
    ));
    out.push(report(
        "ema-frequency",
        median(&per_epoch) >= median(&every5),
        format!("fog AUC per-epoch {} vs every-5 {}", fmt_med(&per_epoch), fmt_med(&every5)),
    ));
    let ok = gaps.iter().all(|g| median(g) >= 0.05);
    let detail: Vec<String> = DomainTag::TARGETS
        .iter()
        .zip(&gaps)
        .map(|(d, g)| format!("{d} gap {}", fmt_med(g)))
        .collect();
    out.push(report(
        "corruption-sanity",
        ok,
        format!("source-only clean AUC {}; {}", fmt_med(&clean), detail.join("; ")),
    ));
    Ok(())
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut out = Vec::new();
    let steps: [(&str, fn(&mut Vec<Outcome>) -> Result<()>); 6] = [
        ("ot", ot_criteria),
        ("gradients", gradient_criterion),
        ("ema", ema_exactness),
        ("cost-map", cost_map_criterion),
        ("determinism", determinism),
        ("training", training_criteria),
    ];
    let mut errors = 0;
    for (name, step) in steps {
        if let Err(e) = step(&mut out) {
            println!("FAIL {name}: {e}");
            errors += 1;
        }
    }
    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        out.iter().filter(|o| o.pass).count(),
        failed.len() + errors,
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if failed.is_empty() && errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
