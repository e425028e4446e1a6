use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use umda_core::datagen::{build_pools, DomainTag, Frame, SceneConfig};
use umda_core::diagnostics::{gradient_suite, ot_bench};
use umda_core::eval::{ablate, eval_suite, evaluate_model, export_metrics, FrameSource};
use umda_core::experiment::{eval_sequences, Runner, Variant};
use umda_core::model::{adapter_prefix, Checkpoint};
use umda_core::trainer::{backbone_checkpoint, train_stage2_from_checkpoint, write_run, EmaFrequency, TrainConfig, BACKBONE_GROUP};
use umda_core::weather::{self, WeatherKind};

#[derive(Parser)]
#[command(name = "umda", version, about = "Multi-domain adaptive tracking at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// fog, dark, rain or source
    #[arg(long, global = true)]
    domain: Option<String>,
    /// Extra key=value settings applied after the config file
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a sequence directory with the --domain weather
    Synth {
        /// Directory of NNNN.ppm frames, as written by gen-data
        #[arg(long)]
        input: PathBuf,
    },
    /// Write clean synthetic sequences as PPM frame directories
    GenData {
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 40)]
        length: usize,
        /// Also write this many training crops per pool under OUT/crops
        #[arg(long, default_value_t = 0)]
        crops: usize,
    },
    /// Source pretraining followed by teacher-student adaptation
    TrainBackbone {
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train one domain adapter on a frozen checkpoint
    TrainDca {
        /// Defaults to OUT/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out sequences
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip the domain adapter even if the checkpoint has one
        #[arg(long)]
        no_adapter: bool,
    },
    /// Train and evaluate a named configuration grid across seeds
    Ablate {
        /// components, ema or ratios
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Reuse trained parameters stored under OUT/cache
        #[arg(long)]
        cache: bool,
    },
    /// Compare entropic transport against the exact linear program
    OtBench {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
    },
    /// Finite-difference checks of every differentiable component
    GradCheck,
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn domain(c: &Common, default: Option<DomainTag>) -> Result<DomainTag> {
    match (&c.domain, default) {
        (Some(d), _) => Ok(d.parse()?),
        (None, Some(d)) => Ok(d),
        (None, None) => bail!("--domain is required"),
    }
}

/// Seed of the corruption applied to frame `t`.
fn frame_weather_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64)
}

fn ppm_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    frames.sort();
    if frames.is_empty() {
        bail!("no .ppm frames in {}", dir.display());
    }
    Ok(frames)
}

fn synth(c: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let tag = domain(c, None)?;
    let kind = WeatherKind::for_domain(tag).with_context(|| "--domain must be fog, dark or rain")?;
    let base = cfg.weather.iter().find(|p| p.kind == kind).copied().expect("one slot per kind");
    let frames = ppm_frames(input)?;
    fs::create_dir_all(&c.out)?;
    let mut manifest = String::new();
    for (t, path) in frames.iter().enumerate() {
        let clean = Frame::load_ppm(path, DomainTag::Source).with_context(|| format!("reading {}", path.display()))?;
        let params = base.with_seed(frame_weather_seed(cfg.seed, t));
        let out = weather::apply(&clean, &params)?;
        let file = path.file_name().expect("listed files have names");
        out.save_ppm(&c.out.join(file))?;
        let line = json!({
            "frame": t,
            "file": file.to_string_lossy(),
            "kind": tag.name(),
            "params": params,
            "seed": params.seed,
            "ssim": weather::ssim(&clean, &out)?,
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    fs::write(c.out.join("manifest.jsonl"), manifest)?;
    let ann = input.join(ANNOTATIONS);
    if ann.exists() {
        fs::copy(&ann, c.out.join(ANNOTATIONS))?;
    }
    println!("wrote {} {tag} frames to {}", frames.len(), c.out.display());
    Ok(())
}

const ANNOTATIONS: &str = "annotations.txt";

fn gen_data(c: &Common, sequences: usize, length: usize, crops: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let scene = SceneConfig {
        length,
        ..cfg.data.scene.clone()
    };
    let suite = eval_suite(&scene, None, sequences, cfg.seed)?;
    for (k, seq) in suite.iter().enumerate() {
        let dir = c.out.join(format!("seq_{k:03}"));
        fs::create_dir_all(&dir)?;
        let mut ann = String::new();
        for t in 0..seq.len() {
            seq.frame(t)?.save_ppm(&dir.join(format!("{t:04}.ppm")))?;
            let b = seq.annotation(t);
            ann.push_str(&format!("{t} {} {} {} {}\n", b.cx, b.cy, b.w, b.h));
        }
        fs::write(dir.join(ANNOTATIONS), ann)?;
    }
    println!("wrote {sequences} sequences of {length} frames to {}", c.out.display());
    if crops == 0 {
        return Ok(());
    }
    let pools = build_pools(&cfg.data, &cfg.weather, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dir = c.out.join("crops");
    fs::create_dir_all(&dir)?;
    let mut index = String::from("pool,domain,sample,scene,frame,label_cx,label_cy,label_w,label_h\n");
    for (k, pool) in pools.pools.iter().enumerate() {
        for s in 0..crops {
            let pair = pool.draw(k, &cfg.jitter, &mut rng)?;
            let stem = format!("{}_{s:02}", pool.name);
            pair.template.save_ppm(&dir.join(format!("{stem}_z.ppm")))?;
            pair.search.save_ppm(&dir.join(format!("{stem}_x.ppm")))?;
            let label = pair
                .label_box
                .map_or(",,,".to_string(), |b| format!("{},{},{},{}", b.cx, b.cy, b.w, b.h));
            index.push_str(&format!(
                "{},{},{s},{},{},{label}\n",
                pool.name, pool.domain, pair.origin.scene, pair.origin.frame
            ));
        }
        println!("{:<18} {:>6} frames", pool.name, pool.len());
    }
    fs::write(dir.join("samples.csv"), index)?;
    Ok(())
}

fn train_backbone(c: &Common, variant: &str) -> Result<()> {
    let cfg = load_config(c)?;
    let variant: Variant = variant.parse()?;
    let s1 = variant.stage1_config(&cfg);
    let mut runner = Runner::new(cfg.clone(), None)?;
    let student = runner.stage1(&s1)?.student.clone();
    let mut log = runner.logs.get("pretrain").cloned().unwrap_or_default();
    for (k, v) in &runner.logs {
        if k.starts_with("stage1") {
            log.extend(v.iter().cloned());
        }
    }
    let ck = backbone_checkpoint(&cfg.model, &student);
    write_run(&c.out, &s1, &log, Some(&ck))?;
    let clean = runner.evaluate_params(&student, None, DomainTag::Source)?;
    println!("trained {variant} backbone, source AUC {:.4}, wrote {}", clean.auc, c.out.join("model.ckpt").display());
    Ok(())
}

fn train_dca(c: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let tag = domain(c, None)?;
    if !tag.is_target() {
        bail!("--domain must be fog, dark or rain");
    }
    let path = checkpoint.unwrap_or_else(|| c.out.join("model.ckpt"));
    let pools = build_pools(&cfg.data, &cfg.weather, cfg.seed)?;
    let suite = eval_sequences(&cfg, tag, cfg.convergence_sequences)?;
    let model = cfg.model;
    let mut eval = |p: &umda_core::numerics::ParameterSet, prefix: &str| -> umda_core::Result<f64> {
        Ok(evaluate_model(&model, p, Some(prefix), &suite)?.auc)
    };
    let cb: Option<&mut umda_core::trainer::EpochEval<'_>> = if suite.is_empty() { None } else { Some(&mut eval) };
    let (ck, run) = train_stage2_from_checkpoint(&cfg, &path, tag, &pools, cb)?;
    let mut ck = ck;
    ck.groups.insert(adapter_prefix(tag), run.adapter.clone());
    ck.save(&path)?;
    let dir = c.out.join(format!("dca-{tag}"));
    write_run(&dir, &cfg, &run.log, None)?;
    let mut curve = String::from("epoch,auc\n");
    for (e, a) in run.epoch_auc.iter().enumerate() {
        curve.push_str(&format!("{},{a:.6}\n", e + 1));
    }
    fs::write(dir.join("convergence.csv"), curve)?;
    println!("trained {tag} adapter ({} epochs), stored in {}", cfg.epochs_stage2, path.display());
    Ok(())
}

fn eval_cmd(c: &Common, checkpoint: Option<PathBuf>, no_adapter: bool) -> Result<()> {
    let cfg = load_config(c)?;
    let tag = domain(c, Some(DomainTag::Source))?;
    let path = checkpoint.unwrap_or_else(|| c.out.join("model.ckpt"));
    let ck = Checkpoint::load_expecting(&path, &cfg.model.fingerprint())?;
    let mut params = ck.group(BACKBONE_GROUP)?.clone();
    let prefix = adapter_prefix(tag);
    let adapter = match ck.groups.get(&prefix) {
        Some(a) if !no_adapter && tag.is_target() => {
            params.merge(a)?;
            Some(prefix)
        }
        _ => None,
    };
    let suite = eval_sequences(&cfg, tag, cfg.eval_sequences)?;
    let result = evaluate_model(&cfg.model, &params, adapter.as_deref(), &suite)?;
    let name = format!("{tag}{}", if adapter.is_some() { "-dca" } else { "" });
    let (summary, files) = export_metrics(&c.out, &name, &result, &cfg.fingerprint(), &[cfg.seed], &[])?;
    println!(
        "{name}: AUC {:.4}  P@{}px {:.4}  AO {:.4}  SR50 {:.4}  SR75 {:.4}  ({})",
        summary.auc,
        summary.precision_px,
        summary.precision,
        summary.ao,
        summary.sr50,
        summary.sr75,
        files.summary_json.display()
    );
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|v| v.trim().parse::<u64>().with_context(|| format!("bad seed '{v}'")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

/// `(name, stage-1 settings, variant)` cells of a named grid.
fn grid_cells(grid: &str, base: &TrainConfig) -> Result<Vec<(String, (TrainConfig, Variant))>> {
    Ok(match grid {
        "components" => Variant::ALL.iter().map(|v| (v.name().to_string(), (base.clone(), *v))).collect(),
        "ema" => [EmaFrequency::PerBatch, EmaFrequency::PerEpoch, EmaFrequency::EveryKEpochs(5)]
            .iter()
            .map(|f| {
                let mut c = base.clone();
                c.ema_frequency = *f;
                (format!("ema-{f}"), (c, Variant::Tca))
            })
            .collect(),
        "ratios" => [("1-1-1-1-1-1-1", [1.0; 7]), ("1-1-1-1-4-4-4", [1.0, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0]), ("1-1-1-1-8-8-8", [1.0, 1.0, 1.0, 1.0, 8.0, 8.0, 8.0])]
            .iter()
            .map(|(n, r)| {
                let mut c = base.clone();
                c.ratios = r.to_vec();
                (format!("ratios-{n}"), (c, Variant::Tca))
            })
            .collect(),
        other => bail!("unknown grid '{other}' (components, ema, ratios)"),
    })
}

fn ablate_cmd(c: &Common, grid: &str, seeds: &str, cache: bool) -> Result<()> {
    let cfg = load_config(c)?;
    let tag = domain(c, Some(DomainTag::Fog))?;
    let seeds = parse_seeds(seeds)?;
    let cells = grid_cells(grid, &cfg)?;
    let baseline = cells[0].0.clone();
    let cache_dir = cache.then(|| c.out.join("cache"));
    let mut runners: Vec<(u64, Runner)> = Vec::new();
    let table = ablate(&cells, &seeds, &baseline, |name, (cell_cfg, v), seed| {
        if !runners.iter().any(|(s, _)| *s == seed) {
            let mut base = cfg.clone();
            base.seed = seed;
            runners.push((seed, Runner::new(base, cache_dir.clone())?));
        }
        let runner = &mut runners.iter_mut().find(|(s, _)| *s == seed).expect("inserted").1;
        let mut cell = cell_cfg.clone();
        cell.seed = seed;
        let auc = runner.evaluate_cell(&cell, *v, tag)?.auc;
        eprintln!("{name} seed {seed}: AUC {auc:.4}");
        Ok(auc)
    })?;
    fs::create_dir_all(&c.out)?;
    let path = c.out.join(format!("ablation-{grid}-{tag}.csv"));
    fs::write(&path, table.to_csv())?;
    print!("{}", table.to_csv());
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Command::Synth { input } => synth(c, &input),
        Command::GenData { sequences, length, crops } => gen_data(c, sequences, length, crops),
        Command::TrainBackbone { variant } => train_backbone(c, &variant),
        Command::TrainDca { checkpoint } => train_dca(c, checkpoint),
        Command::Eval { checkpoint, no_adapter } => eval_cmd(c, checkpoint, no_adapter),
        Command::Ablate { grid, seeds, cache } => ablate_cmd(c, &grid, &seeds, cache),
        Command::OtBench { instances, epsilon } => {
            let r = ot_bench(instances, epsilon, c.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::GradCheck => {
            let suite = gradient_suite(c.seed.unwrap_or(0))?;
            let mut failed = 0;
            for e in &suite {
                println!("{:<14} {:.3e} < {:.0e} {}", e.name, e.max_rel_err, e.tol, if e.passed() { "ok" } else { "FAIL" });
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
