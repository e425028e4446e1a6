use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umda_core::datagen::{BBox, DomainTag, Frame, SceneConfig};
use umda_core::error::{Error, Result};
use umda_core::eval::{
    ablate, eval_suite, evaluate_model, evaluate_tracker, export_metrics, load_summary, run_ope, success_curve,
    success_rate, thresholds, AblationTable, EvalResult, EvalSequence, FrameSource, ModelTracker, SequenceResult,
    Tracker, DEFAULT_PRECISION_PX, SUCCESS_THRESHOLDS,
};
use umda_core::model::{init_params, ModelConfig};

fn scene(length: usize) -> SceneConfig {
    SceneConfig {
        length,
        ..SceneConfig::default()
    }
}

struct Oracle {
    truth: Vec<BBox>,
    t: usize,
}

impl Tracker for Oracle {
    fn init(&mut self, _: &Frame, _: &BBox) -> Result<()> {
        self.t = 0;
        Ok(())
    }

    fn track(&mut self, _: &Frame) -> Result<BBox> {
        self.t += 1;
        Ok(self.truth[self.t])
    }
}

struct Away;

impl Tracker for Away {
    fn init(&mut self, _: &Frame, _: &BBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, _: &Frame) -> Result<BBox> {
        Ok(BBox::new(-500.0, -500.0, 10.0, 10.0))
    }
}

#[test]
fn oracle_tracker_scores_perfectly() {
    let seqs = eval_suite(&scene(8), None, 3, 5).unwrap();
    let mut results = Vec::new();
    for s in &seqs {
        let mut o = Oracle {
            truth: (0..s.len()).map(|t| s.annotation(t)).collect(),
            t: 0,
        };
        let r = run_ope(&mut o, s).unwrap();
        assert_eq!(r.ious.len(), s.len() - 1);
        results.push(r);
    }
    let res = EvalResult::from_sequences(results, DEFAULT_PRECISION_PX).unwrap();
    assert_eq!(res.auc, 1.0);
    assert_eq!(res.precision, 1.0);
    assert_eq!(res.success.len(), SUCCESS_THRESHOLDS);
    assert!(res.success.iter().all(|&s| s == 1.0));
}

#[test]
fn disjoint_tracker_scores_zero() {
    let seqs = eval_suite(&scene(6), None, 2, 9).unwrap();
    let refs: Vec<&dyn FrameSource> = seqs.iter().map(|s| s as &dyn FrameSource).collect();
    let res = evaluate_tracker(&mut Away, &refs).unwrap();
    assert_eq!(res.auc, 0.0);
    assert_eq!(res.precision, 0.0);
    assert_eq!(res.ao, 0.0);
}

#[test]
fn empty_inputs_are_rejected() {
    assert!(matches!(EvalResult::from_sequences(Vec::new(), 5.0), Err(Error::Validation(_))));
    let short = eval_suite(&scene(1), None, 1, 0);
    if let Ok(seqs) = short {
        assert!(run_ope(&mut Away, &seqs[0]).is_err());
    }
}

proptest! {
    #[test]
    fn success_matches_a_recount(ious in prop::collection::vec(0.0f64..=1.0, 1..60)) {
        let n = ious.len() as f64;
        let above = ious.iter().filter(|&&v| v > 0.5).count() as f64;
        prop_assert_eq!(success_rate(&ious, 0.5), above / n);
        let curve = success_curve(&ious);
        prop_assert_eq!(curve.len(), SUCCESS_THRESHOLDS);
        prop_assert!(curve.windows(2).all(|w| w[0] >= w[1]));
        for (t, s) in thresholds().iter().zip(&curve) {
            prop_assert_eq!(*s, success_rate(&ious, *t));
        }
    }

    #[test]
    fn precision_is_monotone_in_the_radius(seed in 0u64..500) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<BBox> = (0..12).map(|_| BBox::new(rng.gen_range(20.0..100.0), rng.gen_range(20.0..100.0), 20.0, 20.0)).collect();
        let pred: Vec<BBox> = truth.iter().map(|b| BBox::new(b.cx + rng.gen_range(-15.0..15.0), b.cy, 20.0, 20.0)).collect();
        let r = SequenceResult::score("s".into(), DomainTag::Source, pred, &truth);
        let res = EvalResult::from_sequences(vec![r], 5.0).unwrap();
        let curve: Vec<f64> = (0..=20).map(|px| res.precision_at(px as f64)).collect();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(res.precision, res.precision_at(5.0));
    }
}

#[test]
fn metrics_average_over_sequences() {
    let truth = vec![BBox::new(50.0, 50.0, 20.0, 20.0); 4];
    let a = SequenceResult::score("a".into(), DomainTag::Fog, truth.clone(), &truth);
    let b = SequenceResult::score("b".into(), DomainTag::Fog, vec![BBox::new(-50.0, 0.0, 5.0, 5.0); 2], &truth[..2]);
    let res = EvalResult::from_sequences(vec![a, b], 5.0).unwrap();
    assert_eq!(res.auc, 0.5);
    assert_eq!(res.sr50, 0.5);
}

#[test]
fn batched_evaluation_matches_the_frame_by_frame_tracker() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut seqs = eval_suite(&scene(6), None, 3, 21).unwrap();
    seqs.push(eval_suite(&scene(4), None, 1, 22).unwrap().remove(0));
    let batched = evaluate_model(&cfg, &params, None, &seqs).unwrap();
    for (s, b) in seqs.iter().zip(&batched.sequences) {
        let mut t = ModelTracker::new(cfg, &params, None);
        let r = run_ope(&mut t, s).unwrap();
        assert_eq!(r.predictions.len(), b.predictions.len());
        for (p, q) in r.predictions.iter().zip(&b.predictions) {
            for (u, v) in [(p.cx, q.cx), (p.cy, q.cy), (p.w, q.w), (p.h, q.h)] {
                assert!((u - v).abs() < 1e-9, "{}", s.name());
            }
        }
    }
}

#[test]
fn ablation_rows_are_sorted_with_recomputed_deltas() {
    let configs: Vec<(String, f64)> = vec![("tca".into(), 0.2), ("baseline".into(), 0.0), ("full".into(), 0.3)];
    let table = ablate(&configs, &[0, 1, 2], "baseline", |_, off, seed| Ok(0.4 + off + 0.01 * seed as f64)).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, vec!["baseline", "full", "tca"]);
    let base = table.row("baseline").unwrap().median;
    for r in &table.rows {
        let mut a = r.aucs.clone();
        a.sort_by(f64::total_cmp);
        assert_eq!(r.median, a[1]);
        assert_eq!(r.delta, Some(r.median - base));
    }
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("config,seeds,median_auc"));

    let single = AblationTable::new(vec![("only".into(), vec![(7, 0.5)])], "only").unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.rows[0].median, 0.5);
    assert_eq!(single.rows[0].delta, Some(0.0));
    let no_base = AblationTable::new(vec![("x".into(), vec![(0, 0.5)])], "baseline").unwrap();
    assert_eq!(no_base.rows[0].delta, None);
    assert!(AblationTable::new(vec![("x".into(), vec![])], "x").is_err());
}

fn some_result() -> EvalResult {
    let seqs: Vec<EvalSequence> = eval_suite(&scene(6), None, 2, 3).unwrap();
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    evaluate_model(&cfg, &params, None, &seqs).unwrap()
}

#[test]
fn export_round_trips() {
    let res = some_result();
    let dir = tempfile::tempdir().unwrap();
    let (summary, files) = export_metrics(dir.path(), "fog", &res, "abc", &[0, 1], &[0.1, 0.2]).unwrap();
    let body = fs::read_to_string(&files.success_csv).unwrap();
    let rows: Vec<&str> = body.lines().skip(1).collect();
    assert_eq!(rows.len(), 21);
    let values: Vec<f64> = rows.iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!((mean - summary.auc).abs() < 1e-12);
    assert_eq!(fs::read_to_string(&files.precision_csv).unwrap().lines().count(), 22);
    assert_eq!(fs::read_to_string(files.convergence_csv.as_ref().unwrap()).unwrap().lines().count(), 3);
    let back = load_summary(&files.summary_json).unwrap();
    assert_eq!(back, summary);
    assert_eq!(back.run_id.len(), 12);
    assert_eq!(back.sequences, 2);
    let (again, files2) = export_metrics(dir.path(), "dark", &res, "abc", &[0, 1], &[]).unwrap();
    assert_eq!(again.run_id, summary.run_id);
    assert!(files2.convergence_csv.is_none());
}

#[test]
fn unwritable_export_is_an_io_error() {
    let res = some_result();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let r = export_metrics(&blocker.join("sub"), "fog", &res, "abc", &[0], &[]);
    assert!(matches!(r, Err(Error::Io(_))), "{:?}", r.err());
}
