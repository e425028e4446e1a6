use proptest::prelude::*;
use umda_core::losses::{focal_loss, giou, giou_loss, l1_box, total_loss, LossWeights, SupervisedTerms};
use umda_core::numerics::{grad_check, GradCheckConfig, ParameterSet, Tape, Tensor};

fn raster_iou(a: [f64; 4], b: [f64; 4], res: usize) -> f64 {
    let bounds = |r: [f64; 4]| (r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
    let (a, b) = (bounds(a), bounds(b));
    let (x0, y0) = (a.0.min(b.0), a.1.min(b.1));
    let (x1, y1) = (a.2.max(b.2), a.3.max(b.3));
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..res {
        for j in 0..res {
            let x = x0 + (x1 - x0) * (j as f64 + 0.5) / res as f64;
            let y = y0 + (y1 - y0) * (i as f64 + 0.5) / res as f64;
            let ina = x >= a.0 && x < a.2 && y >= a.1 && y < a.3;
            let inb = x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
            inter += (ina && inb) as usize;
            union += (ina || inb) as usize;
        }
    }
    inter as f64 / union as f64
}

fn giou_value(a: [f64; 4], b: [f64; 4]) -> f64 {
    let tape = Tape::new();
    let va = tape.constant(Tensor::new(&[1, 4], a.to_vec()).unwrap()).unwrap();
    let vb = tape.constant(Tensor::new(&[1, 4], b.to_vec()).unwrap()).unwrap();
    giou(va, vb).unwrap().item()
}

#[test]
fn nested_half_area_box_matches_rasterization() {
    let outer = [0.5, 0.5, 1.0, 1.0];
    let inner = [0.5, 0.25, 1.0, 0.5];
    let exact = giou_value(outer, inner);
    assert!((exact - 0.5).abs() < 1e-15);
    assert!((exact - raster_iou(outer, inner, 1000)).abs() < 1e-3);
}

fn box_strategy() -> impl Strategy<Value = [f64; 4]> {
    (0.0f64..1.0, 0.0f64..1.0, 0.05f64..0.6, 0.05f64..0.6).prop_map(|(a, b, c, d)| [a, b, c, d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn giou_of_overlapping_boxes_matches_raster(a in box_strategy(), b in box_strategy()) {
        let g = giou_value(a, b);
        // with overlap the enclosing term is tiny relative to raster error; compare IoU separately
        let tape = Tape::new();
        let va = tape.constant(Tensor::new(&[1, 4], a.to_vec()).unwrap()).unwrap();
        let vb = tape.constant(Tensor::new(&[1, 4], b.to_vec()).unwrap()).unwrap();
        let loss = giou_loss(va, vb).unwrap().item();
        prop_assert!((loss - (1.0 - g)).abs() < 1e-15);
        prop_assert!((0.0..2.0).contains(&loss));
        let inter_x = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
        let inter_y = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
        if inter_x * inter_y > 0.01 {
            let ex = (a[0] + a[2] / 2.0).max(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).min(b[0] - b[2] / 2.0);
            let ey = (a[1] + a[3] / 2.0).max(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).min(b[1] - b[3] / 2.0);
            let union = a[2] * a[3] + b[2] * b[3] - inter_x * inter_y;
            let iou = g + (ex * ey - union) / (ex * ey);
            prop_assert!((iou - raster_iou(a, b, 400)).abs() < 1e-2);
        }
    }

    #[test]
    fn giou_symmetric_and_translation_invariant(a in box_strategy(), b in box_strategy(), dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
        let ab = giou_value(a, b);
        prop_assert!((ab - giou_value(b, a)).abs() < 1e-14);
        let shift = |r: [f64; 4]| [r[0] + dx, r[1] + dy, r[2], r[3]];
        prop_assert!((ab - giou_value(shift(a), shift(b))).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_scalar_oracle(a in box_strategy(), b in box_strategy(), c in box_strategy()) {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(&[2, 4], [a, b].concat()).unwrap()).unwrap();
        let g = tape.constant(Tensor::new(&[2, 4], [c, a].concat()).unwrap()).unwrap();
        let want: f64 = a.iter().zip(&c).chain(b.iter().zip(&a)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 8.0;
        prop_assert!((l1_box(p, g).unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn focal_decreases_with_positive_confidence(p1 in 0.01f64..0.98, dp in 0.001f64..0.01, other in 0.01f64..0.99) {
        let target = Tensor::new(&[1, 1, 2], vec![1.0, 0.3]).unwrap();
        let f = |p: f64| {
            let tape = Tape::new();
            focal_loss(tape.constant(Tensor::new(&[1, 1, 2], vec![p, other]).unwrap()).unwrap(), &target).unwrap().item()
        };
        let lo = f(p1);
        let hi = f(p1 + dp);
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi < lo);
    }
}

#[test]
fn losses_pass_grad_check() {
    let mut p = ParameterSet::new();
    p.insert("score", Tensor::new(&[2, 2, 2], vec![0.2, 0.7, 0.4, 0.1, 0.9, 0.3, 0.5, 0.6]).unwrap()).unwrap();
    p.insert("pred", Tensor::new(&[2, 4], vec![0.5, 0.4, 0.3, 0.2, 0.45, 0.55, 0.25, 0.35]).unwrap()).unwrap();
    let target = Tensor::new(&[2, 2, 2], vec![1.0, 0.6, 0.2, 0.0, 0.1, 1.0, 0.4, 0.7]).unwrap();
    let gt = Tensor::new(&[2, 4], vec![0.56, 0.42, 0.21, 0.3, 0.4, 0.5, 0.31, 0.28]).unwrap();
    let cfg = GradCheckConfig::default();

    let focal = grad_check(|_, b| focal_loss(b.get("score")?, &target), &p, &cfg).unwrap();
    assert!(focal.max_rel_err() < 1e-4, "{focal:#?}");
    let l1 = grad_check(|t, b| l1_box(b.get("pred")?, t.constant(gt.clone())?), &p, &cfg).unwrap();
    assert!(l1.max_rel_err() < 1e-4, "{l1:#?}");
    let gi = grad_check(|t, b| giou_loss(b.get("pred")?, t.constant(gt.clone())?), &p, &cfg).unwrap();
    assert!(gi.max_rel_err() < 1e-4, "{gi:#?}");
    let all = grad_check(
        |t, b| {
            let terms = SupervisedTerms {
                cls: focal_loss(b.get("score")?, &target)?,
                l1: l1_box(b.get("pred")?, t.constant(gt.clone())?)?,
                giou: giou_loss(b.get("pred")?, t.constant(gt.clone())?)?,
            };
            Ok(total_loss(&terms, Some(&terms), None, &LossWeights::default())?.0)
        },
        &p,
        &cfg,
    )
    .unwrap();
    assert!(all.max_rel_err() < 1e-4, "{all:#?}");
}
