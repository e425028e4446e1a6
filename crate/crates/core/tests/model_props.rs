use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umda_core::datagen::{DomainTag, HeadGeometry};
use umda_core::diagnostics::{gradient_suite, tiny_model};
use umda_core::model::{
    bank_attention, decode_box, encode, forward, head_forward, init_adapter, init_params, predict, BnMode, ModelConfig,
    ResponseMap,
};
use umda_core::numerics::{Tape, Tensor};

#[test]
fn every_component_passes_finite_differences() {
    let suite = gradient_suite(11).unwrap();
    for e in &suite {
        println!("{:<14} max rel err {:.3e} (tol {:.0e})", e.name, e.max_rel_err, e.tol);
    }
    assert_eq!(suite.len(), 8);
    assert!(suite.iter().all(|e| e.passed()), "{suite:#?}");
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = tiny_model();
    let e = cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    for name in ["backbone.pos_z", "backbone.pos_x"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let z = Tensor::from_fn(&[1, 3, e.template_size, e.template_size], |_| rng.gen_range(-1.0..1.0));
    let x = Tensor::from_fn(&[1, 3, e.search_size, e.search_size], |_| rng.gen_range(-1.0..1.0));
    // swap search patches (0, 0) and (2, 3)
    let p = e.patch_size;
    let g = e.grid();
    let (a, b) = ((0usize, 0usize), (2usize, 3usize));
    let mut xs = x.clone();
    for c in 0..3 {
        for dy in 0..p {
            for dx in 0..p {
                let pa = [0, c, a.0 * p + dy, a.1 * p + dx];
                let pb = [0, c, b.0 * p + dy, b.1 * p + dx];
                let (va, vb) = (x.get(&pa), x.get(&pb));
                xs.set(&pa, vb);
                xs.set(&pb, va);
            }
        }
    }
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let bound = params.bind_const(&tape).unwrap();
        encode(&e, &bound, tape.constant(z.clone()).unwrap(), tape.constant(x.clone()).unwrap(), None)
            .unwrap()
            .value()
    };
    let (y, ys) = (run(&x), run(&xs));
    let tz = e.template_tokens();
    let c = e.embed_dim;
    let token = |t: &Tensor, k: usize| -> Vec<f64> { (0..c).map(|j| t.get(&[0, k, j])).collect() };
    let mut perm: Vec<usize> = (0..tz + g * g).collect();
    perm.swap(tz + a.0 * g + a.1, tz + b.0 * g + b.1);
    for (k, &src) in perm.iter().enumerate() {
        let (u, v) = (token(&ys, k), token(&y, src));
        for (p, q) in u.iter().zip(&v) {
            assert!((p - q).abs() < 1e-10, "token {k}");
        }
    }
}

fn hand_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn bank_attention_two_by_two_by_hand() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let bank = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let key = tape.constant(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let value = tape.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, -1.0, 0.5]).unwrap()).unwrap();
    let out = bank_attention(q, bank, key, value, 4.0).unwrap();
    // keys are rows of B Wk = Wk; logits (q . k_j) / 2
    let w = hand_softmax(&[2.0 / 2.0, 2.0 / 2.0]);
    let tokens = [w[0] * 1.0 + w[1] * -1.0, w[0] * 3.0 + w[1] * 0.5];
    let got_w = out.weights.value();
    let got_t = out.tokens.value();
    assert!((got_w.data()[0] - w[0]).abs() < 1e-15 && (got_w.data()[1] - w[1]).abs() < 1e-15);
    assert!((got_t.data()[0] - tokens[0]).abs() < 1e-15);
    assert!((got_t.data()[1] - tokens[1]).abs() < 1e-15);

    let q = tape.constant(Tensor::new(&[1, 1, 2], vec![0.3, -0.7]).unwrap()).unwrap();
    let key = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.5, -0.5, 2.0]).unwrap()).unwrap();
    let out = bank_attention(q, bank, key, value, 1.0).unwrap();
    let k0 = 0.3 * 1.0 + -0.7 * 0.5;
    let k1 = 0.3 * -0.5 + -0.7 * 2.0;
    let w = hand_softmax(&[k0, k1]);
    assert!((out.weights.value().data()[0] - w[0]).abs() < 1e-15);
}

#[test]
fn bank_attention_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let q = tape.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut rng)).unwrap();
    let one = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng)).unwrap();
    let key = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
    let value = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
    let out = bank_attention(q, one, key, value, 4.0).unwrap();
    assert!(out.weights.value().data().iter().all(|&w| w == 1.0));
    let bank = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    let zero = tape.constant(Tensor::zeros(&[4, 4])).unwrap();
    let out = bank_attention(q, bank, key, zero, 4.0).unwrap();
    assert!(out.tokens.value().data().iter().all(|&t| t == 0.0));
}

proptest! {
    #[test]
    fn bank_attention_weights_sum_to_one(seed in 0u64..1000, k in 1usize..6, l in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[2, k, 3], 2.0, &mut rng)).unwrap();
        let bank = tape.constant(Tensor::randn(&[l, 3], 2.0, &mut rng)).unwrap();
        let key = tape.constant(Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        let value = tape.constant(Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        let w = bank_attention(q, bank, key, value, 3.0).unwrap().weights.value();
        for row in w.data().chunks(l) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn decode_picks_the_exhaustive_argmax(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = HeadGeometry::default();
        let g = geom.grid;
        let resp = ResponseMap {
            scores: Tensor::from_fn(&[2, g, g], |_| rng.gen_range(0.0..1.0)),
            offsets: Tensor::from_fn(&[2, 2, g, g], |_| rng.gen_range(0.0..1.0)),
            sizes: Tensor::from_fn(&[2, 2, g, g], |_| rng.gen_range(0.05..0.5)),
        };
        for i in 0..2 {
            let mut best = (0, 0);
            for r in 0..g {
                for c in 0..g {
                    if resp.scores.get(&[i, r, c]) > resp.scores.get(&[i, best.0, best.1]) {
                        best = (r, c);
                    }
                }
            }
            let d = decode_box(&resp, i, &geom);
            prop_assert_eq!((d.cell.row, d.cell.col), best);
            prop_assert_eq!(d.score, resp.scores.get(&[i, best.0, best.1]));
            let s = geom.stride();
            prop_assert!((d.bbox.cx - (best.1 as f64 + resp.offsets.get(&[i, 0, best.0, best.1])) * s).abs() < 1e-12);
            prop_assert!((d.bbox.cy - (best.0 as f64 + resp.offsets.get(&[i, 1, best.0, best.1])) * s).abs() < 1e-12);
            prop_assert!((d.bbox.w - resp.sizes.get(&[i, 0, best.0, best.1]) * 64.0).abs() < 1e-12);
            prop_assert!((d.bbox.h - resp.sizes.get(&[i, 1, best.0, best.1]) * 64.0).abs() < 1e-12);
        }
    }
}

#[test]
fn head_response_is_constant_away_from_the_border() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = init_params(&cfg, &mut rng).unwrap();
    let c = cfg.encoder.embed_dim;
    // each 3x3 layer reaches one cell further from the zero padding
    let reach = cfg.head.layers + 1;
    let side = 16 + 2 * reach;
    let values: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feat = Tensor::from_fn(&[1, c, side, side], |i| values[i / (side * side)]);
    let tape = Tape::new();
    let bound = params.bind_const(&tape).unwrap();
    let out = head_forward(&cfg.head, &bound, tape.constant(feat).unwrap(), BnMode::Eval).unwrap();
    let s = out.resp.scores.value();
    let o = out.resp.offsets.value();
    let centre = s.get(&[0, reach, reach]);
    for r in reach..reach + 16 {
        for col in reach..reach + 16 {
            assert!((s.get(&[0, r, col]) - centre).abs() < 1e-12);
            for k in 0..2 {
                assert!((o.get(&[0, k, r, col]) - o.get(&[0, k, reach, reach])).abs() < 1e-12);
            }
        }
    }
    assert!((s.get(&[0, 0, 0]) - centre).abs() > 1e-9);
}

#[test]
fn forward_with_and_without_adapter() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    params.merge(&init_adapter(&cfg, DomainTag::Fog, &mut rng).unwrap()).unwrap();
    let e = cfg.encoder;
    let z = Tensor::from_fn(&[2, 3, e.template_size, e.template_size], |_| rng.gen_range(-1.0..1.0));
    let x = Tensor::from_fn(&[2, 3, e.search_size, e.search_size], |_| rng.gen_range(-1.0..1.0));
    let plain = predict(&cfg, &params, &z, &x, None).unwrap();
    let adapted = predict(&cfg, &params, &z, &x, Some("adapter.fog")).unwrap();
    assert_eq!(plain.scores.shape(), adapted.scores.shape());
    assert!(plain.scores.max_abs_diff(&adapted.scores) > 0.0);
    assert!(predict(&cfg, &params, &z, &x, Some("adapter.rain")).is_err());

    let tape = Tape::new();
    let bound = params.bind(&tape).unwrap();
    let out = forward(&cfg, &bound, tape.constant(z).unwrap(), tape.constant(x).unwrap(), Some("adapter.fog"), BnMode::Train).unwrap();
    let grads = tape.backward(out.resp.scores.sum().unwrap()).unwrap();
    assert!(grads.get("adapter.fog.bank").unwrap().data().iter().any(|g| *g != 0.0));
    assert!(grads.get("head.trunk0.bn.mean").is_none());
}
