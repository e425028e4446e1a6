use proptest::prelude::*;
use umda_core::datagen::{DomainTag, Frame};
use umda_core::weather::{apply, apply_dark, apply_fog, apply_rain, ssim, WeatherKind, WeatherParams};

fn textured(w: usize, h: usize) -> Frame {
    let mut f = Frame::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            f.set(x, y, 0, 0.5 + 0.4 * (0.7 * fx).sin() * (0.3 * fy).cos());
            f.set(x, y, 1, 0.5 + 0.35 * (0.45 * (fx + fy)).sin());
            f.set(x, y, 2, ((x * 7 + y * 13) % 17) as f64 / 16.0);
        }
    }
    f
}

fn random_frame(w: usize, h: usize, vals: &[f64]) -> Frame {
    Frame::new(w, h, vals.iter().cycle().take(3 * w * h).copied().collect(), DomainTag::Source).unwrap()
}

#[test]
fn fog_hand_value() {
    // top row of a 2-row frame has depth 1; exp(-beta) = 0.25
    let f = Frame::filled(1, 2, [0.5; 3]);
    let p = WeatherParams {
        fog_beta: 4f64.ln(),
        airlight: [1.0; 3],
        ..WeatherParams::for_kind(WeatherKind::Fog, 0)
    };
    let g = apply_fog(&f, &p).unwrap();
    for c in 0..3 {
        assert!((g.get(0, 0, c) - 0.875).abs() < 1e-12);
        assert_eq!(g.get(0, 1, c), 0.5);
    }
}

#[test]
fn dark_hand_values() {
    let f = Frame::filled(2, 2, [0.25, 1.0, 0.0]);
    let mut p = WeatherParams::for_kind(WeatherKind::Dark, 0);
    p.gamma = 2.0;
    p.brightness = 1.0;
    let g = apply_dark(&f, &p).unwrap();
    assert!((g.get(1, 1, 0) - 0.0625).abs() < 1e-15);
    p.brightness = 0.5;
    p.gamma = 3.7;
    assert_eq!(apply_dark(&f, &p).unwrap().get(0, 1, 1), 0.5);
}

#[test]
fn neutral_points_are_identity() {
    let f = textured(24, 18);
    let mut fog = WeatherParams::for_kind(WeatherKind::Fog, 3);
    fog.fog_beta = 0.0;
    let mut dark = WeatherParams::for_kind(WeatherKind::Dark, 3);
    dark.gamma = 1.0;
    dark.brightness = 1.0;
    let mut rain = WeatherParams::for_kind(WeatherKind::Rain, 3);
    rain.rain_alpha = 0.0;
    let mut dry = WeatherParams::for_kind(WeatherKind::Rain, 3);
    dry.rain_density = 0.0;
    for p in [fog, dark, rain, dry] {
        assert_eq!(apply(&f, &p).unwrap().pixels, f.pixels, "{:?}", p.kind);
    }
}

#[test]
fn out_of_range_pixels_rejected() {
    let mut f = Frame::filled(4, 4, [0.5; 3]);
    f.set(1, 2, 0, 1.5);
    for kind in [WeatherKind::Fog, WeatherKind::Dark, WeatherKind::Rain] {
        assert!(apply(&f, &WeatherParams::for_kind(kind, 0)).is_err());
    }
    let mut bad = WeatherParams::for_kind(WeatherKind::Dark, 0);
    bad.gamma = 0.5;
    assert!(apply(&textured(4, 4), &bad).is_err());
}

#[test]
fn severity_lowers_ssim_monotonically() {
    let f = textured(48, 48);
    let score = |p: WeatherParams| ssim(&f, &apply(&f, &p).unwrap()).unwrap();
    let mut fog = Vec::new();
    let mut dark = Vec::new();
    let mut rain = Vec::new();
    for (i, level) in [1.0, 2.0, 3.0].into_iter().enumerate() {
        let mut p = WeatherParams::for_kind(WeatherKind::Fog, 9);
        p.fog_beta = level;
        fog.push(score(p));
        let mut p = WeatherParams::for_kind(WeatherKind::Dark, 9);
        p.gamma = 1.0 + level;
        dark.push(score(p));
        let mut p = WeatherParams::for_kind(WeatherKind::Rain, 9);
        p.rain_alpha = 0.25 * (i + 1) as f64;
        rain.push(score(p));
    }
    for s in [&fog, &dark, &rain] {
        assert!(s[0] < 1.0 && s[0] > s[1] && s[1] > s[2], "{s:?}");
    }
}

#[test]
fn ssim_dimension_mismatch() {
    assert!(ssim(&textured(8, 8), &textured(9, 8)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corruptions_preserve_range_and_are_deterministic(
        vals in prop::collection::vec(0.0f64..=1.0, 30..60),
        w in 1usize..20,
        h in 1usize..20,
        beta in 0.0f64..6.0,
        gamma in 1.0f64..5.0,
        bright in 0.05f64..=1.0,
        density in 0.0f64..40.0,
        alpha in 0.0f64..=1.0,
        angle in -60.0f64..60.0,
        seed in any::<u64>(),
    ) {
        let f = random_frame(w, h, &vals);
        let base = WeatherParams {
            fog_beta: beta,
            gamma,
            brightness: bright,
            rain_density: density,
            rain_alpha: alpha,
            rain_angle: angle,
            ..WeatherParams::for_kind(WeatherKind::Fog, seed)
        };
        for kind in [WeatherKind::Fog, WeatherKind::Dark, WeatherKind::Rain] {
            let p = WeatherParams { kind, ..base };
            let a = apply(&f, &p).unwrap();
            let b = apply(&f, &p).unwrap();
            prop_assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&a.pixels, &b.pixels);
        }
        let dark_lo = apply_dark(&f, &WeatherParams { kind: WeatherKind::Dark, ..base }).unwrap();
        let dark_hi = apply_dark(&f, &WeatherParams { kind: WeatherKind::Dark, gamma: gamma + 0.5, ..base }).unwrap();
        prop_assert!(dark_hi.pixels.iter().zip(&dark_lo.pixels).all(|(hi, lo)| hi <= lo));
        let fog = apply_fog(&f, &WeatherParams { kind: WeatherKind::Fog, ..base }).unwrap();
        for ((o, i), c) in fog.pixels.iter().zip(&f.pixels).zip((0..3).cycle()) {
            let a = base.airlight[c];
            prop_assert!(*o >= i.min(a) - 1e-12 && *o <= i.max(a) + 1e-12);
        }
    }

    #[test]
    fn ssim_is_symmetric(vals in prop::collection::vec(0.0f64..=1.0, 40..80), seed in any::<u64>()) {
        let a = random_frame(12, 10, &vals);
        let b = apply_rain(&a, &WeatherParams::for_kind(WeatherKind::Rain, seed)).unwrap();
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
    }
}
