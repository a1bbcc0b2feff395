use fringe_core::rings::{count_rings, count_rings_oracle, count_spoke, crop_and_square, extract_spokes, CropPatch, RingConfig};
use fringe_core::synth::{render_frame, AntinodeSpec, ProfileKind, SynthSpec};
use fringe_core::{EllipseAnnotation, GrayImage};
use proptest::prelude::*;

fn synth_patch(rings: f64, a: f64, b: f64, theta: f64) -> CropPatch {
    let mut spec = SynthSpec::blank(256, 256, 3).clean();
    let e = EllipseAnnotation::new(128.0, 128.0, a, b, theta, rings).unwrap();
    spec.antinodes.push(AntinodeSpec { ellipse: e, contrast: 0.9, profile: ProfileKind::Cosine });
    let (img, _) = render_frame(&spec).unwrap();
    crop_and_square(&img, &e, 128).unwrap()
}

fn rotate(patch: &CropPatch, deg: f64) -> CropPatch {
    let (c, s) = (deg.to_radians().cos(), deg.to_radians().sin());
    let m = patch.center();
    let pixels = GrayImage::from_fn(patch.size, patch.size, |x, y| {
        let (dx, dy) = (x as f64 - m, y as f64 - m);
        patch.pixels.bilinear(m + c * dx + s * dy, m - s * dx + c * dy)
    });
    CropPatch { pixels, ..patch.clone() }
}

fn rotate90(patch: &CropPatch) -> CropPatch {
    let n = patch.size;
    let pixels = GrayImage::from_fn(n, n, |x, y| patch.pixels.get(y, n - 1 - x));
    CropPatch { pixels, ..patch.clone() }
}

prop_compose! {
    fn geometry()(a in 70.0..90.0f64, ratio in 0.8..1.0f64, theta in 0.0..180.0f64) -> (f64, f64, f64) {
        (a, a * ratio, theta)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quarter_turns_are_exact(rings in 1.0..11.0f64, (a, b, theta) in geometry(), k in 1usize..4) {
        let p = synth_patch(rings, a, b, theta);
        let cfg = RingConfig::default();
        let mut q = p.clone();
        for _ in 0..k {
            q = rotate90(&q);
        }
        prop_assert_eq!(count_rings(&p, &cfg).value, count_rings(&q, &cfg).value);
    }

    #[test]
    fn arbitrary_rotation_stays_within_half_a_ring(rings in 1.0..11.0f64, (a, b, theta) in geometry(), deg in 0.0..360.0f64) {
        let p = synth_patch(rings, a, b, theta);
        let cfg = RingConfig::default();
        let (v, w) = (count_rings(&p, &cfg).value, count_rings(&rotate(&p, deg), &cfg).value);
        prop_assert!((v - w).abs() <= 0.5, "{v} vs {w}");
    }

    #[test]
    fn brightness_affine_changes_nothing(rings in 1.0..11.0f64, (a, b, theta) in geometry(), gain in 0.3..1.0f64, off in 0.0..1.0f64) {
        let p = synth_patch(rings, a, b, theta);
        let off = off * (1.0 - gain);
        let cfg = RingConfig::default();
        prop_assert_eq!(count_rings(&p, &cfg).value, count_rings(&p.map(|v| gain * v + off), &cfg).value);
    }

    #[test]
    fn counter_agrees_with_oracle_per_spoke(rings in 1.0..11.0f64, (a, b, theta) in geometry()) {
        let p = synth_patch(rings, a, b, theta);
        let cfg = RingConfig::default();
        for s in extract_spokes(&p, cfg.spokes, cfg.samples) {
            let (c, o) = (count_spoke(&s.samples, &cfg), count_rings_oracle(&s));
            prop_assert!((c - o).abs() <= 0.5, "{c} vs {o}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn counts_increase_with_integer_rings((a, b, theta) in geometry()) {
        let cfg = RingConfig::default();
        let counts: Vec<f64> = (1..=11).map(|r| count_rings(&synth_patch(r as f64, a, b, theta), &cfg).value).collect();
        prop_assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
    }
}
