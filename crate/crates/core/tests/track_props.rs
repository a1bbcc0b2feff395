use fringe_core::detect::Detection;
use fringe_core::track::{fit_rise_traced, link, rise_model, TrackConfig};
use fringe_core::EllipseAnnotation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(cx: f64, cy: f64, rings: f64, score: f64) -> Detection {
    Detection::from_ellipse(EllipseAnnotation::new(cx, cy, 20.0, 15.0, 0.0, rings).unwrap(), score)
}

/// Up to four well separated antinodes drifting slowly, some dropped out.
fn sequence() -> impl Strategy<Value = Vec<Vec<Detection>>> {
    (1usize..5, 4usize..20, any::<u64>()).prop_map(|(n, frames, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames)
            .map(|f| {
                let present: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.85)).collect();
                present
                    .into_iter()
                    .map(|k| {
                        let cx = 60.0 + 150.0 * k as f64 + 0.5 * f as f64 + rng.random_range(-1.0..1.0);
                        let cy = 100.0 + rng.random_range(-1.0..1.0);
                        det(cx, cy, f as f64 * 0.3, rng.random_range(0.2..1.0))
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linking_ignores_order_within_frames(frames in sequence()) {
        let cfg = TrackConfig::default();
        let reversed: Vec<Vec<Detection>> = frames.iter().map(|f| f.iter().rev().copied().collect()).collect();
        prop_assert_eq!(link(&frames, &cfg), link(&reversed, &cfg));
    }

    #[test]
    fn gauss_newton_never_increases_residual(
        a in 2.0..12.0f64, tau in 5.0..40.0f64, t0 in -5.0..5.0f64, noise in 0.0..0.3f64, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..40).map(f64::from).collect();
        let r: Vec<f64> = t.iter().map(|&ti| rise_model(ti, a, tau, t0) + noise * rng.random_range(-1.0..1.0)).collect();
        let (_, trace) = fit_rise_traced(&t, &r).unwrap();
        prop_assert!(!trace.is_empty());
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
    }

    #[test]
    fn clean_rise_is_recovered(a in 2.0..12.0f64, tau in 4.0..30.0f64, t0 in -3.0..3.0f64) {
        let t: Vec<f64> = (0..60).map(f64::from).collect();
        let r: Vec<f64> = t.iter().map(|&ti| rise_model(ti, a, tau, t0)).collect();
        let (fit, _) = fit_rise_traced(&t, &r).unwrap();
        prop_assert!((fit.tau - tau).abs() <= 0.05 * tau, "tau {} vs {tau}", fit.tau);
        prop_assert!((fit.a_max - a).abs() <= 0.05 * a, "a {} vs {a}", fit.a_max);
        prop_assert!(!fit.degenerate);
    }
}
