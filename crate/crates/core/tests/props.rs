//! Property tests over randomly generated systems and point sets.

use fractalfit::*;
use proptest::prelude::*;

fn arb_transform() -> impl Strategy<Value = ReparamTransform> {
    (
        0.0..std::f64::consts::TAU,
        0.0..std::f64::consts::TAU,
        0.0..1.0f64,
        0.0..1.0f64,
        prop::bool::ANY,
        prop::bool::ANY,
        -1.0..1.0f64,
        -1.0..1.0f64,
    )
        .prop_map(|(theta, phi, sigma1, sigma2, d1, d2, b0, b1)| ReparamTransform {
            theta,
            phi,
            sigma1,
            sigma2,
            d1: if d1 { 1.0 } else { -1.0 },
            d2: if d2 { 1.0 } else { -1.0 },
            b: [b0, b1],
        })
}

fn arb_system(max_n: usize) -> impl Strategy<Value = FractalSystem> {
    prop::collection::vec(arb_transform(), 1..=max_n)
        .prop_filter("needs a nonzero determinant sum", |ts| {
            ts.iter().map(|t| t.sigma1 * t.sigma2).sum::<f64>() > 1e-3
        })
        .prop_map(|ts| FractalSystem::new(ts).unwrap())
}

fn singular_values(m: [[f64; 2]; 2]) -> (f64, f64) {
    let q1 = f64::hypot(m[0][0] + m[1][1], m[0][1] - m[1][0]);
    let q2 = f64::hypot(m[0][0] - m[1][1], m[0][1] + m[1][0]);
    ((q1 + q2) / 2.0, (q1 - q2).abs() / 2.0)
}

proptest! {
    #[test]
    fn composed_matrix_singular_values_are_the_scales(t in arb_transform()) {
        let (s_max, s_min) = singular_values(compose_matrix(&t));
        prop_assert!((s_max - t.sigma1.max(t.sigma2)).abs() < 1e-10);
        prop_assert!((s_min - t.sigma1.min(t.sigma2)).abs() < 1e-10);
    }

    #[test]
    fn probabilities_sum_to_one(s in arb_system(8)) {
        let p = transform_probabilities(&s).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn batched_gather_matches_direct_iteration(
        s1 in arb_system(5),
        s2 in arb_system(5),
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let batched = concat_systems(&[s1.clone(), s2.clone()]);
        for (j, s) in [&s1, &s2].into_iter().enumerate() {
            let z = sample_index_sequence(s, 32, &mut rng).unwrap();
            let v0 = sample_v0(&mut rng);
            let direct = iterate_ifs(s, &z, v0).unwrap();
            let gathered = batched.iterate(j, &z, v0).unwrap();
            prop_assert_eq!(&direct.points, &gathered.points);
        }
    }

    #[test]
    fn normalized_points_stay_inside_canvas(
        s in arb_system(4),
        seed in 0u64..1000,
        h in 2usize..48,
        w in 2usize..48,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = sample_index_sequence(&s, 40, &mut rng).unwrap();
        let traj = iterate_ifs(&s, &z, sample_v0(&mut rng)).unwrap();
        for p in normalize_points(&traj, h, w) {
            prop_assert!(p[0] >= 0.0 && p[0] <= (h - 1) as f64);
            prop_assert!(p[1] >= 0.0 && p[1] <= (w - 1) as f64);
        }
    }

    #[test]
    fn clamped_render_stays_in_unit_interval(
        points in prop::collection::vec((-2.0..18.0f64, -2.0..18.0f64), 1..60),
    ) {
        let pts: Vec<[f64; 2]> = points.iter().map(|&(a, b)| [a, b]).collect();
        let cfg = RenderConfig::new(16, 16, 1.0);
        let canvas = render(&pts, &cfg).unwrap();
        prop_assert!(canvas.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let pre = canvas.pre_clamp.as_ref().unwrap();
        prop_assert!(pre.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn render_is_monotone_in_points(
        points in prop::collection::vec((0.0..16.0f64, 0.0..16.0f64), 2..30),
    ) {
        let pts: Vec<[f64; 2]> = points.iter().map(|&(a, b)| [a, b]).collect();
        let cfg = RenderConfig {
            clamp: false,
            ..RenderConfig::new(16, 16, 1.0)
        };
        let all = render(&pts, &cfg).unwrap();
        let fewer = render(&pts[..pts.len() - 1], &cfg).unwrap();
        for (a, b) in all.pixels.iter().zip(&fewer.pixels) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn json_round_trip_preserves_everything(s in arb_system(6)) {
        let json = serde_json::to_string(&s).unwrap();
        let back: FractalSystem = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(s, back);
    }
}
