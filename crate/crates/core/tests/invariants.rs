use dgk_core::codec::{actions_to_positions, positions_to_actions, ActionVocabulary, ResidualPrefix};
use dgk_core::dataset::{decode_scene, encode_scene};
use dgk_core::geometry::{Frame, Vec2};
use dgk_core::inference::{kmeans_modes, softmax};
use dgk_core::scaling::{fit_power_law, min_bound};
use dgk_core::scene::{denormalize_trajectory, normalize_scene};
use dgk_core::simulator::{generate_scene, WorldConfig};
use proptest::prelude::*;

fn small_world() -> WorldConfig {
    WorldConfig { horizon: 20, ..WorldConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_records_round_trip(index in 0u64..1_000_000) {
        let scene = generate_scene(&small_world(), index).unwrap();
        prop_assert_eq!(decode_scene(&encode_scene(&scene)).unwrap(), scene);
    }

    #[test]
    fn normalization_inverts(index in 0u64..1_000_000) {
        let scene = generate_scene(&small_world(), index).unwrap();
        let norm = normalize_scene(&scene).unwrap();
        let cur = norm.current();
        prop_assert!(cur.position.norm() < 1e-9 && cur.heading.abs() < 1e-9);
        let anchor = scene.current();
        let back = denormalize_trajectory(norm.future_gt.as_ref().unwrap(), &Frame::new(anchor.position, anchor.heading));
        for (a, b) in back.iter().zip(scene.future_gt.as_ref().unwrap()) {
            prop_assert!(a.dist(*b) < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_leaves_agent_frame_unchanged(index in 0u64..1_000_000, x in -500.0f64..500.0, y in -500.0f64..500.0, h in -3.1f64..3.1) {
        let scene = generate_scene(&small_world(), index).unwrap();
        let moved = scene.rigidly_moved(&Frame::new(Vec2::new(x, y), h));
        let (a, b) = (normalize_scene(&scene).unwrap(), normalize_scene(&moved).unwrap());
        for (p, q) in a.future_gt.unwrap().iter().zip(b.future_gt.unwrap().iter()) {
            prop_assert!(p.dist(*q) < 1e-8);
        }
    }

    #[test]
    fn in_vocab_tokens_round_trip(tokens in proptest::collection::vec(0usize..169, 1..80), vx in -3.0f64..3.0, vy in -3.0f64..3.0) {
        let vocab = ActionVocabulary::default();
        let s0 = Vec2::new(vx, vy);
        let pos = actions_to_positions(&tokens, Vec2::ZERO, s0, &vocab).unwrap();
        let mut path = vec![Vec2::ZERO, s0];
        path.extend(pos);
        let seq = positions_to_actions(&path, &vocab, ResidualPrefix::Reconstructed).unwrap();
        prop_assert_eq!(seq.tokens, tokens);
        prop_assert!(seq.saturated.is_empty());
    }

    #[test]
    fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..40), temp in 0.05f64..5.0) {
        let p = softmax(&logits, temp);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn kmeans_modes_are_sorted_and_normalized(
        pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 6..40),
        k in 1usize..6,
        seed in 0u64..100,
    ) {
        let samples: Vec<Vec<Vec2>> = pts.iter().map(|&(x, y)| vec![Vec2::new(x, y), Vec2::new(x + 1.0, y)]).collect();
        let (modes, probs) = kmeans_modes(&samples, k, seed, 50).unwrap();
        prop_assert_eq!(modes.len(), k);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn power_law_fit_is_exact(a in -1.0f64..1.0, b in -5.0f64..10.0, n in 2usize..20) {
        let pts: Vec<(f64, f64)> = (0..n).map(|i| (10f64.powf(2.0 + i as f64 * 0.37), 0.0)).map(|(x, _)| (x, (a * x.ln() + b).exp())).collect();
        let fit = fit_power_law(&pts).unwrap();
        prop_assert!((fit.slope - a).abs() < 1e-9 && (fit.intercept - b).abs() < 1e-9);
    }

    #[test]
    fn min_bound_is_monotone(curves in proptest::collection::vec(proptest::collection::vec((0.1f64..5.0, 0.5f64..6.0), 1..30), 1..5)) {
        let curves: Vec<Vec<(f64, f64)>> = curves
            .into_iter()
            .map(|c| {
                let mut x = 0.0;
                c.into_iter().map(|(dx, y)| { x += dx; (x, y) }).collect()
            })
            .collect();
        let env = min_bound(&curves, None);
        prop_assert!(env.windows(2).all(|w| w[1].1 <= w[0].1));
        let lowest = curves.iter().flatten().map(|p| p.1).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(env.last().unwrap().1, lowest);
    }
}
