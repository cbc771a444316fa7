use nonstat_opt::environment::{
    build_sequence, step_variation, BallDomain, CurvatureBounds, DriftKind, DriftSchedule,
    ObjectiveFamily, ObjectiveSequence, QuadraticObjective, SequenceSpec,
};
use nonstat_opt::vector::{dist, norm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point(d: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, d)
}

fn inside(x: Vec<f64>, radius: f64) -> Vec<f64> {
    let n = norm(&x);
    if n <= radius {
        x
    } else {
        x.iter().map(|v| v * radius / n).collect()
    }
}

fn drift_kind() -> impl Strategy<Value = DriftKind> {
    prop_oneof![
        (0usize..6, 0.0..0.4f64).prop_map(|(changes, jump)| DriftKind::PiecewiseConstant {
            changes,
            jump,
            peak_jump: 0.0
        }),
        (0.0..0.2f64).prop_map(|amplitude| DriftKind::LinearDrift { amplitude }),
        (0.0..0.2f64, 0.5..4.0f64).prop_map(|(amplitude, periods)| DriftKind::Sinusoidal { amplitude, periods }),
        (0.0..0.05f64).prop_map(|step_scale| DriftKind::RandomWalk { step_scale }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_in_interior_and_is_non_expansive(
        d in 1usize..4,
        seed in any::<u64>(),
        scale in 0.1..5.0f64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dom = BallDomain::new(center, 1.5, 0.4).unwrap();
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let pa = dom.project_interior(&a);
        let pb = dom.project_interior(&b);
        prop_assert!(dist(&pa, &dom.center) <= dom.radius - dom.interior_margin + 1e-12);
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn variation_bounds_pointwise_difference(
        d in 1usize..4,
        ta in point(3, 0.5),
        tb in point(3, 0.5),
        ba in -0.3..0.3f64,
        bb in -0.3..0.3f64,
        sa in 0.05..0.6f64,
        sb in 0.05..0.6f64,
        xs in prop::collection::vec(point(3, 1.0), 200),
    ) {
        let dom = BallDomain::new(vec![0.0; d], 1.0, 0.5).unwrap();
        let a = QuadraticObjective::new(ba, sa, inside(ta[..d].to_vec(), 0.5));
        let b = QuadraticObjective::new(bb, sb, inside(tb[..d].to_vec(), 0.5));
        let delta = step_variation(&a, &b, &dom).unwrap();
        for x in xs {
            let x = inside(x[..d].to_vec(), 1.0);
            prop_assert!((b.evaluate(&x) - a.evaluate(&x)).abs() <= delta + 1e-9);
        }
    }

    #[test]
    fn one_dimensional_variation_is_attained(
        ta in -0.5..0.5f64,
        tb in -0.5..0.5f64,
        ba in -0.3..0.3f64,
        bb in -0.3..0.3f64,
        sa in 0.05..0.6f64,
        sb in 0.05..0.6f64,
    ) {
        let dom = BallDomain::new(vec![0.0], 1.0, 0.5).unwrap();
        let a = QuadraticObjective::new(ba, sa, vec![ta]);
        let b = QuadraticObjective::new(bb, sb, vec![tb]);
        let delta = step_variation(&a, &b, &dom).unwrap();
        let brute = (0..=20_000)
            .map(|i| -1.0 + i as f64 * 1e-4)
            .map(|x| (b.evaluate(&[x]) - a.evaluate(&[x])).abs())
            .fold(0.0, f64::max);
        prop_assert!((delta - brute).abs() <= 1e-7, "closed {delta} grid {brute}");
    }

    #[test]
    fn generated_sequences_are_consistent(
        kind in drift_kind(),
        d in 1usize..3,
        seed in any::<u64>(),
        horizon in 1usize..300,
    ) {
        let spec = SequenceSpec {
            domain: BallDomain::new(vec![0.0; d], 1.0, 0.5).unwrap(),
            family: ObjectiveFamily { peak_value: 0.3, curvature: 0.5 },
            drift: DriftSchedule::new(kind),
            noise_amplitude: 0.1,
            horizon,
        };
        let bounds = CurvatureBounds { smoothness: 1.0, strong_concavity: 0.25 };
        let seq = match build_sequence(&spec, Some(&bounds), seed) {
            Ok(seq) => seq,
            // large jumps may leave the interior ball; that is a rejection, not a bug
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(seq.horizon(), horizon);
        let sum: f64 = seq.step_variations().iter().sum();
        prop_assert!((sum - seq.total_budget()).abs() <= 1e-12 * seq.total_budget().max(1.0));
        prop_assert_eq!(seq.variation_through(horizon), seq.total_budget());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 1..=horizon {
            let obj = seq.objective(t);
            prop_assert!(spec.domain.in_interior(&obj.peak_location));
            let y = seq.sample(t, &spec.domain.center, &mut rng).value;
            prop_assert!(y.abs() <= 1.0);
        }
        // pointwise check against the stored profile on a few points
        for t in 1..horizon {
            for x in [spec.domain.center.clone(), vec![0.9; d], vec![-0.6; d]] {
                let x = inside(x, 1.0);
                let diff = (seq.objective(t + 1).evaluate(&x) - seq.objective(t).evaluate(&x)).abs();
                prop_assert!(diff <= seq.step_variation(t) + 1e-9);
            }
        }
    }

    #[test]
    fn sequence_csv_round_trips(seed in any::<u64>(), horizon in 1usize..50, d in 1usize..4) {
        let spec = SequenceSpec {
            domain: BallDomain::new(vec![0.1; d], 1.2, 0.4).unwrap(),
            family: ObjectiveFamily { peak_value: 0.2, curvature: 0.4 },
            drift: DriftSchedule::new(DriftKind::RandomWalk { step_scale: 0.03 }),
            noise_amplitude: 0.05,
            horizon,
        };
        let seq = build_sequence(&spec, None, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.csv");
        seq.write_csv(&path, "abc").unwrap();
        let back = ObjectiveSequence::read_csv(&path).unwrap();
        prop_assert_eq!(back, seq);
    }
}

#[test]
fn feedback_mean_converges_at_fixed_point() {
    let dom = BallDomain::new(vec![0.0, 0.0], 1.0, 0.5).unwrap();
    let obj = QuadraticObjective::new(0.2, 0.6, vec![0.1, -0.2]);
    let seq = ObjectiveSequence::from_objectives(dom, 0.4, vec![obj.clone()], None).unwrap();
    let x = [0.5, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 40_000;
    let mean = (0..n).map(|_| seq.sample(1, &x, &mut rng).value).sum::<f64>() / n as f64;
    // uniform noise on [-0.4, 0.4] has standard deviation 0.4/√3
    let se = 0.4 / 3f64.sqrt() / (n as f64).sqrt();
    assert!((mean - obj.evaluate(&x)).abs() <= 3.0 * se);
}
