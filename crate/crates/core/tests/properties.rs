use proptest::prelude::*;

use hwtrack::hjb::{generator_apply, smoothed_positive_part, Stencil};
use hwtrack::model::{positive_excess, ClassParams, ControlVector, Regime, ScaledSystem, SystemParams};
use hwtrack::queue::{dispatch_distribution, initial_state, step, Dispatch, InitMode, PolicySpec};
use hwtrack::seeds;

fn system() -> impl Strategy<Value = ScaledSystem> {
    (1usize..=3)
        .prop_flat_map(|k| {
            (
                prop::collection::vec((0.1f64..1.0, 0.5f64..3.0, 0.5f64..5.0), k),
                -2.0f64..2.0,
                10u32..400,
            )
        })
        .prop_map(|(cls, beta, n)| {
            let total: f64 = cls.iter().map(|c| c.0).sum();
            let classes = cls
                .into_iter()
                .map(|(a, mu, c)| ClassParams { a: a / total, mu, c })
                .collect();
            let p = SystemParams::new(classes, beta, 1.0, 0.5, 1, Regime::NonPaper).unwrap();
            ScaledSystem::new(p, n).unwrap()
        })
}

fn simplex(dim: usize) -> impl Strategy<Value = ControlVector> {
    prop::collection::vec(0.0f64..1.0, dim).prop_map(|w| {
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        let mut u: Vec<f64> = w.iter().map(|v| (v + 1e-9 / w.len() as f64) / total).collect();
        let s: f64 = u.iter().sum();
        u.iter_mut().for_each(|v| *v /= s);
        ControlVector::new(u).unwrap()
    })
}

fn sys_state_control() -> impl Strategy<Value = (ScaledSystem, Vec<f64>, ControlVector)> {
    system().prop_flat_map(|sys| {
        let dim = sys.class_count();
        let scale = f64::from(sys.n).sqrt();
        (
            Just(sys),
            prop::collection::vec(-scale..scale, dim),
            simplex(dim),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn centring_terms_sum_to_staffing_slack(sys in system()) {
        let total: f64 = sys.l.iter().sum();
        let expected = -sys.params.beta() * sys.mu_bar * sys.load.sqrt();
        prop_assert!((total - expected).abs() <= 1e-9 * (1.0 + sys.lambda_total));
        let nu: f64 = sys.nu.iter().sum();
        prop_assert!((nu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_is_irrelevant_without_queue((sys, x, u) in sys_state_control()) {
        let total: f64 = x.iter().sum();
        let shifted: Vec<f64> = x.iter().map(|v| v - total.max(0.0) / x.len() as f64 - 1e-9).collect();
        prop_assume!(positive_excess(&shifted) == 0.0);
        let v = ControlVector::vertex(sys.class_count(), 0);
        prop_assert_eq!(sys.drift(&shifted, &u), sys.drift(&shifted, &v));
        if let (Ok(a), Ok(b)) = (sys.diffusion(&shifted, &u), sys.diffusion(&shifted, &v)) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn variance_plus_drift_is_twice_arrival_rate((sys, x, u) in sys_state_control()) {
        let s = positive_excess(&x);
        let b = sys.drift(&x, &u);
        for i in 0..sys.class_count() {
            let var = sys.variance_component(i, x[i], u[i], s);
            prop_assert!((var + b[i] - 2.0 * sys.lambda[i]).abs() <= 1e-9 * sys.lambda_total);
        }
    }

    #[test]
    fn holding_cost_is_linear_in_control(
        (sys, x, u) in sys_state_control(),
        theta in 0.0f64..1.0,
    ) {
        let dim = sys.class_count();
        let v = ControlVector::vertex(dim, dim - 1);
        let mix: Vec<f64> = (0..dim).map(|i| theta * u[i] + (1.0 - theta) * v[i]).collect();
        let mixed = ControlVector::new(mix).unwrap();
        let lhs = sys.holding_cost(&x, &mixed);
        let rhs = theta * sys.holding_cost(&x, &u) + (1.0 - theta) * sys.holding_cost(&x, &v);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn vertices_minimize_the_bellman_operator(
        (sys, x, u) in sys_state_control(),
        grad in prop::collection::vec(-3.0f64..3.0, 3),
        second in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let dim = sys.class_count();
        let st = Stencil::smooth(0.0, &grad[..dim], &second[..dim]);
        let value = |c: &ControlVector| -> Option<f64> {
            let g = generator_apply(&sys, &st, &x, c).ok()?;
            Some(sys.holding_cost(&x, c) + g)
        };
        let vertices: Option<Vec<f64>> = (0..dim).map(|k| value(&ControlVector::vertex(dim, k))).collect();
        // the diffusion must be defined at every vertex, hence on the whole simplex
        prop_assume!(vertices.is_some());
        let at_u = value(&u).unwrap();
        let best = vertices.unwrap().into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(best <= at_u + 1e-9 * (1.0 + at_u.abs()));
    }

    #[test]
    fn smoothing_bounds(a in 1.0f64..1e4, y in -10.0f64..10.0) {
        let f = smoothed_positive_part(a, y);
        prop_assert!(f >= y.max(0.0) - 1e-15);
        prop_assert!(f <= y.max(0.0) + 1.0 / (16.0 * a) + 1e-15);
        prop_assert!(smoothed_positive_part(a, y + 1e-3) >= f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn queue_steps_keep_invariants(sys in system(), seed in any::<u64>()) {
        let policy = PolicySpec::ProportionalRandom;
        let mut state = initial_state(&sys, 1.0, &InitMode::Fluid).unwrap();
        let mut rng = seeds::stream(seed, 0);
        for _ in 0..2000 {
            let before = state.clone();
            let rec = step(&sys, &mut state, &policy, &mut rng);
            prop_assert!(rec.t >= before.t);
            prop_assert!(state.check_invariants(sys.n).is_ok());
            if let Dispatch::Admit { choices, .. } = dispatch_distribution(&sys, &state, &policy) {
                let mass: f64 = choices.iter().map(|c| c.1).sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
            }
        }
    }
}
