use linattn_core::model::{GradientSet, Layout, ModelParams, Variant};
use linattn_core::optim::{clip_global, OptimizerKind, OptimizerState};
use proptest::prelude::*;

fn layout() -> Layout {
    Layout::new(Variant::SingleQ, 1, 1, None).unwrap()
}

fn grads(values: Vec<f64>) -> GradientSet {
    GradientSet::from_vec(layout(), values).unwrap()
}

/// Scalar Adam written out from the textbook recursion.
fn reference_adam(gs: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for (t, g) in gs.iter().enumerate() {
        let t = (t + 1) as f64;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powf(t));
        let vhat = v / (1.0 - b2.powf(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
        out.push(x);
    }
    out
}

#[test]
fn adam_matches_reference_over_three_steps() {
    for gs in [[1.0, 1.0, 1.0], [0.3, -2.0, 5.0]] {
        let want = reference_adam(&gs, 0.1, 0.9, 0.9, 1e-8);
        let mut state = OptimizerState::new(OptimizerKind::adam(), &layout()).unwrap();
        let mut params = ModelParams::zeros(layout());
        for (g, w) in gs.iter().zip(want) {
            state.step(&mut params, &grads(vec![*g; 8]), 0.1).unwrap();
            assert!((params.as_slice()[0] - w).abs() <= 1e-12, "{} vs {w}", params.as_slice()[0]);
        }
        assert_eq!(state.step_count, 3);
    }
}

#[test]
fn clip_examples() {
    let g = grads((1..=8).map(f64::from).collect());
    let scaled = g.scaled(2.0 / g.norm());
    let clipped = clip_global(&scaled, 1.0).unwrap();
    for (a, b) in clipped.as_slice().iter().zip(scaled.as_slice()) {
        assert!((a - b / 2.0).abs() < 1e-15);
    }
    let half = g.scaled(0.5 / g.norm());
    assert_eq!(clip_global(&half, 1.0).unwrap(), half);
    let mut unit = grads(vec![0.0; 8]);
    unit.as_mut_slice()[3] = 1.0;
    assert_eq!(clip_global(&unit, 1.0).unwrap(), unit);
}

fn vec8() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, 8)
}

proptest! {
    #[test]
    fn clip_is_idempotent_and_direction_preserving(v in vec8(), threshold in 0.01f64..10.0) {
        let g = grads(v);
        let once = clip_global(&g, threshold).unwrap();
        let twice = clip_global(&once, threshold).unwrap();
        let gap = once.as_slice().iter().zip(twice.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(gap <= 1e-12 * threshold);
        prop_assert!(once.norm() <= g.norm() * (1.0 + 1e-15));
        if g.norm() > 0.0 {
            let cos = g.dot(&once) / (g.norm() * once.norm());
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_free_sgdm_is_gradient_descent(p in vec8(), g in vec8(), lr in 1e-4f64..1.0) {
        let mut params = ModelParams::from_vec(layout(), p.clone()).unwrap();
        let mut state = OptimizerState::new(OptimizerKind::Sgdm { momentum: 0.0 }, &layout()).unwrap();
        state.step(&mut params, &grads(g.clone()), lr).unwrap();
        for ((a, x), gi) in params.as_slice().iter().zip(&p).zip(&g) {
            prop_assert_eq!(*a, x - lr * gi);
        }
    }

    #[test]
    fn adam_first_step_is_about_lr(g in prop_oneof![1e-3f64..1e3, -1e3f64..-1e-3], lr in 1e-4f64..1.0) {
        let mut params = ModelParams::zeros(layout());
        let mut state = OptimizerState::new(OptimizerKind::adam(), &layout()).unwrap();
        state.step(&mut params, &grads(vec![g; 8]), lr).unwrap();
        let step = params.as_slice()[0].abs();
        prop_assert!(step >= 0.99 * lr && step <= lr);
        prop_assert!(params.as_slice()[0].signum() == -g.signum());
    }

    #[test]
    fn steps_are_deterministic(p in vec8(), g in vec8(), adam in any::<bool>()) {
        let kind = if adam { OptimizerKind::adam() } else { OptimizerKind::sgdm() };
        let run = || {
            let mut params = ModelParams::from_vec(layout(), p.clone()).unwrap();
            let mut state = OptimizerState::new(kind, &layout()).unwrap();
            for _ in 0..3 {
                state.step(&mut params, &grads(g.clone()), 0.05).unwrap();
            }
            (params, state)
        };
        prop_assert_eq!(run(), run());
    }
}
