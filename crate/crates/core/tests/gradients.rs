mod oracles;

use oracles::{GradMode, GRAD_MODES};

#[test]
fn analytic_gradients_match_finite_differences() {
    for mode in GRAD_MODES {
        for seed in 0..20 {
            let err = oracles::gradient_error(seed, mode);
            assert!(err < 1e-4, "{mode:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn draws_are_not_trivial() {
    for mode in GRAD_MODES {
        let (params, inputs, items, weight) = oracles::gradient_draw(1, mode);
        let (_, g) = semiseg_core::training::step_objective(&params, &inputs, &items, weight).unwrap();
        assert!(g.iter().any(|v| v.abs() > 1e-6), "{mode:?}");
        assert_eq!(items.iter().any(|i| i.is_constraint()), mode != GradMode::Supervised);
    }
}
