//! Self-convergence of the state, adjoint, costate and sensitivity solvers
//! against refined reference solves on the same problem.
mod common;

use common::*;
use hjbfl::grid::{TimeGrid, Trajectory};
use hjbfl::models::ValueModel;
use hjbfl::ode::{
    integrate_adjoint, integrate_closed_loop, integrate_costate_kappa, integrate_sensitivity, SolverConfig,
};
use hjbfl::problem::ProblemSpec;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative nodal ℓ² distance of `coarse` from `fine` restricted to the coarse nodes.
fn nodal_error(coarse: &Trajectory, fine: &Trajectory) -> f64 {
    let ratio = fine.grid().n_steps() / coarse.grid().n_steps();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..coarse.n_nodes() {
        let f = fine.vector(k * ratio);
        num += (coarse.vector(k) - &f).norm_squared();
        den += f.norm_squared();
    }
    (num / den).sqrt()
}

struct Setup {
    spec: ProblemSpec,
    model: hjbfl::models::ResidualNetModel,
    theta: Vec<f64>,
    y0: DVector<f64>,
}

fn bilinear_setup() -> Setup {
    let spec = bilinear_spec(4);
    let model = resnet(&spec, &[8]);
    let theta: Vec<f64> = random_theta(&model, 4).into_iter().map(|v| 0.3 * v).collect();
    let y0 = bilinear_members(4, 1).remove(0);
    Setup { spec, model, theta, y0 }
}

fn toy_setup() -> Setup {
    let spec = toy_spec();
    let model = resnet(&spec, &[6]);
    let theta = random_theta(&model, 9);
    Setup {
        spec,
        model,
        theta,
        y0: toy_initial()[1].clone(),
    }
}

fn state(s: &Setup, n: usize) -> Trajectory {
    let grid = TimeGrid::uniform(s.spec.horizon, n).unwrap();
    integrate_closed_loop(&s.spec, &s.model, &s.theta, &s.y0, &grid, &SolverConfig::default()).unwrap()
}

#[test]
fn closed_loop_state_converges_at_high_order() {
    for s in [bilinear_setup(), toy_setup()] {
        let reference = state(&s, 320);
        let e1 = nodal_error(&state(&s, 20), &reference);
        let e2 = nodal_error(&state(&s, 40), &reference);
        assert!(e1 < 1e-3, "{e1}");
        assert!(e1 / e2 >= 4.0, "errors {e1:e} {e2:e}");
    }
}

#[test]
fn adjoint_converges_at_first_order() {
    for s in [bilinear_setup(), toy_setup()] {
        let adjoint = |n| {
            let y = state(&s, n);
            integrate_adjoint(&s.spec, &s.model, &s.theta, &y).unwrap()
        };
        let reference = adjoint(1600);
        let e1 = nodal_error(&adjoint(100), &reference);
        let e2 = nodal_error(&adjoint(200), &reference);
        assert!(e1 / e2 >= 1.8, "errors {e1:e} {e2:e}");
    }
}

#[test]
fn kappa_converges_at_first_order() {
    let s = toy_setup();
    let kappa = |n| {
        let y = state(&s, n);
        let source = Trajectory::from_fn(y.grid(), 2, |_, t| DVector::from_vec(vec![t.cos(), 1.0 - t]));
        integrate_costate_kappa(&s.spec, &s.model, &s.theta, &y, &source).unwrap()
    };
    let reference = kappa(1600);
    let e1 = nodal_error(&kappa(100), &reference);
    let e2 = nodal_error(&kappa(200), &reference);
    assert!(e1 / e2 >= 1.8, "errors {e1:e} {e2:e}");
}

#[test]
fn sensitivity_matches_central_differences() {
    let s = toy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dir = unit_direction(s.theta.len(), &mut rng);
    let gap = |n: usize| {
        let grid = TimeGrid::uniform(s.spec.horizon, n).unwrap();
        let solve = |th: &[f64]| {
            integrate_closed_loop(&s.spec, &s.model, th, &s.y0, &grid, &SolverConfig::default()).unwrap()
        };
        let eps = 1e-5;
        let plus: Vec<f64> = s.theta.iter().zip(&dir).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = s.theta.iter().zip(&dir).map(|(t, d)| t - eps * d).collect();
        let (yp, ym) = (solve(&plus), solve(&minus));
        let fd = Trajectory::from_fn(&grid, 2, |k, _| (yp.vector(k) - ym.vector(k)) / (2.0 * eps));
        let y = solve(&s.theta);
        let p = integrate_adjoint(&s.spec, &s.model, &s.theta, &y).unwrap();
        let (dy, _) = integrate_sensitivity(&s.spec, &s.model, &s.theta, &dir, &y, &p).unwrap();
        nodal_error(&dy, &fd)
    };
    let (e1, e2) = (gap(100), gap(200));
    assert!(e1 < 2e-2, "{e1}");
    assert!(e1 / e2 >= 1.8, "errors {e1:e} {e2:e}");
}

#[test]
fn sensitivity_is_linear_in_the_direction() {
    let s = toy_setup();
    let y = state(&s, 80);
    let p = integrate_adjoint(&s.spec, &s.model, &s.theta, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dir = unit_direction(s.theta.len(), &mut rng);
    let scaled: Vec<f64> = dir.iter().map(|d| -2.5 * d).collect();
    let (dy1, dp1) = integrate_sensitivity(&s.spec, &s.model, &s.theta, &dir, &y, &p).unwrap();
    let (dy2, dp2) = integrate_sensitivity(&s.spec, &s.model, &s.theta, &scaled, &y, &p).unwrap();
    for (a, b) in dy1.data().iter().chain(dp1.data()).zip(dy2.data().iter().chain(dp2.data())) {
        assert!((-2.5 * a - b).abs() <= 1e-13 * (1.0 + b.abs()));
    }
    let zero = vec![0.0; s.theta.len()];
    let (dy0, dp0) = integrate_sensitivity(&s.spec, &s.model, &s.theta, &zero, &y, &p).unwrap();
    assert!(dy0.data().iter().chain(dp0.data()).all(|v| *v == 0.0));
    assert_eq!(s.model.n_params(), s.theta.len());
}
