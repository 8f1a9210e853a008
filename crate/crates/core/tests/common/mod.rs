//! Builders and independent checks shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use hjbfl::bilinear;
use hjbfl::grid::TimeGrid;
use hjbfl::learning::{cost_to_go, hat_terms, phi_accumulator, LearningProblem, PhiTerminalConvention};
use hjbfl::models::{Activation, ResidualNetModel, TerminalQuadratic, ValueModel};
use hjbfl::ode::{
    evaluate_nodes, integrate_adjoint, integrate_closed_loop, integrate_costate_kappa, integrate_costate_zeta,
    integrate_sensitivity, SolverConfig,
};
use hjbfl::problem::{ControlSystem, NonlinearToySystem, PenaltyConfig, ProblemSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-state pendulum-like problem with a nonzero target.
pub fn toy_spec() -> ProblemSpec {
    let sys: Arc<dyn ControlSystem> = Arc::new(NonlinearToySystem::default());
    ProblemSpec::new(
        sys,
        1.0,
        0.5,
        1.0,
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        Arc::new(|t: f64| DVector::from_vec(vec![0.2 * t, -0.1])),
        DVector::from_vec(vec![0.3, 0.0]),
    )
    .unwrap()
}

pub fn toy_initial() -> Vec<DVector<f64>> {
    vec![
        DVector::from_vec(vec![0.6, -0.3]),
        DVector::from_vec(vec![-0.4, 0.5]),
        DVector::from_vec(vec![0.2, 0.8]),
    ]
}

/// The truncated bilinear benchmark with `β = 0.01`, `α = 0.25`, `T = 2`.
pub fn bilinear_spec(n_modes: usize) -> ProblemSpec {
    bilinear::assemble(n_modes).unwrap().problem(2.0, 0.01, 0.25).unwrap()
}

/// First training points of a reproducible ensemble around the reference state.
pub fn bilinear_members(n_modes: usize, count: usize) -> Vec<DVector<f64>> {
    let center = bilinear::default_reference_initial(n_modes);
    let set = bilinear::generate_ensemble(&center, count, 1.0, 7, count).unwrap();
    (0..count).map(|i| set.point(i)).collect()
}

pub fn resnet(spec: &ProblemSpec, hidden: &[usize]) -> ResidualNetModel {
    ResidualNetModel::new(TerminalQuadratic::from_problem(spec), spec.horizon, hidden, Activation::SinCos).unwrap()
}

/// A random θ from the default initializer with biases filled in too.
pub fn random_theta(model: &ResidualNetModel, seed: u64) -> Vec<f64> {
    let mut theta = model.init_theta(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in theta.iter_mut().filter(|v| **v == 0.0) {
        *v = rng.random_range(-0.3..0.3);
    }
    theta
}

pub fn unit_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn learning_problem<'a>(
    spec: &'a ProblemSpec,
    model: &'a dyn ValueModel,
    penalties: PenaltyConfig,
    n_steps: usize,
    members: &[DVector<f64>],
) -> LearningProblem<'a> {
    let grid = TimeGrid::uniform(spec.horizon, n_steps).unwrap();
    let w = 1.0 / members.len() as f64;
    LearningProblem::new(spec, model, penalties, grid, members.iter().map(|y| (y.clone(), w)).collect()).unwrap()
}

/// Directional derivative `⟨∇𝒥, δθ⟩` against the central difference of the
/// objective, as `(analytic, finite_difference)`.
pub fn directional_pair(problem: &LearningProblem<'_>, theta: &[f64], dir: &[f64], step: f64) -> (f64, f64) {
    let grad = problem.gradient(theta).unwrap();
    let analytic: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(dir).map(|(t, d)| t + s * d).collect() };
    let fp = problem.objective(&shifted(step)).unwrap().0;
    let fm = problem.objective(&shifted(-step)).unwrap().0;
    (analytic, (fp - fm) / (2.0 * step))
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Both sides of the costate pairing identity
///
/// `(ŷ, δY) + ŷ_T·δY(T) + (p̂, δP) = (D_θF δθ, gᵀζ + [Dg κ]ᵀp)`
///
/// with every time integral taken by the trapezoid rule.
#[derive(Debug, Clone, Copy)]
pub struct Pairing {
    pub lhs: f64,
    pub rhs: f64,
    /// Sum of the absolute values of the individual pairings.
    pub magnitude: f64,
}

impl Pairing {
    /// `|LHS − RHS| / (1 + magnitudes)`
    pub fn scaled_gap(&self) -> f64 {
        (self.lhs - self.rhs).abs() / (1.0 + self.magnitude)
    }

    pub fn relative_gap(&self) -> f64 {
        relative_gap(self.lhs, self.rhs)
    }
}

pub fn pairing_sides(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    dtheta: &[f64],
    y0: &DVector<f64>,
    penalties: &PenaltyConfig,
    n_steps: usize,
) -> Pairing {
    let grid = TimeGrid::uniform(spec.horizon, n_steps).unwrap();
    let solver = SolverConfig::default();
    let y = integrate_closed_loop(spec, model, theta, y0, &grid, &solver).unwrap();
    let p = integrate_adjoint(spec, model, theta, &y).unwrap();
    let nodes = evaluate_nodes(spec, model, theta, &y);
    let u = hjbfl::grid::Trajectory::from_fn(&grid, spec.control_dim(), |k, _| nodes[k].control.clone());
    let j_t = cost_to_go(spec, &y, &u).unwrap();
    let phi = phi_accumulator(model, theta, &y, &j_t);
    let hats = hat_terms(spec, penalties, model, theta, &y, Some(&p), &j_t, &phi, PhiTerminalConvention::default()).unwrap();
    let kappa = integrate_costate_kappa(spec, model, theta, &y, &hats.p_hat).unwrap();
    let zeta = integrate_costate_zeta(spec, model, theta, &y, &p, &kappa, &hats.y_hat, &hats.y_hat_terminal).unwrap();
    let (dy, dp) = integrate_sensitivity(spec, model, theta, dtheta, &y, &p).unwrap();
    let w = grid.trapezoid_weights();
    let dth = DVector::from_column_slice(dtheta);
    let terminal = hats.y_hat_terminal.dot(&dy.last());
    let (mut state, mut adjoint, mut rhs) = (0.0, 0.0, 0.0);
    for (k, nd) in nodes.iter().enumerate() {
        state += w[k] * hats.y_hat.vector(k).dot(&dy.vector(k));
        adjoint += w[k] * hats.p_hat.vector(k).dot(&dp.vector(k));
        let dfdth = nd.g.tr_mul(&(model.grad_y_theta(theta, nd.t, &nd.y) * &dth)) * (-1.0 / spec.beta);
        let paired = nd.g.tr_mul(&zeta.vector(k)) + nd.dg_pairing(&kappa.vector(k), &p.vector(k));
        rhs += w[k] * dfdth.dot(&paired);
    }
    Pairing {
        lhs: state + terminal + adjoint,
        rhs,
        magnitude: state.abs() + terminal.abs() + adjoint.abs() + rhs.abs(),
    }
}
