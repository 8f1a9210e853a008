//! Time integration of the closed-loop state equation (3-stage Radau IIA)
//! and of the linear adjoint, costate and sensitivity equations (implicit
//! Euler) on a shared uniform grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdjointTrajectory, CostateTrajectory, StateTrajectory, TimeGrid, Trajectory};
use crate::models::{feedback_with_jacobian, ValueEval, ValueModel};
use crate::problem::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub blowup_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            newton_max_iter: 25,
            blowup_bound: 1e6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 || !(self.blowup_bound > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

const SQRT6: f64 = 2.449_489_742_783_178;

struct RadauTableau {
    c: [f64; 3],
    a: [[f64; 3]; 3],
}

fn radau() -> RadauTableau {
    RadauTableau {
        c: [(4.0 - SQRT6) / 10.0, (4.0 + SQRT6) / 10.0, 1.0],
        a: [
            [
                (88.0 - 7.0 * SQRT6) / 360.0,
                (296.0 - 169.0 * SQRT6) / 1800.0,
                (-2.0 + 3.0 * SQRT6) / 225.0,
            ],
            [
                (296.0 + 169.0 * SQRT6) / 1800.0,
                (88.0 + 7.0 * SQRT6) / 360.0,
                (-2.0 - 3.0 * SQRT6) / 225.0,
            ],
            [(16.0 - SQRT6) / 36.0, (16.0 + SQRT6) / 36.0, 1.0 / 9.0],
        ],
    }
}

/// Integrates `ẏ = f(t, y)` with the 3-stage Radau IIA method (order 5).
///
/// The stage equations are solved by simplified Newton with the Jacobian
/// `jac` frozen at the start of the step. If that does not converge, the
/// step is redone with damped full Newton, re-evaluating `jac` at the stages.
pub fn radau_integrate(
    grid: &TimeGrid,
    y0: &DVector<f64>,
    cfg: &SolverConfig,
    f: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    jac: impl Fn(f64, &DVector<f64>) -> DMatrix<f64>,
) -> Result<StateTrajectory> {
    let n = y0.len();
    let tab = radau();
    let h = grid.step();
    let mut traj = Trajectory::zeros(grid, n);
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    traj.set(0, y0);
    let mut y = y0.clone();
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let stage = RadauStep {
            tab: &tab,
            n,
            h,
            t,
            y: &y,
            f: &f,
        };
        let f0 = f(t, &y);
        let guess: Vec<DVector<f64>> = tab.c.iter().map(|c| &f0 * (c * h)).collect();
        let z = match stage.simplified_newton(guess.clone(), &jac(t, &y), cfg) {
            Some(z) => z,
            None => stage.damped_newton(guess, &jac, cfg, k)?,
        };
        y += &z[2];
        let ynorm = y.norm();
        if !ynorm.is_finite() || ynorm > cfg.blowup_bound {
            return Err(Error::Divergence {
                step: k + 1,
                norm: ynorm,
                bound: cfg.blowup_bound,
            });
        }
        traj.set(k + 1, &y);
    }
    Ok(traj)
}

struct RadauStep<'a, F> {
    tab: &'a RadauTableau,
    n: usize,
    h: f64,
    t: f64,
    y: &'a DVector<f64>,
    f: &'a F,
}

impl<F: Fn(f64, &DVector<f64>) -> DVector<f64>> RadauStep<'_, F> {
    fn stage_time(&self, j: usize) -> f64 {
        self.t + self.tab.c[j] * self.h
    }

    fn stage_state(&self, z: &DVector<f64>) -> DVector<f64> {
        self.y + z
    }

    /// Residuals `z_i − h Σ_j a_ij f(t_j, y + z_j)` and their max-norm.
    fn residual(&self, z: &[DVector<f64>]) -> (Vec<DVector<f64>>, f64) {
        let evals: Vec<DVector<f64>> = (0..3)
            .map(|j| (self.f)(self.stage_time(j), &self.stage_state(&z[j])))
            .collect();
        let mut res = Vec::with_capacity(3);
        let mut norm: f64 = 0.0;
        for (i, zi) in z.iter().enumerate() {
            let mut r = zi.clone();
            for (j, fj) in evals.iter().enumerate() {
                r.axpy(-self.h * self.tab.a[i][j], fj, 1.0);
            }
            norm = norm.max(r.amax());
            res.push(r);
        }
        (res, if norm.is_nan() { f64::INFINITY } else { norm })
    }

    /// `I − h (A ⊗ ·)` with per-stage Jacobian blocks.
    fn newton_matrix(&self, jacs: [&DMatrix<f64>; 3]) -> DMatrix<f64> {
        let n = self.n;
        let mut mat = DMatrix::<f64>::identity(3 * n, 3 * n);
        for i in 0..3 {
            for (j, jac) in jacs.iter().enumerate() {
                let mut block = mat.view_mut((i * n, j * n), (n, n));
                block += *jac * (-self.h * self.tab.a[i][j]);
            }
        }
        mat
    }

    fn stack(&self, res: &[DVector<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.n);
        for (i, r) in res.iter().enumerate() {
            v.rows_mut(i * self.n, self.n).copy_from(r);
        }
        v
    }

    /// Returns `None` if the iteration diverges or runs out of iterations.
    /// One iteration past the tolerance is taken so the converged stages
    /// are accurate well beyond `newton_tol`.
    fn simplified_newton(
        &self,
        mut z: Vec<DVector<f64>>,
        jac: &DMatrix<f64>,
        cfg: &SolverConfig,
    ) -> Option<Vec<DVector<f64>>> {
        let n = self.n;
        let lu = self.newton_matrix([jac, jac, jac]).lu();
        let (mut res, mut norm) = self.residual(&z);
        let mut extra = false;
        for _ in 0..cfg.newton_max_iter {
            if !norm.is_finite() {
                return None;
            }
            if norm <= cfg.newton_tol {
                if extra || norm == 0.0 {
                    return Some(z);
                }
                extra = true;
            }
            let delta = lu.solve(&(-self.stack(&res)))?;
            for (i, zi) in z.iter_mut().enumerate() {
                *zi += delta.rows(i * n, n);
            }
            let (r2, n2) = self.residual(&z);
            if n2 > norm && n2 > cfg.newton_tol {
                return None;
            }
            res = r2;
            norm = n2;
        }
        (norm <= cfg.newton_tol).then_some(z)
    }

    fn damped_newton(
        &self,
        mut z: Vec<DVector<f64>>,
        jac: &impl Fn(f64, &DVector<f64>) -> DMatrix<f64>,
        cfg: &SolverConfig,
        k: usize,
    ) -> Result<Vec<DVector<f64>>> {
        let n = self.n;
        let (mut res, mut norm) = self.residual(&z);
        let mut iter = 0;
        while norm > cfg.newton_tol {
            if iter == cfg.newton_max_iter || !norm.is_finite() {
                return Err(Error::NewtonFailure {
                    step: k,
                    time: self.t,
                    residual: norm,
                });
            }
            iter += 1;
            let jacs: Vec<DMatrix<f64>> = (0..3)
                .map(|j| jac(self.stage_time(j), &self.stage_state(&z[j])))
                .collect();
            let mat = self.newton_matrix([&jacs[0], &jacs[1], &jacs[2]]);
            let delta = mat.lu().solve(&(-self.stack(&res))).ok_or(Error::SingularStep(k))?;
            let znorm = z.iter().map(|v| v.amax()).fold(0.0, f64::max);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial: Vec<DVector<f64>> = (0..3).map(|i| &z[i] + delta.rows(i * n, n) * lambda).collect();
                let (r2, n2) = self.residual(&trial);
                if n2 <= (1.0 - 1e-4 * lambda) * norm || n2 <= cfg.newton_tol {
                    z = trial;
                    res = r2;
                    norm = n2;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                // no decrease along the Newton direction: stalled at roundoff or failed
                if delta.amax() <= 1e-14 * (1.0 + znorm) {
                    break;
                }
                return Err(Error::NewtonFailure {
                    step: k,
                    time: self.t,
                    residual: norm,
                });
            }
        }
        Ok(z)
    }
}

/// Backward implicit Euler for `−ẋ = M(t) x + s(t)`, `x(T) = x_T`:
/// `(I − h M_k) x_k = x_{k+1} + h s_k`.
pub fn backward_linear(
    grid: &TimeGrid,
    terminal: &DVector<f64>,
    mut step: impl FnMut(usize) -> (DMatrix<f64>, DVector<f64>),
) -> Result<Trajectory> {
    let n = terminal.len();
    let h = grid.step();
    let mut traj = Trajectory::zeros(grid, n);
    let last = grid.n_steps();
    traj.set(last, terminal);
    let mut x = terminal.clone();
    for k in (0..last).rev() {
        let (m, s) = step(k);
        let lhs = DMatrix::<f64>::identity(n, n) - m * h;
        let rhs = &x + s * h;
        x = lhs.lu().solve(&rhs).ok_or(Error::SingularStep(k))?;
        traj.set(k, &x);
    }
    Ok(traj)
}

/// Forward implicit Euler for `ẋ = M(t) x + s(t)`, `x(0) = x₀`:
/// `(I − h M_{k+1}) x_{k+1} = x_k + h s_{k+1}`.
pub fn forward_linear(
    grid: &TimeGrid,
    initial: &DVector<f64>,
    mut step: impl FnMut(usize) -> (DMatrix<f64>, DVector<f64>),
) -> Result<Trajectory> {
    let n = initial.len();
    let h = grid.step();
    let mut traj = Trajectory::zeros(grid, n);
    traj.set(0, initial);
    let mut x = initial.clone();
    for k in 1..grid.n_nodes() {
        let (m, s) = step(k);
        let lhs = DMatrix::<f64>::identity(n, n) - m * h;
        let rhs = &x + s * h;
        x = lhs.lu().solve(&rhs).ok_or(Error::SingularStep(k))?;
        traj.set(k, &x);
    }
    Ok(traj)
}

/// Closed-loop quantities at one grid node.
#[derive(Debug, Clone)]
pub struct ClosedLoopNode {
    pub t: f64,
    pub y: DVector<f64>,
    pub value: ValueEval,
    /// `F(t, y)`
    pub control: DVector<f64>,
    /// `D_y F(t, y)`
    pub dcontrol: DMatrix<f64>,
    /// `g(t, y)`
    pub g: DMatrix<f64>,
    /// `∂_y g_{:,i}` for each control component
    pub dg: Vec<DMatrix<f64>>,
    /// `Df + Σ F_i ∂_y g_{:,i}`, the transpose of the adjoint operator `A`
    pub jac: DMatrix<f64>,
}

impl ClosedLoopNode {
    pub fn evaluate(spec: &ProblemSpec, model: &dyn ValueModel, theta: &[f64], t: f64, y: &DVector<f64>) -> Self {
        let fe = feedback_with_jacobian(spec, model, theta, t, y);
        let dg = spec.system.control_operator_jacobian(t, y);
        let mut jac = spec.system.drift_jacobian(t, y);
        for (ui, gi) in fe.control.iter().zip(&dg) {
            jac += gi * *ui;
        }
        Self {
            t,
            y: y.clone(),
            value: fe.value,
            control: fe.control,
            dcontrol: fe.jacobian_y,
            g: fe.g,
            dg,
            jac,
        }
    }

    /// Full closed-loop Jacobian `Df + Σ F_i ∂g_i + g D_yF`.
    pub fn closed_loop_jacobian(&self) -> DMatrix<f64> {
        &self.jac + &self.g * &self.dcontrol
    }

    /// `[Dg v]ᵀ p`, i.e. the vector with entries `pᵀ ∂_y g_{:,i} v`.
    pub fn dg_pairing(&self, v: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dg.len(), self.dg.iter().map(|gi| p.dot(&(gi * v))))
    }

    /// `S̃ = Σ_j p_j ∇²f_j + Σ_{j,i} p_j F_i ∇²g_{ji}`.
    pub fn second_order(&self, spec: &ProblemSpec, p: &DVector<f64>) -> DMatrix<f64> {
        spec.system.drift_hessian_contraction(self.t, &self.y, p)
            + spec
                .system
                .control_hessian_contraction(self.t, &self.y, p, &self.control)
    }
}

pub fn evaluate_nodes(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
) -> Vec<ClosedLoopNode> {
    let grid = y.grid();
    (0..grid.n_nodes())
        .map(|k| ClosedLoopNode::evaluate(spec, model, theta, grid.time(k), &y.vector(k)))
        .collect()
}

fn check_model(spec: &ProblemSpec, model: &dyn ValueModel, theta: &[f64]) -> Result<()> {
    if model.state_dim() != spec.state_dim() {
        return Err(Error::Contract(format!(
            "model state dimension {} differs from problem dimension {}",
            model.state_dim(),
            spec.state_dim()
        )));
    }
    if theta.len() != model.n_params() {
        return Err(Error::Contract(format!(
            "θ has {} entries, model expects {}",
            theta.len(),
            model.n_params()
        )));
    }
    Ok(())
}

/// `ẏ = f(t, y) + g(t, y) F_θ(t, y)`, `y(0) = y₀`.
pub fn integrate_closed_loop(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    y0: &DVector<f64>,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<StateTrajectory> {
    check_model(spec, model, theta)?;
    if y0.len() != spec.state_dim() {
        return Err(Error::Contract("initial state has wrong dimension".into()));
    }
    radau_integrate(
        grid,
        y0,
        cfg,
        |t, y| {
            let g = spec.system.control_operator(t, y);
            let control = g.tr_mul(&model.grad_y(theta, t, y)) * (-1.0 / spec.beta);
            spec.system.drift(t, y) + g * control
        },
        |t, y| ClosedLoopNode::evaluate(spec, model, theta, t, y).closed_loop_jacobian(),
    )
}

/// `ẏ = f(t, y) + g(t, y) u(t)` with `u` piecewise linear between nodes.
pub fn integrate_open_loop(
    spec: &ProblemSpec,
    u: &Trajectory,
    y0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<StateTrajectory> {
    let grid = u.grid().clone();
    let h = grid.step();
    let m = spec.control_dim();
    let control_at = |t: f64| -> DVector<f64> {
        let k = ((t / h).floor() as usize).min(grid.n_steps() - 1);
        let s = ((t - grid.time(k)) / h).clamp(0.0, 1.0);
        DVector::from_fn(m, |i, _| (1.0 - s) * u.row(k)[i] + s * u.row(k + 1)[i])
    };
    radau_integrate(
        &grid,
        y0,
        cfg,
        |t, y| spec.system.drift(t, y) + spec.system.control_operator(t, y) * control_at(t),
        |t, y| spec.system.state_jacobian(t, y, &control_at(t)),
    )
}

/// Tracking residual `Q₁ᵀQ₁(y − y_d)` at a node.
pub fn tracking_source(spec: &ProblemSpec, t: f64, y: &DVector<f64>) -> DVector<f64> {
    spec.q1tq1() * (y - (spec.target)(t))
}

/// `p(T) = α Q₂ᵀQ₂ (y(T) − y_dT)`.
pub fn adjoint_terminal(spec: &ProblemSpec, y_end: &DVector<f64>) -> DVector<f64> {
    spec.q2tq2() * (y_end - &spec.terminal_target) * spec.alpha
}

/// Adjoint from cached nodes: `−ṗ = A p + Q₁ᵀQ₁(y − y_d)`.
pub fn adjoint_from_nodes(spec: &ProblemSpec, grid: &TimeGrid, nodes: &[ClosedLoopNode]) -> Result<AdjointTrajectory> {
    let last = &nodes[nodes.len() - 1];
    backward_linear(grid, &adjoint_terminal(spec, &last.y), |k| {
        let nd = &nodes[k];
        (nd.jac.transpose(), tracking_source(spec, nd.t, &nd.y))
    })
}

/// `−ṗ = (Df + [Dg F_θ])ᵀ p + Q₁ᵀQ₁(y − y_d)`, `p(T) = α Q₂ᵀQ₂(y(T) − y_dT)`.
pub fn integrate_adjoint(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
) -> Result<AdjointTrajectory> {
    check_model(spec, model, theta)?;
    let nodes = evaluate_nodes(spec, model, theta, y);
    adjoint_from_nodes(spec, y.grid(), &nodes)
}

/// `κ̇ = Aᵀ κ + p̂`, `κ(0) = 0`.
pub fn kappa_from_nodes(grid: &TimeGrid, nodes: &[ClosedLoopNode], p_hat: &Trajectory) -> Result<CostateTrajectory> {
    let n = p_hat.dim();
    forward_linear(grid, &DVector::zeros(n), |k| (nodes[k].jac.clone(), p_hat.vector(k)))
}

pub fn integrate_costate_kappa(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
    p_hat: &Trajectory,
) -> Result<CostateTrajectory> {
    check_model(spec, model, theta)?;
    let nodes = evaluate_nodes(spec, model, theta, y);
    kappa_from_nodes(y.grid(), &nodes, p_hat)
}

/// `−ζ̇ = (A + D_yFᵀgᵀ) ζ + S̃κ + D_yFᵀ[Dgκ]ᵀp + Q₁ᵀQ₁κ + ŷ`,
/// `ζ(T) = α Q₂ᵀQ₂ κ(T) + ŷ_T`. `p` and `κ` may be omitted when `κ ≡ 0`.
pub fn zeta_from_nodes(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    nodes: &[ClosedLoopNode],
    costates: Option<(&Trajectory, &Trajectory)>,
    y_hat: &Trajectory,
    y_hat_terminal: &DVector<f64>,
) -> Result<CostateTrajectory> {
    let last = grid.n_steps();
    let mut terminal = y_hat_terminal.clone();
    if let Some((_, kappa)) = costates {
        terminal += spec.q2tq2() * kappa.vector(last) * spec.alpha;
    }
    backward_linear(grid, &terminal, |k| {
        let nd = &nodes[k];
        let mut src = y_hat.vector(k);
        if let Some((p, kappa)) = costates {
            let pk = p.vector(k);
            let kk = kappa.vector(k);
            src += nd.second_order(spec, &pk) * &kk;
            src += nd.dcontrol.tr_mul(&nd.dg_pairing(&kk, &pk));
            src += spec.q1tq1() * &kk;
        }
        (nd.closed_loop_jacobian().transpose(), src)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_costate_zeta(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
    p: &AdjointTrajectory,
    kappa: &CostateTrajectory,
    y_hat: &Trajectory,
    y_hat_terminal: &DVector<f64>,
) -> Result<CostateTrajectory> {
    check_model(spec, model, theta)?;
    let nodes = evaluate_nodes(spec, model, theta, y);
    zeta_from_nodes(spec, y.grid(), &nodes, Some((p, kappa)), y_hat, y_hat_terminal)
}

/// Linearized state and adjoint response `(δY, δP)` to a parameter
/// direction `δθ`:
///
/// `δẎ = (Aᵀ + g D_yF) δY + g D_θF δθ`, `δY(0) = 0`,
/// `−δṖ = A δP + (S̃ + Γ(p) D_yF + Q₁ᵀQ₁) δY + Γ(p) D_θF δθ`,
/// `δP(T) = α Q₂ᵀQ₂ δY(T)`, where `Γ(p)` has columns `(∂_y g_{:,i})ᵀ p`.
pub fn integrate_sensitivity(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    dtheta: &[f64],
    y: &StateTrajectory,
    p: &AdjointTrajectory,
) -> Result<(StateTrajectory, AdjointTrajectory)> {
    check_model(spec, model, theta)?;
    if dtheta.len() != theta.len() {
        return Err(Error::Contract("δθ layout differs from θ".into()));
    }
    let grid = y.grid();
    let nodes = evaluate_nodes(spec, model, theta, y);
    let n = spec.state_dim();
    // D_θF δθ = −(1/β) gᵀ (D_θ ∂_yV) δθ, from one column of D_yθV per node
    let dtheta_vec = DVector::from_column_slice(dtheta);
    let dfdtheta: Vec<DVector<f64>> = nodes
        .iter()
        .map(|nd| {
            let gyt = model.grad_y_theta(theta, nd.t, &nd.y);
            nd.g.tr_mul(&(gyt * &dtheta_vec)) * (-1.0 / spec.beta)
        })
        .collect();
    let dy = forward_linear(grid, &DVector::zeros(n), |k| {
        let nd = &nodes[k];
        (nd.closed_loop_jacobian(), &nd.g * &dfdtheta[k])
    })?;
    let gamma = |nd: &ClosedLoopNode, pk: &DVector<f64>| -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = nd.dg.iter().map(|gi| gi.tr_mul(pk)).collect();
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    };
    let terminal = spec.q2tq2() * dy.vector(grid.n_steps()) * spec.alpha;
    let dp = backward_linear(grid, &terminal, |k| {
        let nd = &nodes[k];
        let pk = p.vector(k);
        let dyk = dy.vector(k);
        let gam = gamma(nd, &pk);
        let src = nd.second_order(spec, &pk) * &dyk
            + &gam * (&nd.dcontrol * &dyk)
            + spec.q1tq1() * &dyk
            + &gam * &dfdtheta[k];
        (nd.jac.transpose(), src)
    })?;
    Ok((dy, dp))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::models::QuadraticValueModel;
    use crate::problem::{AffineBilinearSystem, ControlSystem};

    fn scalar_decay() -> ProblemSpec {
        let sys: Arc<dyn ControlSystem> = Arc::new(
            AffineBilinearSystem::linear(DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1)).unwrap(),
        );
        ProblemSpec::regulator(sys, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn radau_tableau_is_consistent() {
        let tab = radau();
        for i in 0..3 {
            let row: f64 = tab.a[i].iter().sum();
            assert!((row - tab.c[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_dynamics_constant_solution() {
        let sys: Arc<dyn ControlSystem> =
            Arc::new(AffineBilinearSystem::linear(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap());
        let spec = ProblemSpec::regulator(sys, 1.0, 1.0, 1.0).unwrap();
        let model = QuadraticValueModel::constant(1.0, DMatrix::identity(2, 2));
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let y0 = DVector::from_vec(vec![0.3, -2.0]);
        let y = integrate_closed_loop(&spec, &model, &[], &y0, &grid, &SolverConfig::default()).unwrap();
        for k in 0..grid.n_nodes() {
            assert_eq!(y.vector(k), y0);
        }
    }

    #[test]
    fn radau_exponential_decay_is_high_order() {
        let spec = scalar_decay();
        let model = QuadraticValueModel::constant(1.0, DMatrix::zeros(1, 1));
        let y0 = DVector::from_element(1, 1.0);
        let mut errs = Vec::new();
        for steps in [4, 8] {
            let grid = TimeGrid::uniform(1.0, steps).unwrap();
            let y = integrate_closed_loop(&spec, &model, &[], &y0, &grid, &SolverConfig::default()).unwrap();
            errs.push((y.last()[0] - (-1.0f64).exp()).abs());
        }
        assert!(errs[0] < 1e-6);
        assert!(errs[0] / errs[1] > 20.0, "{errs:?}");
    }

    #[test]
    fn blowup_is_reported() {
        let sys: Arc<dyn ControlSystem> = Arc::new(
            AffineBilinearSystem::linear(DMatrix::from_element(1, 1, 30.0), DMatrix::zeros(1, 1)).unwrap(),
        );
        let spec = ProblemSpec::regulator(sys, 1.0, 1.0, 1.0).unwrap();
        let model = QuadraticValueModel::constant(1.0, DMatrix::zeros(1, 1));
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let cfg = SolverConfig {
            blowup_bound: 1e3,
            ..SolverConfig::default()
        };
        let err = integrate_closed_loop(&spec, &model, &[], &DVector::from_element(1, 1.0), &grid, &cfg);
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    #[test]
    fn constant_adjoint() {
        let sys: Arc<dyn ControlSystem> =
            Arc::new(AffineBilinearSystem::linear(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap());
        let spec = ProblemSpec::regulator(sys, 1.0, 1.0, 1.0)
            .unwrap()
            .with_weights(DMatrix::zeros(1, 1), DMatrix::identity(1, 1))
            .unwrap();
        let model = QuadraticValueModel::constant(1.0, DMatrix::zeros(1, 1));
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let y = Trajectory::from_fn(&grid, 1, |_, _| DVector::from_element(1, 2.0));
        let p = integrate_adjoint(&spec, &model, &[], &y).unwrap();
        for k in 0..grid.n_nodes() {
            assert!((p.row(k)[0] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kappa_integrates_constant_source() {
        let sys: Arc<dyn ControlSystem> =
            Arc::new(AffineBilinearSystem::linear(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap());
        let spec = ProblemSpec::regulator(sys, 2.0, 1.0, 1.0).unwrap();
        let model = QuadraticValueModel::constant(2.0, DMatrix::zeros(2, 2));
        let grid = TimeGrid::uniform(2.0, 16).unwrap();
        let y = Trajectory::zeros(&grid, 2);
        let c = DVector::from_vec(vec![1.5, -0.5]);
        let src = Trajectory::from_fn(&grid, 2, |_, _| c.clone());
        let kappa = integrate_costate_kappa(&spec, &model, &[], &y, &src).unwrap();
        for k in 0..grid.n_nodes() {
            assert!((kappa.vector(k) - &c * grid.time(k)).amax() < 1e-13);
        }
        let zero = integrate_costate_kappa(&spec, &model, &[], &y, &Trajectory::zeros(&grid, 2)).unwrap();
        assert_eq!(zero.l2_norm_sq(), 0.0);
    }

    #[test]
    fn zeta_propagates_terminal_condition() {
        let spec = scalar_decay();
        let model = QuadraticValueModel::constant(1.0, DMatrix::zeros(1, 1));
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let y = Trajectory::zeros(&grid, 1);
        let zeros = Trajectory::zeros(&grid, 1);
        let e1 = DVector::from_element(1, 1.0);
        let zeta = integrate_costate_zeta(&spec, &model, &[], &y, &zeros, &zeros, &zeros, &e1).unwrap();
        assert_eq!(zeta.row(4)[0], 1.0);
        // (1 + h) ζ_k = ζ_{k+1}
        assert!((zeta.row(0)[0] - 1.25f64.powi(-4)).abs() < 1e-15);
    }
}
