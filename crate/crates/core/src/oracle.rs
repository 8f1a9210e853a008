//! Reference solutions: per-initial-condition open-loop optimal controls
//! computed by reduced-gradient descent, and the finite-horizon Riccati
//! solution for linear-quadratic problems.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdjointTrajectory, ControlTrajectory, StateTrajectory, TimeGrid, Trajectory};
use crate::learning::{cost_to_go, running_cost};
use crate::models::QuadraticValueModel;
use crate::ode::{adjoint_terminal, backward_linear, integrate_closed_loop, integrate_open_loop, tracking_source, SolverConfig};
use crate::optimize::{bb_minimize, BBConfig, BBResult};
use crate::problem::{AffineBilinearSystem, ProblemSpec};

/// Stationary open-loop triple for one initial condition.
#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub y: StateTrajectory,
    pub u: ControlTrajectory,
    pub p: AdjointTrajectory,
    pub cost: f64,
    pub iterations: usize,
    /// `‖βu + gᵀp‖` in `L²(0, T)` at the returned control.
    pub grad_norm: f64,
}

impl OpenLoopSolution {
    /// `J_t(ȳ, ū)` at every node.
    pub fn cost_to_go(&self, spec: &ProblemSpec) -> Result<Vec<f64>> {
        cost_to_go(spec, &self.y, &self.u)
    }
}

/// State, adjoint and the `L²` gradient `βu + g(y)ᵀp` for a node-valued control.
pub fn open_loop_state_adjoint(
    spec: &ProblemSpec,
    y0: &DVector<f64>,
    u: &ControlTrajectory,
    solver: &SolverConfig,
) -> Result<(StateTrajectory, AdjointTrajectory, ControlTrajectory)> {
    let grid = u.grid();
    let y = integrate_open_loop(spec, u, y0, solver)?;
    let p = backward_linear(grid, &adjoint_terminal(spec, &y.last()), |k| {
        let t = grid.time(k);
        let yk = y.vector(k);
        let uk = u.vector(k);
        (
            spec.system.state_jacobian(t, &yk, &uk).transpose(),
            tracking_source(spec, t, &yk),
        )
    })?;
    let grad = Trajectory::from_fn(grid, spec.control_dim(), |k, t| {
        let g = spec.system.control_operator(t, &y.vector(k));
        u.vector(k) * spec.beta + g.tr_mul(&p.vector(k))
    });
    Ok((y, p, grad))
}

/// Minimizes the control-reduced cost `u ↦ J(y(u), u)` with Barzilai–Borwein
/// steps on node values of `u`.
///
/// The iteration runs in the variables `√w_k u_k` (`w_k` trapezoid weights)
/// so that Euclidean inner products equal `L²` inner products and the
/// gradient is the node-wise `βu + gᵀp` scaled accordingly.
pub fn solve_open_loop(
    spec: &ProblemSpec,
    y0: &DVector<f64>,
    u_init: Option<&ControlTrajectory>,
    grid: &TimeGrid,
    bb: &BBConfig,
    solver: &SolverConfig,
) -> Result<OpenLoopSolution> {
    let m = spec.control_dim();
    if y0.len() != spec.state_dim() {
        return Err(Error::Contract("initial state has wrong dimension".into()));
    }
    let u0 = match u_init {
        Some(u) if u.grid().same_as(grid) && u.dim() == m => u.clone(),
        Some(_) => return Err(Error::Contract("initial control must live on the oracle grid".into())),
        None => Trajectory::zeros(grid, m),
    };
    let sqrt_w: Vec<f64> = grid.trapezoid_weights().iter().map(|w| w.sqrt()).collect();
    let to_control = |x: &[f64]| -> Result<ControlTrajectory> {
        let data = x
            .chunks(m)
            .zip(&sqrt_w)
            .flat_map(|(row, s)| row.iter().map(move |v| v / s))
            .collect();
        Trajectory::from_rows(grid, m, data)
    };
    let x0: Vec<f64> = (0..grid.n_nodes())
        .flat_map(|k| u0.row(k).iter().map(|v| v * sqrt_w[k]).collect::<Vec<_>>())
        .collect();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let u = to_control(x)?;
        let (y, _, grad) = open_loop_state_adjoint(spec, y0, &u, solver)?;
        let j = running_cost(spec, &y, &u)?;
        let g = (0..grid.n_nodes())
            .flat_map(|k| grad.row(k).iter().map(|v| v * sqrt_w[k]).collect::<Vec<_>>())
            .collect();
        Ok((j, g))
    };
    let BBResult {
        x,
        iterations,
        grad_norm,
        ..
    } = bb_minimize(eval, &x0, bb).map_err(|e| Error::Optimizer(format!("open-loop oracle: {e}")))?;
    let u = to_control(&x)?;
    let (y, p, _) = open_loop_state_adjoint(spec, y0, &u, solver)?;
    let cost = running_cost(spec, &y, &u)?;
    Ok(OpenLoopSolution {
        y,
        u,
        p,
        cost,
        iterations,
        grad_norm,
    })
}

/// Solves every initial condition independently; the output order matches
/// `points`.
pub fn solve_open_loop_ensemble(
    spec: &ProblemSpec,
    points: &[DVector<f64>],
    grid: &TimeGrid,
    bb: &BBConfig,
    solver: &SolverConfig,
) -> Result<Vec<OpenLoopSolution>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, y0)| solve_open_loop(spec, y0, None, grid, bb, solver).map_err(|e| Error::member(i, e)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct OracleScalars {
    cost: f64,
    iterations: usize,
    grad_norm: f64,
}

/// Writes `<stem>_y.csv`, `<stem>_u.csv`, `<stem>_p.csv` and `<stem>.json`.
pub fn save_open_loop(dir: &Path, stem: &str, sol: &OpenLoopSolution) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sol.y.write_csv(&dir.join(format!("{stem}_y.csv")), "y")?;
    sol.u.write_csv(&dir.join(format!("{stem}_u.csv")), "u")?;
    sol.p.write_csv(&dir.join(format!("{stem}_p.csv")), "p")?;
    let scalars = OracleScalars {
        cost: sol.cost,
        iterations: sol.iterations,
        grad_norm: sol.grad_norm,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&scalars).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_open_loop(dir: &Path, stem: &str, grid: &TimeGrid) -> Result<OpenLoopSolution> {
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let scalars: OracleScalars =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(OpenLoopSolution {
        y: Trajectory::read_csv(&dir.join(format!("{stem}_y.csv")), grid)?,
        u: Trajectory::read_csv(&dir.join(format!("{stem}_u.csv")), grid)?,
        p: Trajectory::read_csv(&dir.join(format!("{stem}_p.csv")), grid)?,
        cost: scalars.cost,
        iterations: scalars.iterations,
        grad_norm: scalars.grad_norm,
    })
}

/// Linear-quadratic regulator `ẏ = A y + B u` with zero targets.
#[derive(Debug, Clone)]
pub struct LQRSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub horizon: f64,
}

impl LQRSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let square = |m: &DMatrix<f64>| m.nrows() == n && m.ncols() == n;
        if !square(&self.a) || !square(&self.q1) || !square(&self.q2) || self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(Error::Contract("LQR matrices have inconsistent dimensions".into()));
        }
        if !(self.beta > 0.0) || !(self.alpha >= 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Config("LQR needs β > 0, α ≥ 0 and T > 0".into()));
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        self.validate()?;
        let system = AffineBilinearSystem::linear(self.a.clone(), self.b.clone())?;
        ProblemSpec::regulator(Arc::new(system), self.horizon, self.beta, self.alpha)?
            .with_weights(self.q1.clone(), self.q2.clone())
    }
}

/// Backward implicit Euler for
/// `−Π̇ = AᵀΠ + ΠA − (1/β)ΠBBᵀΠ + Q₁ᵀQ₁`, `Π(T) = αQ₂ᵀQ₂`.
///
/// Each step solves the quadratic matrix equation by Newton's method with
/// a Kronecker-form Sylvester solve, then symmetrizes.
pub fn riccati_solve(lqr: &LQRSpec, grid: &TimeGrid, solver: &SolverConfig) -> Result<Vec<DMatrix<f64>>> {
    lqr.validate()?;
    let n = lqr.a.nrows();
    let h = grid.step();
    let s = &lqr.b * lqr.b.transpose() / lqr.beta;
    let q = lqr.q1.transpose() * &lqr.q1;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut pis = vec![DMatrix::zeros(n, n); grid.n_nodes()];
    let last = grid.n_steps();
    pis[last] = lqr.q2.transpose() * &lqr.q2 * lqr.alpha;
    for k in (0..last).rev() {
        let next = pis[k + 1].clone();
        let residual = |pi: &DMatrix<f64>| {
            pi - (lqr.a.transpose() * pi + pi * &lqr.a - pi * &s * pi + &q) * h - &next
        };
        let mut pi = next.clone();
        let mut res = residual(&pi);
        let mut iter = 0;
        while res.amax() > solver.newton_tol * (1.0 + pi.amax()) {
            if iter == solver.newton_max_iter {
                return Err(Error::NewtonFailure {
                    step: k,
                    time: grid.time(k),
                    residual: res.amax(),
                });
            }
            // R'(Π)[X] = X − h(ÃᵀX + XÃ), Ã = A − SΠ
            let at = (&lqr.a - &s * &pi).transpose();
            let jac = DMatrix::<f64>::identity(n * n, n * n) - (eye.kronecker(&at) + at.kronecker(&eye)) * h;
            let rhs = DVector::from_column_slice(res.as_slice());
            let dx = jac.lu().solve(&rhs).ok_or(Error::SingularStep(k))?;
            pi -= DMatrix::from_column_slice(n, n, dx.as_slice());
            res = residual(&pi);
            iter += 1;
        }
        pi = (&pi + pi.transpose()) * 0.5;
        if !pi.iter().all(|v| v.is_finite()) || pi.amax() > solver.blowup_bound {
            return Err(Error::Divergence {
                step: k,
                norm: pi.amax(),
                bound: solver.blowup_bound,
            });
        }
        pis[k] = pi;
    }
    Ok(pis)
}

/// Closed-loop rollout of the Riccati feedback `u = −(1/β)BᵀΠ(t)y`.
pub fn riccati_rollout(
    lqr: &LQRSpec,
    pis: Vec<DMatrix<f64>>,
    y0: &DVector<f64>,
    grid: &TimeGrid,
    solver: &SolverConfig,
) -> Result<(StateTrajectory, ControlTrajectory, f64)> {
    let spec = lqr.problem()?;
    let model = QuadraticValueModel::from_riccati(grid, pis.clone())?;
    let y = integrate_closed_loop(&spec, &model, &[], y0, grid, solver)?;
    let u = Trajectory::from_fn(grid, lqr.b.ncols(), |k, _| {
        -(lqr.b.tr_mul(&(&pis[k] * y.vector(k)))) / lqr.beta
    });
    let cost = running_cost(&spec, &y, &u)?;
    Ok((y, u, cost))
}
