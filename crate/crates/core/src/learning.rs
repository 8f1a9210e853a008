//! Augmented cost, ensemble objective and its costate-based gradient.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dot, AdjointTrajectory, ControlTrajectory, StateTrajectory, TimeGrid, Trajectory};
use crate::models::ValueModel;
use crate::ode::{
    adjoint_from_nodes, evaluate_nodes, integrate_closed_loop, kappa_from_nodes, tracking_source, zeta_from_nodes,
    ClosedLoopNode, SolverConfig,
};
use crate::problem::{PenaltyConfig, ProblemSpec};

/// Which `Φ` value multiplies the terminal source `ŷ_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiTerminalConvention {
    /// `α(1 − γ₁Φ(0)) = α`
    AtZero,
    /// `α(1 − γ₁Φ(T))`, which the finite-difference check confirms
    #[default]
    AtHorizon,
}

fn check_grid(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::Contract("trajectories live on different grids".into()));
    }
    Ok(())
}

fn running_integrand(spec: &ProblemSpec, y: &StateTrajectory, u: &ControlTrajectory) -> Vec<f64> {
    (0..y.n_nodes())
        .map(|k| {
            let t = y.grid().time(k);
            let r = &spec.q1 * (y.vector(k) - (spec.target)(t));
            let uu = u.row(k);
            0.5 * (r.norm_squared() + spec.beta * dot(uu, uu))
        })
        .collect()
}

/// `J(y, u) = ½∫|Q₁(y − y_d)|² + β|u|² dt + (α/2)|Q₂(y(T) − y_dT)|²`.
pub fn running_cost(spec: &ProblemSpec, y: &StateTrajectory, u: &ControlTrajectory) -> Result<f64> {
    check_grid(y, u)?;
    let integrand = running_integrand(spec, y, u);
    Ok(y.grid().integrate(&integrand) + spec.terminal_cost(&y.last()))
}

/// `J_{t_k}` at every node: cost accumulated over `[t_k, T]`.
pub fn cost_to_go(spec: &ProblemSpec, y: &StateTrajectory, u: &ControlTrajectory) -> Result<Vec<f64>> {
    check_grid(y, u)?;
    let integrand = running_integrand(spec, y, u);
    let terminal = spec.terminal_cost(&y.last());
    Ok(y
        .grid()
        .integrate_to_end(&integrand)
        .into_iter()
        .map(|v| v + terminal)
        .collect())
}

/// `Φ(t_k) = ∫₀^{t_k} (V_θ(s, y(s)) − J_s) ds`.
pub fn phi_accumulator(
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
    cost_to_go: &[f64],
) -> Vec<f64> {
    let diff: Vec<f64> = (0..y.n_nodes())
        .map(|k| model.value(theta, y.grid().time(k), &y.vector(k)) - cost_to_go[k])
        .collect();
    y.grid().integrate_from_start(&diff)
}

/// Penalty integrals `(½∫(V − J_t)², ½∫|∂_yV − p|²)` without their weights.
fn penalty_integrals(grid: &TimeGrid, nodes: &[ClosedLoopNode], j_t: &[f64], p: Option<&Trajectory>) -> (f64, f64) {
    let value_gap: Vec<f64> = nodes
        .iter()
        .zip(j_t)
        .map(|(nd, j)| (nd.value.value - j).powi(2))
        .collect();
    let grad_gap: Vec<f64> = match p {
        Some(p) => nodes
            .iter()
            .enumerate()
            .map(|(k, nd)| (&nd.value.grad_y - p.vector(k)).norm_squared())
            .collect(),
        None => vec![0.0; nodes.len()],
    };
    (0.5 * grid.integrate(&value_gap), 0.5 * grid.integrate(&grad_gap))
}

fn controls(grid: &TimeGrid, nodes: &[ClosedLoopNode], m: usize) -> ControlTrajectory {
    Trajectory::from_fn(grid, m, |k, _| nodes[k].control.clone())
}

/// `J(y, F_θ(y)) + γ₁/2 ∫|V_θ − J_t|² + γ₂/2 ∫|∂_yV_θ − p|²`.
///
/// `p` is required when `γ₂ > 0`.
pub fn augmented_cost(
    spec: &ProblemSpec,
    penalties: &PenaltyConfig,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
    p: Option<&AdjointTrajectory>,
) -> Result<f64> {
    if penalties.gamma2 > 0.0 && p.is_none() {
        return Err(Error::Contract("the γ₂ penalty needs the adjoint".into()));
    }
    let nodes = evaluate_nodes(spec, model, theta, y);
    let u = controls(y.grid(), &nodes, spec.control_dim());
    let j_t = cost_to_go(spec, y, &u)?;
    let (pen1, pen2) = penalty_integrals(y.grid(), &nodes, &j_t, p);
    Ok(j_t[0] + penalties.gamma1 * pen1 + penalties.gamma2 * pen2)
}

/// Source terms of the costate equations and the direct `θ`-derivative.
#[derive(Debug, Clone)]
pub struct HatTerms {
    pub y_hat: Trajectory,
    pub y_hat_terminal: DVector<f64>,
    pub p_hat: Trajectory,
    pub theta_hat: Vec<f64>,
    pub phi: Vec<f64>,
}

struct NodeSources {
    y_hat: DVector<f64>,
    p_hat: DVector<f64>,
    /// `γ₁(V − J_t)`, coefficient of `D_θV`
    value_weight: f64,
    /// vector paired with `D_θ∂_yV` in `θ̂`
    grad_weight: DVector<f64>,
}

fn node_sources(
    spec: &ProblemSpec,
    penalties: &PenaltyConfig,
    nd: &ClosedLoopNode,
    j_t: f64,
    phi: f64,
    p: Option<DVector<f64>>,
) -> NodeSources {
    let factor = 1.0 - penalties.gamma1 * phi;
    let gap = nd.value.value - j_t;
    let mut y_hat = tracking_source(spec, nd.t, &nd.y) * factor;
    y_hat += nd.dcontrol.tr_mul(&nd.control) * (spec.beta * factor);
    y_hat += &nd.value.grad_y * (penalties.gamma1 * gap);
    let n = nd.y.len();
    let mut grad_weight = &nd.g * &nd.control * (-factor);
    let p_hat = match p {
        Some(pk) if penalties.gamma2 > 0.0 => {
            let diff = &nd.value.grad_y - &pk;
            y_hat += &nd.value.hess_yy * &diff * penalties.gamma2;
            grad_weight += &diff * penalties.gamma2;
            -diff * penalties.gamma2
        }
        _ => DVector::zeros(n),
    };
    NodeSources {
        y_hat,
        p_hat,
        value_weight: penalties.gamma1 * gap,
        grad_weight,
    }
}

fn terminal_source(spec: &ProblemSpec, penalties: &PenaltyConfig, y_end: &DVector<f64>, phi_end: f64, conv: PhiTerminalConvention) -> DVector<f64> {
    let phi = match conv {
        PhiTerminalConvention::AtZero => 0.0,
        PhiTerminalConvention::AtHorizon => phi_end,
    };
    spec.q2tq2() * (y_end - &spec.terminal_target) * (spec.alpha * (1.0 - penalties.gamma1 * phi))
}

/// Assembles `ŷ`, `ŷ_T`, `p̂`, `θ̂` and `Φ` for one trajectory.
#[allow(clippy::too_many_arguments)]
pub fn hat_terms(
    spec: &ProblemSpec,
    penalties: &PenaltyConfig,
    model: &dyn ValueModel,
    theta: &[f64],
    y: &StateTrajectory,
    p: Option<&AdjointTrajectory>,
    j_t: &[f64],
    phi: &[f64],
    convention: PhiTerminalConvention,
) -> Result<HatTerms> {
    if penalties.gamma2 > 0.0 && p.is_none() {
        return Err(Error::Contract("the γ₂ penalty needs the adjoint".into()));
    }
    let grid = y.grid();
    let n = y.dim();
    let nodes = evaluate_nodes(spec, model, theta, y);
    let weights = grid.trapezoid_weights();
    let mut y_hat = Trajectory::zeros(grid, n);
    let mut p_hat = Trajectory::zeros(grid, n);
    let mut theta_hat = vec![0.0; theta.len()];
    for (k, nd) in nodes.iter().enumerate() {
        let src = node_sources(spec, penalties, nd, j_t[k], phi[k], p.map(|p| p.vector(k)));
        y_hat.set(k, &src.y_hat);
        p_hat.set(k, &src.p_hat);
        let mut local = vec![0.0; theta.len()];
        model.accumulate_theta_vjp(theta, nd.t, &nd.y, src.value_weight, &src.grad_weight, &mut local);
        for (acc, v) in theta_hat.iter_mut().zip(local) {
            *acc += weights[k] * v;
        }
    }
    let last = grid.n_steps();
    Ok(HatTerms {
        y_hat,
        y_hat_terminal: terminal_source(spec, penalties, &y.last(), phi[last], convention),
        p_hat,
        theta_hat,
        phi: phi.to_vec(),
    })
}

/// Everything computed for one ensemble member at fixed `θ`.
#[derive(Debug, Clone)]
pub struct MemberEvaluation {
    pub y: StateTrajectory,
    pub p: Option<AdjointTrajectory>,
    pub u: ControlTrajectory,
    pub values: Vec<f64>,
    pub cost_to_go: Vec<f64>,
    pub cost: f64,
    pub value_penalty: f64,
    pub gradient_penalty: f64,
    pub augmented: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluationBundle {
    pub members: Vec<MemberEvaluation>,
    pub weights: Vec<f64>,
    /// `Σ ω_i J(y_i, u_i)`
    pub cost: f64,
    /// `Σ ω_i γ₁/2 ∫|V − J_t|²`
    pub value_penalty: f64,
    /// `Σ ω_i γ₂/2 ∫|∂_yV − p|²`
    pub gradient_penalty: f64,
    pub tikhonov: f64,
    pub objective: f64,
}

/// The finite-ensemble learning problem `min_θ Σ ω_i J_ε(y_i, p_i, θ) + γ_ε/2 |θ|²`.
#[derive(Debug, Clone)]
pub struct LearningProblem<'a> {
    pub spec: &'a ProblemSpec,
    pub model: &'a dyn ValueModel,
    pub penalties: PenaltyConfig,
    pub grid: TimeGrid,
    pub solver: SolverConfig,
    pub convention: PhiTerminalConvention,
    pub members: Vec<(DVector<f64>, f64)>,
    /// Evaluate members with rayon; the reduction order is fixed either way.
    pub parallel: bool,
}

struct MemberState {
    eval: MemberEvaluation,
    nodes: Vec<ClosedLoopNode>,
}

impl<'a> LearningProblem<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        model: &'a dyn ValueModel,
        penalties: PenaltyConfig,
        grid: TimeGrid,
        members: Vec<(DVector<f64>, f64)>,
    ) -> Result<Self> {
        penalties.validate()?;
        if members.is_empty() {
            return Err(Error::Config("learning problem needs at least one ensemble member".into()));
        }
        if members.iter().any(|(y0, w)| y0.len() != spec.state_dim() || !(*w > 0.0)) {
            return Err(Error::Contract("ensemble members need matching dimension and positive weight".into()));
        }
        if model.state_dim() != spec.state_dim() {
            return Err(Error::Contract("model and problem dimensions differ".into()));
        }
        Ok(Self {
            spec,
            model,
            penalties,
            grid,
            solver: SolverConfig::default(),
            convention: PhiTerminalConvention::default(),
            members,
            parallel: true,
        })
    }

    fn needs_adjoint(&self) -> bool {
        self.penalties.gamma2 > 0.0
    }

    fn evaluate_member(&self, theta: &[f64], y0: &DVector<f64>) -> Result<MemberState> {
        let y = integrate_closed_loop(self.spec, self.model, theta, y0, &self.grid, &self.solver)?;
        let nodes = evaluate_nodes(self.spec, self.model, theta, &y);
        let u = controls(&self.grid, &nodes, self.spec.control_dim());
        let p = if self.needs_adjoint() {
            Some(adjoint_from_nodes(self.spec, &self.grid, &nodes)?)
        } else {
            None
        };
        let j_t = cost_to_go(self.spec, &y, &u)?;
        let (pen1, pen2) = penalty_integrals(&self.grid, &nodes, &j_t, p.as_ref());
        let value_penalty = self.penalties.gamma1 * pen1;
        let gradient_penalty = self.penalties.gamma2 * pen2;
        let cost = j_t[0];
        let augmented = cost + value_penalty + gradient_penalty;
        if !augmented.is_finite() {
            return Err(Error::NonFinite("augmented cost".into()));
        }
        Ok(MemberState {
            eval: MemberEvaluation {
                values: nodes.iter().map(|nd| nd.value.value).collect(),
                y,
                p,
                u,
                cost_to_go: j_t,
                cost,
                value_penalty,
                gradient_penalty,
                augmented,
            },
            nodes,
        })
    }

    fn member_gradient(&self, theta: &[f64], state: &MemberState) -> Result<Vec<f64>> {
        let grid = &self.grid;
        let ev = &state.eval;
        let nodes = &state.nodes;
        let diff: Vec<f64> = ev.values.iter().zip(&ev.cost_to_go).map(|(v, j)| v - j).collect();
        let phi = grid.integrate_from_start(&diff);
        let n = self.spec.state_dim();
        let mut y_hat = Trajectory::zeros(grid, n);
        let mut p_hat = Trajectory::zeros(grid, n);
        let mut value_w = Vec::with_capacity(nodes.len());
        let mut grad_w = Vec::with_capacity(nodes.len());
        for (k, nd) in nodes.iter().enumerate() {
            let src = node_sources(
                self.spec,
                &self.penalties,
                nd,
                ev.cost_to_go[k],
                phi[k],
                ev.p.as_ref().map(|p| p.vector(k)),
            );
            y_hat.set(k, &src.y_hat);
            p_hat.set(k, &src.p_hat);
            value_w.push(src.value_weight);
            grad_w.push(src.grad_weight);
        }
        let y_hat_t = terminal_source(self.spec, &self.penalties, &ev.y.last(), phi[grid.n_steps()], self.convention);
        let kappa = match &ev.p {
            Some(_) => Some(kappa_from_nodes(grid, nodes, &p_hat)?),
            None => None,
        };
        let costates = match (&ev.p, &kappa) {
            (Some(p), Some(k)) => Some((p, k)),
            _ => None,
        };
        let zeta = zeta_from_nodes(self.spec, grid, nodes, costates, &y_hat, &y_hat_t)?;

        let weights = grid.trapezoid_weights();
        let mut grad = vec![0.0; theta.len()];
        let scale = -1.0 / self.spec.beta;
        for (k, nd) in nodes.iter().enumerate() {
            // D_θFᵀ v = −(1/β) (D_θ∂_yV)ᵀ g v
            let mut v = nd.g.tr_mul(&zeta.vector(k));
            if let (Some(p), Some(kap)) = (&ev.p, &kappa) {
                v += nd.dg_pairing(&kap.vector(k), &p.vector(k));
            }
            let w = &nd.g * v * scale + &grad_w[k];
            let mut local = vec![0.0; theta.len()];
            self.model
                .accumulate_theta_vjp(theta, nd.t, &nd.y, value_w[k], &w, &mut local);
            for (acc, l) in grad.iter_mut().zip(local) {
                *acc += weights[k] * l;
            }
        }
        Ok(grad)
    }

    fn run_members<T: Send>(&self, f: impl Fn(usize, &DVector<f64>) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let results: Vec<Result<T>> = if self.parallel {
            self.members
                .par_iter()
                .enumerate()
                .map(|(i, (y0, _))| f(i, y0).map_err(|e| Error::member(i, e)))
                .collect()
        } else {
            self.members
                .iter()
                .enumerate()
                .map(|(i, (y0, _))| f(i, y0).map_err(|e| Error::member(i, e)))
                .collect()
        };
        results.into_iter().collect()
    }

    fn bundle(&self, theta: &[f64], members: Vec<MemberEvaluation>) -> EvaluationBundle {
        let weights: Vec<f64> = self.members.iter().map(|m| m.1).collect();
        let mut cost = 0.0;
        let mut value_penalty = 0.0;
        let mut gradient_penalty = 0.0;
        let mut objective = 0.0;
        for (m, w) in members.iter().zip(&weights) {
            cost += w * m.cost;
            value_penalty += w * m.value_penalty;
            gradient_penalty += w * m.gradient_penalty;
            objective += w * m.augmented;
        }
        let tikhonov = 0.5 * self.penalties.gamma_eps * dot(theta, theta);
        EvaluationBundle {
            members,
            weights,
            cost,
            value_penalty,
            gradient_penalty,
            tikhonov,
            objective: objective + tikhonov,
        }
    }

    pub fn objective(&self, theta: &[f64]) -> Result<(f64, EvaluationBundle)> {
        self.check_theta(theta)?;
        let states = self.run_members(|_, y0| self.evaluate_member(theta, y0))?;
        let bundle = self.bundle(theta, states.into_iter().map(|s| s.eval).collect());
        Ok((bundle.objective, bundle))
    }

    /// Objective value and `∇𝒥_N(θ)` from one state/adjoint/costate sweep per member.
    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(EvaluationBundle, Vec<f64>)> {
        self.check_theta(theta)?;
        let per_member = self.run_members(|_, y0| {
            let state = self.evaluate_member(theta, y0)?;
            let grad = self.member_gradient(theta, &state)?;
            Ok((state.eval, grad))
        })?;
        let mut grad: Vec<f64> = theta.iter().map(|t| self.penalties.gamma_eps * t).collect();
        let mut evals = Vec::with_capacity(per_member.len());
        for ((ev, g), (_, w)) in per_member.into_iter().zip(&self.members) {
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += w * v;
            }
            evals.push(ev);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("ensemble gradient".into()));
        }
        Ok((self.bundle(theta, evals), grad))
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(theta)?.1)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.model.n_params() {
            return Err(Error::Contract(format!(
                "θ has {} entries, model expects {}",
                theta.len(),
                self.model.n_params()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("θ".into()));
        }
        Ok(())
    }
}

pub fn ensemble_objective(problem: &LearningProblem<'_>, theta: &[f64]) -> Result<(f64, EvaluationBundle)> {
    problem.objective(theta)
}

pub fn ensemble_gradient(problem: &LearningProblem<'_>, theta: &[f64]) -> Result<Vec<f64>> {
    problem.gradient(theta)
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub cost: f64,
    pub value_penalty: f64,
    pub gradient_penalty: f64,
    pub tikhonov: f64,
}

pub fn write_trace_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::problem::{AffineBilinearSystem, ControlSystem};

    fn scalar_spec(q1: f64, alpha: f64) -> ProblemSpec {
        let sys: Arc<dyn ControlSystem> =
            Arc::new(AffineBilinearSystem::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap());
        ProblemSpec::regulator(sys, 2.0, 0.01, alpha)
            .unwrap()
            .with_weights(DMatrix::from_element(1, 1, q1), DMatrix::identity(1, 1))
            .unwrap()
    }

    #[test]
    fn control_only_cost() {
        let spec = scalar_spec(0.0, 0.0);
        let grid = TimeGrid::uniform(2.0, 10).unwrap();
        let y = Trajectory::zeros(&grid, 1);
        let u = Trajectory::from_fn(&grid, 1, |_, _| DVector::from_element(1, 1.0));
        assert!((running_cost(&spec, &y, &u).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let spec = scalar_spec(1.0, 0.25);
        let grid = TimeGrid::uniform(2.0, 10).unwrap();
        let zero = Trajectory::zeros(&grid, 1);
        assert_eq!(running_cost(&spec, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn cost_to_go_properties() {
        let spec = scalar_spec(1.0, 0.25);
        let grid = TimeGrid::uniform(2.0, 20).unwrap();
        let y = Trajectory::from_fn(&grid, 1, |_, t| DVector::from_element(1, (2.0 * t).cos()));
        let u = Trajectory::from_fn(&grid, 1, |_, t| DVector::from_element(1, t - 1.0));
        let j = cost_to_go(&spec, &y, &u).unwrap();
        assert!((j[0] - running_cost(&spec, &y, &u).unwrap()).abs() < 1e-14);
        assert!((j[20] - spec.terminal_cost(&y.last())).abs() < 1e-15);
        for k in 0..20 {
            assert!(j[k] >= j[k + 1] - 1e-14);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let spec = scalar_spec(1.0, 0.25);
        let y = Trajectory::zeros(&TimeGrid::uniform(2.0, 10).unwrap(), 1);
        let u = Trajectory::zeros(&TimeGrid::uniform(2.0, 11).unwrap(), 1);
        assert!(matches!(running_cost(&spec, &y, &u), Err(Error::Contract(_))));
    }

    #[test]
    fn trace_is_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let rec = TraceRecord {
            iter: 3,
            objective: 1.5,
            grad_norm: 0.25,
            cost: 1.0,
            value_penalty: 0.5,
            gradient_penalty: 0.0,
            tikhonov: 0.0,
        };
        write_trace_jsonl(&path, &[rec.clone(), rec.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: TraceRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, rec);
    }
}
