//! Problem data: control-affine dynamics, tracking costs, penalty weights and
//! ensembles of initial conditions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control-affine dynamics `ẏ = f(t, y) + g(t, y) u` together with the state
/// derivatives of `f` and `g` up to second order.
///
/// Jacobians follow the convention `(Df)_{jk} = ∂f_j / ∂y_k`. The derivative
/// of the control operator is returned column by column: entry `i` of
/// [`ControlSystem::control_operator_jacobian`] is the `n × n` Jacobian of the
/// `i`-th column of `g`.
pub trait ControlSystem: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, t: f64, y: &DVector<f64>) -> DVector<f64>;
    fn drift_jacobian(&self, t: f64, y: &DVector<f64>) -> DMatrix<f64>;
    fn control_operator(&self, t: f64, y: &DVector<f64>) -> DMatrix<f64>;
    fn control_operator_jacobian(&self, t: f64, y: &DVector<f64>) -> Vec<DMatrix<f64>>;
    /// `Σ_j p_j ∇²f_j(t, y)`.
    fn drift_hessian_contraction(&self, t: f64, y: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64>;
    /// `Σ_j Σ_i p_j u_i ∇²g_{ji}(t, y)`.
    fn control_hessian_contraction(
        &self,
        t: f64,
        y: &DVector<f64>,
        p: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DMatrix<f64>;

    /// `Df + [Dg u]`, the state Jacobian of `f + g u` for frozen `u`.
    fn state_jacobian(&self, t: f64, y: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = self.drift_jacobian(t, y);
        for (ui, gi) in u.iter().zip(self.control_operator_jacobian(t, y)) {
            jac += gi * *ui;
        }
        jac
    }

    /// `[Dg v]`: the `n × m` matrix whose column `i` is `∂_y g_{:,i} v`.
    fn control_jacobian_action(&self, t: f64, y: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self
            .control_operator_jacobian(t, y)
            .iter()
            .map(|gi| gi * v)
            .collect();
        DMatrix::from_columns(&cols)
    }
}

/// `f(t, y) = F₀ y + f₀`, `g(t, y)_{:,i} = b_i + N_i y`.
///
/// Covers linear-quadratic problems (`N_i = 0`) and bilinear control
/// (`b_i = 0`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineBilinearSystem {
    pub drift_matrix: DMatrix<f64>,
    pub drift_offset: DVector<f64>,
    pub input_vectors: Vec<DVector<f64>>,
    pub input_matrices: Vec<DMatrix<f64>>,
}

impl AffineBilinearSystem {
    pub fn new(
        drift_matrix: DMatrix<f64>,
        drift_offset: DVector<f64>,
        input_vectors: Vec<DVector<f64>>,
        input_matrices: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = drift_matrix.nrows();
        if drift_matrix.ncols() != n || drift_offset.len() != n {
            return Err(Error::Contract("drift matrix must be n x n with offset of length n".into()));
        }
        if input_vectors.len() != input_matrices.len() || input_vectors.is_empty() {
            return Err(Error::Contract("need one input vector and one input matrix per control".into()));
        }
        if input_vectors.iter().any(|b| b.len() != n)
            || input_matrices.iter().any(|m| m.nrows() != n || m.ncols() != n)
        {
            return Err(Error::Contract("input data must match the state dimension".into()));
        }
        Ok(Self {
            drift_matrix,
            drift_offset,
            input_vectors,
            input_matrices,
        })
    }

    /// `ẏ = A y + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if b.nrows() != n {
            return Err(Error::Contract("B must have n rows".into()));
        }
        Self::new(
            a,
            DVector::zeros(n),
            (0..m).map(|i| b.column(i).into_owned()).collect(),
            vec![DMatrix::zeros(n, n); m],
        )
    }
}

impl ControlSystem for AffineBilinearSystem {
    fn state_dim(&self) -> usize {
        self.drift_matrix.nrows()
    }

    fn control_dim(&self) -> usize {
        self.input_vectors.len()
    }

    fn drift(&self, _t: f64, y: &DVector<f64>) -> DVector<f64> {
        &self.drift_matrix * y + &self.drift_offset
    }

    fn drift_jacobian(&self, _t: f64, _y: &DVector<f64>) -> DMatrix<f64> {
        self.drift_matrix.clone()
    }

    fn control_operator(&self, _t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self
            .input_vectors
            .iter()
            .zip(&self.input_matrices)
            .map(|(b, m)| b + m * y)
            .collect();
        DMatrix::from_columns(&cols)
    }

    fn control_operator_jacobian(&self, _t: f64, _y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.input_matrices.clone()
    }

    fn drift_hessian_contraction(&self, _t: f64, y: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), y.len())
    }

    fn control_hessian_contraction(
        &self,
        _t: f64,
        y: &DVector<f64>,
        _p: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), y.len())
    }
}

/// A small nonlinear two-state, single-input system whose drift and control
/// operator both have nonvanishing first and second derivatives:
///
/// `f(y) = (y₂, −sin y₁ − c y₂)`, `g(y) = (0.2 y₂, 1 + 0.5 y₁²)ᵀ`.
#[derive(Debug, Clone)]
pub struct NonlinearToySystem {
    pub damping: f64,
}

impl Default for NonlinearToySystem {
    fn default() -> Self {
        Self { damping: 0.1 }
    }
}

impl ControlSystem for NonlinearToySystem {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![y[1], -y[0].sin() - self.damping * y[1]])
    }

    fn drift_jacobian(&self, _t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -y[0].cos(), -self.damping])
    }

    fn control_operator(&self, _t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.2 * y[1], 1.0 + 0.5 * y[0] * y[0]])
    }

    fn control_operator_jacobian(&self, _t: f64, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.2, y[0], 0.0])]
    }

    fn drift_hessian_contraction(&self, _t: f64, y: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[p[1] * y[0].sin(), 0.0, 0.0, 0.0])
    }

    fn control_hessian_contraction(
        &self,
        _t: f64,
        _y: &DVector<f64>,
        p: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[p[1] * u[0], 0.0, 0.0, 0.0])
    }
}

pub type TargetFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Finite-horizon tracking problem
///
/// `min ½∫₀ᵀ |Q₁(y − y_d)|² + β|u|² dt + (α/2)|Q₂(y(T) − y_dT)|²`
///
/// subject to the dynamics of `system`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub system: Arc<dyn ControlSystem>,
    pub horizon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub target: TargetFn,
    pub terminal_target: DVector<f64>,
    q1tq1: DMatrix<f64>,
    q2tq2: DMatrix<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("system", &self.system)
            .field("horizon", &self.horizon)
            .field("beta", &self.beta)
            .field("alpha", &self.alpha)
            .field("q1", &self.q1)
            .field("q2", &self.q2)
            .field("terminal_target", &self.terminal_target)
            .finish()
    }
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: Arc<dyn ControlSystem>,
        horizon: f64,
        beta: f64,
        alpha: f64,
        q1: DMatrix<f64>,
        q2: DMatrix<f64>,
        target: TargetFn,
        terminal_target: DVector<f64>,
    ) -> Result<Self> {
        let n = system.state_dim();
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
        }
        for (name, q) in [("Q1", &q1), ("Q2", &q2)] {
            if q.nrows() != n || q.ncols() != n {
                return Err(Error::Contract(format!("{name} must be {n} x {n}")));
            }
            check_symmetric_psd(name, q)?;
        }
        if terminal_target.len() != n {
            return Err(Error::Contract("terminal target has wrong length".into()));
        }
        let q1tq1 = q1.transpose() * &q1;
        let q2tq2 = q2.transpose() * &q2;
        Ok(Self {
            system,
            horizon,
            beta,
            alpha,
            q1,
            q2,
            target,
            terminal_target,
            q1tq1,
            q2tq2,
        })
    }

    /// Problem with `Q₁ = Q₂ = I` and zero targets.
    pub fn regulator(system: Arc<dyn ControlSystem>, horizon: f64, beta: f64, alpha: f64) -> Result<Self> {
        let n = system.state_dim();
        Self::new(
            system,
            horizon,
            beta,
            alpha,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            Arc::new(move |_| DVector::zeros(n)),
            DVector::zeros(n),
        )
    }

    pub fn with_weights(mut self, q1: DMatrix<f64>, q2: DMatrix<f64>) -> Result<Self> {
        self.q1 = q1;
        self.q2 = q2;
        let n = self.state_dim();
        for (name, q) in [("Q1", &self.q1), ("Q2", &self.q2)] {
            if q.nrows() != n || q.ncols() != n {
                return Err(Error::Contract(format!("{name} must be {n} x {n}")));
            }
            check_symmetric_psd(name, q)?;
        }
        self.q1tq1 = self.q1.transpose() * &self.q1;
        self.q2tq2 = self.q2.transpose() * &self.q2;
        Ok(self)
    }

    pub fn with_targets(mut self, target: TargetFn, terminal_target: DVector<f64>) -> Result<Self> {
        if terminal_target.len() != self.state_dim() {
            return Err(Error::Contract("terminal target has wrong length".into()));
        }
        self.target = target;
        self.terminal_target = terminal_target;
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    pub fn q1tq1(&self) -> &DMatrix<f64> {
        &self.q1tq1
    }

    pub fn q2tq2(&self) -> &DMatrix<f64> {
        &self.q2tq2
    }

    /// `(α/2)|Q₂(y − y_dT)|²`.
    pub fn terminal_cost(&self, y: &DVector<f64>) -> f64 {
        let r = &self.q2 * (y - &self.terminal_target);
        0.5 * self.alpha * r.norm_squared()
    }

    /// `α Q₂ᵀQ₂ (y − y_dT)`, the terminal value of the adjoint.
    pub fn terminal_gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.q2tq2 * (y - &self.terminal_target) * self.alpha
    }
}

/// Symmetric to machine precision with eigenvalues ≥ −1e−12.
fn check_symmetric_psd(name: &str, q: &DMatrix<f64>) -> Result<()> {
    let scale = q.amax().max(1.0);
    if (q - q.transpose()).amax() > 1e-14 * scale {
        return Err(Error::Config(format!("{name} is not symmetric")));
    }
    let eig = q.clone().symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-12) {
        return Err(Error::Config(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default)]
    pub gamma_eps: f64,
}

impl PenaltyConfig {
    pub fn new(gamma1: f64, gamma2: f64, gamma_eps: f64) -> Result<Self> {
        let cfg = Self {
            gamma1,
            gamma2,
            gamma_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn off() -> Self {
        Self {
            gamma1: 0.0,
            gamma2: 0.0,
            gamma_eps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma_eps", self.gamma_eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Validation => f.write_str("validation"),
        }
    }
}

/// Initial conditions sampled from a closed ball, tagged train/validation.
/// Training weights are positive and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSet {
    pub center: Vec<f64>,
    pub radius: f64,
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub tags: Vec<Split>,
}

impl EnsembleSet {
    /// All points tagged train with uniform weights.
    pub fn training(points: Vec<DVector<f64>>) -> Self {
        let n = points.len();
        let dim = points.first().map_or(0, |p| p.len());
        let center = vec![0.0; dim];
        let radius = points
            .iter()
            .map(|p| p.norm())
            .fold(0.0_f64, f64::max);
        Self {
            center,
            radius,
            seed: 0,
            points: points.into_iter().map(|p| p.as_slice().to_vec()).collect(),
            weights: vec![1.0 / n as f64; n],
            tags: vec![Split::Train; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.points[i])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == split).collect()
    }

    /// Training members as `(y0, weight)` pairs in ensemble order.
    pub fn training_members(&self) -> Vec<(DVector<f64>, f64)> {
        self.indices(Split::Train)
            .into_iter()
            .map(|i| (self.point(i), self.weights[i]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.weights.len() || self.points.len() != self.tags.len() {
            return Err(Error::Contract("ensemble arrays have different lengths".into()));
        }
        let train: Vec<usize> = self.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("ensemble has no training members".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("ensemble weights must be positive".into()));
        }
        let total: f64 = train.iter().map(|&i| self.weights[i]).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("training weights sum to {total}, expected 1")));
        }
        let center = DVector::from_column_slice(&self.center);
        for p in &self.points {
            if p.len() != center.len() {
                return Err(Error::Contract("ensemble point has wrong dimension".into()));
            }
            let d = (DVector::from_column_slice(p) - &center).norm();
            if d > self.radius * (1.0 + 1e-12) {
                return Err(Error::Config("ensemble point lies outside the sampling ball".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_rejects_invalid_weights() {
        let sys: Arc<dyn ControlSystem> = Arc::new(NonlinearToySystem::default());
        assert!(ProblemSpec::regulator(sys.clone(), 1.0, 0.0, 1.0).is_err());
        assert!(ProblemSpec::regulator(sys.clone(), 0.0, 1.0, 1.0).is_err());
        assert!(ProblemSpec::regulator(sys.clone(), 1.0, 1.0, -0.5).is_err());
        let p = ProblemSpec::regulator(sys.clone(), 1.0, 1.0, 1.0).unwrap();
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(p.clone().with_weights(asym, DMatrix::identity(2, 2)).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(p.with_weights(DMatrix::identity(2, 2), indef).is_err());
    }

    #[test]
    fn penalties_must_be_nonnegative() {
        assert!(PenaltyConfig::new(0.1, 0.0, 0.0).is_ok());
        assert!(PenaltyConfig::new(-0.1, 0.0, 0.0).is_err());
        assert!(PenaltyConfig::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn toy_system_derivatives_match_finite_differences() {
        let sys = NonlinearToySystem::default();
        let y = DVector::from_vec(vec![0.3, -0.7]);
        let p = DVector::from_vec(vec![0.4, 1.3]);
        let u = DVector::from_vec(vec![-0.8]);
        let h = 1e-6;
        let df = sys.drift_jacobian(0.0, &y);
        let dg = sys.control_operator_jacobian(0.0, &y);
        let hf = sys.drift_hessian_contraction(0.0, &y, &p);
        let hg = sys.control_hessian_contraction(0.0, &y, &p, &u);
        for k in 0..2 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[k] += h;
            ym[k] -= h;
            let fd = (sys.drift(0.0, &yp) - sys.drift(0.0, &ym)) / (2.0 * h);
            let gd = (sys.control_operator(0.0, &yp) - sys.control_operator(0.0, &ym)) / (2.0 * h);
            for j in 0..2 {
                assert!((fd[j] - df[(j, k)]).abs() < 1e-8);
                assert!((gd[(j, 0)] - dg[0][(j, k)]).abs() < 1e-8);
            }
            // ∂_k of p·Df and p·[Dg u] rows
            let fdh = (sys.drift_jacobian(0.0, &yp).transpose() * &p
                - sys.drift_jacobian(0.0, &ym).transpose() * &p)
                / (2.0 * h);
            let gdh = ((&sys.control_operator_jacobian(0.0, &yp)[0] * u[0]).transpose() * &p
                - (&sys.control_operator_jacobian(0.0, &ym)[0] * u[0]).transpose() * &p)
                / (2.0 * h);
            for l in 0..2 {
                assert!((fdh[l] - hf[(l, k)]).abs() < 1e-8);
                assert!((gdh[l] - hg[(l, k)]).abs() < 1e-8);
            }
        }
    }
}
