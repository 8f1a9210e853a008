//! Parametrized value-function surrogates `V_θ(t, y)` and the feedback law
//! `F_θ = −(1/β) gᵀ ∂_y V_θ` they induce.

mod activation;
mod partition;
mod persist;
mod quadratic;
mod resnet;

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::problem::ProblemSpec;

pub use activation::Activation;
pub use partition::{PartitionPolyModel, PartitionSkeleton, PartitionWeights, TaylorData};
pub use persist::{load_model, save_model, ModelDocument, ModelFamily, StoredModel};
pub use quadratic::QuadraticValueModel;
pub use resnet::ResidualNetModel;

pub type ThetaVector = Vec<f64>;

/// Value, state gradient and state Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEval {
    pub value: f64,
    pub grad_y: DVector<f64>,
    pub hess_yy: DMatrix<f64>,
}

/// `(α/2)|Q₂(y − y_dT)|²`, the terminal value every model reproduces at `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalQuadratic {
    pub alpha: f64,
    pub q2tq2: DMatrix<f64>,
    pub target: DVector<f64>,
}

impl TerminalQuadratic {
    pub fn from_problem(spec: &ProblemSpec) -> Self {
        Self {
            alpha: spec.alpha,
            q2tq2: spec.q2tq2().clone(),
            target: spec.terminal_target.clone(),
        }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        let r = y - &self.target;
        0.5 * self.alpha * r.dot(&(&self.q2tq2 * &r))
    }

    pub fn grad(&self, y: &DVector<f64>) -> DVector<f64> {
        (&self.q2tq2 * (y - &self.target)) * self.alpha
    }

    pub fn hess(&self) -> DMatrix<f64> {
        &self.q2tq2 * self.alpha
    }
}

/// Behavioral contract shared by all value-function families.
///
/// `θ` is passed as a flat slice laid out as documented by each family.
pub trait ValueModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn horizon(&self) -> f64;

    /// Value, `∂_y V` and `∂_yy V` from one sweep.
    fn eval(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> ValueEval;

    /// Value and `∂_y V` without the Hessian.
    fn eval_grad(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let e = self.eval(theta, t, y);
        (e.value, e.grad_y)
    }

    /// `out += a · D_θV(t, y) + D_θ(∂_y V(t, y))ᵀ w`.
    fn accumulate_theta_vjp(
        &self,
        theta: &[f64],
        t: f64,
        y: &DVector<f64>,
        a: f64,
        w: &DVector<f64>,
        out: &mut [f64],
    );

    fn value(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> f64 {
        self.eval_grad(theta, t, y).0
    }

    fn grad_y(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> DVector<f64> {
        self.eval_grad(theta, t, y).1
    }

    fn hess_yy(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        self.eval(theta, t, y).hess_yy
    }

    fn grad_theta(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> DVector<f64> {
        let mut out = vec![0.0; self.n_params()];
        let zero = DVector::zeros(self.state_dim());
        self.accumulate_theta_vjp(theta, t, y, 1.0, &zero, &mut out);
        DVector::from_vec(out)
    }

    /// `D_θ ∂_y V` as an `n × N_θ` matrix.
    fn grad_y_theta(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let np = self.n_params();
        let mut m = DMatrix::zeros(n, np);
        for j in 0..n {
            let mut row = vec![0.0; np];
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            self.accumulate_theta_vjp(theta, t, y, 0.0, &e, &mut row);
            for (c, v) in row.into_iter().enumerate() {
                m[(j, c)] = v;
            }
        }
        m
    }
}

/// Feedback value together with its state Jacobian.
#[derive(Debug, Clone)]
pub struct FeedbackEval {
    pub control: DVector<f64>,
    pub jacobian_y: DMatrix<f64>,
    pub value: ValueEval,
    pub g: DMatrix<f64>,
}

/// `F(t, y) = −(1/β) g(t, y)ᵀ ∂_y V_θ(t, y)`.
pub fn feedback(spec: &ProblemSpec, model: &dyn ValueModel, theta: &[f64], t: f64, y: &DVector<f64>) -> DVector<f64> {
    let grad = model.grad_y(theta, t, y);
    let g = spec.system.control_operator(t, y);
    g.tr_mul(&grad) * (-1.0 / spec.beta)
}

/// `F` and `D_yF = −(1/β)[(D_y g)ᵀ ∂_yV + gᵀ ∂_yyV]`, where row `i` of the
/// first term is `(∂_y g_{:,i})ᵀ ∂_y V`.
pub fn feedback_with_jacobian(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    t: f64,
    y: &DVector<f64>,
) -> FeedbackEval {
    let value = model.eval(theta, t, y);
    let g = spec.system.control_operator(t, y);
    let scale = -1.0 / spec.beta;
    let control = g.tr_mul(&value.grad_y) * scale;
    let mut jac = g.tr_mul(&value.hess_yy);
    for (i, gi) in spec.system.control_operator_jacobian(t, y).iter().enumerate() {
        let row = gi.tr_mul(&value.grad_y);
        for k in 0..row.len() {
            jac[(i, k)] += row[k];
        }
    }
    jac *= scale;
    FeedbackEval {
        control,
        jacobian_y: jac,
        value,
        g,
    }
}

/// `D_θF = −(1/β) gᵀ D_θ∂_yV` as an `m × N_θ` matrix.
pub fn feedback_theta_jacobian(
    spec: &ProblemSpec,
    model: &dyn ValueModel,
    theta: &[f64],
    t: f64,
    y: &DVector<f64>,
) -> DMatrix<f64> {
    let g = spec.system.control_operator(t, y);
    g.tr_mul(&model.grad_y_theta(theta, t, y)) * (-1.0 / spec.beta)
}
