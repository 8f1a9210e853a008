use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

use super::{Activation, TerminalQuadratic, ThetaVector, ValueEval, ValueModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct HiddenLayer {
    rows: usize,
    cols: usize,
    w1: usize,
    w2: usize,
    b: usize,
}

/// Residual network value model
///
/// `V_θ(t, y) = (α/2)|Q₂(y − y_dT)|² + N_θ(t, y) − N_θ(T, y)`
///
/// where `N_θ = f_L ∘ ⋯ ∘ f_1`, `f_i(x) = σ(W_{i1} x + b_i) + W_{i2} x` for the
/// hidden layers and `f_L(x) = W_L x`. The parameter vector is
/// `(W_{11}, W_{12}, b_1, …, W_L)` with matrices stored row-major.
#[derive(Debug, Clone)]
pub struct ResidualNetModel {
    arch: Vec<usize>,
    activation: Activation,
    terminal: TerminalQuadratic,
    horizon: f64,
    layers: Vec<HiddenLayer>,
    head: usize,
    n_params: usize,
}

struct Tape {
    /// `x_0, …, x_{L−1}`
    xs: Vec<Vec<f64>>,
    /// `σ'(z_i)` and `σ''(z_i)` per hidden layer
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
}

impl ResidualNetModel {
    /// `hidden` lists the widths `N_1, …, N_{L−1}`; the input width is
    /// `n + 1` and the output width is 1.
    pub fn new(terminal: TerminalQuadratic, horizon: f64, hidden: &[usize], activation: Activation) -> Result<Self> {
        let n = terminal.target.len();
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config("residual network needs at least one nonempty hidden layer".into()));
        }
        let mut arch = vec![n + 1];
        arch.extend_from_slice(hidden);
        arch.push(1);
        Self::from_arch(terminal, horizon, &arch, activation)
    }

    pub fn from_arch(terminal: TerminalQuadratic, horizon: f64, arch: &[usize], activation: Activation) -> Result<Self> {
        let n = terminal.target.len();
        if arch.len() < 3 || arch[0] != n + 1 || *arch.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "architecture {arch:?} must start with n + 1 = {} and end with 1",
                n + 1
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        for i in 1..arch.len() - 1 {
            let (rows, cols) = (arch[i], arch[i - 1]);
            let layer = HiddenLayer {
                rows,
                cols,
                w1: offset,
                w2: offset + rows * cols,
                b: offset + 2 * rows * cols,
            };
            offset += 2 * rows * cols + rows;
            layers.push(layer);
        }
        let head = offset;
        let n_params = offset + arch[arch.len() - 2];
        Ok(Self {
            arch: arch.to_vec(),
            activation,
            terminal,
            horizon,
            layers,
            head,
            n_params,
        })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn terminal(&self) -> &TerminalQuadratic {
        &self.terminal
    }

    /// Index range of the `W_{i2}` block of hidden layer `i` (1-based).
    pub fn skip_block(&self, layer: usize) -> std::ops::Range<usize> {
        let l = self.layers[layer - 1];
        l.w2..l.w2 + l.rows * l.cols
    }

    /// Weights i.i.d. uniform on `[−s, s]` with `s = 1/√fan_in`, biases zero.
    pub fn init_theta(&self, seed: u64) -> ThetaVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.n_params];
        for l in &self.layers {
            let s = 1.0 / (l.cols as f64).sqrt();
            for v in &mut theta[l.w1..l.b] {
                *v = rng.random_range(-s..=s);
            }
        }
        let width = self.arch[self.arch.len() - 2];
        let s = 1.0 / (width as f64).sqrt();
        for v in &mut theta[self.head..] {
            *v = rng.random_range(-s..=s);
        }
        theta
    }

    fn input(&self, t: f64, y: &DVector<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + 1);
        x.push(t);
        x.extend_from_slice(y.as_slice());
        x
    }

    fn forward(&self, theta: &[f64], x0: Vec<f64>) -> Tape {
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        let mut d1 = Vec::with_capacity(self.layers.len());
        let mut d2 = Vec::with_capacity(self.layers.len());
        xs.push(x0);
        for l in &self.layers {
            let prev = xs.last().unwrap();
            let mut x = vec![0.0; l.rows];
            let mut s1 = vec![0.0; l.rows];
            let mut s2 = vec![0.0; l.rows];
            for r in 0..l.rows {
                let w1 = &theta[l.w1 + r * l.cols..l.w1 + (r + 1) * l.cols];
                let w2 = &theta[l.w2 + r * l.cols..l.w2 + (r + 1) * l.cols];
                let mut z = theta[l.b + r];
                let mut skip = 0.0;
                for c in 0..l.cols {
                    z += w1[c] * prev[c];
                    skip += w2[c] * prev[c];
                }
                let (s, ds, dds) = self.activation.eval2(z);
                x[r] = s + skip;
                s1[r] = ds;
                s2[r] = dds;
            }
            xs.push(x);
            d1.push(s1);
            d2.push(s2);
        }
        Tape { xs, d1, d2 }
    }

    fn output(&self, theta: &[f64], tape: &Tape) -> f64 {
        let last = tape.xs.last().unwrap();
        theta[self.head..].iter().zip(last).map(|(w, x)| w * x).sum()
    }

    /// Backward adjoints `λ_i = ∂N/∂x_i` for `i = 0, …, L−1`.
    fn adjoints(&self, theta: &[f64], tape: &Tape) -> Vec<Vec<f64>> {
        let depth = self.layers.len();
        let mut lambdas = vec![Vec::new(); depth + 1];
        lambdas[depth] = theta[self.head..].to_vec();
        for i in (0..depth).rev() {
            let l = self.layers[i];
            let lam = &lambdas[i + 1];
            let mut prev = vec![0.0; l.cols];
            for r in 0..l.rows {
                let mu = tape.d1[i][r] * lam[r];
                let w1 = &theta[l.w1 + r * l.cols..l.w1 + (r + 1) * l.cols];
                let w2 = &theta[l.w2 + r * l.cols..l.w2 + (r + 1) * l.cols];
                for c in 0..l.cols {
                    prev[c] += w1[c] * mu + w2[c] * lam[r];
                }
            }
            lambdas[i] = prev;
        }
        lambdas
    }

    /// Network value, `∂_y N` and optionally `∂_yy N` at `(t, y)`.
    fn network(&self, theta: &[f64], t: f64, y: &DVector<f64>, hessian: bool) -> (f64, Vec<f64>, Option<DMatrix<f64>>) {
        let n = y.len();
        let tape = self.forward(theta, self.input(t, y));
        let value = self.output(theta, &tape);
        let lambdas = self.adjoints(theta, &tape);
        let grad = lambdas[0][1..].to_vec();
        if !hessian {
            return (value, grad, None);
        }
        let mut hess = DMatrix::zeros(n, n);
        // Jacobian of x_{i-1} w.r.t. y, stored row-major (rows x n)
        let mut jac: Option<Vec<f64>> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let mut gz = vec![0.0; l.rows * n];
            match &jac {
                None => {
                    for r in 0..l.rows {
                        gz[r * n..(r + 1) * n]
                            .copy_from_slice(&theta[l.w1 + r * l.cols + 1..l.w1 + (r + 1) * l.cols]);
                    }
                }
                Some(j) => {
                    for r in 0..l.rows {
                        for c in 0..l.cols {
                            let w = theta[l.w1 + r * l.cols + c];
                            if w != 0.0 {
                                for k in 0..n {
                                    gz[r * n + k] += w * j[c * n + k];
                                }
                            }
                        }
                    }
                }
            }
            let lam = &lambdas[i + 1];
            for r in 0..l.rows {
                let coef = lam[r] * tape.d2[i][r];
                if coef == 0.0 {
                    continue;
                }
                let row = &gz[r * n..(r + 1) * n];
                for a in 0..n {
                    let ca = coef * row[a];
                    for b in a..n {
                        hess[(a, b)] += ca * row[b];
                    }
                }
            }
            if i + 1 < self.layers.len() {
                let mut next = vec![0.0; l.rows * n];
                for r in 0..l.rows {
                    for k in 0..n {
                        next[r * n + k] = tape.d1[i][r] * gz[r * n + k];
                    }
                    for c in 0..l.cols {
                        let w = theta[l.w2 + r * l.cols + c];
                        if w == 0.0 {
                            continue;
                        }
                        match &jac {
                            None => {
                                if c > 0 {
                                    next[r * n + c - 1] += w;
                                }
                            }
                            Some(j) => {
                                for k in 0..n {
                                    next[r * n + k] += w * j[c * n + k];
                                }
                            }
                        }
                    }
                }
                jac = Some(next);
            }
        }
        for a in 0..n {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        (value, grad, Some(hess))
    }

    /// `out += sign · ∂_θ[a N(x) + ∂_x N(x) · ẋ₀]` with `ẋ₀ = (0, w)`.
    fn network_vjp(&self, theta: &[f64], t: f64, y: &DVector<f64>, a: f64, w: &DVector<f64>, sign: f64, out: &mut [f64]) {
        let depth = self.layers.len();
        let tape = self.forward(theta, self.input(t, y));
        // tangent forward pass
        let mut dxs: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut dzs: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut dx0 = vec![0.0];
        dx0.extend_from_slice(w.as_slice());
        dxs.push(dx0);
        for (i, l) in self.layers.iter().enumerate() {
            let prev = &dxs[i];
            let mut dz = vec![0.0; l.rows];
            let mut dx = vec![0.0; l.rows];
            for r in 0..l.rows {
                let w1 = &theta[l.w1 + r * l.cols..l.w1 + (r + 1) * l.cols];
                let w2 = &theta[l.w2 + r * l.cols..l.w2 + (r + 1) * l.cols];
                let mut z = 0.0;
                let mut skip = 0.0;
                for c in 0..l.cols {
                    z += w1[c] * prev[c];
                    skip += w2[c] * prev[c];
                }
                dz[r] = z;
                dx[r] = tape.d1[i][r] * z + skip;
            }
            dxs.push(dx);
            dzs.push(dz);
        }
        // head
        let head = &theta[self.head..];
        let last = &tape.xs[depth];
        let dlast = &dxs[depth];
        for k in 0..head.len() {
            out[self.head + k] += sign * (a * last[k] + dlast[k]);
        }
        let mut xbar: Vec<f64> = head.iter().map(|h| a * h).collect();
        let mut dxbar: Vec<f64> = head.to_vec();
        for i in (0..depth).rev() {
            let l = self.layers[i];
            let xprev = &tape.xs[i];
            let dxprev = &dxs[i];
            let mut xbar_prev = vec![0.0; l.cols];
            let mut dxbar_prev = vec![0.0; l.cols];
            for r in 0..l.rows {
                let dzbar = tape.d1[i][r] * dxbar[r];
                let zbar = tape.d1[i][r] * xbar[r] + tape.d2[i][r] * dzs[i][r] * dxbar[r];
                let row1 = l.w1 + r * l.cols;
                let row2 = l.w2 + r * l.cols;
                for c in 0..l.cols {
                    out[row2 + c] += sign * (xbar[r] * xprev[c] + dxbar[r] * dxprev[c]);
                    out[row1 + c] += sign * (zbar * xprev[c] + dzbar * dxprev[c]);
                    xbar_prev[c] += theta[row1 + c] * zbar + theta[row2 + c] * xbar[r];
                    dxbar_prev[c] += theta[row1 + c] * dzbar + theta[row2 + c] * dxbar[r];
                }
                out[l.b + r] += sign * zbar;
            }
            xbar = xbar_prev;
            dxbar = dxbar_prev;
        }
    }
}

impl ValueModel for ResidualNetModel {
    fn state_dim(&self) -> usize {
        self.arch[0] - 1
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn eval(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> ValueEval {
        debug_assert_eq!(theta.len(), self.n_params);
        let (v, g, h) = self.network(theta, t, y, true);
        let (vt, gt, ht) = self.network(theta, self.horizon, y, true);
        let mut grad = self.terminal.grad(y);
        for k in 0..grad.len() {
            grad[k] += g[k] - gt[k];
        }
        ValueEval {
            value: self.terminal.value(y) + (v - vt),
            grad_y: grad,
            hess_yy: self.terminal.hess() + (h.unwrap() - ht.unwrap()),
        }
    }

    fn eval_grad(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g, _) = self.network(theta, t, y, false);
        let (vt, gt, _) = self.network(theta, self.horizon, y, false);
        let mut grad = self.terminal.grad(y);
        for k in 0..grad.len() {
            grad[k] += g[k] - gt[k];
        }
        (self.terminal.value(y) + (v - vt), grad)
    }

    fn accumulate_theta_vjp(&self, theta: &[f64], t: f64, y: &DVector<f64>, a: f64, w: &DVector<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_params);
        self.network_vjp(theta, t, y, a, w, 1.0, out);
        self.network_vjp(theta, self.horizon, y, a, w, -1.0, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terminal(n: usize) -> TerminalQuadratic {
        TerminalQuadratic {
            alpha: 0.25,
            q2tq2: DMatrix::identity(n, n),
            target: DVector::from_fn(n, |i, _| 0.1 * i as f64),
        }
    }

    #[test]
    fn reference_architecture_parameter_count() {
        let model = ResidualNetModel::new(terminal(10), 2.0, &[60], Activation::SinCos).unwrap();
        assert_eq!(model.arch(), &[11, 60, 1]);
        assert_eq!(model.n_params(), 1440);
    }

    #[test]
    fn deep_parameter_count_formula() {
        let model = ResidualNetModel::new(terminal(3), 1.0, &[7, 5], Activation::Tanh).unwrap();
        // Σ_{i<L} (2 N_i N_{i−1} + N_i) + N_L N_{L−1}
        let expected = (2 * 7 * 4 + 7) + (2 * 5 * 7 + 5) + 5;
        assert_eq!(model.n_params(), expected);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(ResidualNetModel::new(terminal(2), 1.0, &[], Activation::SinCos).is_err());
        assert!(ResidualNetModel::from_arch(terminal(2), 1.0, &[4, 5, 1], Activation::SinCos).is_err());
        assert!(ResidualNetModel::from_arch(terminal(2), 1.0, &[3, 5, 2], Activation::SinCos).is_err());
    }

    #[test]
    fn terminal_condition_is_exact() {
        let model = ResidualNetModel::new(terminal(3), 2.0, &[8, 6], Activation::SinCos).unwrap();
        let theta = model.init_theta(3);
        let y = DVector::from_vec(vec![0.4, -1.2, 0.9]);
        let v = model.value(&theta, 2.0, &y);
        let r = model.terminal().value(&y);
        assert!((v - r).abs() <= 1e-12 * (1.0 + v.abs()));
    }

    #[test]
    fn init_theta_scaling() {
        let model = ResidualNetModel::new(terminal(10), 2.0, &[60], Activation::SinCos).unwrap();
        let theta = model.init_theta(11);
        let s = 1.0 / 11f64.sqrt();
        let l = model.layers[0];
        assert!(theta[l.w1..l.b].iter().all(|v| v.abs() <= s));
        assert!(theta[l.b..l.b + l.rows].iter().all(|&v| v == 0.0));
        assert_eq!(theta, model.init_theta(11));
        assert_ne!(theta, model.init_theta(12));
    }
}
