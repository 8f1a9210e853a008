//! Mollifier partition of unity on a padded cube lattice in `(t, y)` space
//! blending local quadratic polynomials.

use nalgebra::{DMatrix, DVector};

use super::{TerminalQuadratic, ThetaVector, ValueEval, ValueModel};
use crate::error::{Error, Result};

const MAX_STATE_DIM: usize = 3;

/// Lattice of cubes of edge `ε` covering `[−M̃ − kε, M̃ + kε]^{n+1}` with one
/// mollifier per cube barycenter.
///
/// `M̃ = ε⌈M/ε⌉` for the requested half-width `M`, `k = ⌈½√(n+1)⌉ + 1`
/// padding layers and mollifier radius `r = ε(½√(n+1) + 0.1)`. Cubes
/// touching the outermost layer form the boundary set; the rest are
/// interior and carry the partition functions `φ_j = ψ_j / Σ_all ψ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSkeleton {
    eps: f64,
    state_dim: usize,
    half_width: f64,
    n_eps: usize,
    pad: usize,
    cells: usize,
    radius: f64,
    overlap_bound: usize,
}

/// `φ_j` and its first two derivatives in all `n + 1` coordinates.
#[derive(Debug, Clone)]
pub struct BasisValue {
    pub index: usize,
    pub phi: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

struct Bump {
    interior: Option<usize>,
    psi: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl PartitionSkeleton {
    pub fn build(eps: f64, state_dim: usize, half_width: f64) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::Config("partition model needs at least one state dimension".into()));
        }
        if state_dim > MAX_STATE_DIM {
            return Err(Error::Capability(format!(
                "partition-of-unity model supports n <= {MAX_STATE_DIM}, got n = {state_dim}"
            )));
        }
        if !(eps > 0.0) || !(half_width > 0.0) || !eps.is_finite() || !half_width.is_finite() {
            return Err(Error::Config("partition needs positive ε and half-width".into()));
        }
        let d = state_dim + 1;
        let sqrt_d = (d as f64).sqrt();
        let n_eps = (half_width / eps - 1e-12).ceil().max(1.0) as usize;
        let pad = (0.5 * sqrt_d).ceil() as usize + 1;
        let cells = 2 * n_eps + 2 * pad;
        let radius = eps * (0.5 * sqrt_d + 0.1);
        // centers whose ball can reach a given cube
        let mut overlap_bound = 0;
        let reach = (radius / eps + 0.5).ceil() as i64;
        let offsets = 2 * reach + 1;
        for code in 0..offsets.pow(d as u32) {
            let mut c = code;
            let mut dist2 = 0.0;
            for _ in 0..d {
                let o = (c % offsets - reach).abs() as f64;
                c /= offsets;
                let gap = (o - 0.5).max(0.0) * eps;
                dist2 += gap * gap;
            }
            if dist2 < radius * radius {
                overlap_bound += 1;
            }
        }
        Ok(Self {
            eps,
            state_dim,
            half_width,
            n_eps,
            pad,
            cells,
            radius,
            overlap_bound,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn dim(&self) -> usize {
        self.state_dim + 1
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn padding(&self) -> usize {
        self.pad
    }

    /// Upper bound `𝔪` on the number of nonvanishing bumps at any point.
    pub fn overlap_bound(&self) -> usize {
        self.overlap_bound
    }

    /// `M̃`: the partition sums to one on `[−M̃, M̃]^{n+1}`.
    pub fn cover_half_width(&self) -> f64 {
        self.eps * self.n_eps as f64
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells
    }

    pub fn n_interior(&self) -> usize {
        (self.cells - 2).pow(self.dim() as u32)
    }

    pub fn n_boundary(&self) -> usize {
        self.cells.pow(self.dim() as u32) - self.n_interior()
    }

    fn lower(&self) -> f64 {
        -self.cover_half_width() - self.pad as f64 * self.eps
    }

    fn coord(&self, cell: usize) -> f64 {
        self.lower() + (cell as f64 + 0.5) * self.eps
    }

    fn interior_index(&self, multi: &[usize]) -> Option<usize> {
        let inner = self.cells - 2;
        let mut idx = 0;
        for &c in multi.iter().rev() {
            if c == 0 || c == self.cells - 1 {
                return None;
            }
            idx = idx * inner + (c - 1);
        }
        Some(idx)
    }

    /// Barycenter of interior cube `j`.
    pub fn interior_center(&self, j: usize) -> DVector<f64> {
        let inner = self.cells - 2;
        let mut rest = j;
        DVector::from_fn(self.dim(), |_, _| {
            let c = rest % inner + 1;
            rest /= inner;
            self.coord(c)
        })
    }

    fn bumps(&self, x: &[f64], derivs: bool) -> Vec<Bump> {
        let d = self.dim();
        let lo = self.lower();
        let mut ranges = Vec::with_capacity(d);
        for &xa in x {
            let base = ((xa - lo) / self.eps).floor() as i64;
            let first = (base - 1).max(0);
            let last = (base + 1).min(self.cells as i64 - 1);
            if first > last {
                return Vec::new();
            }
            ranges.push((first as usize, last as usize));
        }
        let r2 = self.radius * self.radius;
        let mut out = Vec::new();
        let mut multi: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            let mut delta = DVector::zeros(d);
            for a in 0..d {
                delta[a] = x[a] - self.coord(multi[a]);
            }
            let q = delta.norm_squared() / r2;
            if q < 1.0 {
                let s = q - 1.0;
                let psi = (1.0 / s).exp();
                let (grad, hess) = if derivs {
                    let dq = &delta * (2.0 / r2);
                    let grad = &dq * (-psi / (s * s));
                    let mut hess = &dq * dq.transpose() * (psi * (1.0 / s.powi(4) + 2.0 / s.powi(3)));
                    for a in 0..d {
                        hess[(a, a)] -= psi * 2.0 / (s * s * r2);
                    }
                    (grad, hess)
                } else {
                    (DVector::zeros(0), DMatrix::zeros(0, 0))
                };
                if psi > 0.0 {
                    out.push(Bump {
                        interior: self.interior_index(&multi),
                        psi,
                        grad,
                        hess,
                    });
                }
            }
            let mut a = 0;
            loop {
                if a == d {
                    return out;
                }
                if multi[a] < ranges[a].1 {
                    multi[a] += 1;
                    break;
                }
                multi[a] = ranges[a].0;
                a += 1;
            }
        }
    }

    /// Number of bumps `ψ_j` (interior or boundary) that are nonzero at `x`.
    pub fn active_count(&self, x: &[f64]) -> usize {
        self.bumps(x, false).len()
    }

    /// Nonvanishing interior partition functions at `x`, in increasing
    /// index order, with derivatives from the full quotient rule.
    pub fn basis(&self, x: &[f64]) -> Vec<BasisValue> {
        let bumps = self.bumps(x, true);
        let d = self.dim();
        let mut total = 0.0;
        let mut tgrad = DVector::zeros(d);
        let mut thess = DMatrix::zeros(d, d);
        for b in &bumps {
            total += b.psi;
            tgrad += &b.grad;
            thess += &b.hess;
        }
        let mut out: Vec<BasisValue> = bumps
            .iter()
            .filter_map(|b| {
                let index = b.interior?;
                let phi = b.psi / total;
                let grad = (&b.grad - &tgrad * phi) / total;
                let cross = &grad * tgrad.transpose();
                let hess = (&b.hess - &cross - cross.transpose() - &thess * phi) / total;
                Some(BasisValue { index, phi, grad, hess })
            })
            .collect();
        out.sort_by_key(|b| b.index);
        out
    }

    /// Partition values only.
    pub fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let bumps = self.bumps(x, false);
        let total: f64 = bumps.iter().map(|b| b.psi).sum();
        let mut out: Vec<(usize, f64)> = bumps
            .iter()
            .filter_map(|b| b.interior.map(|i| (i, b.psi / total)))
            .collect();
        out.sort_by_key(|b| b.0);
        out
    }
}

/// Local quadratic `P_j(x) = (x − x̄_j)ᵀ A_j (x − x̄_j) + b_jᵀ(x − x̄_j) + c_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionWeights {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

/// Value, full `(t, y)` gradient and Hessian of a reference function.
#[derive(Debug, Clone)]
pub struct TaylorData {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// `V(t, y) = (α/2)|Q₂(y − y_dT)|² + S(t, y) − S(T, y)` with
/// `S = Σ_{j∈ℐ} φ_j P_j`.
///
/// Per interior center `θ` stores the upper triangle of `A_j` row by row,
/// then `b_j`, then `c_j`.
#[derive(Debug, Clone)]
pub struct PartitionPolyModel {
    skeleton: PartitionSkeleton,
    terminal: TerminalQuadratic,
    horizon: f64,
}

struct LocalSum {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl PartitionPolyModel {
    pub fn new(skeleton: PartitionSkeleton, terminal: TerminalQuadratic, horizon: f64) -> Result<Self> {
        if terminal.target.len() != skeleton.state_dim() {
            return Err(Error::Config("terminal data and partition dimension differ".into()));
        }
        if !(horizon > 0.0) || horizon > skeleton.cover_half_width() {
            return Err(Error::Config(format!(
                "horizon {horizon} must lie in (0, {}] to be covered by the partition",
                skeleton.cover_half_width()
            )));
        }
        Ok(Self {
            skeleton,
            terminal,
            horizon,
        })
    }

    pub fn skeleton(&self) -> &PartitionSkeleton {
        &self.skeleton
    }

    pub fn terminal(&self) -> &TerminalQuadratic {
        &self.terminal
    }

    fn block_len(&self) -> usize {
        let d = self.skeleton.dim();
        d * (d + 1) / 2 + d + 1
    }

    pub fn center_weights(&self, theta: &[f64], j: usize) -> PartitionWeights {
        let d = self.skeleton.dim();
        let block = &theta[j * self.block_len()..(j + 1) * self.block_len()];
        let mut a = DMatrix::zeros(d, d);
        let mut k = 0;
        for r in 0..d {
            for c in r..d {
                a[(r, c)] = block[k];
                a[(c, r)] = block[k];
                k += 1;
            }
        }
        let b = DVector::from_column_slice(&block[k..k + d]);
        PartitionWeights { a, b, c: block[k + d] }
    }

    fn write_block(&self, theta: &mut [f64], j: usize, w: &PartitionWeights) {
        let d = self.skeleton.dim();
        let len = self.block_len();
        let block = &mut theta[j * len..(j + 1) * len];
        let mut k = 0;
        for r in 0..d {
            for c in r..d {
                block[k] = 0.5 * (w.a[(r, c)] + w.a[(c, r)]);
                k += 1;
            }
        }
        block[k..k + d].copy_from_slice(w.b.as_slice());
        block[k + d] = w.c;
    }

    /// Second-order Taylor data of `reference` at every interior center,
    /// `A_j = ½ ∇²V(x̄_j)` over all `n + 1` coordinates.
    pub fn taylor_init(&self, reference: impl Fn(&DVector<f64>) -> TaylorData) -> ThetaVector {
        let mut theta = vec![0.0; self.n_params()];
        for j in 0..self.skeleton.n_interior() {
            let center = self.skeleton.interior_center(j);
            let data = reference(&center);
            let w = PartitionWeights {
                a: data.hess * 0.5,
                b: data.grad,
                c: data.value,
            };
            self.write_block(&mut theta, j, &w);
        }
        theta
    }

    fn point(t: f64, y: &DVector<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + 1);
        x.push(t);
        x.extend_from_slice(y.as_slice());
        x
    }

    fn local_sum(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> LocalSum {
        let d = self.skeleton.dim();
        let x = Self::point(t, y);
        let mut value = 0.0;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for bv in self.skeleton.basis(&x) {
            let w = self.center_weights(theta, bv.index);
            let center = self.skeleton.interior_center(bv.index);
            let delta = DVector::from_column_slice(&x) - center;
            let a_delta = &w.a * &delta;
            let p = delta.dot(&a_delta) + w.b.dot(&delta) + w.c;
            let dp = a_delta * 2.0 + &w.b;
            value += bv.phi * p;
            grad += &bv.grad * p + &dp * bv.phi;
            let cross = &bv.grad * dp.transpose();
            hess += &bv.hess * p + &cross + cross.transpose() + &w.a * (2.0 * bv.phi);
        }
        LocalSum { value, grad, hess }
    }

    fn local_vjp(&self, t: f64, y: &DVector<f64>, a: f64, w: &DVector<f64>, sign: f64, out: &mut [f64]) {
        let d = self.skeleton.dim();
        let x = Self::point(t, y);
        let mut what = DVector::zeros(d);
        for k in 0..w.len() {
            what[k + 1] = w[k];
        }
        let len = self.block_len();
        for bv in self.skeleton.basis(&x) {
            let center = self.skeleton.interior_center(bv.index);
            let delta = DVector::from_column_slice(&x) - center;
            let coef = a * bv.phi + what.dot(&bv.grad);
            let block = &mut out[bv.index * len..(bv.index + 1) * len];
            let mut k = 0;
            for r in 0..d {
                for c in r..d {
                    let v = if r == c {
                        coef * delta[r] * delta[r] + 2.0 * bv.phi * what[r] * delta[r]
                    } else {
                        2.0 * coef * delta[r] * delta[c] + 2.0 * bv.phi * (what[r] * delta[c] + what[c] * delta[r])
                    };
                    block[k] += sign * v;
                    k += 1;
                }
            }
            for r in 0..d {
                block[k + r] += sign * (coef * delta[r] + bv.phi * what[r]);
            }
            block[k + d] += sign * coef;
        }
    }
}

impl ValueModel for PartitionPolyModel {
    fn state_dim(&self) -> usize {
        self.skeleton.state_dim()
    }

    fn n_params(&self) -> usize {
        self.skeleton.n_interior() * self.block_len()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn eval(&self, theta: &[f64], t: f64, y: &DVector<f64>) -> ValueEval {
        let n = self.state_dim();
        let at = self.local_sum(theta, t, y);
        let end = self.local_sum(theta, self.horizon, y);
        let grad = self.terminal.grad(y) + (at.grad.rows(1, n) - end.grad.rows(1, n));
        let hess = self.terminal.hess() + (at.hess.view((1, 1), (n, n)) - end.hess.view((1, 1), (n, n)));
        ValueEval {
            value: self.terminal.value(y) + (at.value - end.value),
            grad_y: grad,
            hess_yy: hess,
        }
    }

    fn accumulate_theta_vjp(&self, _theta: &[f64], t: f64, y: &DVector<f64>, a: f64, w: &DVector<f64>, out: &mut [f64]) {
        self.local_vjp(t, y, a, w, 1.0, out);
        self.local_vjp(self.horizon, y, a, w, -1.0, out);
    }
}
