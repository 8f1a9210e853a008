use nalgebra::{DMatrix, DVector};

use super::{ValueEval, ValueModel};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Parameter-free quadratic value `½ yᵀ Π(t) y` with `Π` piecewise linear
/// between grid nodes. Used for Riccati feedback rollouts and in tests.
#[derive(Debug, Clone)]
pub struct QuadraticValueModel {
    horizon: f64,
    times: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
}

impl QuadraticValueModel {
    pub fn constant(horizon: f64, p: DMatrix<f64>) -> Self {
        Self {
            horizon,
            times: vec![0.0],
            matrices: vec![p],
        }
    }

    pub fn from_riccati(grid: &TimeGrid, pis: Vec<DMatrix<f64>>) -> Result<Self> {
        if pis.len() != grid.n_nodes() {
            return Err(Error::Contract(format!(
                "{} Riccati matrices for {} grid nodes",
                pis.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self {
            horizon: grid.horizon(),
            times: grid.nodes().to_vec(),
            matrices: pis,
        })
    }

    pub fn matrix_at(&self, t: f64) -> DMatrix<f64> {
        if self.matrices.len() == 1 {
            return self.matrices[0].clone();
        }
        let last = self.times.len() - 1;
        if t <= self.times[0] {
            return self.matrices[0].clone();
        }
        if t >= self.times[last] {
            return self.matrices[last].clone();
        }
        let h = self.times[1] - self.times[0];
        let k = ((t / h).floor() as usize).min(last - 1);
        let s = ((t - self.times[k]) / h).clamp(0.0, 1.0);
        &self.matrices[k] * (1.0 - s) + &self.matrices[k + 1] * s
    }
}

impl ValueModel for QuadraticValueModel {
    fn state_dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    fn n_params(&self) -> usize {
        0
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn eval(&self, _theta: &[f64], t: f64, y: &DVector<f64>) -> ValueEval {
        let p = self.matrix_at(t);
        let grad = &p * y;
        ValueEval {
            value: 0.5 * y.dot(&grad),
            grad_y: grad,
            hess_yy: p,
        }
    }

    fn accumulate_theta_vjp(&self, _: &[f64], _: f64, _: &DVector<f64>, _: f64, _: &DVector<f64>, _: &mut [f64]) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_between_nodes() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let pis = vec![
            DMatrix::from_element(1, 1, 4.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.0),
        ];
        let model = QuadraticValueModel::from_riccati(&grid, pis).unwrap();
        assert!((model.matrix_at(0.25)[(0, 0)] - 3.0).abs() < 1e-14);
        assert!((model.matrix_at(0.75)[(0, 0)] - 1.0).abs() < 1e-14);
        assert_eq!(model.matrix_at(1.0)[(0, 0)], 0.0);
        let y = DVector::from_element(1, 2.0);
        assert!((model.value(&[], 0.5, &y) - 4.0).abs() < 1e-14);
    }
}
