//! Uniform time grids, node-valued trajectories and the trapezoid quadratures
//! shared by every solver and objective.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Uniform grid `t_k = k T / n_steps` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        let mut nodes: Vec<f64> = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        nodes[n_steps] = horizon;
        Ok(Self {
            horizon,
            n_steps,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn time(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Composite trapezoid weights, `h/2` at both ends and `h` inside.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.step();
        let mut w = vec![h; self.n_nodes()];
        w[0] = 0.5 * h;
        w[self.n_steps] = 0.5 * h;
        w
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_nodes());
        let h = self.step();
        let n = self.n_steps;
        let inner: f64 = values[1..n].iter().sum();
        h * (inner + 0.5 * (values[0] + values[n]))
    }

    /// `out[k] = ∫_{t_k}^T v dt` by backward cumulative trapezoid.
    pub fn integrate_to_end(&self, values: &[f64]) -> Vec<f64> {
        let h = self.step();
        let mut out = vec![0.0; self.n_nodes()];
        for k in (0..self.n_steps).rev() {
            out[k] = out[k + 1] + 0.5 * h * (values[k] + values[k + 1]);
        }
        out
    }

    /// `out[k] = ∫_0^{t_k} v dt` by forward cumulative trapezoid.
    pub fn integrate_from_start(&self, values: &[f64]) -> Vec<f64> {
        let h = self.step();
        let mut out = vec![0.0; self.n_nodes()];
        for k in 0..self.n_steps {
            out[k + 1] = out[k] + 0.5 * h * (values[k] + values[k + 1]);
        }
        out
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && self.horizon == other.horizon
    }
}

/// Node values of a vector-valued function of time on a [`TimeGrid`],
/// stored row-major (one row per node).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

pub type StateTrajectory = Trajectory;
pub type AdjointTrajectory = Trajectory;
pub type ControlTrajectory = Trajectory;
pub type CostateTrajectory = Trajectory;

impl Trajectory {
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            dim,
            data: vec![0.0; grid.n_nodes() * dim],
        }
    }

    pub fn from_rows(grid: &TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_nodes() * dim {
            return Err(Error::Contract(format!(
                "trajectory data has {} entries, expected {} nodes x {} components",
                data.len(),
                grid.n_nodes(),
                dim
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            dim,
            data,
        })
    }

    pub fn from_fn(grid: &TimeGrid, dim: usize, mut f: impl FnMut(usize, f64) -> DVector<f64>) -> Self {
        let mut traj = Self::zeros(grid, dim);
        for k in 0..grid.n_nodes() {
            let v = f(k, grid.time(k));
            traj.row_mut(k).copy_from_slice(v.as_slice());
        }
        traj
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vector(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row(k))
    }

    pub fn set(&mut self, k: usize, v: &DVector<f64>) {
        self.row_mut(k).copy_from_slice(v.as_slice());
    }

    pub fn last(&self) -> DVector<f64> {
        self.vector(self.n_nodes() - 1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `∫ |x(t)|² dt` by trapezoid.
    pub fn l2_norm_sq(&self) -> f64 {
        let sq: Vec<f64> = (0..self.n_nodes())
            .map(|k| self.row(k).iter().map(|v| v * v).sum())
            .collect();
        self.grid.integrate(&sq)
    }

    /// `∫ (x(t), y(t)) dt` by trapezoid.
    pub fn l2_inner(&self, other: &Trajectory) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let dots: Vec<f64> = (0..self.n_nodes())
            .map(|k| dot(self.row(k), other.row(k)))
            .collect();
        self.grid.integrate(&dots)
    }

    /// `∫ |x(t) − y(t)|² dt` by trapezoid.
    pub fn l2_dist_sq(&self, other: &Trajectory) -> f64 {
        let sq: Vec<f64> = (0..self.n_nodes())
            .map(|k| {
                self.row(k)
                    .iter()
                    .zip(other.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        self.grid.integrate(&sq)
    }

    pub fn write_csv(&self, path: &Path, prefix: &str) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header = String::from("t");
        for c in 0..self.dim {
            header.push_str(&format!(",{prefix}{c}"));
        }
        let mut out = header;
        out.push('\n');
        for k in 0..self.n_nodes() {
            out.push_str(&format!("{:.16e}", self.grid.time(k)));
            for v in self.row(k) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a trajectory written by [`Trajectory::write_csv`]; the node
    /// times must reproduce `grid`.
    pub fn read_csv(path: &Path, grid: &TimeGrid) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(BufReader::new(file));
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            .clone();
        if headers.get(0) != Some("t") {
            return Err(Error::Parse(format!("{}: first column must be `t`", path.display())));
        }
        let dim = headers.len() - 1;
        let mut data = Vec::with_capacity(grid.n_nodes() * dim);
        let mut rows = 0;
        for (k, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: row {k}: {e}", path.display())))
            };
            let t = parse(&record[0])?;
            if k >= grid.n_nodes() || (t - grid.time(k)).abs() > 1e-12 * grid.horizon() {
                return Err(Error::Contract(format!(
                    "{}: row {k} does not match the time grid",
                    path.display()
                )));
            }
            for field in record.iter().skip(1) {
                data.push(parse(field)?);
            }
            rows += 1;
        }
        if rows != grid.n_nodes() {
            return Err(Error::Contract(format!(
                "{}: {rows} rows, expected {}",
                path.display(),
                grid.n_nodes()
            )));
        }
        Trajectory::from_rows(grid, dim, data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
