//! Spectral Galerkin model of a bilinear heat equation on `(0, 2π)` with
//! three actuated subintervals:
//!
//! `Ẏ + A Y + Σᵢ uᵢ Mᵢ Y = 0`,
//!
//! in the Dirichlet eigenbasis `φ_j(x) = sin(jx/2)/√π`, `λ_j = j²/4`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};
use crate::ode::ClosedLoopNode;
use crate::problem::{AffineBilinearSystem, ControlSystem, EnsembleSet, ProblemSpec, Split};

pub const SUBDOMAINS: [(f64, f64); 3] = [(0.5, 1.0), (2.0, 2.5), (4.0, 4.5)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearSpec {
    pub n_modes: usize,
    pub eigenvalues: Vec<f64>,
    /// `(M_i)_{jk} = ∫_{Ω_i} φ_j φ_k dx`, row-major
    pub mass_matrices: Vec<Vec<Vec<f64>>>,
    pub subdomains: Vec<(f64, f64)>,
    /// Mode coefficients of the time-independent target `x²/10`
    pub desired: Vec<f64>,
    /// Reference initial state about which ensembles are sampled
    pub reference_initial: Vec<f64>,
}

/// Eigenfunction `φ_j(x) = sin(jx/2)/√π`.
pub fn eigenfunction(j: usize, x: f64) -> f64 {
    (0.5 * j as f64 * x).sin() / PI.sqrt()
}

pub fn eigenvalue(j: usize) -> f64 {
    (j * j) as f64 / 4.0
}

/// `∫_a^b φ_j φ_k dx` by the product-to-sum primitive.
pub fn mode_overlap(j: usize, k: usize, a: f64, b: f64) -> f64 {
    if j == k {
        let jf = j as f64;
        let prim = |x: f64| 0.5 * x - (jf * x).sin() / (2.0 * jf);
        return (prim(b) - prim(a)) / PI;
    }
    let d = j as f64 - k as f64;
    let s = (j + k) as f64;
    let prim = |x: f64| 2.0 * (0.5 * d * x).sin() / d - 2.0 * (0.5 * s * x).sin() / s;
    (prim(b) - prim(a)) / (2.0 * PI)
}

/// `(1/10)∫₀^{2π} x² φ_j dx`.
pub fn desired_coefficient(j: usize) -> f64 {
    let a = 0.5 * j as f64;
    let prim = |x: f64| -x * x * (a * x).cos() / a + 2.0 * x * (a * x).sin() / (a * a) + 2.0 * (a * x).cos() / a.powi(3);
    0.1 * (prim(2.0 * PI) - prim(0.0)) / PI.sqrt()
}

pub fn project_desired(n_modes: usize) -> Vec<f64> {
    (1..=n_modes).map(desired_coefficient).collect()
}

/// `Ȳ₀ = √π e₁`, the coefficients of `sin(x/2)`.
pub fn default_reference_initial(n_modes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_modes];
    v[0] = PI.sqrt();
    v
}

pub fn assemble(n_modes: usize) -> Result<BilinearSpec> {
    if n_modes == 0 {
        return Err(Error::Config("n_modes must be at least 1".into()));
    }
    let mass_matrices = SUBDOMAINS
        .iter()
        .map(|&(a, b)| {
            (1..=n_modes)
                .map(|j| (1..=n_modes).map(|k| mode_overlap(j, k, a, b)).collect())
                .collect()
        })
        .collect();
    Ok(BilinearSpec {
        n_modes,
        eigenvalues: (1..=n_modes).map(eigenvalue).collect(),
        mass_matrices,
        subdomains: SUBDOMAINS.to_vec(),
        desired: project_desired(n_modes),
        reference_initial: default_reference_initial(n_modes),
    })
}

#[derive(Serialize, Deserialize)]
struct CacheDocument {
    spec: BilinearSpec,
    content_hash: String,
}

impl BilinearSpec {
    pub fn with_reference_initial(mut self, y0: Vec<f64>) -> Result<Self> {
        if y0.len() != self.n_modes {
            return Err(Error::Config(format!(
                "reference initial state has {} entries, expected {}",
                y0.len(),
                self.n_modes
            )));
        }
        self.reference_initial = y0;
        Ok(self)
    }

    pub fn stiffness(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues))
    }

    pub fn mass_matrix(&self, i: usize) -> DMatrix<f64> {
        let n = self.n_modes;
        DMatrix::from_fn(n, n, |r, c| self.mass_matrices[i][r][c])
    }

    pub fn system(&self) -> Result<AffineBilinearSystem> {
        let n = self.n_modes;
        AffineBilinearSystem::new(
            -self.stiffness(),
            DVector::zeros(n),
            vec![DVector::zeros(n); self.subdomains.len()],
            (0..self.subdomains.len()).map(|i| -self.mass_matrix(i)).collect(),
        )
    }

    /// Tracking problem with `f(y) = −Ay`, `g(y)u = −Σ uᵢ Mᵢ y`,
    /// `Q₁ = Q₂ = I` and the projected target at all times.
    pub fn problem(&self, horizon: f64, beta: f64, alpha: f64) -> Result<ProblemSpec> {
        let n = self.n_modes;
        let system: Arc<dyn ControlSystem> = Arc::new(self.system()?);
        let target = DVector::from_column_slice(&self.desired);
        let tt = target.clone();
        ProblemSpec::new(
            system,
            horizon,
            beta,
            alpha,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            Arc::new(move |_| tt.clone()),
            target,
        )
    }

    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CacheDocument {
            spec: self.clone(),
            content_hash: self.content_hash(),
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a cached assembly, rejecting it if the stored hash does not
    /// match its content.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CacheDocument =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if doc.spec.content_hash() != doc.content_hash {
            return Err(Error::Parse(format!("{}: content hash mismatch", path.display())));
        }
        Ok(doc.spec)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `total` points uniform in the closed ball of `radius` about `center`;
/// the first `train_count` are training members with weight
/// `1/train_count`, the rest validation members with weight
/// `1/(total − train_count)`.
pub fn generate_ensemble(center: &[f64], total: usize, radius: f64, seed: u64, train_count: usize) -> Result<EnsembleSet> {
    if train_count == 0 || train_count > total {
        return Err(Error::Config(format!(
            "train_count must lie in 1..={total}, got {train_count}"
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::Config("sampling radius must be nonnegative".into()));
    }
    let n = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(total);
    for _ in 0..total {
        let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = radius * unit.sample(&mut rng).powf(1.0 / n as f64);
        points.push(center.iter().zip(&dir).map(|(c, d)| c + r * d / norm).collect());
    }
    let val = total - train_count;
    let weights = (0..total)
        .map(|i| if i < train_count { 1.0 / train_count as f64 } else { 1.0 / val as f64 })
        .collect();
    let tags = (0..total)
        .map(|i| if i < train_count { Split::Train } else { Split::Validation })
        .collect();
    let set = EnsembleSet {
        center: center.to_vec(),
        radius,
        seed,
        points,
        weights,
        tags,
    };
    set.validate()?;
    Ok(set)
}

/// The benchmark-specific costate equation
///
/// `−Ż + (A + Σ Fᵢ Mᵢ + D_yFᵀ B_Y) Z = −D_yFᵀ B_K P + K + Ŷ`,
/// `Z(T) = α K(T) + Ŷ_T`,
///
/// with `B_Y` and `B_K` the `3 × n` matrices with rows `Yᵀ Mᵢ` and `Kᵀ Mᵢ`,
/// discretized by backward implicit Euler like the generic solver.
pub fn specialized_zeta(
    bench: &BilinearSpec,
    alpha: f64,
    grid: &TimeGrid,
    nodes: &[ClosedLoopNode],
    p: &Trajectory,
    kappa: &Trajectory,
    y_hat: &Trajectory,
    y_hat_terminal: &DVector<f64>,
) -> Result<Trajectory> {
    let a = bench.stiffness();
    let ms: Vec<DMatrix<f64>> = (0..bench.subdomains.len()).map(|i| bench.mass_matrix(i)).collect();
    let rows = |v: &DVector<f64>| -> DMatrix<f64> {
        let r: Vec<_> = ms.iter().map(|m| (m * v).transpose()).collect();
        DMatrix::from_rows(&r)
    };
    let terminal = kappa.vector(grid.n_steps()) * alpha + y_hat_terminal;
    crate::ode::backward_linear(grid, &terminal, |k| {
        let nd = &nodes[k];
        let mut op = a.clone();
        for (fi, m) in nd.control.iter().zip(&ms) {
            op += m * *fi;
        }
        op += nd.dcontrol.transpose() * rows(&nd.y);
        let kk = kappa.vector(k);
        let src = -(nd.dcontrol.transpose() * rows(&kk) * p.vector(k)) + kk + y_hat.vector(k);
        (-op, src)
    })
}
