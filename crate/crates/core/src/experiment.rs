//! Run configuration and the staged experiment pipeline:
//! assemble → ensemble → train → oracle → validate → report, plus a
//! finite-difference gradient check.
//!
//! Every stage writes its artifacts under the output directory with a hash
//! of the configuration parts it depends on in the file name, and reuses an
//! existing artifact instead of recomputing it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilinear::{assemble, generate_ensemble, hex, BilinearSpec};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::learning::{write_trace_jsonl, LearningProblem, PhiTerminalConvention, TraceRecord};
use crate::metrics::{emit_tables, LearnedBundle, MetricsReport, OracleBundle};
use crate::models::{
    load_model, save_model, Activation, PartitionPolyModel, PartitionSkeleton, ResidualNetModel, StoredModel,
    TerminalQuadratic, ThetaVector,
};
use crate::ode::SolverConfig;
use crate::optimize::{bb_minimize, write_trace_csv, BBConfig, StopReason};
use crate::oracle::{load_open_loop, save_open_loop, solve_open_loop};
use crate::problem::{AffineBilinearSystem, ControlSystem, EnsembleSet, PenaltyConfig, ProblemSpec, Split};

/// Top-level run configuration, read from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the ensemble sampler and the parameter initialization.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; `FEEDBACK_THREADS` caps this further.
    #[serde(default)]
    pub threads: Option<usize>,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub penalties: Vec<PenaltyConfig>,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub training: BBConfig,
    #[serde(default)]
    pub oracle: BBConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub phi_terminal_convention: PhiTerminalConvention,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Spectral bilinear heat equation with three actuated subdomains.
    Bilinear {
        n_modes: usize,
        horizon: f64,
        beta: f64,
        alpha: f64,
        /// Ensemble center; defaults to the first eigenfunction's coefficients.
        #[serde(default)]
        reference_initial: Option<Vec<f64>>,
    },
    /// `ẏ = Ay + Bu` with zero targets; matrices given row by row.
    Lqr {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        q1: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        q2: Option<Vec<Vec<f64>>>,
        horizon: f64,
        beta: f64,
        alpha: f64,
        center: Vec<f64>,
    },
    /// A [`ProblemDocument`] stored as JSON.
    Custom { spec_file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Residual network with the given hidden widths; input `n + 1`, output 1.
    ResidualNet {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// Partition-of-unity quadratic surrogate on `[−half_width, half_width]^{n+1}`.
    PartitionPoly { epsilon: f64, half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub total: usize,
    pub train_count: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Leading training members used (with uniform weights).
    pub members: usize,
    pub directions: usize,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            members: 3,
            directions: 10,
            fd_step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

/// Generic affine-bilinear problem data, the common form every problem
/// kind is resolved to by the assemble stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub drift: Vec<Vec<f64>>,
    pub drift_offset: Vec<f64>,
    pub input_vectors: Vec<Vec<f64>>,
    pub input_matrices: Vec<Vec<Vec<f64>>>,
    pub horizon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    /// Constant tracking target `y_d`.
    pub target: Vec<f64>,
    pub terminal_target: Vec<f64>,
    /// Center of the initial-condition ball.
    pub center: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(name: &str, data: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if data.len() != nrows || data.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| data[r][c]))
}

impl ProblemDocument {
    pub fn from_bilinear(bench: &BilinearSpec, horizon: f64, beta: f64, alpha: f64) -> Result<Self> {
        let sys = bench.system()?;
        let n = bench.n_modes;
        let eye = rows(&DMatrix::identity(n, n));
        Ok(Self {
            drift: rows(&sys.drift_matrix),
            drift_offset: sys.drift_offset.as_slice().to_vec(),
            input_vectors: sys.input_vectors.iter().map(|v| v.as_slice().to_vec()).collect(),
            input_matrices: sys.input_matrices.iter().map(rows).collect(),
            horizon,
            beta,
            alpha,
            q1: eye.clone(),
            q2: eye,
            target: bench.desired.clone(),
            terminal_target: bench.desired.clone(),
            center: bench.reference_initial.clone(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.drift.len()
    }

    pub fn system(&self) -> Result<AffineBilinearSystem> {
        let n = self.state_dim();
        let vec = |name: &str, v: &[f64]| {
            if v.len() != n {
                return Err(Error::Config(format!("{name} must have {n} entries")));
            }
            Ok(DVector::from_column_slice(v))
        };
        AffineBilinearSystem::new(
            matrix("drift", &self.drift, n, n)?,
            vec("drift_offset", &self.drift_offset)?,
            self.input_vectors
                .iter()
                .map(|v| vec("input vector", v))
                .collect::<Result<_>>()?,
            self.input_matrices
                .iter()
                .map(|m| matrix("input matrix", m, n, n))
                .collect::<Result<_>>()?,
        )
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let n = self.state_dim();
        let system: Arc<dyn ControlSystem> = Arc::new(self.system()?);
        if self.target.len() != n || self.center.len() != n {
            return Err(Error::Config(format!("target and center must have {n} entries")));
        }
        let target = DVector::from_column_slice(&self.target);
        ProblemSpec::new(
            system,
            self.horizon,
            self.beta,
            self.alpha,
            matrix("q1", &self.q1, n, n)?,
            matrix("q2", &self.q2, n, n)?,
            Arc::new(move |_| target.clone()),
            DVector::from_column_slice(&self.terminal_target),
        )
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// First 16 hex digits of the SHA-256 of the JSON encoding of `parts`.
pub fn config_hash<T: Serialize>(parts: &T) -> String {
    let text = serde_json::to_string(parts).expect("configuration serializes");
    hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n_steps == 0 {
            return Err(Error::Config("grid.n_steps must be at least 1".into()));
        }
        if self.penalties.is_empty() {
            return Err(Error::Config("at least one [[penalties]] entry is required".into()));
        }
        for p in &self.penalties {
            p.validate()?;
        }
        let e = &self.ensemble;
        if e.train_count == 0 || e.train_count > e.total || !(e.radius >= 0.0) {
            return Err(Error::Config(
                "ensemble needs 1 <= train_count <= total and a nonnegative radius".into(),
            ));
        }
        self.training.validate()?;
        self.oracle.validate()?;
        self.solver.validate()?;
        let g = &self.gradcheck;
        if g.members == 0 || g.directions == 0 || !(g.fd_step > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config("gradcheck settings must be positive".into()));
        }
        match &self.model {
            ModelConfig::ResidualNet { hidden, .. } if hidden.is_empty() || hidden.contains(&0) => {
                return Err(Error::Config("model.hidden needs at least one positive width".into()));
            }
            ModelConfig::PartitionPoly { epsilon, half_width } if !(*epsilon > 0.0) || !(*half_width > 0.0) => {
                return Err(Error::Config("model.epsilon and model.half_width must be positive".into()));
            }
            _ => {}
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive when given".into()));
        }
        Ok(())
    }

    /// Worker threads: `threads` (or all logical cores), capped by
    /// `FEEDBACK_THREADS` when set.
    pub fn effective_threads(&self) -> Result<usize> {
        let base = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        match std::env::var("FEEDBACK_THREADS") {
            Ok(v) => {
                let cap: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("FEEDBACK_THREADS must be a positive integer, got `{v}`")))?;
                if cap == 0 {
                    return Err(Error::Config("FEEDBACK_THREADS must be positive".into()));
                }
                Ok(base.min(cap))
            }
            Err(_) => Ok(base),
        }
    }
}

/// Outcome of training one penalty configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub penalties: PenaltyConfig,
    pub config_hash: String,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub objective: f64,
    pub grad_norm: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub gamma1: f64,
    pub gamma2: f64,
    pub direction: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub n_steps: usize,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
    pub worst: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Paths written by the report stage.
#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub markdown: PathBuf,
    pub csv: Vec<PathBuf>,
    pub reports: Vec<MetricsReport>,
}

/// A configured pipeline rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Recompute artifacts even if cached copies exist.
    pub force: bool,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        Ok(Self {
            config,
            out,
            force: false,
        })
    }

    pub fn with_output_dir(mut self, out: impl Into<PathBuf>) -> Self {
        self.out = out.into();
        self
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn missing(&self, path: PathBuf, producer: &str) -> Error {
        Error::MissingArtifact {
            path,
            producer: producer.to_string(),
        }
    }

    // ---- hashes ----

    pub fn problem_hash(&self) -> String {
        config_hash(&("problem", &self.config.problem))
    }

    pub fn ensemble_hash(&self) -> String {
        config_hash(&("ensemble", self.problem_hash(), &self.config.ensemble, self.config.seed))
    }

    pub fn train_hash(&self, penalties: &PenaltyConfig) -> String {
        let c = &self.config;
        config_hash(&(
            "train",
            self.ensemble_hash(),
            &c.grid,
            &c.model,
            penalties,
            &c.training,
            &c.solver,
            c.phi_terminal_convention,
        ))
    }

    pub fn oracle_hash(&self) -> String {
        let c = &self.config;
        config_hash(&("oracle", self.ensemble_hash(), &c.grid, &c.oracle, &c.solver))
    }

    pub fn report_hash(&self) -> String {
        let trains: Vec<String> = self.config.penalties.iter().map(|p| self.train_hash(p)).collect();
        config_hash(&("report", trains, self.oracle_hash()))
    }

    // ---- paths ----

    pub fn problem_path(&self) -> PathBuf {
        self.out.join(format!("problem-{}.json", self.problem_hash()))
    }

    pub fn ensemble_path(&self) -> PathBuf {
        self.out.join(format!("ensemble-{}.json", self.ensemble_hash()))
    }

    pub fn model_path(&self, penalties: &PenaltyConfig) -> PathBuf {
        self.out.join(format!("model-{}.json", self.train_hash(penalties)))
    }

    pub fn oracle_dir(&self) -> PathBuf {
        self.out.join(format!("oracle-{}", self.oracle_hash()))
    }

    pub fn metrics_path(&self, penalties: &PenaltyConfig, split: Split) -> PathBuf {
        self.out
            .join(format!("metrics-{}-{}-{split}.json", self.train_hash(penalties), self.oracle_hash()))
    }

    fn member_stem(i: usize) -> String {
        format!("member-{i:04}")
    }

    // ---- stages ----

    /// Resolves the problem to its generic form and caches it.
    pub fn assemble(&self) -> Result<ProblemDocument> {
        self.ensure_out()?;
        let path = self.problem_path();
        if path.exists() && !self.force {
            log::info!("assemble: using cached {}", path.display());
            return read_json(&path);
        }
        let doc = match &self.config.problem {
            ProblemConfig::Bilinear {
                n_modes,
                horizon,
                beta,
                alpha,
                reference_initial,
            } => {
                let mut bench = assemble(*n_modes)?;
                if let Some(y0) = reference_initial {
                    bench = bench.with_reference_initial(y0.clone())?;
                }
                bench.save(&self.out.join(format!("bilinear-{}.json", self.problem_hash())))?;
                ProblemDocument::from_bilinear(&bench, *horizon, *beta, *alpha)?
            }
            ProblemConfig::Lqr {
                a,
                b,
                q1,
                q2,
                horizon,
                beta,
                alpha,
                center,
            } => {
                let n = a.len();
                let m = b.first().map_or(0, Vec::len);
                let a = matrix("a", a, n, n)?;
                let b = matrix("b", b, n, m)?;
                let sys = AffineBilinearSystem::linear(a, b)?;
                let eye = rows(&DMatrix::identity(n, n));
                ProblemDocument {
                    drift: rows(&sys.drift_matrix),
                    drift_offset: vec![0.0; n],
                    input_vectors: sys.input_vectors.iter().map(|v| v.as_slice().to_vec()).collect(),
                    input_matrices: sys.input_matrices.iter().map(rows).collect(),
                    horizon: *horizon,
                    beta: *beta,
                    alpha: *alpha,
                    q1: q1.clone().unwrap_or_else(|| eye.clone()),
                    q2: q2.clone().unwrap_or(eye),
                    target: vec![0.0; n],
                    terminal_target: vec![0.0; n],
                    center: center.clone(),
                }
            }
            ProblemConfig::Custom { spec_file } => read_json(spec_file)?,
        };
        doc.problem()?;
        write_json(&path, &doc)?;
        log::info!("assemble: wrote {}", path.display());
        Ok(doc)
    }

    fn load_problem(&self) -> Result<(ProblemDocument, ProblemSpec)> {
        let path = self.problem_path();
        if !path.exists() {
            return Err(self.missing(path, "assemble"));
        }
        let doc: ProblemDocument = read_json(&path)?;
        let spec = doc.problem()?;
        Ok((doc, spec))
    }

    pub fn ensemble(&self) -> Result<EnsembleSet> {
        let (doc, _) = self.load_problem()?;
        let path = self.ensemble_path();
        if path.exists() && !self.force {
            log::info!("ensemble: using cached {}", path.display());
            return self.load_ensemble();
        }
        let e = &self.config.ensemble;
        let set = generate_ensemble(&doc.center, e.total, e.radius, self.config.seed, e.train_count)?;
        write_json(&path, &set)?;
        log::info!("ensemble: wrote {} ({} points)", path.display(), set.len());
        Ok(set)
    }

    fn load_ensemble(&self) -> Result<EnsembleSet> {
        let path = self.ensemble_path();
        if !path.exists() {
            return Err(self.missing(path, "ensemble"));
        }
        let set: EnsembleSet = read_json(&path)?;
        set.validate()?;
        Ok(set)
    }

    pub fn grid(&self, spec: &ProblemSpec) -> Result<TimeGrid> {
        TimeGrid::uniform(spec.horizon, self.config.grid.n_steps)
    }

    /// Untrained model and its initial parameters.
    pub fn initial_model(&self, spec: &ProblemSpec) -> Result<(StoredModel, ThetaVector)> {
        let terminal = TerminalQuadratic::from_problem(spec);
        match &self.config.model {
            ModelConfig::ResidualNet { hidden, activation } => {
                let m = ResidualNetModel::new(terminal, spec.horizon, hidden, *activation)?;
                let theta = m.init_theta(self.config.seed);
                Ok((StoredModel::ResidualNet(m), theta))
            }
            ModelConfig::PartitionPoly { epsilon, half_width } => {
                let skeleton = PartitionSkeleton::build(*epsilon, spec.state_dim(), *half_width)?;
                let m = PartitionPolyModel::new(skeleton, terminal, spec.horizon)?;
                let theta = vec![0.0; crate::models::ValueModel::n_params(&m)];
                Ok((StoredModel::PartitionPoly(m), theta))
            }
        }
    }

    /// Trains every penalty configuration that has no cached model.
    pub fn train(&self) -> Result<Vec<TrainSummary>> {
        let (_, spec) = self.load_problem()?;
        let set = self.load_ensemble()?;
        let grid = self.grid(&spec)?;
        let mut out = Vec::new();
        for pen in &self.config.penalties {
            out.push(self.train_one(&spec, &set, &grid, pen)?);
        }
        Ok(out)
    }

    fn train_one(&self, spec: &ProblemSpec, set: &EnsembleSet, grid: &TimeGrid, pen: &PenaltyConfig) -> Result<TrainSummary> {
        let hash = self.train_hash(pen);
        let model_path = self.model_path(pen);
        let summary_path = self.out.join(format!("train-{hash}.json"));
        if model_path.exists() && summary_path.exists() && !self.force {
            log::info!("train (γ₁ = {}, γ₂ = {}): using cached {}", pen.gamma1, pen.gamma2, model_path.display());
            return read_json(&summary_path);
        }
        let (model, theta0) = self.initial_model(spec)?;
        let mut problem = LearningProblem::new(spec, model.as_value_model(), *pen, grid.clone(), set.training_members())?;
        problem.solver = self.config.solver;
        problem.convention = self.config.phi_terminal_convention;
        let mut records = Vec::new();
        let result = bb_minimize(
            |theta: &[f64]| {
                let (bundle, grad) = problem.value_and_gradient(theta)?;
                let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                log::debug!("evaluation {}: objective {:.6e}, |grad| {grad_norm:.3e}", records.len(), bundle.objective);
                records.push(TraceRecord {
                    iter: records.len(),
                    objective: bundle.objective,
                    grad_norm,
                    cost: bundle.cost,
                    value_penalty: bundle.value_penalty,
                    gradient_penalty: bundle.gradient_penalty,
                    tikhonov: bundle.tikhonov,
                });
                Ok((bundle.objective, grad))
            },
            &theta0,
            &self.config.training,
        )?;
        log::info!(
            "train (γ₁ = {}, γ₂ = {}): {} iterations, objective {:.6e}, |grad| {:.3e}",
            pen.gamma1,
            pen.gamma2,
            result.iterations,
            result.f,
            result.grad_norm
        );
        write_trace_jsonl(&self.out.join(format!("trace-{hash}.jsonl")), &records)?;
        write_trace_csv(&self.out.join(format!("bb-{hash}.csv")), &result.trace)?;
        save_model(&model_path, &model, &result.x)?;
        let summary = TrainSummary {
            penalties: *pen,
            config_hash: hash,
            iterations: result.iterations,
            stop_reason: result.reason,
            objective: result.f,
            grad_norm: result.grad_norm,
            n_params: result.x.len(),
        };
        write_json(&summary_path, &summary)?;
        Ok(summary)
    }

    pub fn load_trained(&self, pen: &PenaltyConfig) -> Result<(StoredModel, ThetaVector)> {
        let path = self.model_path(pen);
        if !path.exists() {
            return Err(self.missing(path, "train"));
        }
        load_model(&path)
    }

    /// Open-loop reference solutions for every ensemble member.
    pub fn oracle(&self) -> Result<usize> {
        let (_, spec) = self.load_problem()?;
        let set = self.load_ensemble()?;
        let grid = self.grid(&spec)?;
        let dir = self.oracle_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let todo: Vec<usize> = (0..set.len())
            .filter(|&i| self.force || !dir.join(format!("{}.json", Self::member_stem(i))).exists())
            .collect();
        log::info!("oracle: {} of {} members to solve", todo.len(), set.len());
        todo.par_iter()
            .map(|&i| {
                let sol = solve_open_loop(&spec, &set.point(i), None, &grid, &self.config.oracle, &self.config.solver)
                    .map_err(|e| Error::member(i, e))?;
                save_open_loop(&dir, &Self::member_stem(i), &sol)
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(todo.len())
    }

    fn load_oracle(&self, spec: &ProblemSpec, grid: &TimeGrid, members: &[usize]) -> Result<Vec<OracleBundle>> {
        let dir = self.oracle_dir();
        members
            .iter()
            .map(|&i| {
                let stem = Self::member_stem(i);
                if !dir.join(format!("{stem}.json")).exists() {
                    return Err(self.missing(dir.join(format!("{stem}.json")), "oracle"));
                }
                OracleBundle::from_solution(spec, &load_open_loop(&dir, &stem, grid)?)
            })
            .collect()
    }

    /// Metrics for every trained configuration on both splits.
    pub fn validate(&self) -> Result<Vec<MetricsReport>> {
        let (_, spec) = self.load_problem()?;
        let set = self.load_ensemble()?;
        let grid = self.grid(&spec)?;
        let mut reports = Vec::new();
        for pen in &self.config.penalties {
            let (model, theta) = self.load_trained(pen)?;
            let vm = model.as_value_model();
            for split in [Split::Train, Split::Validation] {
                let members = set.indices(split);
                if members.is_empty() {
                    continue;
                }
                let oracle = self.load_oracle(&spec, &grid, &members)?;
                let learned = members
                    .par_iter()
                    .zip(&oracle)
                    .map(|(&i, o)| {
                        LearnedBundle::rollout(&spec, vm, &theta, &set.point(i), &o.y, &self.config.solver)
                            .map_err(|e| Error::member(i, e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let report = MetricsReport::new(split, pen.gamma1, pen.gamma2, &learned, &oracle, self.train_hash(pen))?;
                let path = self.metrics_path(pen, split);
                report.save(&path)?;
                log::info!("validate: wrote {}", path.display());
                reports.push(report);
            }
        }
        Ok(reports)
    }

    /// Tables over all configured penalties from the stored metric reports.
    pub fn report(&self) -> Result<ReportOutput> {
        let mut reports = Vec::new();
        for split in [Split::Train, Split::Validation] {
            for pen in &self.config.penalties {
                let path = self.metrics_path(pen, split);
                if path.exists() {
                    reports.push(MetricsReport::load(&path)?);
                } else if split == Split::Train || self.config.ensemble.total > self.config.ensemble.train_count {
                    return Err(self.missing(path, "validate"));
                }
            }
        }
        let tables = emit_tables(&reports)?;
        let hash = self.report_hash();
        let markdown = self.out.join(format!("tables-{hash}.md"));
        let mut md = String::new();
        let mut csv = Vec::new();
        for t in &tables {
            md.push_str(&t.to_markdown());
            md.push('\n');
            let path = self.out.join(format!("tables-{hash}-{}.csv", t.split));
            fs::write(&path, t.to_csv()?).map_err(|e| Error::io(&path, e))?;
            csv.push(path);
        }
        fs::write(&markdown, md).map_err(|e| Error::io(&markdown, e))?;
        Ok(ReportOutput { markdown, csv, reports })
    }

    /// Compares `⟨∇𝒥_N(θ₀), δθ⟩` with central differences of `𝒥_N` for
    /// random unit directions at the initial parameters, for every
    /// configured penalty.
    pub fn gradcheck(&self, directions: Option<usize>) -> Result<GradcheckReport> {
        let (_, spec) = self.load_problem()?;
        let set = self.load_ensemble()?;
        let grid = self.grid(&spec)?;
        let gc = self.config.gradcheck;
        let n_dirs = directions.unwrap_or(gc.directions);
        let members: Vec<DVector<f64>> = set
            .training_members()
            .into_iter()
            .take(gc.members)
            .map(|(y0, _)| y0)
            .collect();
        let w = 1.0 / members.len() as f64;
        let members: Vec<(DVector<f64>, f64)> = members.into_iter().map(|y| (y, w)).collect();
        let (model, theta) = self.initial_model(&spec)?;
        let mut rows = Vec::new();
        for pen in &self.config.penalties {
            let mut problem =
                LearningProblem::new(&spec, model.as_value_model(), *pen, grid.clone(), members.clone())?;
            problem.solver = self.config.solver;
            problem.convention = self.config.phi_terminal_convention;
            let grad = problem.gradient(&theta)?;
            let dirs = random_unit_directions(theta.len(), n_dirs, self.config.seed);
            for (d, dir) in dirs.iter().enumerate() {
                let (analytic, fd) = directional_check(&problem, &theta, &grad, dir, gc.fd_step)?;
                rows.push(GradcheckRow {
                    gamma1: pen.gamma1,
                    gamma2: pen.gamma2,
                    direction: d,
                    analytic,
                    finite_difference: fd,
                    rel_error: (analytic - fd).abs() / fd.abs().max(f64::MIN_POSITIVE),
                });
            }
        }
        let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        let report = GradcheckReport {
            n_steps: grid.n_steps(),
            tolerance: gc.tolerance,
            rows,
            worst,
        };
        self.ensure_out()?;
        write_json(&self.out.join(format!("gradcheck-{}.json", self.ensemble_hash())), &report)?;
        Ok(report)
    }
}

/// `count` directions uniform on the unit sphere in `ℝ^dim`.
pub fn random_unit_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ec);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// `(⟨∇𝒥, d⟩, (𝒥(θ + εd) − 𝒥(θ − εd)) / 2ε)`.
pub fn directional_check(
    problem: &LearningProblem<'_>,
    theta: &[f64],
    grad: &[f64],
    dir: &[f64],
    step: f64,
) -> Result<(f64, f64)> {
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(dir).map(|(t, d)| t + s * d).collect() };
    let (fp, _) = problem.objective(&shifted(step))?;
    let (fm, _) = problem.objective(&shifted(-step))?;
    let analytic = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
    Ok((analytic, (fp - fm) / (2.0 * step)))
}

/// Runs `f` on a rayon pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 7
output_dir = "unused"

[problem]
kind = "bilinear"
n_modes = 3
horizon = 1.0
beta = 0.1
alpha = 0.25

[grid]
n_steps = 20

[model]
family = "residual_net"
hidden = [5]

[[penalties]]
gamma1 = 0.1
gamma2 = 0.1
gamma_eps = 0.0

[ensemble]
total = 6
train_count = 3
radius = 0.5

[training]
max_iters = 5

[oracle]
max_iters = 200
"#;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.training.max_iters, 5);
        assert_eq!(cfg.oracle.grad_tol, 1e-6);
        assert_eq!(cfg.phi_terminal_convention, PhiTerminalConvention::AtHorizon);
        let bad = SMALL.replace("n_steps = 20", "n_steps = 20\nwidth = 3");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = SMALL.replace("max_iters = 5", "max_iters = 5\nstep = 1.0");
        assert!(RunConfig::from_toml_str(&bad).is_err());
        let bad = SMALL.replace("hidden = [5]", "hidden = [5]\nwidth = 3");
        assert!(RunConfig::from_toml_str(&bad).is_err());
        let bad = SMALL.replace("train_count = 3", "train_count = 9");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn hashes_track_their_inputs() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let a = Experiment::new(cfg.clone()).unwrap();
        let mut other = cfg.clone();
        other.oracle.max_iters = 300;
        let b = Experiment::new(other).unwrap();
        let pen = cfg.penalties[0];
        assert_eq!(a.train_hash(&pen), b.train_hash(&pen));
        assert_ne!(a.oracle_hash(), b.oracle_hash());
        let mut reseeded = cfg;
        reseeded.seed = 8;
        let c = Experiment::new(reseeded).unwrap();
        assert_ne!(a.ensemble_hash(), c.ensemble_hash());
        assert_eq!(a.problem_hash(), c.problem_hash());
    }

    #[test]
    fn downstream_stage_names_its_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let exp = Experiment::new(cfg).unwrap().with_output_dir(dir.path());
        match exp.ensemble() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "assemble"),
            other => panic!("unexpected {other:?}"),
        }
        exp.assemble().unwrap();
        match exp.train() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "ensemble"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directions_are_unit_and_reproducible() {
        let a = random_unit_directions(12, 4, 3);
        assert_eq!(a, random_unit_directions(12, 4, 3));
        for d in &a {
            assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
