//! Validation statistics comparing learned feedback rollouts with open-loop
//! reference solutions, and their tabulation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdjointTrajectory, ControlTrajectory, StateTrajectory, TimeGrid, Trajectory};
use crate::learning::{cost_to_go, running_cost};
use crate::models::ValueModel;
use crate::ode::{integrate_adjoint, integrate_closed_loop, ClosedLoopNode, SolverConfig};
use crate::oracle::OpenLoopSolution;
use crate::problem::{ProblemSpec, Split};

/// Quantities of the learned closed loop for one initial condition, plus
/// the learned value function evaluated along the reference trajectory.
#[derive(Debug, Clone)]
pub struct LearnedBundle {
    pub y: StateTrajectory,
    pub p: AdjointTrajectory,
    pub u: ControlTrajectory,
    pub cost: f64,
    /// `J_t(Y_θ, U_θ)`
    pub cost_to_go: Vec<f64>,
    /// `V_θ(t, Y_θ(t))`
    pub value: Vec<f64>,
    /// `∂_yV_θ(t, Y_θ(t))`
    pub grad_value: Trajectory,
    /// `V_θ(t, Ȳ(t))`
    pub value_on_oracle: Vec<f64>,
    /// `∂_yV_θ(t, Ȳ(t))`
    pub grad_on_oracle: Trajectory,
}

impl LearnedBundle {
    /// Simulates the learned feedback from `y0` and evaluates everything the
    /// metrics need.
    pub fn rollout(
        spec: &ProblemSpec,
        model: &dyn ValueModel,
        theta: &[f64],
        y0: &nalgebra::DVector<f64>,
        oracle_y: &StateTrajectory,
        solver: &SolverConfig,
    ) -> Result<Self> {
        let grid = oracle_y.grid();
        let y = integrate_closed_loop(spec, model, theta, y0, grid, solver)?;
        let p = integrate_adjoint(spec, model, theta, &y)?;
        let nodes: Vec<ClosedLoopNode> = (0..grid.n_nodes())
            .map(|k| ClosedLoopNode::evaluate(spec, model, theta, grid.time(k), &y.vector(k)))
            .collect();
        let u = Trajectory::from_fn(grid, spec.control_dim(), |k, _| nodes[k].control.clone());
        let cost = running_cost(spec, &y, &u)?;
        let ctg = cost_to_go(spec, &y, &u)?;
        let value = nodes.iter().map(|nd| nd.value.value).collect();
        let grad_value = Trajectory::from_fn(grid, spec.state_dim(), |k, _| nodes[k].value.grad_y.clone());
        let on_oracle: Vec<_> = (0..grid.n_nodes())
            .map(|k| model.eval_grad(theta, grid.time(k), &oracle_y.vector(k)))
            .collect();
        Ok(Self {
            y,
            p,
            u,
            cost,
            cost_to_go: ctg,
            value,
            grad_value,
            value_on_oracle: on_oracle.iter().map(|(v, _)| *v).collect(),
            grad_on_oracle: Trajectory::from_fn(grid, spec.state_dim(), |k, _| on_oracle[k].1.clone()),
        })
    }
}

/// Reference triple `(Ȳ, Ū, P̄)` with `J(Ȳ, Ū)` and `J_t(Ȳ, Ū)`.
#[derive(Debug, Clone)]
pub struct OracleBundle {
    pub y: StateTrajectory,
    pub p: AdjointTrajectory,
    pub u: ControlTrajectory,
    pub cost: f64,
    pub cost_to_go: Vec<f64>,
}

impl OracleBundle {
    pub fn from_solution(spec: &ProblemSpec, sol: &OpenLoopSolution) -> Result<Self> {
        Ok(Self {
            y: sol.y.clone(),
            p: sol.p.clone(),
            u: sol.u.clone(),
            cost: sol.cost,
            cost_to_go: sol.cost_to_go(spec)?,
        })
    }
}

/// The nine ratios; all except `err_cal_j` are nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `(ΣJ(Y_θ,U_θ) − ΣJ(Ȳ,Ū)) / ΣJ(Ȳ,Ū)`
    pub err_cal_j: f64,
    /// `Σ(J(Y_θ,U_θ) − J(Ȳ,Ū))² / ΣJ(Ȳ,Ū)²`
    pub err_j: f64,
    pub err_y: f64,
    pub err_p: f64,
    pub err_u: f64,
    /// `Σ∫|V_θ(t,Y_θ) − J_t(Y_θ,U_θ)|² / Σ∫|J_t(Y_θ,U_θ)|²`
    pub err_v: f64,
    /// `Σ∫|∂_yV_θ(t,Y_θ) − P_θ|² / Σ∫|P_θ|²`
    pub err_dv: f64,
    /// `Σ∫|V_θ(t,Ȳ) − J_t(Ȳ,Ū)|² / Σ∫|J_t(Ȳ,Ū)|²`
    pub d_v: f64,
    /// `Σ∫|∂_yV_θ(t,Ȳ) − P̄|² / Σ∫|P̄|²`
    pub d_dv: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 9] = [
        "err_cal_j",
        "err_y",
        "err_p",
        "err_u",
        "err_j",
        "err_v",
        "err_dv",
        "d_v",
        "d_dv",
    ];

    /// Values in [`Metrics::NAMES`] order (the column order of the tables).
    pub fn values(&self) -> [f64; 9] {
        [
            self.err_cal_j,
            self.err_y,
            self.err_p,
            self.err_u,
            self.err_j,
            self.err_v,
            self.err_dv,
            self.d_v,
            self.d_dv,
        ]
    }
}

/// Correctly rounded sum of `values` (Shewchuk's partials), so the result
/// does not depend on the order of the summands.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the partials (largest last) to nearest, with the half-way fix-up
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

fn ratio(name: &str, num: Vec<f64>, den: Vec<f64>) -> Result<f64> {
    let d = exact_sum(den);
    if !(d > 0.0) {
        return Err(Error::Metric(format!("{name}: reference denominator is {d}")));
    }
    Ok(exact_sum(num) / d)
}

fn scalar_sq(grid: &TimeGrid, a: &[f64], b: Option<&[f64]>) -> f64 {
    let v: Vec<f64> = match b {
        Some(b) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect(),
        None => a.iter().map(|x| x * x).collect(),
    };
    grid.integrate(&v)
}

/// Computes all nine statistics over one split. Member order does not
/// affect the result.
pub fn compute_metrics(learned: &[LearnedBundle], oracle: &[OracleBundle]) -> Result<Metrics> {
    if learned.is_empty() || learned.len() != oracle.len() {
        return Err(Error::Contract(format!(
            "metrics need matching non-empty member lists, got {} learned and {} reference",
            learned.len(),
            oracle.len()
        )));
    }
    for (l, o) in learned.iter().zip(oracle) {
        let grid = o.y.grid();
        let same = [&l.y, &l.p, &l.u, &l.grad_value, &l.grad_on_oracle, &o.p, &o.u]
            .iter()
            .all(|t| t.grid().same_as(grid));
        let lens = [l.cost_to_go.len(), l.value.len(), l.value_on_oracle.len(), o.cost_to_go.len()]
            .iter()
            .all(|n| *n == grid.n_nodes());
        if !same || !lens {
            return Err(Error::Contract("learned and reference data must share one grid".into()));
        }
    }
    let pairs = || learned.iter().zip(oracle);
    let cost_gap = exact_sum(pairs().map(|(l, _)| l.cost)) - exact_sum(pairs().map(|(_, o)| o.cost));
    let oracle_total = exact_sum(pairs().map(|(_, o)| o.cost));
    if !(oracle_total.abs() > 0.0) {
        return Err(Error::Metric("err_cal_j: reference costs sum to zero".into()));
    }
    let g = |o: &OracleBundle| o.y.grid().clone();
    Ok(Metrics {
        err_cal_j: cost_gap / oracle_total,
        err_j: ratio(
            "err_j",
            pairs().map(|(l, o)| (l.cost - o.cost).powi(2)).collect(),
            pairs().map(|(_, o)| o.cost * o.cost).collect(),
        )?,
        err_y: ratio(
            "err_y",
            pairs().map(|(l, o)| l.y.l2_dist_sq(&o.y)).collect(),
            pairs().map(|(_, o)| o.y.l2_norm_sq()).collect(),
        )?,
        err_p: ratio(
            "err_p",
            pairs().map(|(l, o)| l.p.l2_dist_sq(&o.p)).collect(),
            pairs().map(|(_, o)| o.p.l2_norm_sq()).collect(),
        )?,
        err_u: ratio(
            "err_u",
            pairs().map(|(l, o)| l.u.l2_dist_sq(&o.u)).collect(),
            pairs().map(|(_, o)| o.u.l2_norm_sq()).collect(),
        )?,
        err_v: ratio(
            "err_v",
            pairs()
                .map(|(l, o)| scalar_sq(&g(o), &l.value, Some(&l.cost_to_go)))
                .collect(),
            pairs().map(|(l, o)| scalar_sq(&g(o), &l.cost_to_go, None)).collect(),
        )?,
        err_dv: ratio(
            "err_dv",
            pairs().map(|(l, _)| l.grad_value.l2_dist_sq(&l.p)).collect(),
            pairs().map(|(l, _)| l.p.l2_norm_sq()).collect(),
        )?,
        d_v: ratio(
            "d_v",
            pairs()
                .map(|(l, o)| scalar_sq(&g(o), &l.value_on_oracle, Some(&o.cost_to_go)))
                .collect(),
            pairs().map(|(_, o)| scalar_sq(&g(o), &o.cost_to_go, None)).collect(),
        )?,
        d_dv: ratio(
            "d_dv",
            pairs().map(|(l, o)| l.grad_on_oracle.l2_dist_sq(&o.p)).collect(),
            pairs().map(|(_, o)| o.p.l2_norm_sq()).collect(),
        )?,
    })
}

/// Report document for one trained configuration on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub gamma1: f64,
    pub gamma2: f64,
    pub metrics: Metrics,
    pub config_hash: String,
    /// Members whose learned cost is below the reference cost.
    pub learned_below_reference: usize,
    pub members: usize,
}

impl MetricsReport {
    pub fn new(
        split: Split,
        gamma1: f64,
        gamma2: f64,
        learned: &[LearnedBundle],
        oracle: &[OracleBundle],
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let metrics = compute_metrics(learned, oracle)?;
        Ok(Self {
            split,
            gamma1,
            gamma2,
            metrics,
            config_hash: config_hash.into(),
            learned_below_reference: learned.iter().zip(oracle).filter(|(l, o)| l.cost < o.cost).count(),
            members: learned.len(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Formats a ratio as a percentage with two significant digits, e.g.
/// `0.0015 → "0.15 %"`, `0.79 → "79 %"`.
pub fn format_percent(ratio: f64) -> String {
    let v = ratio * 100.0;
    if v == 0.0 {
        return "0 %".into();
    }
    if !v.is_finite() {
        return format!("{v} %");
    }
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(exp - 1);
    let rounded = (v / scale).round() * scale;
    // rounding may carry into the next decade (9.96 → 10)
    let exp = rounded.abs().log10().floor() as i32;
    let decimals = (1 - exp).max(0) as usize;
    format!("{rounded:.decimals$} %")
}

pub const TABLE_HEADERS: [&str; 9] = ["Err_calJ", "Err_Y", "Err_P", "Err_U", "Err_J", "Err_V", "Err_dV", "d_V", "d_dV"];

/// Penalty rows by metric columns, with formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub split: Split,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<String>,
}

fn penalty_label(gamma1: f64, gamma2: f64) -> String {
    format!("gamma1 = {gamma1}, gamma2 = {gamma2}")
}

/// Builds one table per split present in `reports`, in first-seen order.
pub fn emit_tables(reports: &[MetricsReport]) -> Result<Vec<MetricsTable>> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to tabulate".into()));
    }
    let mut tables: Vec<MetricsTable> = Vec::new();
    for r in reports {
        let row = TableRow {
            label: penalty_label(r.gamma1, r.gamma2),
            cells: r.metrics.values().iter().map(|v| format_percent(*v)).collect(),
        };
        match tables.iter_mut().find(|t| t.split == r.split) {
            Some(t) => t.rows.push(row),
            None => tables.push(MetricsTable {
                split: r.split,
                rows: vec![row],
            }),
        }
    }
    Ok(tables)
}

impl MetricsTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "### {} set\n", self.split);
        let _ = writeln!(out, "| Penalty | {} |", TABLE_HEADERS.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(TABLE_HEADERS.len()));
        for row in &self.rows {
            let _ = writeln!(out, "| {} | {} |", row.label, row.cells.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["split", "penalty"];
        header.extend(TABLE_HEADERS);
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        let split = self.split.to_string();
        for row in &self.rows {
            let mut rec = vec![split.as_str(), row.label.as_str()];
            rec.extend(row.cells.iter().map(String::as_str));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected: Vec<&str> = ["split", "penalty"].into_iter().chain(TABLE_HEADERS).collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!("unexpected table header {headers:?}")));
        }
        let mut split = None;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let s: Split = match &rec[0] {
                "train" => Split::Train,
                "validation" => Split::Validation,
                other => return Err(Error::Parse(format!("unknown split `{other}`"))),
            };
            if split.is_some_and(|p| p != s) {
                return Err(Error::Parse("a table holds a single split".into()));
            }
            split = Some(s);
            rows.push(TableRow {
                label: rec[1].to_string(),
                cells: rec.iter().skip(2).map(str::to_string).collect(),
            });
        }
        let split = split.ok_or_else(|| Error::Parse("empty table".into()))?;
        Ok(Self { split, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.0), "0 %");
        assert_eq!(format_percent(0.0015), "0.15 %");
        assert_eq!(format_percent(0.79), "79 %");
        assert_eq!(format_percent(0.024), "2.4 %");
        assert_eq!(format_percent(0.000003), "0.00030 %");
        assert_eq!(format_percent(0.0996), "10 %");
        assert_eq!(format_percent(1.234), "120 %");
        assert_eq!(format_percent(-0.0036), "-0.36 %");
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let v = [1e16, 1.0, -1e16, 3.5, 1e-3, -2.25e10, 2.25e10];
        let mut w = v;
        w.reverse();
        assert_eq!(exact_sum(v), 4.501);
        assert_eq!(exact_sum(v).to_bits(), exact_sum(w).to_bits());
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }
}
