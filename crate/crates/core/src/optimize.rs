//! Barzilai–Borwein gradient descent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BBVariant {
    /// `sᵀs / sᵀr`
    Bb1,
    /// `sᵀr / rᵀr`
    Bb2,
    /// BB1 on odd, BB2 on even iterations
    #[default]
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BBConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_init: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub variant: BBVariant,
    /// Reject a step whose objective exceeds the maximum of the last
    /// `nonmonotone_window` accepted values (halving the step instead).
    /// Zero disables the check.
    pub nonmonotone_window: usize,
}

impl Default for BBConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-6,
            step_init: 1e-3,
            step_min: 1e-10,
            step_max: 1e3,
            variant: BBVariant::Alternating,
            nonmonotone_window: 0,
        }
    }
}

impl BBConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters >= 1
            && self.grad_tol >= 0.0
            && self.step_min > 0.0
            && self.step_min <= self.step_init
            && self.step_init <= self.step_max;
        if !ok {
            return Err(Error::Config(format!(
                "BB settings need max_iters >= 1 and 0 < step_min <= step_init <= step_max, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBTraceRow {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    MaxIters,
    /// Every halved trial was finite but above the nonmonotone reference:
    /// the gradient no longer gives descent at the resolution of `f`.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BBResult {
    /// Best iterate seen.
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub reason: StopReason,
    pub trace: Vec<BBTraceRow>,
}

const MAX_HALVINGS: usize = 30;

/// Minimizes `f` from `x0`; `eval` returns `(f(x), ∇f(x))`.
///
/// A trial point whose evaluation fails or is non-finite is treated as
/// infinitely bad and the step is halved, up to 30 times. A finite trial
/// above the nonmonotone reference is halved the same way; if every trial
/// was finite the run stops with [`StopReason::Stalled`] instead of failing.
pub fn bb_minimize(
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    cfg: &BBConfig,
) -> Result<BBResult> {
    cfg.validate()?;
    let (mut f, mut g) = eval(x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer("objective is not finite at the initial point".into()));
    }
    let mut x = x0.to_vec();
    let mut gnorm = dot(&g, &g).sqrt();
    let mut trace = vec![BBTraceRow {
        iter: 0,
        f,
        grad_norm: gnorm,
        step: 0.0,
    }];
    let mut best = (x.clone(), f, gnorm);
    let mut history = vec![f];
    let mut step = cfg.step_init;
    let mut iter = 0;
    let mut reason = StopReason::MaxIters;
    while iter < cfg.max_iters {
        if gnorm <= cfg.grad_tol {
            reason = StopReason::GradTol;
            break;
        }
        iter += 1;
        let reference = if cfg.nonmonotone_window > 0 {
            let start = history.len().saturating_sub(cfg.nonmonotone_window);
            history[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            f64::INFINITY
        };
        let mut tau = step;
        let mut accepted = None;
        let mut all_finite = true;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - tau * gi).collect();
            match eval(&trial) {
                Ok((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                    if ft <= reference {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                _ => all_finite = false,
            }
            tau *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if all_finite {
                iter -= 1;
                reason = StopReason::Stalled;
                break;
            }
            return Err(Error::Optimizer(format!(
                "no acceptable trial point after {MAX_HALVINGS} step halvings at iteration {iter} \
                 (f = {f:e}, |grad| = {gnorm:e}, last step {tau:e})"
            )));
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let r: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss = dot(&s, &s);
        let sr = dot(&s, &r);
        let rr = dot(&r, &r);
        let use_bb1 = match cfg.variant {
            BBVariant::Bb1 => true,
            BBVariant::Bb2 => false,
            BBVariant::Alternating => iter % 2 == 1,
        };
        let raw = if use_bb1 { ss / sr } else { sr / rr };
        // nonpositive curvature along s: grow the accepted step geometrically
        step = if raw.is_finite() && raw > 0.0 {
            raw.clamp(cfg.step_min, cfg.step_max)
        } else {
            (2.0 * tau).clamp(cfg.step_min, cfg.step_max)
        };
        x = xn;
        f = fn_;
        g = gn;
        gnorm = dot(&g, &g).sqrt();
        history.push(f);
        trace.push(BBTraceRow {
            iter,
            f,
            grad_norm: gnorm,
            step: tau,
        });
        if f < best.1 {
            best = (x.clone(), f, gnorm);
        }
        if gnorm <= cfg.grad_tol {
            reason = StopReason::GradTol;
            best = (x.clone(), f, gnorm);
            break;
        }
    }
    Ok(BBResult {
        x: best.0,
        f: best.1,
        grad_norm: best.2,
        iterations: iter,
        reason,
        trace,
    })
}

pub fn write_trace_csv(path: &Path, trace: &[BBTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for row in trace {
        w.serialize(row)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(diag: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let g: Vec<f64> = x.iter().zip(&diag).map(|(xi, d)| d * xi).collect();
            Ok((0.5 * dot(x, &g), g))
        }
    }

    #[test]
    fn identity_quadratic_converges_fast() {
        let cfg = BBConfig {
            step_init: 0.5,
            grad_tol: 1e-12,
            ..BBConfig::default()
        };
        let res = bb_minimize(quadratic(vec![1.0; 4]), &[1.0, -2.0, 3.0, 0.5], &cfg).unwrap();
        assert!(res.iterations <= 3, "{}", res.iterations);
        assert!(res.x.iter().all(|v| v.abs() < 1e-12));
        // the second step uses the BB length 1
        assert!((res.trace[2].step - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let cfg = BBConfig {
            step_init: 0.01,
            grad_tol: 1e-10,
            ..BBConfig::default()
        };
        let res = bb_minimize(quadratic(vec![1.0, 100.0]), &[1.0, 1.0], &cfg).unwrap();
        assert!(res.iterations <= 200);
        assert!(dot(&res.x, &res.x).sqrt() <= 1e-8);
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let mut calls = 0;
        let res = bb_minimize(
            |x: &[f64]| {
                calls += 1;
                Ok((1.0, vec![0.0; x.len()]))
            },
            &[0.3, 0.4],
            &BBConfig::default(),
        )
        .unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x, vec![0.3, 0.4]);
        assert_eq!(calls, 1);
    }

    #[test]
    fn non_finite_trials_are_halved() {
        // f is infinite for x > 1.5, the first trial lands at x = 2 - 4·(-...)
        let eval = |x: &[f64]| {
            if x[0] > 1.5 {
                Ok((f64::INFINITY, vec![0.0]))
            } else {
                Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
            }
        };
        let cfg = BBConfig {
            step_init: 10.0,
            max_iters: 50,
            grad_tol: 1e-9,
            ..BBConfig::default()
        };
        let res = bb_minimize(eval, &[0.0], &cfg).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-9);
        assert!(res.trace[1].step < 10.0);
    }

    #[test]
    fn wrong_gradient_stalls_under_the_window() {
        // the reported gradient points uphill, so no halving can decrease f
        let eval = |x: &[f64]| Ok((0.5 * x[0] * x[0], vec![-x[0]]));
        let cfg = BBConfig {
            nonmonotone_window: 1,
            ..BBConfig::default()
        };
        let res = bb_minimize(eval, &[1.0], &cfg).unwrap();
        assert_eq!(res.reason, StopReason::Stalled);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x, vec![1.0]);
    }

    #[test]
    fn window_keeps_quadratic_descent() {
        let cfg = BBConfig {
            step_init: 0.01,
            grad_tol: 1e-10,
            nonmonotone_window: 5,
            ..BBConfig::default()
        };
        let res = bb_minimize(quadratic(vec![1.0, 10.0, 100.0]), &[1.0, 1.0, 1.0], &cfg).unwrap();
        assert_eq!(res.reason, StopReason::GradTol);
        // each value stays below the maximum of the preceding window
        for w in res.trace.windows(6) {
            let reference = w[..5].iter().map(|r| r.f).fold(f64::NEG_INFINITY, f64::max);
            assert!(w[5].f <= reference);
        }
    }

    #[test]
    fn concave_region_grows_the_step() {
        // f = −½x² near 0 turns into a convex well for |x| > 1
        let eval = |x: &[f64]| {
            let v = x[0];
            if v.abs() < 1.0 {
                Ok((-0.5 * v * v, vec![-v]))
            } else {
                let d = v.abs() - 2.0;
                Ok((0.5 * d * d - 1.0, vec![d * v.signum()]))
            }
        };
        let cfg = BBConfig {
            step_init: 1e-3,
            grad_tol: 1e-9,
            max_iters: 200,
            ..BBConfig::default()
        };
        let res = bb_minimize(eval, &[0.01], &cfg).unwrap();
        assert_eq!(res.reason, StopReason::GradTol);
        assert!((res.x[0] - 2.0).abs() < 1e-8);
        assert!(res.trace[5].step >= 16.0 * 1e-3);
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = BBConfig {
            step_min: 1.0,
            step_init: 0.1,
            ..BBConfig::default()
        };
        assert!(bb_minimize(quadratic(vec![1.0]), &[1.0], &cfg).is_err());
    }
}
