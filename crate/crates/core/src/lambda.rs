//! Weight-decay paths and the validation-loss gradient in λ.
//!
//! The linearized optimum is unique for every λ > 0, so a solution for one λ
//! is a valid starting point for the next, and `dw*(λ)` is differentiable:
//! `d dw*/dλ = −(F + λI)⁻¹ dw*`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LqfError, Result};
use crate::kfac::KfacState;
use crate::linalg::cholesky_with_jitter;
use crate::quadratic::LinearizedProblem;
use crate::trainer::{train_from, OptimizerConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    FromScratch,
    WarmStart,
}

impl SolveMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveMethod::FromScratch => "from-scratch",
            SolveMethod::WarmStart => "warm-start",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub dw: DVector<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_error: Option<f64>,
    pub method: SolveMethod,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    pub points: Vec<LambdaPoint>,
}

impl LambdaPath {
    pub fn total_iterations(&self) -> usize {
        self.points.iter().map(|p| p.iterations).sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        w.write_record(["lambda", "train_loss", "val_loss", "val_error", "method", "iterations"])
            .map_err(|e| LqfError::Format(e.to_string()))?;
        for p in &self.points {
            w.write_record([
                format!("{:?}", p.lambda),
                format!("{:?}", p.train_loss),
                fmt(p.val_loss),
                fmt(p.val_error),
                p.method.as_str().to_string(),
                p.iterations.to_string(),
            ])
            .map_err(|e| LqfError::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| LqfError::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// `1/(2|V|)·Σ‖g_v·dw − r_v‖²`, no ridge term.
pub fn validation_loss(validation: &LinearizedProblem, dw: &DVector<f64>) -> f64 {
    let misfit = validation.jacobian() * dw - validation.residual();
    misfit.norm_squared() / (2.0 * validation.samples() as f64)
}

fn validation_gradient(validation: &LinearizedProblem, dw: &DVector<f64>) -> DVector<f64> {
    let misfit = validation.jacobian() * dw - validation.residual();
    validation.jacobian().tr_mul(&misfit) / validation.samples() as f64
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(LqfError::contract("lambda path is empty"));
    }
    if let Some(l) = lambdas.iter().find(|&&l| !(l > 0.0) || !l.is_finite()) {
        return Err(LqfError::contract(format!("lambda values must be > 0, got {l}")));
    }
    let up = lambdas.windows(2).all(|w| w[0] < w[1]);
    let down = lambdas.windows(2).all(|w| w[0] > w[1]);
    if !(up || down) {
        return Err(LqfError::contract("lambda path must be strictly monotone"));
    }
    Ok(())
}

fn solve_path(
    problem: &LinearizedProblem,
    validation: Option<&LinearizedProblem>,
    lambdas: &[f64],
    config: &OptimizerConfig,
    kfac: Option<&KfacState>,
    warm: bool,
) -> Result<LambdaPath> {
    check_lambdas(lambdas)?;
    if let Some(v) = validation {
        check_len("validation parameter count", problem.dim(), v.dim())?;
    }
    let mut points: Vec<LambdaPoint> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let p = problem.with_lambda(lambda)?;
        let start = if warm { points.last().map(|q| q.dw.clone()) } else { None };
        let method = if start.is_some() { SolveMethod::WarmStart } else { SolveMethod::FromScratch };
        let traj = train_from(&p, config, kfac, TrainOptions { start: start.as_ref(), reference: None })?;
        let dw = traj.final_dw;
        let val_error = match validation {
            Some(v) if v.labels().is_some() => Some(v.error_rate(&dw)?),
            _ => None,
        };
        points.push(LambdaPoint {
            lambda,
            train_loss: p.loss(&dw),
            val_loss: validation.map(|v| validation_loss(v, &dw)),
            val_error,
            method,
            iterations: traj.steps,
            dw,
        });
    }
    Ok(LambdaPath { points })
}

/// Trains at each λ in turn, starting from the previous λ's solution.
pub fn warm_start_path(
    problem: &LinearizedProblem,
    validation: Option<&LinearizedProblem>,
    lambdas: &[f64],
    config: &OptimizerConfig,
    kfac: Option<&KfacState>,
) -> Result<LambdaPath> {
    solve_path(problem, validation, lambdas, config, kfac, true)
}

/// Trains at each λ from `dw = 0`.
pub fn cold_path(
    problem: &LinearizedProblem,
    validation: Option<&LinearizedProblem>,
    lambdas: &[f64],
    config: &OptimizerConfig,
    kfac: Option<&KfacState>,
) -> Result<LambdaPath> {
    solve_path(problem, validation, lambdas, config, kfac, false)
}

/// Which `(F + λI)⁻¹` the gradient uses.
#[derive(Debug, Clone, Copy)]
pub enum GradientMode<'a> {
    Exact,
    /// K-FAC inverse damped by λ alone.
    Kfac(&'a KfacState),
}

/// `dL_val/dλ = −⟨dw*, (F + λI)⁻¹ ∇L_val(dw*)⟩` at the problem's λ.
pub fn lambda_gradient(problem: &LinearizedProblem, validation: &LinearizedProblem, mode: GradientMode<'_>) -> Result<f64> {
    if !(problem.lambda() > 0.0) {
        return Err(LqfError::contract("lambda gradient needs lambda > 0"));
    }
    check_len("validation parameter count", problem.dim(), validation.dim())?;
    let wstar = problem.closed_form()?;
    let grad = validation_gradient(validation, &wstar);
    let pre = match mode {
        GradientMode::Exact => cholesky_with_jitter(&problem.exact_hessian()?)?.solve(&grad),
        GradientMode::Kfac(state) => {
            check_len("curvature parameter count", problem.dim(), state.dim())?;
            state.with_damping(problem.lambda())?.apply_inverse(&grad)?
        }
    };
    Ok(-wstar.dot(&pre))
}

/// `λ ↦ L_val(closed_form(λ))`.
pub fn validation_loss_at(problem: &LinearizedProblem, validation: &LinearizedProblem, lambda: f64) -> Result<f64> {
    Ok(validation_loss(validation, &problem.with_lambda(lambda)?.closed_form()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PreconditionerKind;
    use crate::verify::random_problem;

    fn newton() -> OptimizerConfig {
        OptimizerConfig {
            eta: 1.0,
            preconditioner: PreconditionerKind::ExactInverse,
            max_epochs: 5,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = random_problem(40, 2, 15, 1.0, 21);
        let v = random_problem(20, 2, 15, 1.0, 22);
        for lambda in [1e-1, 1e-3, 1e-5] {
            let q = p.with_lambda(lambda).unwrap();
            let g = lambda_gradient(&q, &v, GradientMode::Exact).unwrap();
            let h = 1e-4 * lambda;
            let fd = (validation_loss_at(&p, &v, lambda + h).unwrap() - validation_loss_at(&p, &v, lambda - h).unwrap()) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-4 * fd.abs(), "λ={lambda}: {g} vs {fd}");
        }
    }

    #[test]
    fn interpolating_limit_has_flat_gradient() {
        // D > N·C: the training set can be fit exactly as λ → 0.
        let p = random_problem(5, 2, 20, 1e-9, 3);
        let g = lambda_gradient(&p, &p, GradientMode::Exact).unwrap();
        assert!(g.abs() < 1e-8, "{g}");
    }

    #[test]
    fn over_regularized_gradient_is_positive() {
        // Validation = training data: shrinking λ reduces validation loss.
        let p = random_problem(40, 1, 6, 10.0, 4);
        let g = lambda_gradient(&p, &p, GradientMode::Exact).unwrap();
        let lower = validation_loss_at(&p, &p, 5.0).unwrap();
        let here = validation_loss_at(&p, &p, 10.0).unwrap();
        assert!(lower < here);
        assert!(g > 0.0);
    }

    #[test]
    fn zero_lambda_is_rejected() {
        let p = random_problem(10, 1, 3, 0.0, 1);
        assert!(lambda_gradient(&p, &p, GradientMode::Exact).is_err());
    }

    #[test]
    fn path_endpoints_match_closed_form() {
        let p = random_problem(30, 2, 10, 1.0, 5);
        let v = random_problem(10, 2, 10, 1.0, 6);
        let lambdas = [1e-3, 1e-4, 1e-5];
        let path = warm_start_path(&p, Some(&v), &lambdas, &newton(), None).unwrap();
        assert_eq!(path.points[0].method, SolveMethod::FromScratch);
        assert_eq!(path.points[1].method, SolveMethod::WarmStart);
        for pt in &path.points {
            let q = p.with_lambda(pt.lambda).unwrap();
            let best = q.loss(&q.closed_form().unwrap());
            assert!((pt.train_loss - best).abs() <= 1e-6 * best);
        }
        let csv = path.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().contains("warm-start"));
    }

    #[test]
    fn single_lambda_equals_cold_train() {
        let p = random_problem(20, 1, 5, 1.0, 7);
        let cfg = OptimizerConfig { preconditioner: PreconditionerKind::None, eta: 0.1, max_epochs: 50, ..OptimizerConfig::default() };
        let warm = warm_start_path(&p, None, &[0.3], &cfg, None).unwrap();
        let cold = cold_path(&p, None, &[0.3], &cfg, None).unwrap();
        assert_eq!(warm, cold);
    }

    #[test]
    fn lambdas_must_be_monotone_and_positive() {
        let p = random_problem(10, 1, 3, 1.0, 1);
        assert!(warm_start_path(&p, None, &[1e-3, 1e-2, 1e-4], &newton(), None).is_err());
        assert!(warm_start_path(&p, None, &[0.0], &newton(), None).is_err());
        assert!(warm_start_path(&p, None, &[], &newton(), None).is_err());
    }
}
