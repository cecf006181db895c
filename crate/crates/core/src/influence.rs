//! Leave-one-out influence on the linearized optimum.
//!
//! Removing sample `i` (N decremented, λ unchanged) gives the exact quadratic
//!
//! ```text
//! H₋ᵢ = A − gᵢᵀgᵢ/(N−1),          A = N/(N−1)·F + λI
//! ∇L₋ᵢ(w*) = (N·gᵢᵀeᵢ − λw*)/(N−1),  eᵢ = (rᵢ − gᵢw*)/N
//! w* − w₋ᵢ = H₋ᵢ⁻¹ ∇L₋ᵢ(w*)
//! ```
//!
//! and `H₋ᵢ⁻¹` follows from `A⁻¹` by a rank-`C` Woodbury update with
//! `M = (N−1)I − gᵢA⁻¹gᵢᵀ`. Nothing is re-solved per sample.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LqfError, Result};
use crate::kfac::KfacState;
use crate::linalg::spd_inverse;
use crate::quadratic::LinearizedProblem;

/// Source of `A⁻¹`.
#[derive(Debug, Clone, Copy)]
pub enum InverseProvider<'a> {
    /// Dense inverse of `N/(N−1)·F + λI`.
    Exact,
    /// Damped K-FAC inverse with damping `γ + λ`.
    Kfac(&'a KfacState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactHessian,
    KfacApprox,
    BruteForce,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ExactHessian => "exact-hessian",
            Method::KfacApprox => "kfac-approx",
            Method::BruteForce => "brute-force",
        }
    }
}

enum Inverse {
    Dense(DMatrix<f64>),
    Kfac(KfacState),
}

/// Shared state for influence queries against one optimum.
pub struct Influence<'a> {
    problem: &'a LinearizedProblem,
    wstar: DVector<f64>,
    inverse: Inverse,
    a_inv_wstar: DVector<f64>,
}

/// `A⁻¹gᵢᵀ` and the factored `M` for one sample.
struct SampleTerms {
    p: DMatrix<f64>,
    m: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    e: DVector<f64>,
}

impl<'a> Influence<'a> {
    pub fn new(problem: &'a LinearizedProblem, wstar: &DVector<f64>, provider: InverseProvider<'_>) -> Result<Self> {
        check_len("optimum", problem.dim(), wstar.len())?;
        let n = problem.samples();
        if n < 2 {
            return Err(LqfError::contract("leave-one-out needs at least two samples"));
        }
        let inverse = match provider {
            InverseProvider::Exact => {
                let scale = n as f64 / (n - 1) as f64;
                let mut a = problem.fisher()? * scale;
                for k in 0..problem.dim() {
                    a[(k, k)] += problem.lambda();
                }
                Inverse::Dense(spd_inverse(&a)?)
            }
            InverseProvider::Kfac(state) => {
                check_len("curvature parameter count", problem.dim(), state.dim())?;
                Inverse::Kfac(state.with_damping(state.damping() + problem.lambda())?)
            }
        };
        let mut out = Influence {
            problem,
            wstar: wstar.clone(),
            inverse,
            a_inv_wstar: DVector::zeros(0),
        };
        out.a_inv_wstar = out.apply(wstar)?;
        Ok(out)
    }

    pub fn method(&self) -> Method {
        match self.inverse {
            Inverse::Dense(_) => Method::ExactHessian,
            Inverse::Kfac(_) => Method::KfacApprox,
        }
    }

    pub fn wstar(&self) -> &DVector<f64> {
        &self.wstar
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.inverse {
            Inverse::Dense(m) => Ok(m * v),
            Inverse::Kfac(s) => s.apply_inverse(v),
        }
    }

    fn apply_columns(&self, g_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.inverse {
            Inverse::Dense(m) => Ok(m * g_t),
            Inverse::Kfac(s) => {
                let mut out = DMatrix::zeros(g_t.nrows(), g_t.ncols());
                for (c, col) in g_t.column_iter().enumerate() {
                    out.set_column(c, &s.apply_inverse(&col.into_owned())?);
                }
                Ok(out)
            }
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.problem.samples() {
            return Err(LqfError::IndexOutOfRange { index: i, size: self.problem.samples() });
        }
        Ok(())
    }

    /// `eᵢ = (rᵢ − gᵢw*)/N`.
    pub fn residual(&self, i: usize) -> Result<DVector<f64>> {
        self.check_index(i)?;
        let g = self.problem.sample_jacobian(i);
        Ok((self.problem.sample_residual(i) - g * &self.wstar) / self.problem.samples() as f64)
    }

    fn terms(&self, i: usize) -> Result<SampleTerms> {
        let e = self.residual(i)?;
        let g = self.problem.sample_jacobian(i);
        let p = self.apply_columns(&g.transpose())?;
        let c = self.problem.classes();
        let mut m = DMatrix::identity(c, c) * (self.problem.samples() - 1) as f64 - g * &p;
        crate::linalg::mirror_upper(&mut m);
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(LqfError::Singular { rank: c - 1, dim: c });
        }
        Ok(SampleTerms { p, m: lu, e })
    }

    fn solve_m(terms: &SampleTerms, v: &DVector<f64>) -> Result<DVector<f64>> {
        terms
            .m
            .solve(v)
            .ok_or_else(|| LqfError::NumericOverflow("leave-one-out update matrix".into()))
    }

    /// `w* − w₋ᵢ`.
    pub fn removal_shift(&self, i: usize) -> Result<DVector<f64>> {
        let t = self.terms(i)?;
        let n = self.problem.samples() as f64;
        let lambda = self.problem.lambda();
        let u = (&t.p * &t.e * n - &self.a_inv_wstar * lambda) / (n - 1.0);
        let gu = self.problem.sample_jacobian(i) * &u;
        Ok(&u + &t.p * Self::solve_m(&t, &gu)?)
    }

    /// `w₋ᵢ`, the optimum without sample `i`.
    pub fn loo_weights(&self, i: usize) -> Result<DVector<f64>> {
        Ok(&self.wstar - self.removal_shift(i)?)
    }

    /// `Δf = g_test·(w* − w₋ᵢ)` in kernel form:
    /// `N·g_test A⁻¹gᵢᵀ M⁻¹ eᵢ − λ/(N−1)·g_test(A⁻¹w* + A⁻¹gᵢᵀM⁻¹gᵢA⁻¹w*)`.
    pub fn activation_delta(&self, i: usize, g_test: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_len("test Jacobian columns", self.problem.dim(), g_test.ncols())?;
        let t = self.terms(i)?;
        let n = self.problem.samples() as f64;
        let lambda = self.problem.lambda();
        let kernel = g_test * &t.p;
        let mut delta = &kernel * Self::solve_m(&t, &t.e)? * n;
        if lambda != 0.0 {
            let ga = self.problem.sample_jacobian(i) * &self.a_inv_wstar;
            let correction = g_test * &self.a_inv_wstar + &kernel * Self::solve_m(&t, &ga)?;
            delta -= correction * (lambda / (n - 1.0));
        }
        Ok(delta)
    }

    /// Single-output activation change via Sherman–Morrison scalars only.
    pub fn scalar_activation_delta(&self, i: usize, g_test: &DVectorView<'_, f64>) -> Result<f64> {
        if self.problem.classes() != 1 {
            return Err(LqfError::contract("scalar form needs a single output"));
        }
        check_len("test Jacobian", self.problem.dim(), g_test.len())?;
        self.check_index(i)?;
        let n = self.problem.samples() as f64;
        let lambda = self.problem.lambda();
        let gi = self.problem.sample_jacobian(i).row(0).transpose();
        let a_gi = self.apply(&gi)?;
        let alpha = gi.dot(&a_gi);
        let e = (self.problem.residual()[i] - gi.dot(&self.wstar)) / n;
        let kernel = g_test.dot(&a_gi);
        let denom = n - 1.0 - alpha;
        let fit = (n / (n - 1.0)) * (1.0 + alpha / denom) * e * kernel;
        let ridge = lambda / (n - 1.0) * (g_test.dot(&self.a_inv_wstar) + kernel * gi.dot(&self.a_inv_wstar) / denom);
        Ok(fit - ridge)
    }

    /// Mean squared activation change over the validation samples.
    pub fn fsi(&self, i: usize, validation: &LinearizedProblem) -> Result<f64> {
        check_len("validation parameter count", self.problem.dim(), validation.dim())?;
        let shift = self.removal_shift(i)?;
        let moved = validation.jacobian() * shift;
        Ok(moved.norm_squared() / validation.samples() as f64)
    }

    /// F-SI for every training sample.
    pub fn fsi_scores(&self, validation: &LinearizedProblem) -> Result<Vec<f64>> {
        (0..self.problem.samples())
            .into_par_iter()
            .map(|i| self.fsi(i, validation))
            .collect()
    }

    /// Full report: per-sample shift norms, F-SI and validation activation deltas.
    pub fn report(&self, validation: &LinearizedProblem) -> Result<InfluenceReport> {
        check_len("validation parameter count", self.problem.dim(), validation.dim())?;
        let rows = (0..self.problem.samples())
            .into_par_iter()
            .map(|i| {
                let shift = self.removal_shift(i)?;
                Ok(row_from_shift(i, &shift, self.residual(i)?, validation))
            })
            .collect::<Result<_>>()?;
        Ok(InfluenceReport { method: self.method(), rows })
    }
}

fn row_from_shift(i: usize, shift: &DVector<f64>, residual: DVector<f64>, validation: &LinearizedProblem) -> InfluenceRow {
    let moved = validation.jacobian() * shift;
    let c = validation.classes();
    InfluenceRow {
        sample_id: i,
        fsi: moved.norm_squared() / validation.samples() as f64,
        weight_delta_norm: shift.norm(),
        residual: residual.as_slice().to_vec(),
        activation_deltas: moved.as_slice().chunks(c).map(|d| d.to_vec()).collect(),
    }
}

/// `w₋ᵢ` for a single sample.
pub fn loo_weights(problem: &LinearizedProblem, wstar: &DVector<f64>, i: usize, provider: InverseProvider<'_>) -> Result<DVector<f64>> {
    Influence::new(problem, wstar, provider)?.loo_weights(i)
}

pub fn activation_delta(
    problem: &LinearizedProblem,
    wstar: &DVector<f64>,
    i: usize,
    g_test: &DMatrix<f64>,
    provider: InverseProvider<'_>,
) -> Result<DVector<f64>> {
    Influence::new(problem, wstar, provider)?.activation_delta(i, g_test)
}

pub fn fsi(
    problem: &LinearizedProblem,
    wstar: &DVector<f64>,
    i: usize,
    validation: &LinearizedProblem,
    provider: InverseProvider<'_>,
) -> Result<f64> {
    Influence::new(problem, wstar, provider)?.fsi(i, validation)
}

/// Re-solves the problem without sample `i`.
pub fn brute_force_loo(problem: &LinearizedProblem, i: usize) -> Result<DVector<f64>> {
    if problem.samples() < 2 {
        return Err(LqfError::contract("leave-one-out needs at least two samples"));
    }
    problem.without_sample(i)?.closed_form()
}

/// Report computed by re-solving once per sample.
pub fn brute_force_report(problem: &LinearizedProblem, wstar: &DVector<f64>, validation: &LinearizedProblem) -> Result<InfluenceReport> {
    check_len("optimum", problem.dim(), wstar.len())?;
    let n = problem.samples() as f64;
    let rows = (0..problem.samples())
        .into_par_iter()
        .map(|i| {
            let shift = wstar - brute_force_loo(problem, i)?;
            let residual = (problem.sample_residual(i) - problem.sample_jacobian(i) * wstar) / n;
            Ok(row_from_shift(i, &shift, residual, validation))
        })
        .collect::<Result<_>>()?;
    Ok(InfluenceReport { method: Method::BruteForce, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub sample_id: usize,
    pub fsi: f64,
    pub weight_delta_norm: f64,
    /// `eᵢ`.
    pub residual: Vec<f64>,
    /// One `C`-vector per validation sample.
    pub activation_deltas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub method: Method,
    pub rows: Vec<InfluenceRow>,
}

impl InfluenceReport {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fsi).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "fsi", "weight_delta_norm", "method"])
            .map_err(|e| LqfError::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.to_string(),
                format!("{:?}", r.fsi),
                format!("{:?}", r.weight_delta_norm),
                self.method.as_str().to_string(),
            ])
            .map_err(|e| LqfError::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| LqfError::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Sample indices by descending score; ties by lowest index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Sample indices by ascending score; ties by lowest index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("rank correlation inputs", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(LqfError::contract("rank correlation needs two or more values"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let order = rank_ascending(v);
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropMode {
    DropTop,
    DropBottom,
}

impl DropMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropMode::DropTop => "drop-top",
            DropMode::DropBottom => "drop-bottom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub removed: Vec<usize>,
    pub kept: Vec<usize>,
    pub dw: DVector<f64>,
    pub test_error: f64,
}

/// Drops the `k` most or least informative samples by `scores` and re-solves.
pub fn summarize_with_scores(
    problem: &LinearizedProblem,
    scores: &[f64],
    test: &LinearizedProblem,
    k: usize,
    mode: DropMode,
) -> Result<Summary> {
    check_len("scores", problem.samples(), scores.len())?;
    if k >= problem.samples() {
        return Err(LqfError::contract(format!("cannot drop {k} of {} samples", problem.samples())));
    }
    let order = match mode {
        DropMode::DropTop => rank_descending(scores),
        DropMode::DropBottom => rank_ascending(scores),
    };
    let mut removed = order[..k].to_vec();
    removed.sort_unstable();
    let kept: Vec<usize> = (0..problem.samples()).filter(|i| removed.binary_search(i).is_err()).collect();
    let dw = problem.select(&kept)?.closed_form()?;
    let test_error = test.error_rate(&dw)?;
    Ok(Summary { removed, kept, dw, test_error })
}

/// Ranks by F-SI on `validation` and drops `k` samples.
pub fn summarize(
    problem: &LinearizedProblem,
    wstar: &DVector<f64>,
    validation: &LinearizedProblem,
    test: &LinearizedProblem,
    k: usize,
    mode: DropMode,
    provider: InverseProvider<'_>,
) -> Result<Summary> {
    let scores = Influence::new(problem, wstar, provider)?.fsi_scores(validation)?;
    summarize_with_scores(problem, &scores, test, k, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_problem;

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn matches_brute_force_for_every_sample() {
        for (c, lambda) in [(1, 0.05), (3, 0.01), (3, 0.0)] {
            let p = random_problem(50, c, 20, lambda, 7 + c as u64);
            let wstar = p.closed_form().unwrap();
            let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
            let test = random_problem(4, c, 20, lambda, 99);
            for i in 0..p.samples() {
                let brute = brute_force_loo(&p, i).unwrap();
                let loo = inf.loo_weights(i).unwrap();
                let shift = &wstar - &brute;
                assert!(rel(&(&wstar - &loo), &shift) < 1e-6, "C={c} i={i}");
                for t in 0..4 {
                    let g = test.sample_jacobian(t).into_owned();
                    let expected = &g * &shift;
                    let got = inf.activation_delta(i, &g).unwrap();
                    assert!(rel(&got, &expected) < 1e-6, "C={c} i={i} t={t}");
                }
            }
        }
    }

    #[test]
    fn two_sample_hand_problem() {
        // g = [1], [2]; r = [1], [4]; λ = 0.5
        let p = LinearizedProblem::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DVector::from_vec(vec![1.0, 4.0]),
            1,
            0.5,
            15.0,
            None,
        )
        .unwrap();
        let wstar = p.closed_form().unwrap();
        // Only sample 1 left: (4 + 0.5) w = 8.
        let loo = loo_weights(&p, &wstar, 0, InverseProvider::Exact).unwrap();
        assert!((loo[0] - 8.0 / 4.5).abs() < 1e-12);
        assert!((brute_force_loo(&p, 0).unwrap()[0] - 8.0 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_and_woodbury_forms_agree() {
        for lambda in [0.0, 0.1] {
            let p = random_problem(30, 1, 8, lambda, 3);
            let wstar = p.closed_form().unwrap();
            let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
            let test = random_problem(3, 1, 8, lambda, 4);
            for i in 0..p.samples() {
                for t in 0..3 {
                    let g = test.sample_jacobian(t).into_owned();
                    let multi = inf.activation_delta(i, &g).unwrap()[0];
                    let row = g.row(0).transpose();
                    let scalar = inf.scalar_activation_delta(i, &row.column(0)).unwrap();
                    assert!((multi - scalar).abs() <= 1e-10 * scalar.abs().max(1e-12), "{multi} vs {scalar}");
                }
            }
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        let p = random_problem(20, 3, 10, 0.1, 5);
        let wstar = p.closed_form().unwrap();
        let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
        let gi = p.sample_jacobian(2).into_owned();
        let gt = p.sample_jacobian(7).into_owned();
        let k1 = &gt * inf.apply_columns(&gi.transpose()).unwrap();
        let k2 = &gi * inf.apply_columns(&gt.transpose()).unwrap();
        assert!((k1 - k2.transpose()).abs().max() < 1e-10);
    }

    /// Appends a copy of sample 0 with its residual replaced by its fit.
    fn with_fitted_sample(p: &LinearizedProblem) -> (LinearizedProblem, DVector<f64>) {
        let wstar = p.closed_form().unwrap();
        let g = p.sample_jacobian(0).into_owned();
        let fit = &g * &wstar;
        let extra = LinearizedProblem::new(g, fit, p.classes(), p.lambda(), p.alpha(), None).unwrap();
        let joined = p.concat(&extra).unwrap();
        let w = joined.closed_form().unwrap();
        (joined, w)
    }

    #[test]
    fn zero_residual_sample_has_no_influence_without_ridge() {
        let (p, wstar) = with_fitted_sample(&random_problem(30, 2, 10, 0.0, 6));
        let i = p.samples() - 1;
        let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
        assert!(inf.residual(i).unwrap().norm() < 1e-12);
        assert!(rel(&inf.loo_weights(i).unwrap(), &wstar) < 1e-10);
        let val = random_problem(5, 2, 10, 0.0, 8);
        assert!(inf.fsi(i, &val).unwrap() < 1e-20);
        let g = val.sample_jacobian(0).into_owned();
        assert!(inf.activation_delta(i, &g).unwrap().norm() < 1e-10);
    }

    #[test]
    fn orthogonal_test_jacobian_sees_nothing() {
        let p = random_problem(25, 1, 6, 0.0, 9);
        let wstar = p.closed_form().unwrap();
        let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
        let i = 3;
        // Δf is g_test·shift; any g_test orthogonal to the shift gives zero.
        let shift = inf.removal_shift(i).unwrap();
        let mut g = DVector::from_fn(6, |k, _| (k as f64 + 1.0).sin());
        g -= &shift * (g.dot(&shift) / shift.norm_squared());
        let g = DMatrix::from_row_slice(1, 6, g.as_slice());
        assert!(inf.activation_delta(i, &g).unwrap().norm() < 1e-10);
    }

    #[test]
    fn fsi_matches_brute_force_and_is_nonnegative() {
        let p = random_problem(30, 3, 12, 0.05, 10);
        let val = random_problem(6, 3, 12, 0.05, 11);
        let wstar = p.closed_form().unwrap();
        let inf = Influence::new(&p, &wstar, InverseProvider::Exact).unwrap();
        let exact = inf.report(&val).unwrap();
        let brute = brute_force_report(&p, &wstar, &val).unwrap();
        for (a, b) in exact.rows.iter().zip(&brute.rows) {
            assert!(a.fsi >= 0.0);
            assert!((a.fsi - b.fsi).abs() <= 1e-6 * b.fsi, "{} vs {}", a.fsi, b.fsi);
            assert!((a.fsi - inf.fsi(a.sample_id, &val).unwrap()).abs() <= 1e-12 * a.fsi);
        }
        let csv = exact.to_csv().unwrap();
        assert!(csv.starts_with("sample_id,fsi,weight_delta_norm,method"));
        assert!(csv.lines().nth(1).unwrap().ends_with("exact-hessian"));
    }

    #[test]
    fn rejects_bad_index() {
        let p = random_problem(5, 1, 3, 0.1, 1);
        let w = p.closed_form().unwrap();
        let err = loo_weights(&p, &w, 5, InverseProvider::Exact).unwrap_err();
        assert!(matches!(err, LqfError::IndexOutOfRange { index: 5, size: 5 }));
    }

    #[test]
    fn ranking_ties_go_to_lowest_index() {
        let s = [0.5, 1.0, 0.5, 2.0];
        assert_eq!(rank_descending(&s), vec![3, 1, 0, 2]);
        assert_eq!(rank_ascending(&s), vec![0, 2, 1, 3]);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn summarize_with_no_drops_keeps_error() {
        let p = random_problem(20, 2, 6, 0.1, 12);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let p = LinearizedProblem::new(p.jacobian().clone(), p.residual().clone(), 2, 0.1, 15.0, Some(labels)).unwrap();
        let w = p.closed_form().unwrap();
        let s = summarize(&p, &w, &p, &p, 0, DropMode::DropTop, InverseProvider::Exact).unwrap();
        assert_eq!(s.test_error, p.error_rate(&w).unwrap());
        assert!(summarize(&p, &w, &p, &p, 20, DropMode::DropTop, InverseProvider::Exact).is_err());
    }

    #[test]
    fn dropping_exactly_fit_samples_changes_nothing() {
        // Every sample is exactly fit (r = J·w_true) and λ = 0, so all scores
        // vanish and any full-rank remainder recovers the same optimum.
        let base = random_problem(30, 2, 8, 0.0, 13);
        let w_true = DVector::from_fn(8, |k, _| (k as f64 * 0.3).cos());
        let r = base.jacobian() * &w_true;
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let p = LinearizedProblem::new(base.jacobian().clone(), r, 2, 0.0, 15.0, Some(labels)).unwrap();
        let w = p.closed_form().unwrap();
        let scores = Influence::new(&p, &w, InverseProvider::Exact).unwrap().fsi_scores(&p).unwrap();
        assert!(scores.iter().all(|&s| s < 1e-20));
        let s = summarize_with_scores(&p, &scores, &p, 10, DropMode::DropBottom).unwrap();
        assert_eq!(s.removed.len(), 10);
        assert!((s.test_error - p.error_rate(&w).unwrap()).abs() < 1e-10);
        assert!(rel(&s.dw, &w) < 1e-8);
    }
}
