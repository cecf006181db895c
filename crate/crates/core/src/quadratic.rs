//! The linearized training problem: regularized scaled-MSE objective, its
//! closed-form optimum, and the exact Hessian with its spectrum.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView, DMatrixView};
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{check_len, LqfError, Result};
use crate::linalg::{cholesky_with_jitter, guard, max_asymmetry, mirror_upper, psd_rank, sym_eigen_desc};
use crate::net::{ByteReader, TangentModel};

/// Target scaling applied to one-hot labels.
pub const DEFAULT_ALPHA: f64 = 15.0;

const MAGIC: &[u8; 4] = b"LQFP";
const VERSION: u32 = 1;

/// Stacked Jacobians `J` ((N·C)×D) and residual targets `r = α·onehot(y) − f0(x)`.
///
/// Sample `i` owns rows `[i·C, (i+1)·C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedProblem {
    jacobian: DMatrix<f64>,
    residual: DVector<f64>,
    samples: usize,
    classes: usize,
    lambda: f64,
    alpha: f64,
    labels: Option<Vec<usize>>,
}

impl LinearizedProblem {
    pub fn new(
        jacobian: DMatrix<f64>,
        residual: DVector<f64>,
        classes: usize,
        lambda: f64,
        alpha: f64,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if classes == 0 || jacobian.nrows() == 0 || !jacobian.nrows().is_multiple_of(classes) {
            return Err(LqfError::contract(format!(
                "{} Jacobian rows do not split into blocks of {classes}",
                jacobian.nrows()
            )));
        }
        check_len("residual targets", jacobian.nrows(), residual.len())?;
        let samples = jacobian.nrows() / classes;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(LqfError::contract(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(alpha > 0.0) {
            return Err(LqfError::contract(format!("alpha must be > 0, got {alpha}")));
        }
        if let Some(labels) = &labels {
            check_len("labels", samples, labels.len())?;
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(LqfError::LabelOutOfRange { label, classes });
            }
        }
        crate::error::check_finite("jacobian", jacobian.as_slice())?;
        crate::error::check_finite("residual", residual.as_slice())?;
        Ok(LinearizedProblem {
            jacobian,
            residual,
            samples,
            classes,
            lambda,
            alpha,
            labels,
        })
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.jacobian.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut p = self.clone();
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(LqfError::contract(format!("lambda must be >= 0, got {lambda}")));
        }
        p.lambda = lambda;
        Ok(p)
    }

    /// `gᵢ`, the `C × D` Jacobian block of sample `i`.
    pub fn sample_jacobian(&self, i: usize) -> DMatrixView<'_, f64> {
        self.jacobian.rows(i * self.classes, self.classes)
    }

    pub fn sample_residual(&self, i: usize) -> DVectorView<'_, f64> {
        self.residual.rows(i * self.classes, self.classes)
    }

    /// Keeps the samples `indices` (block-consistently, in that order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(LqfError::EmptyDataset);
        }
        let c = self.classes;
        let mut jac = DMatrix::zeros(indices.len() * c, self.dim());
        let mut res = DVector::zeros(indices.len() * c);
        for (dst, &src) in indices.iter().enumerate() {
            if src >= self.samples {
                return Err(LqfError::IndexOutOfRange { index: src, size: self.samples });
            }
            jac.rows_mut(dst * c, c).copy_from(&self.sample_jacobian(src));
            res.rows_mut(dst * c, c).copy_from(&self.sample_residual(src));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        LinearizedProblem::new(jac, res, c, self.lambda, self.alpha, labels)
    }

    pub fn without_sample(&self, i: usize) -> Result<Self> {
        if i >= self.samples {
            return Err(LqfError::IndexOutOfRange { index: i, size: self.samples });
        }
        let keep: Vec<usize> = (0..self.samples).filter(|&j| j != i).collect();
        self.select(&keep)
    }

    /// Appends the samples of `other` (same D, C, α); keeps this problem's λ.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_len("concatenated parameter count", self.dim(), other.dim())?;
        check_len("concatenated class count", self.classes, other.classes)?;
        let rows = self.jacobian.nrows() + other.jacobian.nrows();
        let mut jac = DMatrix::zeros(rows, self.dim());
        jac.rows_mut(0, self.jacobian.nrows()).copy_from(&self.jacobian);
        jac.rows_mut(self.jacobian.nrows(), other.jacobian.nrows()).copy_from(&other.jacobian);
        let res = DVector::from_iterator(rows, self.residual.iter().chain(other.residual.iter()).copied());
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        LinearizedProblem::new(jac, res, self.classes, self.lambda, self.alpha, labels)
    }

    /// `L(dw) = 1/(2N)‖J·dw − r‖² + λ/2‖dw‖²`.
    pub fn loss(&self, dw: &DVector<f64>) -> f64 {
        let misfit = &self.jacobian * dw - &self.residual;
        misfit.norm_squared() / (2.0 * self.samples as f64) + 0.5 * self.lambda * dw.norm_squared()
    }

    /// `∇L = (1/N)Jᵀ(J·dw − r) + λ·dw`.
    pub fn gradient(&self, dw: &DVector<f64>) -> DVector<f64> {
        let misfit = &self.jacobian * dw - &self.residual;
        self.jacobian.tr_mul(&misfit) / self.samples as f64 + dw * self.lambda
    }

    /// Mini-batch gradient over `batch` sample indices (the data term is
    /// averaged over the batch).
    pub fn batch_gradient(&self, dw: &DVector<f64>, batch: &[usize]) -> DVector<f64> {
        let mut g = dw * self.lambda;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let gi = self.sample_jacobian(i);
            let misfit = gi * dw - self.sample_residual(i);
            g += gi.tr_mul(&misfit) * scale;
        }
        g
    }

    /// `(1/N)Jᵀr`.
    pub fn rhs(&self) -> DVector<f64> {
        self.jacobian.tr_mul(&self.residual) / self.samples as f64
    }

    /// `F = (1/N)JᵀJ`, bit-exactly symmetric.
    pub fn fisher(&self) -> Result<DMatrix<f64>> {
        guard(self.dim())?;
        let mut f = self.jacobian.tr_mul(&self.jacobian) / self.samples as f64;
        mirror_upper(&mut f);
        Ok(f)
    }

    /// `H = F + λI`.
    pub fn exact_hessian(&self) -> Result<DMatrix<f64>> {
        let mut h = self.fisher()?;
        for k in 0..self.dim() {
            h[(k, k)] += self.lambda;
        }
        Ok(h)
    }

    /// `H·v` without forming `H`.
    pub fn hessian_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        self.jacobian.tr_mul(&(&self.jacobian * v)) / self.samples as f64 + v * self.lambda
    }

    /// `dw* = (F + λI)⁻¹ (1/N)Jᵀr` via Cholesky.
    pub fn closed_form(&self) -> Result<DVector<f64>> {
        let h = self.exact_hessian()?;
        if self.lambda == 0.0 {
            let rank = psd_rank(&h);
            if rank < self.dim() {
                return Err(LqfError::Singular { rank, dim: self.dim() });
            }
        }
        let chol = cholesky_with_jitter(&h)?;
        Ok(chol.solve(&self.rhs()))
    }

    /// Network outputs `f0 + J·dw`, recovered from the labels (`f0 = α·Y − r`).
    pub fn outputs(&self, dw: &DVector<f64>) -> Result<DVector<f64>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| LqfError::contract("problem carries no labels"))?;
        let mut out = &self.jacobian * dw - &self.residual;
        for (i, &y) in labels.iter().enumerate() {
            out[i * self.classes + y] += self.alpha;
        }
        Ok(out)
    }

    /// Fraction of samples whose argmax output differs from the label.
    pub fn error_rate(&self, dw: &DVector<f64>) -> Result<f64> {
        let out = self.outputs(dw)?;
        let labels = self.labels.as_ref().expect("checked by outputs");
        let wrong = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(out.rows(i * self.classes, self.classes).as_slice()) != y)
            .count();
        Ok(wrong as f64 / self.samples as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.samples, self.classes, self.dim()] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for row in self.jacobian.row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.residual.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.labels {
            Some(labels) => {
                out.push(1);
                for &l in labels {
                    out.extend_from_slice(&(l as u32).to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(LqfError::Format(format!("unsupported problem file version {version}")));
        }
        let n = r.u64()? as usize;
        let c = r.u64()? as usize;
        let d = r.u64()? as usize;
        let lambda = r.f64()?;
        let alpha = r.f64()?;
        let rows = n
            .checked_mul(c)
            .ok_or_else(|| LqfError::Format("problem dimensions overflow".into()))?;
        let jac = r.f64s(rows.checked_mul(d).ok_or_else(|| LqfError::Format("problem dimensions overflow".into()))?)?;
        let res = r.f64s(rows)?;
        let labels = match r.u8()? {
            0 => None,
            1 => Some((0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?),
            flag => return Err(LqfError::Format(format!("bad label flag {flag}"))),
        };
        r.finish()?;
        LinearizedProblem::new(
            DMatrix::from_row_slice(rows, d, &jac),
            DVector::from_vec(res),
            c,
            lambda,
            alpha,
            labels,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Linearizes `model` on `data`: Jacobian rows and residual targets in dataset order.
pub fn assemble(model: &TangentModel, data: &LabeledDataset, alpha: f64, lambda: f64) -> Result<LinearizedProblem> {
    if data.is_empty() {
        return Err(LqfError::EmptyDataset);
    }
    let c = model.classes();
    if data.classes > c {
        if let Some(&label) = data.labels().iter().find(|&&l| l >= c) {
            return Err(LqfError::LabelOutOfRange { label, classes: c });
        }
    }
    check_len("dataset input dimension", model.spec().input_dim, data.dim)?;
    let blocks: Vec<(Vec<f64>, DMatrix<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let trace = model.network().trace(data.input(i))?;
            let jac = model.jacobian_from_trace(&trace)?;
            Ok((trace.output().to_vec(), jac))
        })
        .collect::<Result<_>>()?;
    let n = data.len();
    let d = model.dim();
    let mut jacobian = DMatrix::zeros(n * c, d);
    let mut residual = DVector::zeros(n * c);
    for (i, (f0, g)) in blocks.iter().enumerate() {
        jacobian.rows_mut(i * c, c).copy_from(g);
        for k in 0..c {
            let target = if k == data.label(i) { alpha } else { 0.0 };
            residual[i * c + k] = target - f0[k];
        }
    }
    LinearizedProblem::new(jacobian, residual, c, lambda, alpha, Some(data.labels().to_vec()))
}

/// Eigenvalues in descending order and `κ = max / min`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: DVector<f64>,
    pub condition_number: f64,
}

pub fn spectrum(h: &DMatrix<f64>) -> Result<Spectrum> {
    if !h.is_square() {
        return Err(LqfError::contract("spectrum needs a square matrix"));
    }
    guard(h.nrows())?;
    let scale = h.abs().max().max(1.0);
    let asym = max_asymmetry(h);
    if asym > 1e-12 * scale {
        return Err(LqfError::NotSymmetric(asym));
    }
    let (eigenvalues, _) = sym_eigen_desc(h);
    let max = eigenvalues[0];
    let min = eigenvalues[eigenvalues.len() - 1];
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(Spectrum {
        eigenvalues,
        condition_number,
    })
}
