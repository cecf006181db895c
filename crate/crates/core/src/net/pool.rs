//! Square-root bilinear pooling and its derivatives.
//!
//! For a feature map `z` with `n` positions (rows) and `c` channels the pooled
//! feature is `√Σ` with `Σ = zᵀ M z`, `M = (1/n)(I − (1/n)𝟙)`, i.e. the biased
//! sample covariance of the rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, LqfError, Result};
use crate::linalg::{spectral_map, sylvester_sym, sym_eigen_desc};

/// Eigenvalues in `[-CLAMP_TOL, 0)` are treated as round-off and clamped.
pub const CLAMP_TOL: f64 = 1e-10;
/// Below this eigenvalue the covariance is damped before differentiating.
pub const TANGENT_FLOOR: f64 = 1e-8;

/// How the derivative of the matrix square root is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqrtTangentMode {
    /// Fréchet derivative: solves `√Σ X + X √Σ = dΣ`.
    #[default]
    Sylvester,
    /// `½ √Σ⁻¹ dΣ`; only exact when `√Σ` and `dΣ` commute.
    HalfInverseRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TangentOptions {
    pub mode: SqrtTangentMode,
    /// Add `TANGENT_FLOOR · I` when `Σ` is numerically singular instead of failing.
    pub damp_singular: bool,
}

impl Default for TangentOptions {
    fn default() -> Self {
        TangentOptions {
            mode: SqrtTangentMode::Sylvester,
            damp_singular: true,
        }
    }
}

/// `Σ = zᵀ M z`.
pub fn covariance(z: &DMatrix<f64>) -> DMatrix<f64> {
    let centered = center(z);
    let n = z.nrows() as f64;
    let mut sigma = centered.transpose() * &centered / n;
    crate::linalg::symmetrize(&mut sigma);
    sigma
}

/// `M z`: rows minus their mean, divided by the row count.
fn scaled_centered(z: &DMatrix<f64>) -> DMatrix<f64> {
    center(z) / z.nrows() as f64
}

fn center(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let mut centered = z.clone();
    for c in 0..z.ncols() {
        let mean = z.column(c).sum() / n;
        centered.column_mut(c).add_scalar_mut(-mean);
    }
    centered
}

/// Cached eigendecomposition of a pooled covariance.
#[derive(Debug, Clone)]
pub struct PooledCovariance {
    pub sigma: DMatrix<f64>,
    /// Clamped eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub root: DMatrix<f64>,
}

impl PooledCovariance {
    pub fn new(z: &DMatrix<f64>) -> Result<Self> {
        if z.nrows() < 2 {
            return Err(LqfError::contract("bilinear pooling needs at least 2 positions"));
        }
        check_finite("bilinear pool input", z.as_slice())?;
        let sigma = covariance(z);
        let (mut eigenvalues, eigenvectors) = sym_eigen_desc(&sigma);
        for v in eigenvalues.iter_mut() {
            if *v < -CLAMP_TOL {
                return Err(LqfError::NotPositiveDefinite(format!(
                    "covariance eigenvalue {v:e} below -{CLAMP_TOL:e}"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let root = spectral_map(&eigenvalues, &eigenvectors, f64::sqrt);
        Ok(PooledCovariance {
            sigma,
            eigenvalues,
            eigenvectors,
            root,
        })
    }

    fn tangent_roots(&self, damp: bool) -> Result<DVector<f64>> {
        let min = self.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < TANGENT_FLOOR {
            if !damp {
                return Err(LqfError::NotPositiveDefinite(format!(
                    "covariance is singular (min eigenvalue {min:e}); enable damping"
                )));
            }
            return Ok(self.eigenvalues.map(|v| (v + TANGENT_FLOOR).sqrt()));
        }
        Ok(self.eigenvalues.map(f64::sqrt))
    }

    /// `dΣ = dzᵀ M z + zᵀ M dz`.
    pub fn covariance_tangent(z: &DMatrix<f64>, dz: &DMatrix<f64>) -> DMatrix<f64> {
        let mz = scaled_centered(z);
        let half = dz.transpose() * mz;
        &half + half.transpose()
    }

    pub fn tangent(&self, z: &DMatrix<f64>, dz: &DMatrix<f64>, opts: TangentOptions) -> Result<DMatrix<f64>> {
        let c = self.sigma.nrows();
        if dz.iter().all(|&v| v == 0.0) {
            return Ok(DMatrix::zeros(c, c));
        }
        let d_sigma = Self::covariance_tangent(z, dz);
        self.root_tangent(&d_sigma, opts)
    }

    /// Derivative of `√Σ` in direction `dΣ`.
    pub fn root_tangent(&self, d_sigma: &DMatrix<f64>, opts: TangentOptions) -> Result<DMatrix<f64>> {
        let roots = self.tangent_roots(opts.damp_singular)?;
        Ok(match opts.mode {
            SqrtTangentMode::Sylvester => sylvester_sym(&roots, &self.eigenvectors, d_sigma),
            SqrtTangentMode::HalfInverseRoot => {
                let inv_root = spectral_map(&roots, &self.eigenvectors, |r| 1.0 / r);
                inv_root * d_sigma * 0.5
            }
        })
    }

    /// Pulls a cotangent on `√Σ` back to the feature map (exact derivative).
    pub fn adjoint(&self, z: &DMatrix<f64>, root_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let roots = self.tangent_roots(true)?;
        // The Sylvester operator X ↦ √Σ X + X √Σ is self-adjoint.
        let sigma_bar = sylvester_sym(&roots, &self.eigenvectors, root_bar);
        let sym = &sigma_bar + sigma_bar.transpose();
        Ok(scaled_centered(z) * sym)
    }
}

/// `√Σ` of a feature map (principal root).
pub fn bilinear_pool_forward(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PooledCovariance::new(z)?.root)
}

/// Derivative of [`bilinear_pool_forward`] at `z` in direction `dz`.
pub fn bilinear_pool_tangent(
    z: &DMatrix<f64>,
    dz: &DMatrix<f64>,
    opts: TangentOptions,
) -> Result<DMatrix<f64>> {
    if dz.shape() != z.shape() {
        return Err(LqfError::contract("tangent must have the shape of the feature map"));
    }
    PooledCovariance::new(z)?.tangent(z, dz, opts)
}
