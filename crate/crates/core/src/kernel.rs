//! The Gaussian kernel model: scattering matrices, kernel and spectral density
//! evaluation, correlation functions and the spiked family.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dense::{relative_asymmetry, sym_eigen_desc};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative tolerance on the symmetry of a scattering matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative tolerance on `det Σ = (2π)^(-d)` for the `normalized` flag.
pub const NORMALIZATION_TOL: f64 = 1e-9;
/// Smallest admissible ratio between the extreme eigenvalues.
pub const CONDITION_FLOOR: f64 = 1e-12;

/// A symmetric positive-definite `d×d` scattering matrix `Σ`.
///
/// The inverse, log-determinant and spectrum are computed once at
/// construction. Instances are immutable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScatteringRepr", into = "ScatteringRepr")]
pub struct ScatteringMatrix {
    entries: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct ScatteringRepr {
    dim: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl TryFrom<ScatteringRepr> for ScatteringMatrix {
    type Error = Error;
    fn try_from(r: ScatteringRepr) -> Result<Self> {
        ScatteringMatrix::from_row_slice(r.dim, &r.entries)
    }
}

impl From<ScatteringMatrix> for ScatteringRepr {
    fn from(s: ScatteringMatrix) -> Self {
        let d = s.dim();
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                entries.push(s.entries[(i, j)]);
            }
        }
        ScatteringRepr { dim: d, entries }
    }
}

impl ScatteringMatrix {
    /// Validates and wraps a matrix.
    ///
    /// Fails if the matrix is not square, not symmetric to a relative
    /// tolerance of `1e-12`, has non-finite entries, or is not positive
    /// definite with `λ_min > 1e-12·λ_max`.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let d = entries.nrows();
        if d == 0 {
            return Err(Error::invalid("sigma", "dimension must be at least 1"));
        }
        if entries.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: entries.ncols(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scattering matrix"));
        }
        let asym = relative_asymmetry(&entries);
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        // Use the upper triangle as the canonical copy so the stored matrix is
        // exactly symmetric.
        let entries = DMatrix::from_fn(d, d, |i, j| {
            if i <= j {
                entries[(i, j)]
            } else {
                entries[(j, i)]
            }
        });
        let chol = nalgebra::Cholesky::new(entries.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let (eigenvalues, eigenvectors) = sym_eigen_desc(&entries);
        let (lmax, lmin) = (eigenvalues[0], eigenvalues[d - 1]);
        if !(lmin > CONDITION_FLOOR * lmax) || !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let inv = chol.inverse();
        let inverse = (&inv + inv.transpose()) * 0.5;
        let normalized = (log_det + d as f64 * LN_2PI).exp_m1().abs() <= NORMALIZATION_TOL;
        Ok(Self {
            entries,
            inverse,
            log_det,
            eigenvalues,
            eigenvectors,
            normalized,
        })
    }

    /// Builds a matrix from `d²` row-major entries.
    pub fn from_row_slice(d: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(d, d, entries))
    }

    /// The normalized isotropic matrix `I/(2π)`.
    pub fn isotropic(d: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, d) / (2.0 * PI))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Unit eigenvectors matching [`Self::eigenvalues`], one per column.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Operator norm, the largest eigenvalue.
    pub fn op_norm(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Whether `det Σ = (2π)^(-d)` holds to relative tolerance `1e-9`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `uᵀΣ⁻¹u`.
    pub fn inv_quad_form(&self, u: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for (j, &uj) in u.iter().enumerate().take(d) {
            let row: f64 = self.inverse.column(j).iter().zip(u).map(|(a, b)| a * b).sum();
            acc += row * uj;
        }
        acc
    }

    /// `ωᵀΣω`.
    pub fn quad_form(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for (j, &wj) in w.iter().enumerate().take(d) {
            let row: f64 = self.entries.column(j).iter().zip(w).map(|(a, b)| a * b).sum();
            acc += row * wj;
        }
        acc
    }

    /// `ln Φ(0) = -(d ln 2π + ln det Σ)/2`, taken as exactly zero for a
    /// normalized `Σ` so that `K(x, x) = 1` holds without rounding.
    fn log_peak(&self) -> f64 {
        if self.is_normalized() {
            return 0.0;
        }
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: n,
            });
        }
        Ok(())
    }
}

/// Gaussian kernel `K(x, y) = Φ(x − y)`, where `Φ` is the centered normal
/// density with covariance `Σ`.
pub fn kernel_value(sigma: &ScatteringMatrix, x: &[f64], y: &[f64]) -> Result<f64> {
    sigma.check_dim(x.len())?;
    sigma.check_dim(y.len())?;
    let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    Ok((sigma.log_peak() - 0.5 * sigma.inv_quad_form(&u)).exp())
}

/// Fourier transform of the kernel profile, `Φ̂(ω) = exp(−2π² ωᵀΣω)`.
pub fn spectral_density(sigma: &ScatteringMatrix, omega: &[f64]) -> Result<f64> {
    sigma.check_dim(omega.len())?;
    Ok((-2.0 * PI * PI * sigma.quad_form(omega)).exp())
}

/// Rescales `Σ` by a scalar so that `det Σ = (2π)^(-d)`.
///
/// Already-normalized input is returned unchanged.
pub fn normalize_scattering(sigma: &ScatteringMatrix) -> Result<ScatteringMatrix> {
    if sigma.is_normalized() {
        return Ok(sigma.clone());
    }
    let d = sigma.dim() as f64;
    let c = ((-d * LN_2PI - sigma.log_det) / d).exp();
    ScatteringMatrix::new(sigma.matrix() * c)
}

/// The `k`-point correlation `det[K(x_i, x_j)]` for the given points.
///
/// The determinant comes from a pivoted Cholesky factorization; pivots that
/// round to non-positive values make the result exactly zero, so the output
/// is never negative. With a normalized `Σ` it also never exceeds one.
pub fn rho_k<P: AsRef<[f64]>>(sigma: &ScatteringMatrix, points: &[P]) -> Result<f64> {
    let k = points.len();
    if k == 0 {
        return Err(Error::EmptyInput("rho_k needs at least one point"));
    }
    for p in points {
        sigma.check_dim(p.as_ref().len())?;
    }
    let mut gram = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = kernel_value(sigma, points[i].as_ref(), points[j].as_ref())?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let diag_prod: f64 = gram.diagonal().iter().product();
    Ok(pivoted_cholesky_det(gram).min(diag_prod))
}

/// Determinant of a symmetric positive-semidefinite matrix, clamped at zero.
fn pivoted_cholesky_det(mut a: DMatrix<f64>) -> f64 {
    let k = a.nrows();
    let mut det = 1.0;
    for step in 0..k {
        let (mut piv, mut best) = (step, a[(step, step)]);
        for i in step + 1..k {
            if a[(i, i)] > best {
                best = a[(i, i)];
                piv = i;
            }
        }
        if best <= 0.0 {
            return 0.0;
        }
        a.swap_rows(step, piv);
        a.swap_columns(step, piv);
        det *= best;
        for i in step + 1..k {
            let f = a[(i, step)] / best;
            for j in step + 1..=i {
                let v = a[(i, j)] - f * a[(j, step)];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    det.max(0.0)
}

/// The truncated pair correlation `ρ̄₂(x, y) = −K(x, y)²`.
///
/// For normalized `Σ` this is `−exp(−(x−y)ᵀΣ⁻¹(x−y))` and equals
/// `ρ₂(x, y) − 1`.
pub fn truncated_pair_correlation(sigma: &ScatteringMatrix, x: &[f64], y: &[f64]) -> Result<f64> {
    if sigma.is_normalized() {
        sigma.check_dim(x.len())?;
        sigma.check_dim(y.len())?;
        let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        return Ok(-(-sigma.inv_quad_form(&u)).exp());
    }
    let k = kernel_value(sigma, x, y)?;
    Ok(-k * k)
}

/// Strength and direction of a rank-one spike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikedParams {
    lambda: f64,
    u: Vec<f64>,
}

impl SpikedParams {
    /// Requires `lambda ≥ 0` and `‖u‖ = 1` within `1e-12`.
    pub fn new(lambda: f64, u: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", format!("must be finite and >= 0, got {lambda}")));
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("u", format!("must have unit norm, got {norm}")));
        }
        Ok(Self { lambda, u })
    }

    /// Normalizes `u` before validating, for callers holding an arbitrary
    /// nonzero direction.
    pub fn with_direction(lambda: f64, u: &[f64]) -> Result<Self> {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("u", "direction must be nonzero and finite"));
        }
        Self::new(lambda, u.iter().map(|v| v / norm).collect())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn direction(&self) -> &[f64] {
        &self.u
    }
}

/// The spiked scattering matrix
/// `(2π)Σ = (1+λ)^(−1/(d−1))(I − uuᵀ) + (1+λ)uuᵀ`.
///
/// Requires `d ≥ 2` and `u` of length `d`.
pub fn spiked_scattering(params: &SpikedParams, d: usize) -> Result<ScatteringMatrix> {
    if d < 2 {
        return Err(Error::invalid("d", "the spiked model needs d >= 2"));
    }
    if params.u.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: params.u.len(),
        });
    }
    let top = 1.0 + params.lambda;
    let rest = top.powf(-1.0 / (d as f64 - 1.0));
    let u = DVector::from_column_slice(&params.u);
    let uu = &u * u.transpose();
    let m = (DMatrix::identity(d, d) - &uu) * rest + uu * top;
    ScatteringMatrix::new(m / (2.0 * PI))
}
