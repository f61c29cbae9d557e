//! Detection and estimation of a rank-one spike in the scattering matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{relative_asymmetry, sym_eigen_desc, symmetrize};
use crate::error::{Error, Result};
use crate::estimator::{estimate_scattering, risk_rate, EstimatorConfig};
use crate::kernel::ScatteringMatrix;
use crate::sampler::{build_spectral_basis_with_cap, sample_gdp_from_basis, SamplerConfig};

/// Relative asymmetry accepted in estimator output.
const INPUT_SYMMETRY_TOL: f64 = 1e-9;

/// Outcome of the test `ψ_t = 1{2π‖Σ̂‖ > 1 + t·𝔯}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// `2π‖Σ̂‖op`.
    pub statistic: f64,
    /// `1 + t·𝔯`.
    pub threshold: f64,
    pub reject: bool,
    pub t: f64,
    /// The rate `𝔯_{n,d}`.
    pub rate: f64,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimated scattering matrix"));
    }
    let asym = relative_asymmetry(m);
    if asym > INPUT_SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(symmetrize(m))
}

/// `2π‖Σ̂‖op`, with the operator norm taken as the largest eigenvalue
/// magnitude of the symmetrized input.
pub fn test_statistic(sigma_hat: &DMatrix<f64>) -> Result<f64> {
    let s = check_symmetric(sigma_hat)?;
    let eig = s.symmetric_eigenvalues();
    Ok(2.0 * PI * eig.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Applies `ψ_t` with the analytic threshold `1 + t·𝔯_{n,d}`.
pub fn detection_test(sigma_hat: &DMatrix<f64>, n: f64, d: usize, t: f64, c: f64) -> Result<DetectionResult> {
    if !(t > 0.0) {
        return Err(Error::invalid("t", format!("must be positive, got {t}")));
    }
    if sigma_hat.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: sigma_hat.nrows(),
        });
    }
    let statistic = test_statistic(sigma_hat)?;
    let rate = risk_rate(n, d, c)?;
    let threshold = 1.0 + t * rate;
    Ok(DetectionResult {
        statistic,
        threshold,
        reject: statistic > threshold,
        t,
        rate,
    })
}

/// Null distribution of the test statistic, simulated from the isotropic
/// GDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub delta: f64,
    /// Empirical `1 − δ` quantile of the null statistics.
    pub threshold: f64,
    /// One statistic per replicate, in replicate order.
    pub statistics: Vec<f64>,
    pub seeds: Vec<u64>,
    pub radius: f64,
    pub dim: usize,
}

/// Seed of replicate `i` in a run started from `seed`.
pub fn replicate_seed(seed: u64, i: u64) -> u64 {
    // SplitMix64 finalizer, so consecutive base seeds give unrelated streams.
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Empirical quantile: the `⌈p·B⌉`-th smallest of `B` values.
pub fn empirical_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", "quantile level must lie in [0, 1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Simulates `replicates` isotropic GDPs on the torus of side `2R`,
/// estimates `Σ̂` on `B(R)` for each, and returns the statistics with their
/// `1 − δ` quantile.
pub fn calibrate_null(
    d: usize,
    radius: f64,
    replicates: usize,
    delta: f64,
    seed: u64,
    estimator: &EstimatorConfig,
    sampler: &SamplerConfig,
) -> Result<NullCalibration> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    if replicates == 0 {
        return Err(Error::invalid("replicates", "need at least one null replicate"));
    }
    let sigma = ScatteringMatrix::isotropic(d)?;
    let basis = build_spectral_basis_with_cap(&sigma, 2.0 * radius, sampler.tol, sampler.mode_cap)?;
    let cfg = EstimatorConfig {
        radius: Some(radius),
        ..estimator.clone()
    };
    let seeds: Vec<u64> = (0..replicates as u64).map(|i| replicate_seed(seed, i)).collect();
    let statistics = seeds
        .par_iter()
        .map(|&s| {
            let pattern = sample_gdp_from_basis(&basis, s, sampler)?;
            let est = estimate_scattering(&pattern, &cfg)?;
            test_statistic(&est.sigma_hat)
        })
        .collect::<Result<Vec<f64>>>()?;
    let threshold = empirical_quantile(&statistics, 1.0 - delta)?;
    Ok(NullCalibration {
        delta,
        threshold,
        statistics,
        seeds,
        radius,
        dim: d,
    })
}

/// Applies `ψ` with a simulated threshold. The reported `t` is the one that
/// reproduces that threshold through `1 + t·𝔯_{n,d}`.
pub fn calibrated_detection_test(
    sigma_hat: &DMatrix<f64>,
    n: f64,
    calibration: &NullCalibration,
    c: f64,
) -> Result<DetectionResult> {
    let d = calibration.dim;
    if sigma_hat.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: sigma_hat.nrows(),
        });
    }
    let statistic = test_statistic(sigma_hat)?;
    let rate = risk_rate(n, d, c)?;
    let threshold = calibration.threshold;
    Ok(DetectionResult {
        statistic,
        threshold,
        reject: statistic > threshold,
        t: (threshold - 1.0) / rate,
        rate,
    })
}

/// Leading eigenpair of `Σ̂` read as a spike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEstimate {
    pub u_hat: Vec<f64>,
    /// `2π·λ₁(Σ̂) − 1`, not clamped. Apply it to a rescaled `Σ̂` (see
    /// [`estimate_scattering`](crate::estimator::estimate_scattering)) to
    /// read it as the spike strength.
    pub lambda_hat: f64,
    /// `λ₁(Σ̂) − λ₂(Σ̂)`; in dimension one, `max(λ₁, 0)`.
    pub gap: f64,
}

/// Leading eigenvector of `Σ̂` with a deterministic sign and tie rule.
///
/// The sign makes the first nonzero coordinate positive. When the top
/// eigenvalue is repeated (to relative tolerance `1e-12`), the returned
/// vector is the normalized projection of the first coordinate axis
/// `e₁, e₂, …` that has a nonzero component in the top eigenspace.
pub fn estimate_spike(sigma_hat: &DMatrix<f64>) -> Result<SpikeEstimate> {
    let s = check_symmetric(sigma_hat)?;
    let d = s.nrows();
    if d == 0 {
        return Err(Error::EmptyInput("empty matrix"));
    }
    let (vals, vecs) = sym_eigen_desc(&s);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let top = (0..d)
        .take_while(|&i| vals[0] - vals[i] <= 1e-12 * scale)
        .count();
    let mut u: DVector<f64> = if top == 1 {
        vecs.column(0).into_owned()
    } else {
        let basis = vecs.columns(0, top);
        let mut chosen = None;
        for axis in 0..d {
            let proj = basis * basis.row(axis).transpose();
            let norm = proj.norm();
            if norm > 1e-8 {
                chosen = Some(proj / norm);
                break;
            }
        }
        chosen.ok_or(Error::NonFinite("eigenvector"))?
    };
    let pivot = u.iter().copied().find(|v| v.abs() > 1e-14).unwrap_or(1.0);
    if pivot < 0.0 {
        u = -u;
    }
    let gap = if d >= 2 { vals[0] - vals[1] } else { vals[0].max(0.0) };
    Ok(SpikeEstimate {
        u_hat: u.iter().copied().collect(),
        lambda_hat: 2.0 * PI * vals[0] - 1.0,
        gap: gap.max(0.0),
    })
}

/// `|sin ∠(u, v)| = √(1 − ⟨u, v⟩²)` for unit vectors.
pub fn sin_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    for (name, w) in [("u", u), ("v", v)] {
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(name, format!("must have unit norm, got {n}")));
        }
    }
    let c: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - c * c).max(0.0).sqrt())
}

/// Reference value `𝔯/λ` for the mean sine of the estimation angle.
pub fn davis_kahan_reference(rate: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(rate / lambda)
}
