//! Monte-Carlo checks of the sampler: intensity, pair correlation and count
//! concentration of an isotropic ensemble.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{bernstein_tail, count_expectation};
use crate::kernel::ScatteringMatrix;
use crate::sampler::{
    build_spectral_basis_with_cap, empirical_pair_correlation, sample_gdp_from_basis, PointPattern,
    SamplerConfig,
};
use crate::spiked::replicate_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub dim: usize,
    pub side: f64,
    pub replicates: usize,
    pub seed: u64,
    pub bin_width: f64,
    pub max_distance: f64,
    pub eps: Vec<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            side: 30.0,
            replicates: 100,
            seed: 0,
            bin_width: 0.1,
            max_distance: 2.0,
            eps: vec![0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelationRow {
    pub lower: f64,
    pub upper: f64,
    pub observed: f64,
    /// `1 − exp(−2πt²)` averaged over the bin with weight `t^(d−1)`.
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub eps: f64,
    /// Fraction of replicates with `|N/n − 1| ≥ ε`.
    pub frequency: f64,
    pub bernstein: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ValidationConfig,
    /// Points per unit volume, pooled over replicates.
    pub intensity: f64,
    pub pair_correlation: Vec<PairCorrelationRow>,
    pub max_pair_correlation_deviation: f64,
    /// Counts are taken in `B(R)` with `R = L/2`.
    pub count_radius: f64,
    pub count_expectation: f64,
    pub count_mean: f64,
    pub count_variance: f64,
    pub tails: Vec<TailRow>,
}

/// `g(t) = 1 − exp(−2πt²)` of the normalized isotropic GDP.
pub fn isotropic_pair_correlation(t: f64) -> f64 {
    1.0 - (-2.0 * PI * t * t).exp()
}

fn bin_reference(lo: f64, hi: f64, d: usize) -> f64 {
    // Composite Simpson rule on 64 panels.
    let n = 64;
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let t = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let wt = w * t.powi(d as i32 - 1);
        num += wt * isotropic_pair_correlation(t);
        den += wt;
    }
    num / den
}

/// Number of points with `‖x‖ < R` (strict, as in the estimator).
pub fn count_in_ball(pattern: &PointPattern, radius: f64) -> usize {
    let r2 = radius * radius;
    pattern
        .points()
        .filter(|p| p.iter().map(|v| v * v).sum::<f64>() < r2)
        .count()
}

/// Simulates the ensemble and summarizes it.
pub fn run_validation(config: &ValidationConfig, sampler: &SamplerConfig) -> Result<ValidationReport> {
    if config.replicates < 2 {
        return Err(Error::invalid("replicates", "need at least two replicates"));
    }
    if !(config.bin_width > 0.0) || !(config.max_distance > 0.0) {
        return Err(Error::invalid("bin_width", "bin width and max distance must be positive"));
    }
    let sigma = ScatteringMatrix::isotropic(config.dim)?;
    let basis = build_spectral_basis_with_cap(&sigma, config.side, sampler.tol, sampler.mode_cap)?;
    let patterns = (0..config.replicates as u64)
        .into_par_iter()
        .map(|i| sample_gdp_from_basis(&basis, replicate_seed(config.seed, i), sampler))
        .collect::<Result<Vec<_>>>()?;
    let volume = config.side.powi(config.dim as i32);
    let total: usize = patterns.iter().map(PointPattern::len).sum();
    let intensity = total as f64 / (volume * patterns.len() as f64);

    let nbins = (config.max_distance / config.bin_width).round().max(1.0) as usize;
    let edges: Vec<f64> = (0..=nbins).map(|i| i as f64 * config.bin_width).collect();
    let bins = empirical_pair_correlation(&patterns, &edges)?;
    let pair_correlation: Vec<PairCorrelationRow> = bins
        .iter()
        .map(|b| PairCorrelationRow {
            lower: b.lower,
            upper: b.upper,
            observed: b.ratio,
            reference: bin_reference(b.lower, b.upper, config.dim),
        })
        .collect();
    let max_dev = pair_correlation
        .iter()
        .map(|r| (r.observed - r.reference).abs())
        .fold(0.0, f64::max);

    let radius = config.side / 2.0;
    let n = count_expectation(radius, config.dim);
    let counts: Vec<f64> = patterns.iter().map(|p| count_in_ball(p, radius) as f64).collect();
    let b = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / b;
    let variance = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (b - 1.0);
    let tails = config
        .eps
        .iter()
        .map(|&eps| TailRow {
            eps,
            frequency: counts.iter().filter(|&&c| (c / n - 1.0).abs() >= eps).count() as f64 / b,
            bernstein: bernstein_tail(eps, radius, config.dim),
        })
        .collect();
    Ok(ValidationReport {
        config: config.clone(),
        intensity,
        pair_correlation,
        max_pair_correlation_deviation: max_dev,
        count_radius: radius,
        count_expectation: n,
        count_mean: mean,
        count_variance: variance,
        tails,
    })
}
