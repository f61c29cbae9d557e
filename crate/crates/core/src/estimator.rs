//! The scattering-matrix estimator `Σ̂` and the theoretical bounds that go
//! with it.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ScatteringMatrix;
use crate::sampler::{PointPattern, Window};

/// Volume of the unit Euclidean ball in dimension `d`, `π^(d/2)/Γ(d/2+1)`.
pub fn unit_ball_volume(d: usize) -> f64 {
    // V_d = V_{d−2}·2π/d, V_0 = 1, V_1 = 2.
    let (mut v, mut k) = if d % 2 == 0 { (1.0, 2) } else { (2.0, 3) };
    while k <= d {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}

/// Expected number of points in `B(R)` at unit intensity, `|B(1)|R^d`.
pub fn count_expectation(radius: f64, d: usize) -> f64 {
    unit_ball_volume(d) * radius.powi(d as i32)
}

/// Bernstein bound `2·exp(−3ε²|B(R)|/(6+2ε))` on `P[|N/n − 1| ≥ ε]`.
///
/// Returned raw; it exceeds one for small `ε·R`.
pub fn bernstein_tail(eps: f64, radius: f64, d: usize) -> f64 {
    let n = count_expectation(radius, d);
    2.0 * (-3.0 * eps * eps * n / (6.0 + 2.0 * eps)).exp()
}

/// Cutoff rule `r = C₀·√(d·ln n)`.
pub fn default_cutoff(n: f64, d: usize, c0: f64) -> Result<f64> {
    if !(n > 1.0) {
        return Err(Error::invalid("n", format!("must exceed 1, got {n}")));
    }
    Ok(c0 * (d as f64 * n.ln()).sqrt())
}

/// Squared-Frobenius bias bound `9d‖Σ‖²·exp((4TrΣ − 2r²)/(3‖Σ‖))`.
///
/// `None` when `r < √(5·TrΣ/2)`, where the bound is not asserted.
pub fn bias_bound(sigma: &ScatteringMatrix, r: f64) -> Option<f64> {
    let tr = sigma.trace();
    if !(r >= (2.5 * tr).sqrt()) {
        return None;
    }
    let s = sigma.op_norm();
    let d = sigma.dim() as f64;
    Some(9.0 * d * s * s * ((4.0 * tr - 2.0 * r * r) / (3.0 * s)).exp())
}

/// Variance bound `d²(C/d)^d·r^(2d+4)/n`.
///
/// `None` when `r < √d` or `n ≤ 0`.
pub fn variance_bound(r: f64, d: usize, n: f64, c: f64) -> Option<f64> {
    let df = d as f64;
    if !(r >= df.sqrt()) || !(n > 0.0) {
        return None;
    }
    Some(df * df * (c / df).powi(d as i32) * r.powi(2 * d as i32 + 4) / n)
}

/// Risk rate `d²(c·√ln n)^(d+1)/√n`.
pub fn risk_rate(n: f64, d: usize, c: f64) -> Result<f64> {
    if !(n > 1.0) {
        return Err(Error::invalid("n", format!("must exceed 1, got {n}")));
    }
    let df = d as f64;
    Ok(df * df * (c * n.ln().sqrt()).powi(d as i32 + 1) / n.sqrt())
}

/// Neighborhood structure used by the estimator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    /// `𝒩₀ = {j : ‖X_j‖ < R − r}`, ascending.
    pub inner: Vec<usize>,
    /// `𝒩ᵢ = {j ≠ i : ‖Xᵢ − X_j‖ < r}`, each ascending.
    pub neighbors: Vec<Vec<usize>>,
}

/// Builds `𝒩₀` and every `𝒩ᵢ` with strict inequalities.
///
/// Neighbor search uses a hashed uniform grid with cell side `r` in low
/// dimension and a direct double loop otherwise.
pub fn build_neighborhoods(pattern: &PointPattern, r: f64, radius: f64) -> Result<NeighborIndex> {
    check_radii(pattern, r, radius)?;
    let d = pattern.dim();
    let n = pattern.len();
    let inner_r2 = (radius - r) * (radius - r);
    let inner = (0..n)
        .filter(|&i| norm2(pattern.point(i)) < inner_r2)
        .collect();
    let r2 = r * r;
    let neighbors = if d <= 4 {
        grid_neighbors(pattern, r)
    } else {
        brute_force_neighbors(pattern, r2)
    };
    Ok(NeighborIndex { inner, neighbors })
}

fn check_radii(pattern: &PointPattern, r: f64, radius: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid("r", format!("must be positive, got {r}")));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid("R", format!("must be positive, got {radius}")));
    }
    if r >= radius {
        return Err(Error::invalid("r", format!("cutoff {r} must be below R = {radius}")));
    }
    if radius > pattern.window().inscribed_radius() * (1.0 + 1e-12) {
        return Err(Error::invalid("R", "the ball B(R) does not fit inside the window"));
    }
    Ok(())
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn brute_force_neighbors(pattern: &PointPattern, r2: f64) -> Vec<Vec<usize>> {
    let n = pattern.len();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && dist2(pattern.point(i), pattern.point(j)) < r2)
                .collect()
        })
        .collect()
}

fn grid_neighbors(pattern: &PointPattern, r: f64) -> Vec<Vec<usize>> {
    let n = pattern.len();
    let r2 = r * r;
    let cell = |x: &[f64]| -> Vec<i64> { x.iter().map(|v| (v / r).floor() as i64).collect() };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(cell(pattern.point(i))).or_default().push(i);
    }
    let offsets = crate::sampler::neighbor_offsets(pattern.dim());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = pattern.point(i);
            let c = cell(xi);
            let mut out = Vec::new();
            let mut key = c.clone();
            for off in &offsets {
                for (k, (&base, &o)) in key.iter_mut().zip(c.iter().zip(off)) {
                    *k = base + o as i64;
                }
                if let Some(bucket) = grid.get(&key) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&j| j != i && dist2(xi, pattern.point(j)) < r2),
                    );
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Settings for [`estimate_scattering`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Cutoff `r`; chosen by the automatic rule when absent.
    pub cutoff: Option<f64>,
    /// Observation radius `R`; defaults to the largest ball inside the window.
    pub radius: Option<f64>,
    /// Constant `C₀` of the automatic cutoff rule.
    pub c0: f64,
    /// Constant `C` of the variance bound.
    pub variance_constant: f64,
    /// Constant `c` of the risk rate.
    pub rate_constant: f64,
    /// Known scattering matrix, used only to evaluate the bias bound.
    pub reference: Option<ScatteringMatrix>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            cutoff: None,
            radius: None,
            c0: 1.0,
            variance_constant: 1.0,
            rate_constant: 1.0,
            reference: None,
        }
    }
}

/// `Σ̂` with the quantities needed to interpret it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    #[serde(with = "crate::dense::rows")]
    pub sigma_hat: DMatrix<f64>,
    /// Observed count `N` in `B(R)`.
    #[serde(rename = "N")]
    pub observed_count: usize,
    /// Expected count `n = |B(1)|R^d`.
    #[serde(rename = "n")]
    pub expected_count: f64,
    pub r_used: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    /// Number of `(i, j)` terms in the double sum.
    pub pair_count: usize,
    /// `|𝒩₀|`.
    pub inner_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bias_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variance_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub risk_rate: Option<f64>,
}

/// Evaluates
/// `Σ̂ = |B(1)|·r^(d+2)/(d+2)·I − |B(R−r)|⁻¹·Σ_{i∈𝒩₀} Σ_{j∈𝒩ᵢ} (Xᵢ−Xⱼ)(Xᵢ−Xⱼ)ᵀ`.
///
/// Points are first sorted lexicographically and the double sum runs in
/// ascending order, so the result does not depend on the input order or on
/// the thread count.
///
/// For a GDP with a fixed `r`, `E[Σ̂] = ∫_{‖u‖<r} uuᵀ·exp(−uᵀΣ⁻¹u) du`. As `r`
/// grows this tends to `2^(−(d+2)/2)·Σ` (a quarter of `Σ` in the plane),
/// because `exp(−uᵀΣ⁻¹u)` is `2^(−d/2)` times the `N(0, Σ/2)` density under
/// the normalization. Rescale by `2^((d+2)/2)` when the magnitude of `Σ`
/// matters; eigenvectors are unaffected.
pub fn estimate_scattering(pattern: &PointPattern, config: &EstimatorConfig) -> Result<EstimateResult> {
    let d = pattern.dim();
    let radius = config.radius.unwrap_or_else(|| pattern.window().inscribed_radius());
    let n = count_expectation(radius, d);
    let sorted = sorted_in_ball(pattern, radius)?;
    let r = match config.cutoff {
        Some(r) => r,
        None => auto_cutoff(&sorted, radius, n, config.c0)?,
    };
    let (sigma_hat, pair_count, inner_count) = raw_estimate(&sorted, r, radius)?;
    let variance_bound = variance_bound(r, d, n, config.variance_constant);
    let risk_rate = risk_rate(n, d, config.rate_constant).ok();
    let bias_bound = config.reference.as_ref().and_then(|s| bias_bound(s, r));
    Ok(EstimateResult {
        sigma_hat,
        observed_count: sorted.len(),
        expected_count: n,
        r_used: r,
        radius,
        pair_count,
        inner_count,
        bias_bound,
        variance_bound,
        risk_rate,
    })
}

/// Points in the closed ball `B(R)`, sorted lexicographically.
fn sorted_in_ball(pattern: &PointPattern, radius: f64) -> Result<PointPattern> {
    if !(radius > 0.0) || radius > pattern.window().inscribed_radius() * (1.0 + 1e-12) {
        return Err(Error::invalid("R", "the ball B(R) does not fit inside the window"));
    }
    let r2 = radius * radius;
    let mut pts: Vec<&[f64]> = pattern.points().filter(|p| norm2(p) <= r2).collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let coords = pts.into_iter().flatten().copied().collect();
    PointPattern::new(
        coords,
        Window::Ball {
            radius: radius.min(pattern.window().inscribed_radius()),
            dim: pattern.dim(),
        },
    )
}

/// Automatic cutoff: `C₀√(d ln n)` clamped to
/// `[√d·max(1, √(5·TrΣ̂₀/2)), R/2]`, with `Σ̂₀` a pilot estimate at `r = R/4`.
/// When the interval is empty the result is `R/2`.
fn auto_cutoff(sorted: &PointPattern, radius: f64, n: f64, c0: f64) -> Result<f64> {
    let d = sorted.dim();
    let raw = default_cutoff(n, d, c0)?;
    let (pilot, _, _) = raw_estimate(sorted, radius / 4.0, radius)?;
    let lo = (d as f64).sqrt() * (2.5 * pilot.trace()).max(0.0).sqrt().max(1.0);
    let hi = radius / 2.0;
    // A noisy pilot in a small window can push the lower end past R/2; the
    // upper end wins since r ≤ R/2 keeps 𝒩₀ nonempty.
    Ok(raw.max(lo).min(hi))
}

fn raw_estimate(sorted: &PointPattern, r: f64, radius: f64) -> Result<(DMatrix<f64>, usize, usize)> {
    let d = sorted.dim();
    let index = build_neighborhoods(sorted, r, radius)?;
    let partials: Vec<(Vec<f64>, usize)> = index
        .inner
        .par_iter()
        .map(|&i| {
            let xi = sorted.point(i);
            let mut acc = vec![0.0; d * d];
            let mut diff = vec![0.0; d];
            for &j in &index.neighbors[i] {
                for (k, (a, b)) in diff.iter_mut().zip(xi.iter().zip(sorted.point(j))) {
                    *k = a - b;
                }
                for a in 0..d {
                    for b in 0..d {
                        acc[a * d + b] += diff[a] * diff[b];
                    }
                }
            }
            (acc, index.neighbors[i].len())
        })
        .collect();
    let mut sum = vec![0.0; d * d];
    let mut pairs = 0;
    for (acc, count) in &partials {
        for (s, v) in sum.iter_mut().zip(acc) {
            *s += v;
        }
        pairs += count;
    }
    let ident = unit_ball_volume(d) * r.powi(d as i32 + 2) / (d as f64 + 2.0);
    let shrink = count_expectation(radius - r, d);
    let sigma_hat = DMatrix::from_fn(d, d, |a, b| {
        let diag = if a == b { ident } else { 0.0 };
        diag - sum[a * d + b] / shrink
    });
    Ok((sigma_hat, pairs, index.inner.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-15);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-15);
        assert!((unit_ball_volume(4) - PI * PI / 2.0).abs() < 1e-14);
        assert!((unit_ball_volume(5) - 8.0 * PI * PI / 15.0).abs() < 1e-14);
        assert_eq!(unit_ball_volume(0), 1.0);
    }

    #[test]
    fn count_expectations() {
        assert!((count_expectation(1.0, 2) - PI).abs() < 1e-15);
        assert!((count_expectation(10.0, 2) - 100.0 * PI).abs() < 1e-12);
        assert!((count_expectation(2.0, 3) - 32.0 * PI / 3.0).abs() < 1e-13);
    }

    #[test]
    fn bernstein_values() {
        assert!((bernstein_tail(1e-12, 5.0, 2) - 2.0).abs() < 1e-9);
        let expected = 2.0 * (-3.0 * 0.01 * 100.0 * PI / 6.2).exp();
        assert!((bernstein_tail(0.1, 10.0, 2) - expected).abs() < 1e-15);
        assert!(bernstein_tail(0.1, 11.0, 2) < bernstein_tail(0.1, 10.0, 2));
    }

    #[test]
    fn cutoff_rule() {
        assert!((default_cutoff(std::f64::consts::E, 1, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((default_cutoff(4f64.exp(), 4, 1.0).unwrap() - 4.0).abs() < 1e-14);
        assert!(default_cutoff(1.0, 2, 1.0).is_err());
    }

    #[test]
    fn bound_values() {
        let s = ScatteringMatrix::isotropic(2).unwrap();
        let expected = 18.0 / (4.0 * PI * PI) * ((4.0 / PI - 18.0) * 2.0 * PI / 3.0).exp();
        let got = bias_bound(&s, 3.0).unwrap();
        assert!((got / expected - 1.0).abs() < 1e-13);
        assert!(bias_bound(&s, 0.5).is_none());
        assert!(bias_bound(&s, 3.5).unwrap() < got);

        assert!((variance_bound(2.0, 1, 100.0, 1.0).unwrap() - 0.64).abs() < 1e-15);
        assert!(variance_bound(1.0, 2, 100.0, 1.0).is_none());
        let a = variance_bound(2.0, 2, 100.0, 1.0).unwrap();
        assert!((variance_bound(2.0, 2, 200.0, 1.0).unwrap() - a / 2.0).abs() < 1e-15);

        let e = std::f64::consts::E;
        assert!((risk_rate(e, 1, 1.0).unwrap() - 1.0 / e.sqrt()).abs() < 1e-15);
        let r = risk_rate(4f64.exp(), 2, 1.0).unwrap();
        assert!((r - 32.0 / (e * e)).abs() < 1e-13);
        assert!(risk_rate(1.0, 2, 1.0).is_err());
    }

    #[test]
    fn strict_neighborhoods() {
        let w = Window::Ball { radius: 10.0, dim: 2 };
        let p = PointPattern::new(vec![0.0, 0.0, 1.0, 0.0, 9.0, 0.0], w).unwrap();
        let idx = build_neighborhoods(&p, 1.0, 10.0).unwrap();
        assert!(idx.neighbors[0].is_empty());
        assert_eq!(idx.inner, vec![0, 1]);
        assert!(build_neighborhoods(&p, 10.0, 10.0).is_err());
    }

    #[test]
    fn empty_pattern_gives_identity_term() {
        let w = Window::Ball { radius: 10.0, dim: 2 };
        let p = PointPattern::new(vec![], w).unwrap();
        let cfg = EstimatorConfig {
            cutoff: Some(1.0),
            ..EstimatorConfig::default()
        };
        let res = estimate_scattering(&p, &cfg).unwrap();
        assert!((res.sigma_hat.clone() - DMatrix::identity(2, 2) * (PI / 4.0)).amax() < 1e-15);
        assert_eq!(res.observed_count, 0);
        assert_eq!(res.pair_count, 0);
    }

    #[test]
    fn two_point_formula() {
        let w = Window::Ball { radius: 10.0, dim: 2 };
        let p = PointPattern::new(vec![0.0, 0.0, 0.3, 0.4], w).unwrap();
        let cfg = EstimatorConfig {
            cutoff: Some(1.0),
            ..EstimatorConfig::default()
        };
        let res = estimate_scattering(&p, &cfg).unwrap();
        // Both points are inner and mutual neighbors: the pair enters twice.
        let outer = DMatrix::from_row_slice(2, 2, &[0.09, 0.12, 0.12, 0.16]) * 2.0;
        let expected = DMatrix::identity(2, 2) * (PI / 4.0) - outer / (81.0 * PI);
        assert!((res.sigma_hat - expected).amax() < 1e-15);
        assert_eq!(res.pair_count, 2);
    }
}
