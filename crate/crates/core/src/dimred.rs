//! Dimension reduction through the scattering-matrix estimator, with a PCA
//! baseline, risk scores and ROC evaluation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::sym_eigen_desc;
use crate::error::{Error, Result};
use crate::estimator::unit_ball_volume;

/// Per-row labels of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Labels {
    /// `true` marks the positive class.
    Binary(Vec<bool>),
    Categorical(Vec<String>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary(v) => v.len(),
            Labels::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text form of row `i`'s label (`1`/`0` for binary labels).
    pub fn display(&self, i: usize) -> String {
        match self {
            Labels::Binary(v) => if v[i] { "1" } else { "0" }.to_string(),
            Labels::Categorical(v) => v[i].clone(),
        }
    }

    fn permuted(&self, perm: &[usize]) -> Labels {
        match self {
            Labels::Binary(v) => Labels::Binary(perm.iter().map(|&i| v[i]).collect()),
            Labels::Categorical(v) => Labels::Categorical(perm.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// An `N × d` table of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Option<Labels>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Option<Labels>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: features.nrows(),
                    found: l.len(),
                });
            }
        }
        if let Some(names) = &feature_names {
            if names.len() != features.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: features.ncols(),
                    found: names.len(),
                });
            }
        }
        Ok(Self {
            features,
            labels,
            feature_names,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Binary labels, or an error if the dataset has none.
    pub fn binary_labels(&self) -> Result<&[bool]> {
        match &self.labels {
            Some(Labels::Binary(v)) => Ok(v),
            _ => Err(Error::invalid("labels", "dataset has no binary labels")),
        }
    }

    /// Row `perm[i]` of `self` becomes row `i`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Dataset> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("perm", "not a permutation of the rows"));
        }
        let features = DMatrix::from_fn(n, self.dim(), |i, j| self.features[(perm[i], j)]);
        Ok(Dataset {
            features,
            labels: self.labels.as_ref().map(|l| l.permuted(perm)),
            feature_names: self.feature_names.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dpp,
    Pca,
}

/// Neighborhood radius used when building `Σ̂` from a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// `r = 1 + max pairwise distance`, so every pair is a neighbor pair.
    #[default]
    AllPairs,
    Explicit(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    #[serde(with = "crate::dense::rows")]
    pub coords: DMatrix<f64>,
    /// Full spectrum, descending. For `Dpp` these are the eigenvalues of
    /// the scaled pair sum `S/N`.
    pub eigvals: Vec<f64>,
    #[serde(with = "crate::dense::rows")]
    pub eigvecs: DMatrix<f64>,
    pub method: Method,
    /// Neighborhood radius (`Dpp` only).
    pub r_used: Option<f64>,
    /// Natural log of the identity coefficient `|B(1)|r^(d+2)/(d+2)` of
    /// `Σ̂` (`Dpp` only). Kept as a log because it overflows for wide data.
    pub log_identity_coefficient: Option<f64>,
}

fn check_k(k: usize, d: usize, n: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::invalid("k", format!("must lie in 1..={d}, got {k}")));
    }
    if n < 2 {
        return Err(Error::invalid("dataset", format!("need at least 2 rows, got {n}")));
    }
    Ok(())
}

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let sds = x
        .column_iter()
        .zip(&means)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        .collect();
    (means, sds)
}

fn standardized(x: &DMatrix<f64>, center: bool, scale: bool) -> Result<DMatrix<f64>> {
    let (means, sds) = column_stats(x);
    if scale {
        if let Some(j) = sds.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::invalid("dataset", format!("column {j} has zero variance")));
        }
    }
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let mut v = x[(i, j)];
        if center {
            v -= means[j];
        }
        if scale {
            v /= sds[j];
        }
        v
    }))
}

/// Flips each column so its largest-magnitude entry is positive.
///
/// Entries within a relative `1e-9` of the largest magnitude count as tied
/// and the first of them decides, so rounding cannot flip the sign of
/// vectors such as `(1, −1)/√2`.
pub fn orient_columns(vecs: &mut DMatrix<f64>) {
    for mut col in vecs.column_iter_mut() {
        let max = col.amax();
        let pivot = col.iter().copied().find(|v| v.abs() >= max * (1.0 - 1e-9)).unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// Largest pairwise Euclidean distance between rows.
pub fn max_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0f64;
            for j in i + 1..n {
                let d2: f64 = (0..x.ncols()).map(|c| (x[(i, c)] - x[(j, c)]).powi(2)).sum();
                best = best.max(d2);
            }
            best
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

/// `S = Σ_{i≠j, ‖xᵢ − xⱼ‖ < r} (xᵢ − xⱼ)(xᵢ − xⱼ)ᵀ` over the rows of `x`.
/// `r = None` includes every pair.
pub fn pair_outer_sum(x: &DMatrix<f64>, r: Option<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let rows: Vec<Vec<f64>> = x.row_iter().map(|row| row.iter().copied().collect()).collect();
    const BLOCK: usize = 16;
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; d * d];
            let mut diff = vec![0.0; d];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                for j in i + 1..n {
                    let mut d2 = 0.0;
                    for c in 0..d {
                        diff[c] = rows[i][c] - rows[j][c];
                        d2 += diff[c] * diff[c];
                    }
                    if let Some(r) = r {
                        if d2.sqrt() >= r {
                            continue;
                        }
                    }
                    for a in 0..d {
                        let da = diff[a];
                        for c in a..d {
                            acc[a * d + c] += da * diff[c];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut s = DMatrix::zeros(d, d);
    for acc in &partials {
        for a in 0..d {
            for c in a..d {
                s[(a, c)] += acc[a * d + c];
            }
        }
    }
    // Each unordered pair appears twice in the ordered sum.
    for a in 0..d {
        for c in a..d {
            let v = 2.0 * s[(a, c)];
            s[(a, c)] = v;
            s[(c, a)] = v;
        }
    }
    s
}

/// Projects rows of a dataset onto the top `k` eigenvectors of the pair
/// term of `Σ̂ = c·I − S/N`.
///
/// With `N` the row count and `c = |B(1)|r^(d+2)/(d+2)`, `Σ̂` is an affine
/// function of `S`, so it shares the eigenvectors of `S`. Components are
/// ordered by the spectrum of `S` from largest to smallest, which is the
/// order of `|spectrum|` of the pair term of `Σ̂`. `eigvals` holds the
/// eigenvalues of `S/N`.
pub fn dpp_embed(dataset: &Dataset, k: usize, r_mode: RMode, standardize: bool) -> Result<ProjectionResult> {
    let n = dataset.len();
    let d = dataset.dim();
    check_k(k, d, n)?;
    let x = if standardize {
        standardized(dataset.features(), true, true)?
    } else {
        dataset.features().clone()
    };
    let (r, cutoff) = match r_mode {
        RMode::AllPairs => (1.0 + max_pairwise_distance(&x), None),
        RMode::Explicit(r) => {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid("r", format!("must be positive, got {r}")));
            }
            (r, Some(r))
        }
    };
    let s = pair_outer_sum(&x, cutoff) / n as f64;
    let (vals, vecs) = sym_eigen_desc(&s);
    let log_c = unit_ball_volume(d).ln() + (d as f64 + 2.0) * r.ln() - (d as f64 + 2.0).ln();
    finish(&x, vals, vecs, k, Method::Dpp, Some(r), Some(log_c))
}

/// Principal components of the covariance (or correlation, with
/// `center && scale`) matrix.
pub fn pca_embed(dataset: &Dataset, k: usize, center: bool, scale: bool) -> Result<ProjectionResult> {
    let n = dataset.len();
    check_k(k, dataset.dim(), n)?;
    let x = standardized(dataset.features(), center, scale)?;
    let cov = x.tr_mul(&x) / (n as f64 - 1.0);
    let (vals, vecs) = sym_eigen_desc(&cov);
    finish(&x, vals, vecs, k, Method::Pca, None, None)
}

fn finish(
    x: &DMatrix<f64>,
    vals: DVector<f64>,
    vecs: DMatrix<f64>,
    k: usize,
    method: Method,
    r_used: Option<f64>,
    log_identity_coefficient: Option<f64>,
) -> Result<ProjectionResult> {
    let mut top = vecs.columns(0, k).into_owned();
    orient_columns(&mut top);
    let coords = x * &top;
    Ok(ProjectionResult {
        coords,
        eigvals: vals.iter().copied().collect(),
        eigvecs: top,
        method,
        r_used,
        log_identity_coefficient,
    })
}

/// Negated coordinates along one component.
pub fn risk_scores(coords: &DMatrix<f64>, component: usize) -> Result<Vec<f64>> {
    if component >= coords.ncols() {
        return Err(Error::invalid(
            "component",
            format!("index {component} out of range for {} components", coords.ncols()),
        ));
    }
    Ok(coords.column(component).iter().map(|v| -v).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `≥ threshold` are called positive; `+∞` at the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve of `scores` against `labels` (`true` = positive), with one
/// vertex per distinct score.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("labels", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc2 = 0u128; // twice the area, in units of 1/(pos·neg)
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc2 += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = auc2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, auc })
}

/// Trapezoidal area under a stored curve.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// `(rank, value)` pairs with ranks starting at 1.
pub fn scree(eigvals: &[f64]) -> Vec<(usize, f64)> {
    eigvals.iter().copied().enumerate().map(|(i, v)| (i + 1, v)).collect()
}
