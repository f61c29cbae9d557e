//! Simulation of Gaussian determinantal processes on a periodic box, a
//! Poisson baseline, and empirical summaries of point patterns.
//!
//! The kernel is periodized on the torus `[−L/2, L/2)^d`, where its
//! eigenfunctions are the Fourier modes `e^{2πi k·x/L}` with eigenvalues
//! `Φ̂(k/L)`. A realization is drawn in two steps: each (realified) mode is kept
//! with probability equal to its eigenvalue, then the projection process
//! spanned by the kept modes is sampled point by point.
//!
//! # Sampling protocol
//!
//! All randomness comes from a `ChaCha8Rng` seeded with the user seed, drawn in
//! a fixed order:
//!
//! 1. One uniform per realified basis function: first the constant mode, then,
//!    for every mode `k` whose first nonzero coordinate is positive (in basis
//!    order), one for `cos(2π k·x/L)` and one for `sin(2π k·x/L)`. A function
//!    is kept when its uniform is below the eigenvalue.
//! 2. Proposals, each made of `d` uniforms for the position, one uniform `u₁`,
//!    and, only if `u₁·M < ‖φ(x)‖²`, a second uniform `u₂`. The proposal is
//!    accepted when `u₂·‖φ(x)‖²` is below the squared norm of the component of
//!    `φ(x)` orthogonal to the features of the points accepted so far.
//!
//! Here `φ(x)` is the vector of kept basis functions at `x` (orthonormal on
//! the torus) and `M` is the bound `(n₀ + 2·n_pairs)/L^d` on `‖φ‖²`, where
//! `n₀` counts the kept constant mode and `n_pairs` counts modes with at least
//! one of their two functions kept.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::gemm;
use crate::error::{Error, Result};
use crate::kernel::ScatteringMatrix;

/// The box `[−L/2, L/2]^d`, treated as a torus during sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxWindow {
    side: f64,
    dim: usize,
}

impl BoxWindow {
    pub fn new(side: f64, dim: usize) -> Result<Self> {
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::invalid("L", format!("box side must be positive, got {side}")));
        }
        if dim == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        Ok(Self { side, dim })
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }
}

/// Observation window of a point pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Window {
    Box { side: f64, dim: usize },
    Ball { radius: f64, dim: usize },
}

impl Window {
    pub fn dim(&self) -> usize {
        match *self {
            Window::Box { dim, .. } | Window::Ball { dim, .. } => dim,
        }
    }

    /// Whether `x` lies in the closed window.
    pub fn contains(&self, x: &[f64]) -> bool {
        match *self {
            Window::Box { side, .. } => x.iter().all(|v| v.abs() <= side / 2.0),
            Window::Ball { radius, .. } => x.iter().map(|v| v * v).sum::<f64>() <= radius * radius,
        }
    }

    /// Radius of the largest ball centered at the origin inside the window.
    pub fn inscribed_radius(&self) -> f64 {
        match *self {
            Window::Box { side, .. } => side / 2.0,
            Window::Ball { radius, .. } => radius,
        }
    }
}

impl From<BoxWindow> for Window {
    fn from(b: BoxWindow) -> Self {
        Window::Box {
            side: b.side,
            dim: b.dim,
        }
    }
}

/// A finite set of points in a window, stored as a flat row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    dim: usize,
    coords: Vec<f64>,
    window: Window,
}

impl PointPattern {
    /// Validates that every coordinate is finite and every point lies in the
    /// window.
    pub fn new(coords: Vec<f64>, window: Window) -> Result<Self> {
        let dim = window.dim();
        if dim == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        if coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: coords.len() % dim,
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        if let Some(i) = coords.chunks_exact(dim).position(|p| !window.contains(p)) {
            return Err(Error::invalid(
                "points",
                format!("point {i} lies outside the window"),
            ));
        }
        Ok(Self { dim, coords, window })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    /// All coordinates, point after point.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Default truncation threshold on eigenvalues.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default cap on the number of retained Fourier modes.
pub const DEFAULT_MODE_CAP: usize = 2_000_000;

/// Fourier modes of the periodized kernel with eigenvalue above `tol`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBasis {
    dim: usize,
    side: f64,
    tol: f64,
    /// Integer frequency vectors, `dim` entries per mode, sorted
    /// lexicographically.
    modes: Vec<i32>,
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn mode(&self, i: usize) -> &[i32] {
        &self.modes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Expected number of points, `Σ λ_k`.
    pub fn expected_count(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Variance of the number of points, `Σ λ_k(1 − λ_k)`.
    pub fn count_variance(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l * (1.0 - l)).sum()
    }
}

/// Enumerates every `k ∈ ℤ^d` with `Φ̂(k/L) > tol`, using the default mode
/// cap.
pub fn build_spectral_basis(sigma: &ScatteringMatrix, side: f64, tol: f64) -> Result<SpectralBasis> {
    build_spectral_basis_with_cap(sigma, side, tol, DEFAULT_MODE_CAP)
}

/// As [`build_spectral_basis`] with an explicit cap on the mode count.
pub fn build_spectral_basis_with_cap(
    sigma: &ScatteringMatrix,
    side: f64,
    tol: f64,
    cap: usize,
) -> Result<SpectralBasis> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("tol", format!("must lie in (0, 1), got {tol}")));
    }
    let d = sigma.dim();
    BoxWindow::new(side, d)?;
    // Φ̂(k/L) > tol  ⇔  kᵀΣk < c.
    let c = side * side * (1.0 / tol).ln() / (2.0 * PI * PI);
    // kᵀΣk = ‖Rk‖² with R upper triangular; enumerate the last coordinate
    // first and bound each earlier one given the later ones.
    let chol = nalgebra::Cholesky::new(sigma.matrix().clone()).ok_or(Error::NotPositiveDefinite)?;
    let r = chol.l().transpose();
    let mut modes = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut k = vec![0i32; d];
    enumerate_ellipsoid(&r, c, d, 0.0, &mut k, &mut |k| {
        if eigenvalues.len() >= cap {
            return false;
        }
        let w: Vec<f64> = k.iter().map(|&v| v as f64 / side).collect();
        let lam = (-2.0 * PI * PI * sigma.quad_form(&w)).exp();
        if lam > tol {
            modes.extend_from_slice(k);
            eigenvalues.push(lam);
        }
        true
    })
    .map_err(|_| Error::ModeCapExceeded {
        required: cap + 1,
        cap,
    })?;

    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| modes[a * d..(a + 1) * d].cmp(&modes[b * d..(b + 1) * d]));
    let sorted_modes = order
        .iter()
        .flat_map(|&i| modes[i * d..(i + 1) * d].iter().copied())
        .collect();
    let sorted_eigs = order.iter().map(|&i| eigenvalues[i]).collect();
    Ok(SpectralBasis {
        dim: d,
        side,
        tol,
        modes: sorted_modes,
        eigenvalues: sorted_eigs,
    })
}

/// Visits integer points with `‖Rk‖² < c`, fixing coordinates from the last
/// one down to index 0. `partial` holds the contribution of the coordinates
/// already fixed. Returns `Err(())` when the visitor asks to stop.
fn enumerate_ellipsoid(
    r: &DMatrix<f64>,
    c: f64,
    level: usize,
    partial: f64,
    k: &mut [i32],
    visit: &mut dyn FnMut(&[i32]) -> bool,
) -> std::result::Result<(), ()> {
    if level == 0 {
        return if visit(k) { Ok(()) } else { Err(()) };
    }
    let i = level - 1;
    let d = k.len();
    let t: f64 = (i + 1..d).map(|j| r[(i, j)] * k[j] as f64).sum();
    let room = c - partial;
    if room <= 0.0 {
        return Ok(());
    }
    let half = room.sqrt();
    let rii = r[(i, i)];
    let lo = ((-t - half) / rii).ceil() as i64;
    let hi = ((-t + half) / rii).floor() as i64;
    for v in lo..=hi {
        let row = rii * v as f64 + t;
        let next = partial + row * row;
        if next >= c {
            continue;
        }
        k[i] = i32::try_from(v).map_err(|_| ())?;
        enumerate_ellipsoid(r, c, i, next, k, visit)?;
    }
    k[i] = 0;
    Ok(())
}

/// Tuning knobs of the GDP sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Eigenvalue truncation threshold.
    pub tol: f64,
    /// Maximum number of Fourier modes.
    pub mode_cap: usize,
    /// Maximum number of proposals spent on a single point.
    pub max_proposals_per_point: u64,
    /// Maximum rank of the projection process; bounds the `rank²` working
    /// memory.
    pub max_rank: usize,
    /// Number of accepted points between two updates of the explicit
    /// complement basis.
    pub block_size: usize,
    /// Fraction of the points drawn before the complement basis is formed
    /// explicitly. Only affects speed.
    pub switch_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            mode_cap: DEFAULT_MODE_CAP,
            max_proposals_per_point: 1_000_000,
            max_rank: 20_000,
            block_size: 96,
            switch_fraction: 0.35,
        }
    }
}

/// Draws a GDP realization on the torus `window` with default settings.
///
/// The intensity is `Φ(0)`, which is one when `Σ` is normalized.
pub fn sample_gdp(sigma: &ScatteringMatrix, window: BoxWindow, seed: u64) -> Result<PointPattern> {
    sample_gdp_with(sigma, window, seed, &SamplerConfig::default())
}

pub fn sample_gdp_with(
    sigma: &ScatteringMatrix,
    window: BoxWindow,
    seed: u64,
    config: &SamplerConfig,
) -> Result<PointPattern> {
    if window.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            found: window.dim(),
        });
    }
    let basis = build_spectral_basis_with_cap(sigma, window.side(), config.tol, config.mode_cap)?;
    sample_gdp_from_basis(&basis, seed, config)
}

/// Draws a realization from a prebuilt basis; reuse the basis across
/// replicates to skip the mode enumeration.
pub fn sample_gdp_from_basis(
    basis: &SpectralBasis,
    seed: u64,
    config: &SamplerConfig,
) -> Result<PointPattern> {
    if !(0.0..=1.0).contains(&config.switch_fraction) {
        return Err(Error::invalid("switch_fraction", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Features::select(basis, &mut rng);
    let m = features.rank;
    if m > config.max_rank {
        return Err(Error::invalid(
            "window",
            format!(
                "projection rank {m} exceeds the configured maximum {}; use a smaller window",
                config.max_rank
            ),
        ));
    }
    let coords = ProjectionSampler::new(&features, config).run(&mut rng)?;
    PointPattern::new(
        coords,
        Window::Box {
            side: basis.side,
            dim: basis.dim,
        },
    )
}

/// The kept realified eigenfunctions.
///
/// `φ(x)` lists the constant function (if kept) and then the kept cosines
/// and sines. Phases `e^{2πi k·x/L}` are products of per-axis
/// powers of `e^{2πi x_a/L}`.
struct Features {
    dim: usize,
    side: f64,
    constant: bool,
    /// Per mode, `dim` indices into the phase table. Modes with both
    /// functions kept come first, then cosine-only, then sine-only.
    offsets: Vec<u32>,
    counts: [usize; 3],
    /// Largest `|k_a|` per axis.
    reach: Vec<usize>,
    rank: usize,
    /// Bound `M` on `‖φ(x)‖²`.
    envelope: f64,
    /// Part of `‖φ(x)‖²` that does not depend on `x`.
    fixed_norm2: f64,
    c0: f64,
    c1: f64,
}

impl Features {
    fn select(basis: &SpectralBasis, rng: &mut ChaCha8Rng) -> Self {
        let d = basis.dim;
        let mut constant = false;
        for i in 0..basis.len() {
            if basis.mode(i).iter().all(|&v| v == 0) && rng.gen::<f64>() < basis.eigenvalues[i] {
                constant = true;
            }
        }
        // Grouped by kind so evaluation loops stay branch-free.
        let mut groups: [Vec<i32>; 3] = Default::default();
        for i in 0..basis.len() {
            let k = basis.mode(i);
            if !k.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0) {
                continue;
            }
            let lam = basis.eigenvalues[i];
            let keep_cos = rng.gen::<f64>() < lam;
            let keep_sin = rng.gen::<f64>() < lam;
            let group = match (keep_cos, keep_sin) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => continue,
            };
            groups[group].extend_from_slice(k);
        }
        let counts = [
            groups[0].len() / d,
            groups[1].len() / d,
            groups[2].len() / d,
        ];
        let freqs: Vec<i32> = groups.concat();
        let mut reach = vec![0usize; d];
        for f in freqs.chunks_exact(d) {
            for (r, &v) in reach.iter_mut().zip(f) {
                *r = (*r).max(v.unsigned_abs() as usize);
            }
        }
        let mut base = Vec::with_capacity(d);
        let mut len = 0;
        for &r in &reach {
            base.push(len + r);
            len += 2 * r + 1;
        }
        let offsets = freqs
            .chunks_exact(d)
            .flat_map(|f| f.iter().zip(&base).map(|(&k, &b)| (b as i64 + k as i64) as u32))
            .collect();
        let volume = basis.side.powi(d as i32);
        let modes = counts.iter().sum::<usize>();
        let rank = usize::from(constant) + modes + counts[0];
        let slots = usize::from(constant) + 2 * modes;
        Self {
            dim: d,
            side: basis.side,
            constant,
            offsets,
            counts,
            reach,
            rank,
            envelope: slots as f64 / volume,
            fixed_norm2: (usize::from(constant) + 2 * counts[0]) as f64 / volume,
            c0: volume.sqrt().recip(),
            c1: (2.0 / volume).sqrt(),
        }
    }

    /// Per-axis tables of `e^{2πi k x_a/L}` for `|k| ≤ reach_a`.
    fn fill_table(&self, x: &[f64], table: &mut Vec<(f64, f64)>) {
        table.clear();
        for (&xa, &r) in x.iter().zip(&self.reach) {
            let start = table.len();
            table.resize(start + 2 * r + 1, (1.0, 0.0));
            let a = 2.0 * PI * xa / self.side;
            let w = (a.cos(), a.sin());
            let mid = start + r;
            for k in 1..=r {
                let (pr, pi) = table[mid + k - 1];
                table[mid + k] = (pr * w.0 - pi * w.1, pr * w.1 + pi * w.0);
                table[mid - k] = (table[mid + k].0, -table[mid + k].1);
            }
        }
    }

    /// Calls `f` with the phase of every mode in `range`.
    #[inline(always)]
    fn phases(
        &self,
        range: std::ops::Range<usize>,
        table: &[(f64, f64)],
        mut f: impl FnMut(f64, f64),
    ) {
        let d = self.dim;
        let offs = &self.offsets[range.start * d..range.end * d];
        if d == 2 {
            for o in offs.chunks_exact(2) {
                let (a, b) = table[o[0] as usize];
                let (c, s) = table[o[1] as usize];
                f(a * c - b * s, a * s + b * c);
            }
            return;
        }
        for o in offs.chunks_exact(d) {
            let (mut re, mut im) = table[o[0] as usize];
            for &k in &o[1..] {
                let (c, s) = table[k as usize];
                let nre = re * c - im * s;
                im = re * s + im * c;
                re = nre;
            }
            f(re, im);
        }
    }

    /// `‖φ(x)‖²`.
    fn norm2(&self, x: &[f64], table: &mut Vec<(f64, f64)>) -> f64 {
        self.fill_table(x, table);
        let [both, cos, sin] = self.counts;
        let mut acc = 0.0;
        self.phases(both..both + cos, table, |re, _| acc += re * re);
        self.phases(both + cos..both + cos + sin, table, |_, im| acc += im * im);
        self.fixed_norm2 + self.c1 * self.c1 * acc
    }

    /// Writes `φ(x)` into `out`.
    fn eval(&self, x: &[f64], table: &mut Vec<(f64, f64)>, out: &mut [f64]) {
        self.fill_table(x, table);
        let [both, cos, sin] = self.counts;
        let c1 = self.c1;
        let mut idx = 0;
        if self.constant {
            out[0] = self.c0;
            idx = 1;
        }
        self.phases(0..both, table, |re, im| {
            out[idx] = c1 * re;
            out[idx + 1] = c1 * im;
            idx += 2;
        });
        self.phases(both..both + cos, table, |re, _| {
            out[idx] = c1 * re;
            idx += 1;
        });
        self.phases(both + cos..both + cos + sin, table, |_, im| {
            out[idx] = c1 * im;
            idx += 1;
        });
    }
}

struct Candidate {
    x: Vec<f64>,
    phi: Vec<f64>,
    norm2: f64,
    u2: f64,
    /// Proposals consumed since the previous candidate, this one included.
    draws: u64,
}

/// Sequential sampler of the projection process spanned by the kept features.
///
/// Every accepted point contributes a Householder reflector `H_i` that maps
/// the residual of its feature vector onto a fresh coordinate axis; the
/// product `H_0 ⋯ H_{j−1}` is kept in compact WY form `I − W T Wᵀ`, and
/// its trailing columns span the complement of the accepted features.
///
/// For the first `switch_fraction·m` points the complement stays implicit.
/// Afterwards it is stored explicitly as `V` (`m × q`) and the reflectors
/// accumulated since the last update are folded into `V` every
/// `block_size` points, so every large update is a matrix-matrix product.
/// Candidates are scored in batches for the same reason; reflectors added in
/// the middle of a batch are applied one by one to the remaining candidates.
struct ProjectionSampler<'a> {
    features: &'a Features,
    config: &'a SamplerConfig,
    m: usize,
    /// Whether `V` has been formed.
    explicit: bool,
    /// Pending-reflector count at which the implicit phase ends.
    switch_at: usize,
    /// Columns `off..` hold the explicit complement basis (`m` rows).
    v: DMatrix<f64>,
    off: usize,
    /// Reflector vectors; column `i` is zero above row `i` and one at row `i`.
    w: DMatrix<f64>,
    /// Upper triangular; lower part stays zero.
    t: DMatrix<f64>,
    tau: Vec<f64>,
    pending: usize,
    /// Reflectors added since the start of the current batch begin here.
    batch_start: usize,
    accepted: usize,
    coords: Vec<f64>,
    queue: VecDeque<Candidate>,
    table: Vec<(f64, f64)>,
}

impl<'a> ProjectionSampler<'a> {
    fn new(features: &'a Features, config: &'a SamplerConfig) -> Self {
        let m = features.rank;
        let switch_at = ((config.switch_fraction * m as f64).floor() as usize).min(m);
        let kb = config.block_size.max(1);
        let cap = switch_at.max(kb).min(m).max(1);
        let explicit = switch_at == 0;
        Self {
            features,
            config,
            m,
            explicit,
            switch_at,
            v: if explicit {
                DMatrix::identity(m, m)
            } else {
                DMatrix::zeros(0, 0)
            },
            off: 0,
            w: DMatrix::zeros(m, cap),
            t: DMatrix::zeros(cap, cap),
            tau: vec![0.0; cap],
            pending: 0,
            batch_start: 0,
            accepted: 0,
            coords: Vec::with_capacity(m * features.dim),
            queue: VecDeque::new(),
            table: Vec::new(),
        }
    }

    /// Dimension of the coordinate space the pending reflectors act on.
    fn q(&self) -> usize {
        if self.explicit {
            self.v.ncols() - self.off
        } else {
            self.m
        }
    }

    /// Number of pending reflectors that triggers a basis update.
    fn limit(&self) -> usize {
        if self.explicit {
            self.config.block_size.max(1)
        } else {
            self.switch_at
        }
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let m = self.m;
        let mut proposals = 0u64;
        while self.accepted < m {
            let expected = m as f64 / (m - self.accepted) as f64;
            let nb = ((32.0 * expected).ceil() as usize).clamp(32, 512);
            while self.queue.len() < nb {
                let c = self.propose(rng)?;
                self.queue.push_back(c);
            }
            let p0 = self.pending;
            self.batch_start = p0;
            let q = self.q();
            let mut z = self.score(nb);

            let mut consumed = 0;
            let mut stop = false;
            for col in 0..nb {
                consumed = col + 1;
                proposals += self.queue[col].draws;
                if proposals > self.config.max_proposals_per_point {
                    return Err(Error::ProposalBudgetExceeded {
                        proposals,
                        index: self.accepted,
                        rank: m,
                    });
                }
                // Rows of `zc` are coordinates p0..q.
                let mut zc = z.column_mut(col);
                let zc = zc.as_mut_slice();
                let ld = self.w.nrows();
                let wdata = self.w.as_slice();
                for r in p0..self.pending {
                    let v = &wdata[r * ld + r..r * ld + q];
                    apply_reflector(v, self.tau[r], &mut zc[r - p0..]);
                }
                let p = self.pending;
                let resid: f64 = zc[p - p0..].iter().map(|v| v * v).sum();
                let cand = &self.queue[col];
                if cand.u2 * cand.norm2 < resid {
                    self.coords.extend_from_slice(&self.queue[col].x);
                    self.accepted += 1;
                    proposals = 0;
                    if self.accepted == m {
                        break;
                    }
                    self.push_reflector(&zc[p - p0..], q);
                    if self.pending == self.limit() {
                        stop = true;
                        break;
                    }
                }
            }
            self.queue.drain(..consumed);
            if self.accepted == m {
                break;
            }
            self.finish_t();
            if stop {
                if self.explicit {
                    self.flush();
                } else {
                    self.switch();
                }
            }
        }
        Ok(self.coords)
    }

    fn propose(&mut self, rng: &mut ChaCha8Rng) -> Result<Candidate> {
        let d = self.features.dim;
        let side = self.features.side;
        let mut draws = 0u64;
        loop {
            draws += 1;
            if draws > self.config.max_proposals_per_point {
                return Err(Error::ProposalBudgetExceeded {
                    proposals: draws,
                    index: self.accepted,
                    rank: self.m,
                });
            }
            let x: Vec<f64> = (0..d).map(|_| (rng.gen::<f64>() - 0.5) * side).collect();
            let u1: f64 = rng.gen();
            let norm2 = self.features.norm2(&x, &mut self.table);
            if u1 * self.features.envelope < norm2 {
                let u2 = rng.gen();
                let mut phi = vec![0.0; self.m];
                self.features.eval(&x, &mut self.table, &mut phi);
                return Ok(Candidate {
                    x,
                    phi,
                    norm2,
                    u2,
                    draws,
                });
            }
        }
    }

    /// Coordinates `p0..q` of the first `nb` queued candidates after all
    /// pending reflectors, where `p0` is the pending count.
    fn score(&self, nb: usize) -> DMatrix<f64> {
        let m = self.m;
        let q = self.q();
        let p0 = self.pending;
        let mut phi = DMatrix::<f64>::zeros(m, nb);
        for (col, cand) in self.queue.iter().take(nb).enumerate() {
            phi.column_mut(col).copy_from_slice(&cand.phi);
        }
        let full = if self.explicit {
            let mut full = DMatrix::<f64>::zeros(q, nb);
            gemm(
                1.0,
                self.v.columns(self.off, q),
                true,
                phi.as_view(),
                false,
                0.0,
                &mut full.as_view_mut(),
            );
            full
        } else {
            phi
        };
        if p0 == 0 {
            return full;
        }
        // (I − W Tᵀ Wᵀ) applied to the coordinates, keeping rows p0..q.
        let mut y = DMatrix::<f64>::zeros(p0, nb);
        gemm(
            1.0,
            self.w.view((0, 0), (q, p0)),
            true,
            full.as_view(),
            false,
            0.0,
            &mut y.as_view_mut(),
        );
        let mut y2 = DMatrix::<f64>::zeros(p0, nb);
        gemm(
            1.0,
            self.t.view((0, 0), (p0, p0)),
            true,
            y.as_view(),
            false,
            0.0,
            &mut y2.as_view_mut(),
        );
        let mut z = full.rows(p0, q - p0).into_owned();
        gemm(
            -1.0,
            self.w.view((p0, 0), (q - p0, p0)),
            false,
            y2.as_view(),
            false,
            1.0,
            &mut z.as_view_mut(),
        );
        z
    }

    /// Appends the reflector mapping the residual `x` (coordinates `p..q`)
    /// onto its first axis. Only the diagonal block of `T` belonging to the
    /// current batch is updated here; see [`Self::finish_t`].
    fn push_reflector(&mut self, x: &[f64], q: usize) {
        let p = self.pending;
        let b = self.batch_start;
        let alpha = x[0];
        let xnorm2: f64 = x[1..].iter().map(|v| v * v).sum();
        {
            let mut col = self.w.column_mut(p);
            let col = col.as_mut_slice();
            col[..q].fill(0.0);
            col[p] = 1.0;
            let tau = if xnorm2 == 0.0 {
                0.0
            } else {
                let beta = -alpha.signum() * (alpha * alpha + xnorm2).sqrt();
                let scale = 1.0 / (alpha - beta);
                for (dst, &src) in col[p + 1..q].iter_mut().zip(&x[1..]) {
                    *dst = src * scale;
                }
                (beta - alpha) / beta
            };
            self.tau[p] = tau;
        }
        let tau = self.tau[p];
        if p > b {
            // T[b..p, p] = −τ T[b..p, b..p] W[:, b..p]ᵀ v.
            let mut wv = DMatrix::<f64>::zeros(p - b, 1);
            gemm(
                1.0,
                self.w.view((p, b), (q - p, p - b)),
                true,
                self.w.view((p, p), (q - p, 1)),
                false,
                0.0,
                &mut wv.as_view_mut(),
            );
            let mut tcol = DMatrix::<f64>::zeros(p - b, 1);
            gemm(
                -tau,
                self.t.view((b, b), (p - b, p - b)),
                false,
                wv.as_view(),
                false,
                0.0,
                &mut tcol.as_view_mut(),
            );
            self.t.view_mut((b, p), (p - b, 1)).copy_from(&tcol);
        }
        self.t[(p, p)] = tau;
        self.pending += 1;
    }

    /// Fills the off-diagonal block `T[0..b, b..p]` for the reflectors added
    /// in the current batch: `−T₁₁ (W₁ᵀ W₂) T₂₂`.
    fn finish_t(&mut self) {
        let b = self.batch_start;
        let p = self.pending;
        if b == 0 || p == b {
            self.batch_start = p;
            return;
        }
        let q = self.q();
        let a = p - b;
        let mut x = DMatrix::<f64>::zeros(b, a);
        gemm(
            1.0,
            self.w.view((b, 0), (q - b, b)),
            true,
            self.w.view((b, b), (q - b, a)),
            false,
            0.0,
            &mut x.as_view_mut(),
        );
        let mut x2 = DMatrix::<f64>::zeros(b, a);
        gemm(
            1.0,
            self.t.view((0, 0), (b, b)),
            false,
            x.as_view(),
            false,
            0.0,
            &mut x2.as_view_mut(),
        );
        let t22 = self.t.view((b, b), (a, a)).into_owned();
        let mut block = self.t.view_mut((0, b), (b, a));
        gemm(-1.0, x2.as_view(), false, t22.as_view(), false, 0.0, &mut block);
        self.batch_start = p;
    }

    /// Folds the pending reflectors into `V` and drops the columns that now
    /// span accepted directions.
    fn flush(&mut self) {
        let p = self.pending;
        let q = self.q();
        let mut y = DMatrix::<f64>::zeros(self.m, p);
        gemm(
            1.0,
            self.v.columns(self.off, q),
            false,
            self.w.view((0, 0), (q, p)),
            false,
            0.0,
            &mut y.as_view_mut(),
        );
        let mut y2 = DMatrix::<f64>::zeros(self.m, p);
        gemm(
            1.0,
            y.as_view(),
            false,
            self.t.view((0, 0), (p, p)),
            false,
            0.0,
            &mut y2.as_view_mut(),
        );
        let w_tail = self.w.view((p, 0), (q - p, p));
        let mut v_tail = self.v.columns_mut(self.off + p, q - p);
        gemm(-1.0, y2.as_view(), false, w_tail, true, 1.0, &mut v_tail);
        self.off += p;
        self.pending = 0;
        self.batch_start = 0;
    }

    /// Forms `V = (I − W T Wᵀ)[:, p..]` and enters the explicit phase.
    fn switch(&mut self) {
        let m = self.m;
        let p = self.pending;
        let mut x = DMatrix::<f64>::zeros(p, m - p);
        gemm(
            1.0,
            self.t.view((0, 0), (p, p)),
            false,
            self.w.view((p, 0), (m - p, p)),
            true,
            0.0,
            &mut x.as_view_mut(),
        );
        let mut v = DMatrix::<f64>::zeros(m, m - p);
        gemm(
            -1.0,
            self.w.view((0, 0), (m, p)),
            false,
            x.as_view(),
            false,
            0.0,
            &mut v.as_view_mut(),
        );
        for i in 0..m - p {
            v[(p + i, i)] += 1.0;
        }
        self.v = v;
        self.off = 0;
        self.explicit = true;
        self.pending = 0;
        self.batch_start = 0;
        let kb = self.config.block_size.max(1).min(m - p).max(1);
        self.w = DMatrix::zeros(m - p, kb);
        self.t = DMatrix::zeros(kb, kb);
        self.tau = vec![0.0; kb];
    }
}

/// Applies `I − τ v vᵀ` to `z` in place; `v[0]` is the implicit unit entry.
fn apply_reflector(v: &[f64], tau: f64, z: &mut [f64]) {
    if tau == 0.0 {
        return;
    }
    let dot: f64 = v.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    let s = tau * dot;
    for (zi, vi) in z.iter_mut().zip(v) {
        *zi -= s * vi;
    }
}

/// Homogeneous Poisson pattern on the box.
pub fn sample_poisson(intensity: f64, window: BoxWindow, seed: u64) -> Result<PointPattern> {
    if !(intensity > 0.0) || !intensity.is_finite() {
        return Err(Error::invalid(
            "intensity",
            format!("must be positive and finite, got {intensity}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = intensity * window.volume();
    let count = rand_distr::Poisson::new(mean)
        .map_err(|e| Error::invalid("intensity", e.to_string()))?;
    let n = rng.sample(count) as usize;
    let side = window.side();
    let coords = (0..n * window.dim())
        .map(|_| (rng.gen::<f64>() - 0.5) * side)
        .collect();
    PointPattern::new(coords, window.into())
}

/// Keeps the points with `‖x‖ ≤ R`; the result lives in the ball window.
pub fn extract_ball(pattern: &PointPattern, radius: f64) -> Result<PointPattern> {
    if !(radius > 0.0) {
        return Err(Error::invalid("R", format!("must be positive, got {radius}")));
    }
    let fits = match *pattern.window() {
        Window::Box { side, .. } => 2.0 * radius <= side,
        Window::Ball { radius: big, .. } => radius <= big,
    };
    if !fits {
        return Err(Error::invalid("R", "the ball B(R) does not fit inside the window"));
    }
    let r2 = radius * radius;
    let coords = pattern
        .points()
        .filter(|p| p.iter().map(|v| v * v).sum::<f64>() <= r2)
        .flatten()
        .copied()
        .collect();
    PointPattern::new(
        coords,
        Window::Ball {
            radius,
            dim: pattern.dim(),
        },
    )
}

/// One radial bin of [`empirical_pair_correlation`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelationBin {
    pub lower: f64,
    pub upper: f64,
    /// Observed over expected ordered-pair count.
    pub ratio: f64,
}

impl PairCorrelationBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Radial pair correlation of patterns on the torus.
///
/// For each bin `[t₁, t₂)`, ordered pairs at torus distance in the bin are
/// counted and divided by their expectation under a unit-intensity Poisson
/// process, `L^d·|B(1)|(t₂^d − t₁^d)` per pattern. Patterns must share a box
/// window, and the last edge may not exceed `L/2`.
pub fn empirical_pair_correlation(
    patterns: &[PointPattern],
    bin_edges: &[f64],
) -> Result<Vec<PairCorrelationBin>> {
    let first = patterns
        .first()
        .ok_or(Error::EmptyInput("empirical_pair_correlation needs at least one pattern"))?;
    let (side, d) = match *first.window() {
        Window::Box { side, dim } => (side, dim),
        Window::Ball { .. } => {
            return Err(Error::invalid("patterns", "pair correlation needs box windows"))
        }
    };
    if patterns.iter().any(|p| *p.window() != *first.window()) {
        return Err(Error::invalid("patterns", "all patterns must share one window"));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) || bin_edges[0] < 0.0 {
        return Err(Error::invalid(
            "bin_edges",
            "need at least two strictly increasing, nonnegative edges",
        ));
    }
    let tmax = *bin_edges.last().unwrap();
    if tmax > side / 2.0 {
        return Err(Error::invalid("bin_edges", "last edge exceeds half the box side"));
    }
    let nbins = bin_edges.len() - 1;
    let mut counts = vec![0u64; nbins];
    for p in patterns {
        count_torus_pairs(p, side, bin_edges, &mut counts);
    }
    let ball = crate::estimator::unit_ball_volume(d);
    let volume = side.powi(d as i32);
    let reps = patterns.len() as f64;
    Ok((0..nbins)
        .map(|b| {
            let (lo, hi) = (bin_edges[b], bin_edges[b + 1]);
            let expected =
                reps * volume * ball * (hi.powi(d as i32) - lo.powi(d as i32));
            PairCorrelationBin {
                lower: lo,
                upper: hi,
                ratio: counts[b] as f64 / expected,
            }
        })
        .collect())
}

fn torus_dist2(a: &[f64], b: &[f64], side: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut t = (x - y).abs();
            if t > side / 2.0 {
                t = side - t;
            }
            t * t
        })
        .sum()
}

fn bin_of(edges: &[f64], dist: f64) -> Option<usize> {
    if dist < edges[0] || dist >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= dist) - 1)
}

fn count_torus_pairs(p: &PointPattern, side: f64, edges: &[f64], counts: &mut [u64]) {
    let d = p.dim();
    let n = p.len();
    let tmax = edges[edges.len() - 1];
    let cells_per_axis = (side / tmax).floor() as usize;
    let total_cells = cells_per_axis.checked_pow(d as u32);
    let mut tally = |i: usize, j: usize| {
        let dist = torus_dist2(p.point(i), p.point(j), side).sqrt();
        if let Some(b) = bin_of(edges, dist) {
            counts[b] += 1;
        }
    };
    match total_cells {
        Some(total) if cells_per_axis >= 3 && total <= 4 * n.max(1) => {
            let cell_of = |x: &[f64]| -> Vec<usize> {
                x.iter()
                    .map(|&v| {
                        let c = ((v + side / 2.0) / side * cells_per_axis as f64).floor() as isize;
                        c.clamp(0, cells_per_axis as isize - 1) as usize
                    })
                    .collect()
            };
            let flat = |c: &[usize]| c.iter().fold(0usize, |acc, &v| acc * cells_per_axis + v);
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); total];
            for i in 0..n {
                buckets[flat(&cell_of(p.point(i)))].push(i);
            }
            let offsets = neighbor_offsets(d);
            let mut nb = vec![0usize; d];
            for i in 0..n {
                let c = cell_of(p.point(i));
                for off in &offsets {
                    for a in 0..d {
                        let v = c[a] as isize + off[a];
                        nb[a] = v.rem_euclid(cells_per_axis as isize) as usize;
                    }
                    for &j in &buckets[flat(&nb)] {
                        if j != i {
                            tally(i, j);
                        }
                    }
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        tally(i, j);
                    }
                }
            }
        }
    }
}

/// All vectors in `{−1, 0, 1}^d`.
pub(crate) fn neighbor_offsets(d: usize) -> Vec<Vec<isize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|v| {
                (-1..=1).map(move |s| {
                    let mut w = v.clone();
                    w.push(s);
                    w
                })
            })
            .collect();
    }
    out
}
