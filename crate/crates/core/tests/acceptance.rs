//! Acceptance criteria, each checked at its stated tolerance and runtime.
//!
//! Prints one PASS/FAIL line per criterion and a summary. With
//! `GDP_ACCEPTANCE_STRICT` set, any failure makes the exit status non-zero.
//! Simulation ensembles are shared between criteria as their definitions
//! allow (the L=30 isotropic ensemble serves criteria 4 to 7, the spiked
//! L=40 ensemble serves 8 and 9); shared work is charged to the first
//! criterion that uses it.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use gdp::dense::principal_angle_sines;
use gdp::dimred::{dpp_embed, pair_outer_sum, pca_embed, risk_scores, roc_auc, Dataset, RMode};
use gdp::estimator::{count_expectation, default_cutoff, estimate_scattering, EstimateResult, EstimatorConfig};
use gdp::io::load_dataset;
use gdp::kernel::{normalize_scattering, rho_k, spiked_scattering, ScatteringMatrix, SpikedParams};
use gdp::sampler::{
    build_spectral_basis, empirical_pair_correlation, sample_gdp_from_basis, sample_poisson, BoxWindow,
    PointPattern, SamplerConfig, Window, DEFAULT_TOL,
};
use gdp::spiked::{
    calibrate_null, calibrated_detection_test, empirical_quantile, estimate_spike, replicate_seed, sin_angle,
    test_statistic,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String, secs: f64, limit: Option<f64>) {
        let within = limit.map_or(true, |l| secs < l);
        let ok = pass && within;
        if !ok {
            self.failures += 1;
        }
        let time = match limit {
            Some(l) => format!("{secs:.1} s (limit {l:.0} s)"),
            None => format!("{secs:.1} s (amortized)"),
        };
        println!(
            "criterion {id:>2} [{}] {name}: {detail}; {time}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
}

fn data(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ensemble(sigma: &ScatteringMatrix, side: f64, reps: usize, seed: u64) -> Vec<PointPattern> {
    let basis = build_spectral_basis(sigma, side, DEFAULT_TOL).unwrap();
    let cfg = SamplerConfig::default();
    (0..reps as u64)
        .into_par_iter()
        .map(|i| sample_gdp_from_basis(&basis, replicate_seed(seed, i), &cfg).unwrap())
        .collect()
}

fn estimates(patterns: &[PointPattern], cfg: &EstimatorConfig) -> Vec<EstimateResult> {
    patterns.par_iter().map(|p| estimate_scattering(p, cfg).unwrap()).collect()
}

fn frobenius_error(est: &EstimateResult, truth: &ScatteringMatrix) -> f64 {
    (&est.sigma_hat - truth.matrix()).norm()
}

fn wbc() -> Dataset {
    load_dataset(&data("wdbc.csv"), Some("diagnosis"), Some("M")).unwrap()
}

/// AUC of the negated first coordinate and of its flip.
fn both_orientations(coords: &DMatrix<f64>, labels: &[bool]) -> (f64, f64) {
    let scores = risk_scores(coords, 0).unwrap();
    let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
    (roc_auc(&scores, labels).unwrap().auc, roc_auc(&flipped, labels).unwrap().auc)
}

/// `1 − exp(−2πt²)` averaged over the annulus `t₁ ≤ |u| < t₂` in the plane.
fn pair_correlation_oracle(t1: f64, t2: f64) -> f64 {
    let a = (-2.0 * PI * t1 * t1).exp();
    let b = (-2.0 * PI * t2 * t2).exp();
    1.0 - (a - b) / (2.0 * PI * (t2 * t2 - t1 * t1))
}

/// Count in `B(R)` with strict inequality.
fn count_in_ball(p: &PointPattern, radius: f64) -> f64 {
    p.points().filter(|x| x.iter().map(|v| v * v).sum::<f64>() < radius * radius).count() as f64
}

fn main() {
    let mut report = Report { failures: 0 };
    let total = Instant::now();

    // 1. PCA baseline on WBC.
    let t = Instant::now();
    let ds = wbc();
    let labels = ds.binary_labels().unwrap().to_vec();
    let pca = pca_embed(&ds, 2, true, true).unwrap();
    let (raw, flipped) = both_orientations(&pca.coords, &labels);
    let secs = t.elapsed().as_secs_f64();
    report.line(
        1,
        "WBC PCA baseline",
        (flipped - 0.970).abs() <= 0.010,
        format!("AUC {flipped:.4} with sign flip ({raw:.4} without), target 0.970 ± 0.010"),
        secs,
        Some(5.0),
    );

    // 2. DPP pipeline on WBC.
    let t = Instant::now();
    let dpp = dpp_embed(&ds, 2, RMode::AllPairs, false).unwrap();
    let (raw, flipped) = both_orientations(&dpp.coords, &labels);
    let std_dpp = dpp_embed(&ds, 2, RMode::AllPairs, true).unwrap();
    let (std_raw, std_flipped) = both_orientations(&std_dpp.coords, &labels);
    let secs = t.elapsed().as_secs_f64();
    report.line(
        2,
        "WBC DPP pipeline",
        (flipped - 0.963).abs() <= 0.015,
        format!(
            "AUC {flipped:.4} with sign flip ({raw:.4} without), target 0.963 ± 0.015; \
             standardized variant {std_flipped:.4} ({std_raw:.4} without)"
        ),
        secs,
        Some(30.0),
    );

    // 3. Scree dominance.
    let t = Instant::now();
    let dpp_ratio = dpp.eigvals[0] / dpp.eigvals[1];
    let pca_ratio = pca.eigvals[0] / pca.eigvals[1];
    report.line(
        3,
        "WBC scree dominance",
        dpp_ratio > pca_ratio,
        format!("DPP λ1/λ2 = {dpp_ratio:.2}, PCA correlation λ1/λ2 = {pca_ratio:.2}"),
        t.elapsed().as_secs_f64(),
        None,
    );

    // 4. Sampler fidelity.
    let t = Instant::now();
    let iso = ScatteringMatrix::isotropic(2).unwrap();
    let l30 = ensemble(&iso, 30.0, 500, 0x5eed_0030);
    let volume = 900.0;
    let intensity = l30.iter().map(|p| p.len() as f64).sum::<f64>() / (volume * l30.len() as f64);
    let edges: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    let bins = empirical_pair_correlation(&l30, &edges).unwrap();
    let (worst_bin, worst) = bins
        .iter()
        .map(|b| (b.center(), (b.ratio - pair_correlation_oracle(b.lower, b.upper)).abs()))
        .fold((0.0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let pointwise = bins
        .iter()
        .map(|b| (b.ratio - (1.0 - (-2.0 * PI * b.center().powi(2)).exp())).abs())
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    report.line(
        4,
        "Sampler fidelity",
        (intensity - 1.0).abs() <= 0.05 && worst <= 0.05,
        format!(
            "intensity {intensity:.4}; sup |g_emp − g| = {worst:.4} (bin at {worst_bin:.2}, \
             bin-averaged reference; {pointwise:.4} against the bin-center value), tolerance 0.05"
        ),
        secs,
        Some(600.0),
    );

    // 5. Sub-Poisson counts, on the same replicates.
    let t = Instant::now();
    let mut ok5 = true;
    let mut parts = Vec::new();
    for radius in [15.0, 10.0] {
        let counts: Vec<f64> = l30.iter().map(|p| count_in_ball(p, radius)).collect();
        let b = counts.len() as f64;
        let (m, _) = mean_se(&counts);
        let var = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (b - 1.0);
        // Dispersion test: (B−1)s²/x̄ is χ²_{B−1} under Poisson counts.
        let stat = (b - 1.0) * var / m;
        let p_value = ChiSquared::new(b - 1.0).unwrap().cdf(stat);
        ok5 &= var < m && p_value < 0.01;
        let n = PI * radius * radius;
        let mut tails = Vec::new();
        for eps in [0.1, 0.2, 0.3] {
            let freq = counts.iter().filter(|&&c| (c / n - 1.0).abs() >= eps).count() as f64 / b;
            let bound = 2.0 * (-3.0 * eps * eps * n / (6.0 + 2.0 * eps)).exp();
            ok5 &= freq <= bound;
            tails.push(format!("ε={eps}: {freq:.3} ≤ {bound:.2e}"));
        }
        parts.push(format!(
            "R={radius}: mean {m:.1}, var {var:.1}, one-sided p = {p_value:.2e}; {}",
            tails.join(", ")
        ));
    }
    report.line(5, "Sub-Poisson counts", ok5, parts.join(" | "), t.elapsed().as_secs_f64(), None);

    // 6. Estimator consistency. Criteria 6 and 7 use the cutoff rule's value
    // C₀√(d ln n) for the window at hand, held fixed across replicates; the
    // negative-bias property is a statement about a non-random r.
    let t = Instant::now();
    let fixed = |radius: f64| EstimatorConfig {
        cutoff: Some(default_cutoff(count_expectation(radius, 2), 2, 1.0).unwrap()),
        ..EstimatorConfig::default()
    };
    let truth = &iso;
    let cfg30 = fixed(15.0);
    let est30 = estimates(&l30, &cfg30);
    let l60 = ensemble(&iso, 60.0, 100, 0x5eed_0060);
    let cfg60 = fixed(30.0);
    let est60 = estimates(&l60, &cfg60);
    drop(l60);
    let med30 = median(&est30[..100].iter().map(|e| frobenius_error(e, truth)).collect::<Vec<_>>());
    let med60 = median(&est60.iter().map(|e| frobenius_error(e, truth)).collect::<Vec<_>>());
    let poisson: Vec<DMatrix<f64>> = (0..500u64)
        .into_par_iter()
        .map(|i| {
            let p = sample_poisson(1.0, BoxWindow::new(30.0, 2).unwrap(), replicate_seed(0x9015, i)).unwrap();
            estimate_scattering(&p, &cfg30).unwrap().sigma_hat
        })
        .collect();
    let mut worst_z = 0.0f64;
    for (a, b) in [(0, 0), (0, 1), (1, 1)] {
        let xs: Vec<f64> = poisson.iter().map(|m| m[(a, b)]).collect();
        let (m, se) = mean_se(&xs);
        worst_z = worst_z.max(m.abs() / se);
    }
    let secs = t.elapsed().as_secs_f64();
    report.line(
        6,
        "Estimator consistency",
        med60 < med30 && worst_z <= 3.0,
        format!(
            "median ‖Σ̂−Σ‖_F {med30:.4} (L=30, r = {:.3}) → {med60:.4} (L=60, r = {:.3}), 100 replicates \
             each; Poisson(1) mean Σ̂ at most {worst_z:.2} SE from 0 (500 replicates)",
            cfg30.cutoff.unwrap(),
            cfg60.cutoff.unwrap()
        ),
        secs,
        Some(900.0),
    );

    // 7. Negative bias on the L=30 ensemble.
    let t = Instant::now();
    let auto30 = estimates(&l30, &EstimatorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let directions: Vec<DVector<f64>> = (0..10)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            DVector::from_column_slice(&[theta.cos(), theta.sin()])
        })
        .collect();
    // Largest (mean vᵀΣ̂v − vᵀΣv)/SE over the directions.
    let worst_margin = |ests: &[EstimateResult]| -> f64 {
        directions
            .iter()
            .map(|v| {
                let q: Vec<f64> = ests.iter().map(|e| (v.transpose() * &e.sigma_hat * v)[(0, 0)]).collect();
                let (m, se) = mean_se(&q);
                (m - (v.transpose() * truth.matrix() * v)[(0, 0)]) / se
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let margin = worst_margin(&est30);
    // Exact E[Σ̂₁₁] for Σ = I/(2π): π∫₀^r t³·exp(−2πt²) dt.
    let (r, a) = (cfg30.cutoff.unwrap(), 2.0 * PI);
    let exact = PI * (1.0 - (-a * r * r).exp() * (1.0 + a * r * r)) / (2.0 * a * a);
    let (m11, se11) = mean_se(&est30.iter().map(|e| e.sigma_hat[(0, 0)]).collect::<Vec<_>>());
    let auto_margin = worst_margin(&auto30);
    report.line(
        7,
        "Negative bias",
        margin <= 3.0,
        format!(
            "max over 10 directions of (mean vᵀΣ̂v − vᵀΣv)/SE = {margin:.2}, limit 3 (500 replicates); \
             diagnostics: {auto_margin:.2} with the pilot-clamped automatic cutoff; mean Σ̂₁₁ \
             {m11:.4} ± {se11:.4} against the exact expectation {exact:.4} (Σ₁₁ = {:.4})",
            truth.matrix()[(0, 0)]
        ),
        t.elapsed().as_secs_f64(),
        None,
    );
    drop(l30);

    // 8. Detection power with a calibrated threshold.
    let t = Instant::now();
    let u = vec![(PI / 6.0).cos(), (PI / 6.0).sin()];
    let spiked = spiked_scattering(&SpikedParams::new(1.0, u.clone()).unwrap(), 2).unwrap();
    // The spike criteria use r = √d, the smallest cutoff at which both the
    // bias and the variance bounds apply under the null (√(5·TrΣ/2) < √d
    // there); it is also the lower end of the automatic rule's interval.
    let spike_cfg = EstimatorConfig { cutoff: Some(2f64.sqrt()), ..EstimatorConfig::default() };
    let cal = calibrate_null(2, 20.0, 200, 0.05, 0xca1b, &spike_cfg, &SamplerConfig::default()).unwrap();
    let sp40 = ensemble(&spiked, 40.0, 100, 0x5e1c_0040);
    let null40 = ensemble(&iso, 40.0, 100, 0x0dd_0040);
    let est_sp40 = estimates(&sp40, &spike_cfg);
    let est_null = estimates(&null40, &spike_cfg);
    let rule_sp40 = estimates(&sp40, &fixed(20.0));
    let rejection = |ests: &[EstimateResult]| -> f64 {
        ests.iter()
            .filter(|e| calibrated_detection_test(&e.sigma_hat, e.expected_count, &cal, 1.0).unwrap().reject)
            .count() as f64
            / ests.len() as f64
    };
    let (power, size) = (rejection(&est_sp40), rejection(&est_null));
    // Diagnostic at a small cutoff, threshold from the fresh nulls themselves.
    let small = EstimatorConfig { cutoff: Some(0.7), ..EstimatorConfig::default() };
    let stat = |p: &PointPattern| test_statistic(&estimate_scattering(p, &small).unwrap().sigma_hat).unwrap();
    let null_small: Vec<f64> = null40.par_iter().map(stat).collect();
    let thr_small = empirical_quantile(&null_small, 0.95).unwrap();
    let power_small = sp40.par_iter().map(stat).filter(|&s| s > thr_small).count() as f64 / sp40.len() as f64;
    drop((sp40, null40));
    let secs8 = t.elapsed().as_secs_f64();

    // 9. Spike recovery across window sizes; L=40 reuses criterion 8's ensemble.
    let t = Instant::now();
    let mean_sin = |ests: &[EstimateResult]| -> f64 {
        let s: Vec<f64> = ests
            .iter()
            .map(|e| sin_angle(&estimate_spike(&e.sigma_hat).unwrap().u_hat, &u).unwrap())
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let sp30 = ensemble(&spiked, 30.0, 100, 0x5e1c_0030);
    let sp60 = ensemble(&spiked, 60.0, 50, 0x5e1c_0060);
    let (s30, s40, s60) = (
        mean_sin(&estimates(&sp30, &spike_cfg)),
        mean_sin(&est_sp40),
        mean_sin(&estimates(&sp60, &spike_cfg)),
    );
    let (d30, d40, d60) = (
        mean_sin(&estimates(&sp30, &cfg30)),
        mean_sin(&rule_sp40),
        mean_sin(&estimates(&sp60, &cfg60)),
    );
    drop((sp30, sp60));
    let secs9 = t.elapsed().as_secs_f64();
    report.line(
        8,
        "Detection power",
        power >= 0.9 && size <= 0.08,
        format!(
            "rejection {power:.2} on 100 spiked replicates (≥ 0.9), {size:.2} on 100 fresh null \
             replicates (≤ 0.08); threshold {:.4} from 200 null replicates (r = √2); \
             diagnostic: {power_small:.2} at r = 0.7 with the fresh nulls' 95% quantile",
            cal.threshold
        ),
        secs8 + secs9,
        Some(1800.0),
    );
    report.line(
        9,
        "Spike recovery",
        s30 > s40 && s40 > s60,
        format!(
            "mean sin∠(û, u) at r = √2: {s30:.4} (L=30, 100) > {s40:.4} (L=40, 100) > {s60:.4} (L=60, 50); \
             diagnostic at r = √(d ln n): {d30:.4}, {d40:.4}, {d60:.4}"
        ),
        secs9,
        None,
    );

    // 10. Exactness suites.
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut fischer_bad = 0usize;
    let mut range_bad = 0usize;
    for _ in 0..10_000 {
        let d = rng.gen_range(1..=4usize);
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let sigma = normalize_scattering(&ScatteringMatrix::new((&s + s.transpose()) * 0.5).unwrap()).unwrap();
        let k = rng.gen_range(1..=6usize);
        let pts: Vec<Vec<f64>> = (0..k.max(4))
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rk = rho_k(&sigma, &pts[..k]).unwrap();
        range_bad += usize::from(!(0.0..=1.0).contains(&rk));
        let r4 = rho_k(&sigma, &pts[..4]).unwrap();
        let r12 = rho_k(&sigma, &pts[..2]).unwrap();
        let r34 = rho_k(&sigma, &pts[2..4]).unwrap();
        fischer_bad += usize::from(r4 > r12 * r34 + 1e-12);
    }
    let mut rot_worst = 0.0f64;
    for seed in 0..5u64 {
        let big = sample_poisson(1.0, BoxWindow::new(24.0, 2).unwrap(), seed).unwrap();
        let p = gdp::sampler::extract_ball(&big, 11.0).unwrap();
        let th: f64 = rng.gen_range(0.0..2.0 * PI);
        let q = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let rotated: Vec<f64> = p
            .points()
            .flat_map(|x| (&q * DVector::from_column_slice(x)).iter().copied().collect::<Vec<_>>())
            .collect();
        let Ok(pr) = PointPattern::new(rotated, Window::Ball { radius: 11.0, dim: 2 }) else { continue };
        let c = EstimatorConfig { cutoff: Some(2.5), ..EstimatorConfig::default() };
        let a = estimate_scattering(&p, &c).unwrap().sigma_hat;
        let b = estimate_scattering(&pr, &c).unwrap().sigma_hat;
        rot_worst = rot_worst.max((b - &q * a * q.transpose()).amax());
    }
    let mut roc_bad = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200usize);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..12u8)) * 0.5).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
        roc_bad += usize::from(roc_auc(&scores, &labels).unwrap().auc != wins / pairs);
    }
    let mut affine_worst = 0.0f64;
    let mut sets: Vec<Dataset> = vec![ds.clone()];
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(5..60usize), rng.gen_range(2..8usize));
        let x = DMatrix::from_fn(n, d, |_, j| rng.gen_range(-3.0..3.0) * (j + 1) as f64);
        sets.push(Dataset::new(x, None, None).unwrap());
    }
    for set in &sets {
        let k = 2.min(set.dim());
        let res = dpp_embed(set, k, RMode::AllPairs, false).unwrap();
        let s = pair_outer_sum(set.features(), None);
        for alpha in [1e-6, 0.37, 1.0, 250.0] {
            let e = SymmetricEigen::new(&s * alpha);
            let mut idx: Vec<usize> = (0..s.nrows()).collect();
            idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
            let top = DMatrix::from_fn(s.nrows(), k, |i, j| e.eigenvectors[(i, idx[j])]);
            affine_worst = affine_worst.max(principal_angle_sines(&res.eigvecs, &top)[0]);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report.line(
        10,
        "Exactness suites",
        fischer_bad == 0 && range_bad == 0 && rot_worst <= 1e-10 && roc_bad == 0 && affine_worst < 1e-9,
        format!(
            "Fischer violations {fischer_bad}/10000, ρ_k range violations {range_bad}/10000; \
             rotation max deviation {rot_worst:.1e}; ROC/Mann–Whitney mismatches {roc_bad}/100; \
             max principal-angle sine {affine_worst:.1e}"
        ),
        secs,
        Some(60.0),
    );

    println!(
        "acceptance: {} of 10 criteria passed in {:.0} s",
        10 - report.failures,
        total.elapsed().as_secs_f64()
    );
    // Failures are reported above either way; strict mode turns them into a
    // failing exit status.
    if report.failures > 0 && std::env::var_os("GDP_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
