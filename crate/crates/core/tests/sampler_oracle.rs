//! The blocked sampler against a direct transcription of the sequential
//! algorithm: same random stream, textbook Gram–Schmidt for the conditional
//! intensity. The two must produce identical point patterns.

use std::f64::consts::PI;

use gdp::kernel::{normalize_scattering, ScatteringMatrix};
use gdp::sampler::{
    build_spectral_basis, sample_gdp_from_basis, SamplerConfig, SpectralBasis,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Func {
    k: Vec<f64>,
    kind: u8, // 0 constant, 1 cos, 2 sin
}

fn naive_sample(basis: &SpectralBasis, seed: u64) -> Vec<f64> {
    let d = basis.dim();
    let side = basis.side();
    let volume = side.powi(d as i32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut funcs = Vec::new();
    let mut slots = 0usize;
    for i in 0..basis.len() {
        if basis.mode(i).iter().all(|&v| v == 0) && rng.gen::<f64>() < basis.eigenvalues()[i] {
            funcs.push(Func { k: vec![0.0; d], kind: 0 });
            slots += 1;
        }
    }
    for i in 0..basis.len() {
        let k = basis.mode(i);
        let first = k.iter().copied().find(|&v| v != 0);
        if !matches!(first, Some(v) if v > 0) {
            continue;
        }
        let lam = basis.eigenvalues()[i];
        let kc = rng.gen::<f64>() < lam;
        let ks = rng.gen::<f64>() < lam;
        let kf: Vec<f64> = k.iter().map(|&v| v as f64).collect();
        if kc {
            funcs.push(Func { k: kf.clone(), kind: 1 });
        }
        if ks {
            funcs.push(Func { k: kf, kind: 2 });
        }
        if kc || ks {
            slots += 2;
        }
    }
    let envelope = slots as f64 / volume;
    let m = funcs.len();

    let features = |x: &[f64]| -> Vec<f64> {
        funcs
            .iter()
            .map(|f| {
                let theta: f64 = 2.0 * PI * f.k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / side;
                match f.kind {
                    0 => 1.0 / volume.sqrt(),
                    1 => (2.0 / volume).sqrt() * theta.cos(),
                    _ => (2.0 / volume).sqrt() * theta.sin(),
                }
            })
            .collect()
    };

    let mut basis_vecs: Vec<Vec<f64>> = Vec::new();
    let mut points = Vec::new();
    while basis_vecs.len() < m {
        let x: Vec<f64> = (0..d).map(|_| (rng.gen::<f64>() - 0.5) * side).collect();
        let u1: f64 = rng.gen();
        let phi = features(&x);
        let n2: f64 = phi.iter().map(|v| v * v).sum();
        if u1 * envelope >= n2 {
            continue;
        }
        let u2: f64 = rng.gen();
        let mut r = phi.clone();
        for _ in 0..2 {
            for e in &basis_vecs {
                let c: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
                for (ri, ei) in r.iter_mut().zip(e) {
                    *ri -= c * ei;
                }
            }
        }
        let f: f64 = r.iter().map(|v| v * v).sum();
        if u2 * n2 < f {
            let norm = f.sqrt();
            basis_vecs.push(r.iter().map(|v| v / norm).collect());
            points.extend_from_slice(&x);
        }
    }
    points
}

fn check(sigma: &ScatteringMatrix, side: f64, seeds: std::ops::Range<u64>) {
    let basis = build_spectral_basis(sigma, side, 1e-6).unwrap();
    for seed in seeds {
        let expected = naive_sample(&basis, seed);
        for cfg in [
            SamplerConfig::default(),
            SamplerConfig {
                block_size: 5,
                switch_fraction: 0.2,
                ..SamplerConfig::default()
            },
            SamplerConfig {
                block_size: 7,
                switch_fraction: 0.0,
                ..SamplerConfig::default()
            },
        ] {
            let got = sample_gdp_from_basis(&basis, seed, &cfg).unwrap();
            assert_eq!(got.coords(), expected.as_slice(), "seed {seed}, {cfg:?}");
        }
    }
}

#[test]
fn matches_naive_sampler_isotropic_2d() {
    check(&ScatteringMatrix::isotropic(2).unwrap(), 9.0, 0..4);
}

#[test]
fn matches_naive_sampler_1d() {
    check(&ScatteringMatrix::isotropic(1).unwrap(), 40.0, 0..4);
}

#[test]
fn matches_naive_sampler_anisotropic_2d() {
    let s = ScatteringMatrix::from_row_slice(2, &[0.3, 0.08, 0.08, 0.1]).unwrap();
    check(&normalize_scattering(&s).unwrap(), 8.0, 10..13);
}

#[test]
fn matches_naive_sampler_3d() {
    check(&ScatteringMatrix::isotropic(3).unwrap(), 4.0, 0..2);
}

#[test]
fn count_moments_match_basis() {
    let s = ScatteringMatrix::isotropic(2).unwrap();
    let basis = build_spectral_basis(&s, 10.0, 1e-6).unwrap();
    let cfg = SamplerConfig::default();
    let counts: Vec<f64> = (0..200)
        .map(|seed| sample_gdp_from_basis(&basis, seed, &cfg).unwrap().len() as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (basis.count_variance() / n).sqrt();
    assert!((mean - basis.expected_count()).abs() < 3.0 * se, "mean {mean}");
    assert!(var < mean, "variance {var} vs mean {mean}");
}
