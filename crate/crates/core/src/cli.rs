//! Command-line front end of the `gdp` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::dimred::{dpp_embed, pca_embed, risk_scores, roc_auc, scree, RMode};
use crate::error::{Error, Result};
use crate::estimator::{
    bernstein_tail, bias_bound, count_expectation, default_cutoff, estimate_scattering, risk_rate,
    variance_bound, EstimatorConfig,
};
use crate::io::{
    check_benchmark_shape, load_dataset, Benchmark, read_embedding_column, read_pattern, write_embedding, write_json, write_pattern,
    write_roc, write_scree, PatternMeta, ResultEnvelope,
};
use crate::kernel::{normalize_scattering, spiked_scattering, ScatteringMatrix, SpikedParams};
use crate::sampler::{sample_gdp_with, sample_poisson, BoxWindow, SamplerConfig, DEFAULT_MODE_CAP, DEFAULT_TOL};
use crate::spiked::{calibrate_null, calibrated_detection_test, detection_test, estimate_spike};
use crate::validate::{run_validation, ValidationConfig};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "GDP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gdp", version, about = "Gaussian determinantal point processes")]
pub struct Cli {
    /// Worker threads (default: $GDP_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a GDP (or Poisson) pattern on a torus box.
    Sample(SampleArgs),
    /// Estimate the scattering matrix from a pattern.
    Estimate(EstimateArgs),
    /// Test a pattern for a spike.
    Detect(DetectArgs),
    /// Embed a dataset with the DPP method or PCA.
    Reduce(ReduceArgs),
    /// ROC curve of the risk score of an embedding.
    Roc(RocArgs),
    /// Monte-Carlo check of an isotropic sampler ensemble.
    Validate(ValidateArgs),
    /// Evaluate the theoretical bounds.
    Bounds(BoundsArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SigmaArgs {
    /// `iso` for I/(2π), or d² comma-separated entries in row-major order.
    #[arg(long, default_value = "iso")]
    pub sigma: String,
    /// Rescale Σ to det Σ = (2π)^(−d).
    #[arg(long)]
    pub normalize: bool,
    /// Spike strength λ; replaces --sigma by the spiked model.
    #[arg(long)]
    pub spike_lambda: Option<f64>,
    /// Spike direction (comma-separated unit vector).
    #[arg(long, requires = "spike_lambda")]
    pub spike_u: Option<String>,
}

fn parse_list(s: &str, what: &'static str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(what, format!("cannot parse `{t}` as a number")))
        })
        .collect()
}

impl SigmaArgs {
    fn build(&self, d: usize) -> Result<ScatteringMatrix> {
        if let Some(lambda) = self.spike_lambda {
            let u = match &self.spike_u {
                Some(s) => parse_list(s, "spike_u")?,
                None => {
                    let mut e = vec![0.0; d];
                    e[0] = 1.0;
                    e
                }
            };
            if u.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: u.len() });
            }
            return spiked_scattering(&SpikedParams::new(lambda, u)?, d);
        }
        let s = if self.sigma == "iso" {
            ScatteringMatrix::isotropic(d)?
        } else {
            let v = parse_list(&self.sigma, "sigma")?;
            if v.len() != d * d {
                return Err(Error::DimensionMismatch { expected: d * d, found: v.len() });
            }
            ScatteringMatrix::from_row_slice(d, &v)?
        };
        if self.normalize {
            normalize_scattering(&s)
        } else {
            Ok(s)
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SampleArgs {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Side of the box window.
    #[arg(long = "L")]
    pub side: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sigma: SigmaArgs,
    /// Draw a homogeneous Poisson pattern of this intensity instead.
    #[arg(long)]
    pub poisson: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MODE_CAP)]
    pub mode_cap: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EstimatorArgs {
    /// Cutoff r (default: C0·√(d ln n), clamped).
    #[arg(long)]
    pub r: Option<f64>,
    /// Observation radius R (default: largest ball in the window).
    #[arg(long = "R")]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,
    /// Constant C of the variance bound.
    #[arg(long, default_value_t = 1.0)]
    pub variance_constant: f64,
    /// Constant c of the rate.
    #[arg(long, default_value_t = 1.0)]
    pub rate_constant: f64,
}

impl EstimatorArgs {
    fn config(&self, reference: Option<ScatteringMatrix>) -> EstimatorConfig {
        EstimatorConfig {
            cutoff: self.r,
            radius: self.radius,
            c0: self.c0,
            variance_constant: self.variance_constant,
            rate_constant: self.rate_constant,
            reference,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EstimateArgs {
    /// Pattern CSV (with its JSON sidecar).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Evaluate the bias bound against the sidecar's Σ, if recorded.
    #[arg(long)]
    pub with_bias_bound: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Threshold multiplier t of the analytic test.
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// Calibrate the threshold on simulated isotropic patterns.
    #[arg(long)]
    pub calibrate: bool,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Dpp,
    Pca,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkArg {
    Wbc,
    Iris,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReduceArgs {
    /// Dataset CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "dpp")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Column holding labels; every other column is a feature.
    #[arg(long)]
    pub label_column: Option<String>,
    /// Label value of the positive class; makes labels binary.
    #[arg(long)]
    pub positive_label: Option<String>,
    /// Explicit neighborhood radius (dpp; default: all pairs).
    #[arg(long)]
    pub r: Option<f64>,
    /// Check the dataset against a benchmark layout after loading.
    #[arg(long, value_enum)]
    pub benchmark: Option<BenchmarkArg>,
    /// Center and scale columns before the DPP embedding.
    #[arg(long)]
    pub standardize: bool,
    /// PCA without centering.
    #[arg(long)]
    pub no_center: bool,
    /// PCA without scaling.
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RocArgs {
    /// Embedding CSV written by `reduce`.
    #[arg(long)]
    pub input: PathBuf,
    /// Component to score, from 1.
    #[arg(long, default_value_t = 1)]
    pub component: usize,
    /// Label of the positive class as written in the embedding.
    #[arg(long, default_value = "1")]
    pub positive: String,
    /// Use the coordinate itself instead of its negative as the score.
    #[arg(long)]
    pub flip_sign: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long = "L", default_value_t = 30.0)]
    pub side: f64,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 2.0)]
    pub max_distance: f64,
    /// Deviation levels for the count tail report.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
    pub eps: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BoundsArgs {
    #[arg(long)]
    pub d: usize,
    /// Observation radius R; n = |B(1)|R^d.
    #[arg(long = "R")]
    pub radius: f64,
    /// Cutoff r (default: C0·√(d ln n)).
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub variance_constant: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rate_constant: f64,
    #[command(flatten)]
    pub sigma: SigmaArgs,
    /// Only the Bernstein tail (needs --eps).
    #[arg(long)]
    pub bernstein: bool,
}

/// Parses `argv`, runs the command and returns the process exit status:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let echo: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli.command, &echo) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(Error::InvalidParameter { name, reason }) => {
            eprintln!("error: invalid parameter `{name}`: {reason}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn envelope<T: Serialize, A: Serialize>(
    command: &str,
    argv: &[String],
    args: &A,
    start: Instant,
    payload: T,
    out: Option<&Path>,
) -> Result<String> {
    let env = ResultEnvelope::new(
        command,
        json!({ "argv": argv, "args": args }),
        start.elapsed().as_secs_f64(),
        payload,
    );
    if let Some(dir) = out {
        write_json(&dir.join(format!("{command}.json")), &env)?;
    }
    Ok(serde_json::to_string_pretty(&env)?)
}

fn dispatch(cmd: &Command, argv: &[String]) -> Result<String> {
    let start = Instant::now();
    match cmd {
        Command::Sample(a) => {
            let window = BoxWindow::new(a.side, a.d)?;
            let (pattern, sigma) = match a.poisson {
                Some(rate) => (sample_poisson(rate, window, a.seed)?, None),
                None => {
                    let sigma = a.sigma.build(a.d)?;
                    let cfg = SamplerConfig {
                        tol: a.tol,
                        mode_cap: a.mode_cap,
                        ..SamplerConfig::default()
                    };
                    (sample_gdp_with(&sigma, window, a.seed, &cfg)?, Some(sigma))
                }
            };
            let meta = PatternMeta {
                window: *pattern.window(),
                seed: Some(a.seed),
                tol: sigma.as_ref().map(|_| a.tol),
                sigma,
            };
            let path = a.out.join("points.csv");
            write_pattern(&path, &pattern, &meta)?;
            let payload = json!({
                "points": path,
                "count": pattern.len(),
                "meta": meta,
            });
            envelope("sample", argv, a, start, payload, Some(&a.out))
        }
        Command::Estimate(a) => {
            let (pattern, meta) = read_pattern(&a.input)?;
            let reference = if a.with_bias_bound { meta.sigma } else { None };
            let est = estimate_scattering(&pattern, &a.estimator.config(reference))?;
            envelope("estimate", argv, a, start, est, a.out.as_deref())
        }
        Command::Detect(a) => {
            let (pattern, _) = read_pattern(&a.input)?;
            let cfg = a.estimator.config(None);
            let est = estimate_scattering(&pattern, &cfg)?;
            let d = pattern.dim();
            let (detection, calibration) = if a.calibrate {
                let cal = calibrate_null(
                    d,
                    est.radius,
                    a.replicates,
                    a.delta,
                    a.seed,
                    &cfg,
                    &SamplerConfig::default(),
                )?;
                let det = calibrated_detection_test(&est.sigma_hat, est.expected_count, &cal, a.estimator.rate_constant)?;
                (det, Some(cal))
            } else {
                let det = detection_test(&est.sigma_hat, est.expected_count, d, a.t, a.estimator.rate_constant)?;
                (det, None)
            };
            let spike = estimate_spike(&est.sigma_hat)?;
            let payload = json!({
                "mode": if a.calibrate { "calibrated" } else { "analytic" },
                "detection": detection,
                "spike": spike,
                "estimate": est,
                "calibration": calibration,
            });
            envelope("detect", argv, a, start, payload, a.out.as_deref())
        }
        Command::Reduce(a) => {
            let ds = load_dataset(&a.input, a.label_column.as_deref(), a.positive_label.as_deref())?;
            if let Some(b) = a.benchmark {
                let b = match b {
                    BenchmarkArg::Wbc => Benchmark::Wbc,
                    BenchmarkArg::Iris => Benchmark::Iris,
                };
                check_benchmark_shape(&ds, b)?;
            }
            let res = match a.method {
                MethodArg::Dpp => {
                    let mode = a.r.map_or(RMode::AllPairs, RMode::Explicit);
                    dpp_embed(&ds, a.k, mode, a.standardize)?
                }
                MethodArg::Pca => pca_embed(&ds, a.k, !a.no_center, !a.no_scale)?,
            };
            write_embedding(&a.out.join("embedding.csv"), &res, ds.labels())?;
            write_scree(&a.out.join("scree.csv"), &scree(&res.eigvals))?;
            let payload = json!({
                "method": res.method,
                "rows": ds.len(),
                "dim": ds.dim(),
                "eigvals": res.eigvals,
                "eigvecs": res.eigvecs.column_iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "r_used": res.r_used,
                "log_identity_coefficient": res.log_identity_coefficient,
                "feature_names": ds.feature_names(),
            });
            envelope("reduce", argv, a, start, payload, Some(&a.out))
        }
        Command::Roc(a) => {
            if a.component == 0 {
                return Err(Error::invalid("component", "components are numbered from 1"));
            }
            let col = read_embedding_column(&a.input, a.component, &a.positive)?;
            let coords = nalgebra::DMatrix::from_column_slice(col.coords.len(), 1, &col.coords);
            let mut scores = risk_scores(&coords, 0)?;
            if a.flip_sign {
                scores.iter_mut().for_each(|s| *s = -*s);
            }
            let roc = roc_auc(&scores, &col.labels)?;
            write_roc(&a.out.join("roc.csv"), &roc)?;
            let payload = json!({
                "auc": roc.auc,
                "positives": col.labels.iter().filter(|&&l| l).count(),
                "negatives": col.labels.iter().filter(|&&l| !l).count(),
            });
            envelope("roc", argv, a, start, payload, Some(&a.out))
        }
        Command::Validate(a) => {
            let cfg = ValidationConfig {
                dim: a.d,
                side: a.side,
                replicates: a.replicates,
                seed: a.seed,
                bin_width: a.bin_width,
                max_distance: a.max_distance,
                eps: a.eps.clone(),
            };
            let report = run_validation(&cfg, &SamplerConfig::default())?;
            envelope("validate", argv, a, start, report, a.out.as_deref())
        }
        Command::Bounds(a) => {
            let n = count_expectation(a.radius, a.d);
            if a.bernstein {
                let eps = a.eps.ok_or_else(|| Error::invalid("eps", "--bernstein needs --eps"))?;
                let payload = json!({ "n": n, "eps": eps, "bernstein": bernstein_tail(eps, a.radius, a.d) });
                return envelope("bounds", argv, a, start, payload, None);
            }
            let r = match a.r {
                Some(r) => r,
                None => default_cutoff(n, a.d, a.c0)?,
            };
            let sigma = a.sigma.build(a.d)?;
            let payload = json!({
                "n": n,
                "r": r,
                "bias": bias_bound(&sigma, r),
                "variance": variance_bound(r, a.d, n, a.variance_constant),
                "rate": risk_rate(n, a.d, a.rate_constant).ok(),
                "bernstein": a.eps.map(|e| bernstein_tail(e, a.radius, a.d)),
            });
            envelope("bounds", argv, a, start, payload, None)
        }
    }
}
