//! Synthetic three-level functional ANOVA data, contamination schemes and a
//! replication harness comparing the three fitting methods.
//!
//! Truth: `μ(t) = t²`, `α = (0.5, 0.1, -0.6)·cos t`, two curves per level on
//! 61 equally spaced points of `[0, 2]`, covariate `u(t) = 0.2t`, and random
//! effects drawn from the kernel with `(θ₀, θ₁, η₁) = (0.1, 10, 0.1)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT as StudentTDist};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{CovariateRule, Curve, FunctionalDataset};
use crate::error::{Error, Result};
use crate::estimation::{fit, BasisConfig, FitConfig, Method, NuSetting};
use crate::etp::{sample_etp, EtpParams};
use crate::kernels::{kernel_matrix, KernelParams};
use crate::linalg::cholesky_jittered;
use crate::prediction::predict_batch;

pub const GRID_POINTS: usize = 61;
pub const DOMAIN: (f64, f64) = (0.0, 2.0);
pub const LEVELS: usize = 3;
pub const CURVES_PER_LEVEL: usize = 2;
pub const COVARIATE_SCALE: f64 = 0.2;
pub const LEVEL_EFFECTS: [f64; LEVELS] = [0.5, 0.1, -0.6];
pub const ERROR_NU: f64 = 1.1;
pub const ERROR_SIGMA2: f64 = 0.1;

/// The three data-generating settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    /// Random effect plus heavy-tailed (ETP) errors.
    RandomEffectTp,
    /// Random effect plus Gaussian white noise.
    RandomEffectGaussian,
    /// No random effect, heavy-tailed errors.
    NoRandomEffect,
}

impl SimModel {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(SimModel::RandomEffectTp),
            2 => Ok(SimModel::RandomEffectGaussian),
            3 => Ok(SimModel::NoRandomEffect),
            _ => Err(Error::Parameter(format!("model id must be 1, 2 or 3, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            SimModel::RandomEffectTp => 1,
            SimModel::RandomEffectGaussian => 2,
            SimModel::NoRandomEffect => 3,
        }
    }
}

/// Extra error added to one randomly chosen training observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disturbance {
    None,
    /// `+2`
    Const2,
    /// `N(0, 2)` (variance 2)
    Normal02,
    /// Student-t with 3 degrees of freedom
    T3,
}

impl FromStr for Disturbance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Disturbance::None),
            "const2" => Ok(Disturbance::Const2),
            "normal02" => Ok(Disturbance::Normal02),
            "t3" => Ok(Disturbance::T3),
            _ => Err(Error::Parameter(format!("unknown disturbance `{s}`"))),
        }
    }
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Disturbance::None => "none",
            Disturbance::Const2 => "const2",
            Disturbance::Normal02 => "normal02",
            Disturbance::T3 => "t3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: SimModel,
    pub n_train: usize,
    pub disturb: Disturbance,
    pub replications: usize,
    pub seed: u64,
    /// Settings shared by the three fits; `method` is overridden per fit.
    pub fit: FitConfig,
}

impl SimConfig {
    pub fn new(model: SimModel, n_train: usize, disturb: Disturbance, replications: usize, seed: u64) -> Self {
        SimConfig {
            model,
            n_train,
            disturb,
            replications,
            seed,
            fit: default_fit_config(model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..GRID_POINTS).contains(&self.n_train) {
            return Err(Error::Parameter(format!(
                "n_train must lie in 2..{GRID_POINTS}, got {}",
                self.n_train
            )));
        }
        if self.replications == 0 {
            return Err(Error::Parameter("replications must be >= 1".into()));
        }
        self.fit.validate()
    }
}

/// `ν` the harness fixes for the Student-t fits when the errors are Gaussian
/// (no generating value exists); equals the default starting value of `ν`.
pub const GAUSSIAN_ERROR_FIT_NU: f64 = 3.0;

/// Fit settings used by the harness: `ν` fixed at the generating value (or
/// [`GAUSSIAN_ERROR_FIT_NU`] for Gaussian errors) and the basis spanning the
/// full design interval.
pub fn default_fit_config(model: SimModel) -> FitConfig {
    let nu = match model {
        SimModel::RandomEffectGaussian => GAUSSIAN_ERROR_FIT_NU,
        _ => ERROR_NU,
    };
    FitConfig {
        nu: NuSetting::Fixed { value: nu },
        basis: BasisConfig {
            domain: Some(DOMAIN),
            ..BasisConfig::default()
        },
        ..FitConfig::default()
    }
}

pub fn grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|k| DOMAIN.0 + (DOMAIN.1 - DOMAIN.0) * k as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

/// `μ(t) + α_level(t)`, level 1-based.
pub fn true_mean(level: usize, t: f64) -> f64 {
    t * t + LEVEL_EFFECTS[level - 1] * t.cos()
}

pub fn true_kernel() -> KernelParams {
    KernelParams::new(0.1, vec![10.0], vec![0.1]).expect("valid constants")
}

/// One simulated replicate. `truth[c]` and `observed[c]` are on the full grid,
/// in the curve order of `train` and `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub train: FunctionalDataset,
    pub test: FunctionalDataset,
    pub truth: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
}

impl SimData {
    /// Noise-free values at the test points of curve `c`.
    pub fn test_truth(&self, c: usize) -> Vec<f64> {
        self.test_index.iter().map(|&k| self.truth[c][k]).collect()
    }
}

fn subset(curve_id: &str, level: usize, replicate: usize, t: &[f64], y: &[f64], idx: &[usize]) -> Result<Curve> {
    let times: Vec<f64> = idx.iter().map(|&k| t[k]).collect();
    let values = idx.iter().map(|&k| y[k]).collect();
    let cov = DMatrix::from_iterator(times.len(), 1, times.iter().map(|t| COVARIATE_SCALE * t));
    Curve::new(curve_id, level, replicate, times, values, cov)
}

/// Draws one replicate: truth, noisy observations and the shared train/test split.
pub fn generate<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<SimData> {
    config.validate()?;
    let t = grid();
    let mut train_index = sample(rng, GRID_POINTS, config.n_train).into_vec();
    train_index.sort_unstable();
    let test_index: Vec<usize> = (0..GRID_POINTS).filter(|k| train_index.binary_search(k).is_err()).collect();

    let u = DMatrix::from_iterator(GRID_POINTS, 1, t.iter().map(|t| COVARIATE_SCALE * t));
    let k_chol = cholesky_jittered(&kernel_matrix(&u, &true_kernel())?)?;
    let noise_cov = DMatrix::identity(GRID_POINTS, GRID_POINTS) * ERROR_SIGMA2;
    let etp = EtpParams::new(ERROR_NU, ERROR_SIGMA2)?;
    let gaussian = Normal::new(0.0, ERROR_SIGMA2.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;

    let labels: Vec<String> = (1..=LEVELS).map(|i| i.to_string()).collect();
    let (mut train, mut test, mut truth, mut observed) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for level in 1..=LEVELS {
        for rep in 1..=CURVES_PER_LEVEL {
            let tau = match config.model {
                SimModel::NoRandomEffect => DVector::zeros(GRID_POINTS),
                _ => {
                    let xi = DVector::from_iterator(GRID_POINTS, (0..GRID_POINTS).map(|_| StandardNormal.sample(rng)));
                    k_chol.l() * xi
                }
            };
            let eps = match config.model {
                SimModel::RandomEffectGaussian => DVector::from_iterator(GRID_POINTS, (0..GRID_POINTS).map(|_| gaussian.sample(rng))),
                _ => sample_etp(&etp, &noise_cov, rng)?,
            };
            let f: Vec<f64> = t.iter().enumerate().map(|(k, &tk)| true_mean(level, tk) + tau[k]).collect();
            let y: Vec<f64> = f.iter().zip(eps.iter()).map(|(a, b)| a + b).collect();
            let id = format!("{level}-{rep}");
            train.push(subset(&id, level, rep, &t, &y, &train_index)?);
            test.push(subset(&id, level, rep, &t, &y, &test_index)?);
            truth.push(f);
            observed.push(y);
        }
    }
    let rule = CovariateRule::Time { scale: COVARIATE_SCALE };
    Ok(SimData {
        train: FunctionalDataset::new(train, labels.clone(), rule)?,
        test: FunctionalDataset::new(test, labels, rule)?,
        truth,
        observed,
        train_index,
        test_index,
    })
}

/// Adds the disturbance to exactly one training value chosen uniformly over
/// all curves; `Disturbance::None` returns the data unchanged.
pub fn contaminate<R: Rng + ?Sized>(train: &FunctionalDataset, scheme: Disturbance, rng: &mut R) -> Result<FunctionalDataset> {
    let mut out = train.clone();
    if scheme == Disturbance::None {
        return Ok(out);
    }
    let total = out.total_observations();
    if total == 0 {
        return Err(Error::Dataset("cannot contaminate an empty training set".into()));
    }
    let mut pick = rng.random_range(0..total);
    let shift = match scheme {
        Disturbance::None => unreachable!(),
        Disturbance::Const2 => 2.0,
        Disturbance::Normal02 => Normal::new(0.0, 2f64.sqrt()).expect("valid").sample(rng),
        Disturbance::T3 => StudentTDist::new(3.0).expect("valid").sample(rng),
    };
    for c in out.curves.iter_mut() {
        if pick < c.len() {
            c.values[pick] += shift;
            break;
        }
        pick -= c.len();
    }
    Ok(out)
}

/// `(mean |ŷ - y|, mean (ŷ - f)²)` over aligned test points.
pub fn pe_mse(predictions: &[f64], observed: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != observed.len() || predictions.len() != truth.len() {
        return Err(Error::Dimension {
            expected: predictions.len(),
            found: if observed.len() != predictions.len() { observed.len() } else { truth.len() },
        });
    }
    if predictions.is_empty() {
        return Err(Error::Dimension { expected: 1, found: 0 });
    }
    let n = predictions.len() as f64;
    let pe = predictions.iter().zip(observed).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let mse = predictions.iter().zip(truth).map(|(p, f)| (p - f).powi(2)).sum::<f64>() / n;
    Ok((pe, mse))
}

pub const METHODS: [Method; 3] = [Method::Tp, Method::Gp, Method::TpNoRandomEffect];

/// PE and MSE of each method on one replicate, in [`METHODS`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateOutcome {
    pub pe: [f64; 3],
    pub mse: [f64; 3],
    pub converged: [bool; 3],
}

/// Per-replicate RNG: stream `replicate` of the master seed.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

pub fn run_replicate(config: &SimConfig, replicate: u64) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(config.seed, replicate);
    let data = generate(config, &mut rng)?;
    let train = contaminate(&data.train, config.disturb, &mut rng)?;
    let mut out = ReplicateOutcome {
        pe: [0.0; 3],
        mse: [0.0; 3],
        converged: [false; 3],
    };
    for (m, method) in METHODS.iter().enumerate() {
        let fitted = fit(&train, &FitConfig { method: *method, ..config.fit.clone() })?;
        let (mut preds, mut obs, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        for (c, curve) in data.test.curves.iter().enumerate() {
            let p = predict_batch(&fitted, &curve.id, &curve.times, None)?;
            preds.extend(p.iter().map(|r| r.mean));
            obs.extend_from_slice(&curve.values);
            truth.extend(data.test_truth(c));
        }
        let (pe, mse) = pe_mse(&preds, &obs, &truth)?;
        out.pe[m] = pe;
        out.mse[m] = mse;
        out.converged[m] = fitted.converged;
    }
    Ok(out)
}

/// Per-method values over successful replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub method: Method,
    pub pe: Vec<f64>,
    pub mse: Vec<f64>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl ReplicationResult {
    pub fn pe_summary(&self) -> (f64, f64) {
        mean_sd(&self.pe)
    }

    pub fn mse_summary(&self) -> (f64, f64) {
        mean_sd(&self.mse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: SimConfig,
    /// In [`METHODS`] order.
    pub results: Vec<ReplicationResult>,
    pub failures: usize,
    /// Fits that stopped at the iteration limit, per method.
    pub non_converged: [usize; 3],
}

impl ExperimentReport {
    pub fn result(&self, method: Method) -> &ReplicationResult {
        self.results.iter().find(|r| r.method == method).expect("all methods present")
    }

    /// Rows `method,metric,mean,sd`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,mean,sd\n");
        for r in &self.results {
            let (pm, ps) = r.pe_summary();
            let (mm, ms) = r.mse_summary();
            s.push_str(&format!("{},PE,{pm:.6},{ps:.6}\n", r.method));
            s.push_str(&format!("{},MSE,{mm:.6},{ms:.6}\n", r.method));
        }
        s
    }
}

/// Runs all replicates in parallel. Replicates whose fit fails are dropped
/// and counted; more than 10% failures aborts the run.
pub fn run_experiment(config: &SimConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures * 10 > config.replications {
        let first = outcomes.into_iter().find_map(|o| o.err()).expect("at least one failure");
        return Err(Error::Fit(format!(
            "{failures} of {} replicates failed (first: {first})",
            config.replications
        )));
    }
    let ok: Vec<ReplicateOutcome> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let mut non_converged = [0; 3];
    for o in &ok {
        for (count, &ok) in non_converged.iter_mut().zip(&o.converged) {
            *count += usize::from(!ok);
        }
    }
    let results = METHODS
        .iter()
        .enumerate()
        .map(|(m, method)| ReplicationResult {
            method: *method,
            pe: ok.iter().map(|o| o.pe[m]).collect(),
            mse: ok.iter().map(|o| o.mse[m]).collect(),
        })
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        results,
        failures,
        non_converged,
    })
}

/// One-sided paired t-test of `mean(a - b) < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

pub fn paired_less(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Parameter("paired test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&d);
    let n = d.len();
    let se = sd / (n as f64).sqrt();
    let t = if se > 0.0 {
        mean / se
    } else if mean < 0.0 {
        f64::NEG_INFINITY
    } else if mean > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_difference: mean,
        t_statistic: t,
        p_value: dist.cdf(t),
    })
}
