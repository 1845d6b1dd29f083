//! `tpanova`: fit, predict, simulate and diagnose robust functional ANOVA
//! models from the command line.
//!
//! Exit status: 0 on success, 2 when a fit stopped before converging (the
//! best iterate is still written), 1 on any error.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use tpanova::dataset::{CsvSchema, FunctionalDataset};
use tpanova::estimation::{fit, FitConfig, Method, ModelFit, NuSetting};
use tpanova::kernels::KernelParams;
use tpanova::prediction::{predict_batch, predict_unseen, PredictionResult};
use tpanova::robustness::{refit_influence, regret_growth_report, score_boundedness_probe, UniformCovariates};
use tpanova::simulation::{default_fit_config, paired_less, run_experiment, Disturbance, SimConfig, SimModel};

use config::{emit, provenance_header, require_file, require_writable, FileConfig};

#[derive(Debug, Parser)]
#[command(name = "tpanova", version, about = "Robust functional ANOVA with t-process errors")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random draw, recorded in output headers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV and write the fit file.
    Fit(FitArgs),
    /// Predict from a fit file.
    Predict(PredictArgs),
    /// Run the simulation study and write the method × metric table.
    Simulate(SimulateArgs),
    /// Robustness and regret diagnostics.
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Tp,
    Gp,
    /// Student-t errors without the random effect.
    Tp0,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Tp => Method::Tp,
            MethodArg::Gp => Method::Gp,
            MethodArg::Tp0 => Method::TpNoRandomEffect,
        }
    }
}

/// Overrides for the fit settings.
#[derive(Debug, Clone, Args)]
struct FitOverrides {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Roughness penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated candidates; λ is then chosen by cross-validation.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Fix ν at this value.
    #[arg(long, conflicts_with = "estimate_nu")]
    nu: Option<f64>,
    /// Estimate ν, starting from 3.
    #[arg(long)]
    estimate_nu: bool,
    /// Relative objective tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Outer-iteration limit.
    #[arg(long)]
    outer_max: Option<usize>,
    /// Number of B-spline basis functions.
    #[arg(long)]
    n_basis: Option<usize>,
    /// B-spline order (4 = cubic).
    #[arg(long)]
    order: Option<usize>,
    /// Share kernel parameters among the curves of each level.
    #[arg(long)]
    tie_kernels: bool,
}

impl FitOverrides {
    fn apply(&self, mut cfg: FitConfig) -> FitConfig {
        if let Some(m) = self.method {
            cfg.method = m.into();
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(g) = &self.lambda_grid {
            cfg.lambda_grid = Some(g.clone());
        }
        if let Some(nu) = self.nu {
            cfg.nu = NuSetting::Fixed { value: nu };
        }
        if self.estimate_nu {
            cfg.nu = NuSetting::Estimate { initial: 3.0 };
        }
        if let Some(t) = self.tol {
            cfg.tol_obj = t;
        }
        if let Some(o) = self.outer_max {
            cfg.outer_max = o;
        }
        if let Some(n) = self.n_basis {
            cfg.basis.n_basis = Some(n);
        }
        if let Some(o) = self.order {
            cfg.basis.order = o;
        }
        if self.tie_kernels {
            cfg.tie_kernels = true;
        }
        cfg
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Long-format CSV with columns curve_id, level, t, y and optional u1, u2, ...
    #[arg(long)]
    data: PathBuf,
    /// Fit file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitOverrides,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Curve to predict; all fitted curves when absent.
    #[arg(long, conflicts_with = "level")]
    curve: Option<String>,
    /// Predict a new curve of this level (1-based); needs --times.
    #[arg(long, requires = "times")]
    level: Option<usize>,
    /// Comma-separated query times; the curve's own times when absent.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Covariates at the query times, row-major (one row of p values per
    /// time). Needed when the fit's covariates are not a function of time.
    #[arg(long, value_delimiter = ',', requires = "times")]
    u: Option<Vec<f64>>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Data-generating model: 1, 2 or 3.
    #[arg(long, default_value_t = 1)]
    model: u8,
    #[arg(long, default_value_t = 11)]
    n_train: usize,
    /// none, const2, normal02 or t3.
    #[arg(long, default_value = "const2")]
    disturb: Disturbance,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fit: FitOverrides,
}

#[derive(Debug, Subcommand)]
enum DiagnoseCommand {
    /// Score norms as one observation is pushed away.
    Robustness(RobustnessArgs),
    /// Monte-Carlo growth of log|I + K/σ²| with the sample size.
    Regret(RegretArgs),
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    /// A TP fit file.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    curve: String,
    /// 0-based index of the perturbed observation.
    #[arg(long, default_value_t = 0)]
    observation: usize,
    /// Comma-separated non-decreasing contamination sizes.
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,100,1000,10000,100000,1000000,100000000")]
    magnitudes: Vec<f64>,
    /// Refit both models at every magnitude and report coefficient shifts
    /// instead of fixed-parameter score norms (slow).
    #[arg(long, requires = "data")]
    refit: bool,
    /// Training CSV for --refit.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct RegretArgs {
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "20,40,80,160")]
    n: Vec<usize>,
    /// Covariate draws per sample size.
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 1.0)]
    theta0: f64,
    /// Inverse squared length scales, one per covariate.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    theta: Vec<f64>,
    /// Linear-kernel weights, one per covariate.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    eta: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    sigma2: f64,
    /// Lower corner of the uniform covariate box.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    lower: Vec<f64>,
    /// Upper corner of the uniform covariate box.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    upper: Vec<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

struct RunContext {
    seed: u64,
    file: FileConfig,
}

fn load_data(path: &Path, schema: &CsvSchema) -> Result<FunctionalDataset> {
    FunctionalDataset::load_csv(path, schema).with_context(|| format!("reading {}", path.display()))
}

fn cmd_fit(ctx: &RunContext, args: &FitArgs) -> Result<ExitCode> {
    require_file(&args.data)?;
    require_writable(&args.out)?;
    let cfg = args.fit.apply(ctx.file.fit.clone().unwrap_or_default());
    cfg.validate()?;
    let schema = ctx.file.csv.clone().unwrap_or_default();
    let data = load_data(&args.data, &schema)?;
    let fitted = fit(&data, &cfg)?;
    fitted.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let nu = fitted.nu().map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    println!(
        "method={} converged={} iterations={} evaluations={} objective={:.6} lambda={} nu={nu} sigma2={:.6}",
        fitted.method,
        fitted.converged,
        fitted.outer_iterations,
        fitted.evaluations,
        fitted.objective,
        fitted.lambda,
        fitted.sigma2()
    );
    Ok(if fitted.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn load_fit(path: &Path) -> Result<ModelFit> {
    require_file(path)?;
    ModelFit::load(path).with_context(|| format!("reading fit file {}", path.display()))
}

const PREDICTION_COLUMNS: &str =
    "curve,t,mean,variance,mean_structure,random_effect,latent_variance,conditional_variance,noise_variance\n";

fn prediction_row(out: &mut String, curve: &str, t: f64, p: &PredictionResult) {
    let _ = writeln!(
        out,
        "{curve},{t},{},{},{},{},{},{},{}",
        p.mean, p.variance, p.mean_structure, p.random_effect, p.latent_variance, p.conditional_variance, p.noise_variance
    );
}

fn cmd_predict(ctx: &RunContext, args: &PredictArgs) -> Result<ExitCode> {
    if let Some(out) = &args.out {
        require_writable(out)?;
    }
    let fitted = load_fit(&args.fit)?;
    let mut text = provenance_header(ctx.seed, &fitted.config)?;
    text.push_str(PREDICTION_COLUMNS);
    let u_star = match (&args.u, &args.times) {
        (Some(u), Some(times)) => {
            let p = fitted.curves.first().map_or(0, |c| c.curve.covariate_dim());
            if u.len() != times.len() * p {
                bail!("--u needs {} values ({} times x {p} covariates), got {}", times.len() * p, times.len(), u.len());
            }
            Some(DMatrix::from_row_slice(times.len(), p, u))
        }
        _ => None,
    };
    if let Some(level) = args.level {
        let times = args.times.as_deref().unwrap_or_default();
        for (q, &t) in times.iter().enumerate() {
            let row: Option<Vec<f64>> = u_star.as_ref().map(|m| m.row(q).iter().copied().collect());
            let p = predict_unseen(&fitted, level, t, row.as_deref())?;
            prediction_row(&mut text, &format!("new@{level}"), t, &p);
        }
    } else {
        let curves: Vec<String> = match &args.curve {
            Some(c) => vec![c.clone()],
            None => fitted.curves.iter().map(|c| c.curve.id.clone()).collect(),
        };
        for id in curves {
            let idx = fitted.curve_index(&id).with_context(|| format!("unknown curve `{id}`"))?;
            let times = args.times.clone().unwrap_or_else(|| fitted.curves[idx].curve.times.clone());
            for (t, p) in times.iter().zip(predict_batch(&fitted, &id, &times, u_star.as_ref())?) {
                prediction_row(&mut text, &id, *t, &p);
            }
        }
    }
    emit(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(ctx: &RunContext, args: &SimulateArgs) -> Result<ExitCode> {
    if let Some(out) = &args.out {
        require_writable(out)?;
    }
    let model = SimModel::from_id(args.model)?;
    let mut sim = SimConfig::new(model, args.n_train, args.disturb, args.reps, ctx.seed);
    sim.fit = args.fit.apply(ctx.file.fit.clone().unwrap_or_else(|| default_fit_config(model)));
    sim.validate()?;
    let report = run_experiment(&sim)?;
    let mut text = provenance_header(ctx.seed, &sim)?;
    text.push_str(&report.to_csv());
    emit(args.out.as_deref(), &text)?;
    eprintln!("failed replicates {}, non-converged fits (TP, GP, TP0) {:?}", report.failures, report.non_converged);
    let tp = &report.result(Method::Tp).pe;
    for other in [Method::Gp, Method::TpNoRandomEffect] {
        if let Ok(t) = paired_less(tp, &report.result(other).pe) {
            eprintln!(
                "PE(TP) < PE({other}): mean difference {:.4}, t {:.3}, one-sided p {:.3e}",
                t.mean_difference, t.t_statistic, t.p_value
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_robustness(ctx: &RunContext, args: &RobustnessArgs) -> Result<ExitCode> {
    if let Some(out) = &args.out {
        require_writable(out)?;
    }
    let fitted = load_fit(&args.fit)?;
    let mut text;
    if args.refit {
        let path = args.data.as_deref().context("--refit needs --data")?;
        require_file(path)?;
        let data = load_data(path, &ctx.file.csv.clone().unwrap_or_default())?;
        let rows = refit_influence(&data, &fitted.config, &args.curve, args.observation, &args.magnitudes)?;
        text = provenance_header(ctx.seed, &fitted.config)?;
        text.push_str("c,tp_coefficient_shift,gp_coefficient_shift\n");
        for (c, tp, gp) in rows {
            let _ = writeln!(text, "{c},{tp},{gp}");
        }
    } else {
        let probe = score_boundedness_probe(&fitted, &args.curve, args.observation, &args.magnitudes)?;
        text = provenance_header(ctx.seed, &fitted.config)?;
        text.push_str("c,tp_score_norm,gp_score_norm\n");
        for ((c, tp), gp) in probe.magnitudes.iter().zip(&probe.tp_score_norms).zip(&probe.gp_score_norms) {
            let _ = writeln!(text, "{c},{tp},{gp}");
        }
        eprintln!("largest TP score norm over the grid: {}", probe.tp_sup_estimate);
    }
    emit(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_regret(ctx: &RunContext, args: &RegretArgs) -> Result<ExitCode> {
    if let Some(out) = &args.out {
        require_writable(out)?;
    }
    let kernel = KernelParams::new(args.theta0, args.theta.clone(), args.eta.clone())?;
    let law = UniformCovariates {
        lower: args.lower.clone(),
        upper: args.upper.clone(),
    };
    if law.lower.iter().zip(&law.upper).any(|(a, b)| a.partial_cmp(b) != Some(std::cmp::Ordering::Less)) {
        bail!("every --lower bound must be below its --upper bound");
    }
    let rows = regret_growth_report(&kernel, &law, args.sigma2, &args.n, args.draws, ctx.seed)?;
    let mut text = provenance_header(ctx.seed, args)?;
    text.push_str("n,mean_regret,ratio\n");
    for r in rows {
        let _ = writeln!(text, "{},{},{}", r.n, r.mean_regret, r.ratio);
    }
    emit(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(path) => {
            require_file(path)?;
            FileConfig::load(path)?
        }
        None => FileConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = RunContext {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        file,
    };
    match &cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Diagnose(DiagnoseCommand::Robustness(a)) => cmd_robustness(&ctx, a),
        Command::Diagnose(DiagnoseCommand::Regret(a)) => cmd_regret(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
