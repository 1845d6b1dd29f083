//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{central, fd_close, integrate_real_line, random_problem};
use tpanova::bspline::{penalty_matrix, penalty_value, BSplineBasis, CoefficientMatrix, DerivativeOperator, Quadrature};
use tpanova::dataset::{CovariateRule, Curve, FunctionalDataset};
use tpanova::estimation::{fit, project_identifiable, score_b, score_sigma2, score_theta, Method, ModelFit, ModelState};
use tpanova::etp::{emtd_logpdf, g_derivs, EtpParams, Likelihood};
use tpanova::gauss_approx::{approx_marginal_loglik, ModeOptions};
use tpanova::kernels::{cross_kernel, eval_kernel, jitter, kernel_grad, kernel_matrix, KernelParams};
use tpanova::prediction::predict;
use tpanova::robustness::score_boundedness_probe;
use tpanova::simulation::{
    default_fit_config, generate, paired_less, replicate_rng, run_experiment, run_replicate, Disturbance, ExperimentReport, SimConfig, SimModel,
};

const SEED: u64 = 2024;
const REPS: usize = 100;
const ALPHA: f64 = 0.01;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model1_n11() -> &'static ExperimentReport {
    static REPORT: OnceLock<ExperimentReport> = OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&SimConfig::new(SimModel::RandomEffectTp, 11, Disturbance::Const2, REPS, SEED)).expect("experiment runs"))
}

/// Paired one-sided test that `method` beats `rival`, plus the mean ordering.
fn beats(report: &ExperimentReport, rival: Method) -> Result<String, String> {
    let tp = report.result(Method::Tp);
    let other = report.result(rival);
    let test = paired_less(&tp.pe, &other.pe).map_err(|e| e.to_string())?;
    let (m_tp, _) = tp.pe_summary();
    let (m_other, _) = other.pe_summary();
    let line = format!("PE(TP) {m_tp:.4} vs PE({rival}) {m_other:.4}, paired t {:.2}, p {:.2e}", test.t_statistic, test.p_value);
    ensure(m_tp < m_other && test.p_value < ALPHA, || line.clone())?;
    Ok(line)
}

fn ordering(report: &ExperimentReport, rivals: &[Method]) -> Outcome {
    let mut parts = vec![format!(
        "{} replicates, {} failed, non-converged {:?}",
        report.results[0].pe.len(),
        report.failures,
        report.non_converged
    )];
    for &r in rivals {
        parts.push(beats(report, r)?);
    }
    Ok(parts.join("; "))
}

fn criterion_1() -> Outcome {
    ordering(model1_n11(), &[Method::Gp, Method::TpNoRandomEffect])
}

fn criterion_2() -> Outcome {
    let report = run_experiment(&SimConfig::new(SimModel::RandomEffectGaussian, 11, Disturbance::Const2, REPS, SEED)).map_err(|e| e.to_string())?;
    ordering(&report, &[Method::Gp, Method::TpNoRandomEffect])
}

fn criterion_3() -> Outcome {
    let report = run_experiment(&SimConfig::new(SimModel::RandomEffectTp, 21, Disturbance::Const2, REPS, SEED)).map_err(|e| e.to_string())?;
    ordering(&report, &[Method::TpNoRandomEffect])
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let u = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let kp = KernelParams::new(rng.random_range(0.1..2.0), vec![rng.random_range(0.1..5.0); 2], vec![rng.random_range(0.0..0.5); 2]).unwrap();
        let k = kernel_matrix(&u, &kp).unwrap();
        let mean = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let sigma2 = rng.random_range(0.05..1.0);
        let approx = approx_marginal_loglik(&y, &mean, &k, &Likelihood::Gaussian { sigma2 }, &ModeOptions::default()).map_err(|e| e.to_string())?;
        // closed-form N(mean, K + σ²I)
        let mut c = k.clone();
        for i in 0..n {
            c[(i, i)] += sigma2;
        }
        let chol = c.cholesky().ok_or("K + σ²I not positive definite")?;
        let r = &y - &mean;
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let exact = -0.5 * (r.dot(&chol.solve(&r)) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
        worst = worst.max((approx - exact).abs());
    }
    ensure(worst <= 1e-8, || format!("max |approx - exact| = {worst:.3e}"))?;
    Ok(format!("50 instances, max |approx - exact| = {worst:.3e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0usize;
    for method in [Method::Tp, Method::Gp] {
        for draw in 0..20 {
            let levels = rng.random_range(1..=3);
            let n = rng.random_range(3..=6);
            let (state, data) = random_problem(&mut rng, levels, 2, n, method);
            let sb = score_b(&state, &data).map_err(|e| e.to_string())?;
            for r in 0..state.coefficients.n_basis() {
                for c in 0..=levels {
                    let fd = central(&state, &data, 1e-5, |s, h| s.coefficients.0[(r, c)] += h);
                    ensure(fd_close(sb[(r, c)], fd), || format!("{method} draw {draw}: score_B[{r},{c}] {} vs fd {fd}", sb[(r, c)]))?;
                    checked += 1;
                }
            }
            for curve in 0..data.curves.len() {
                let st = score_theta(&state, &data, curve).map_err(|e| e.to_string())?;
                for j in 0..st.len() {
                    let fd = central(&state, &data, 1e-6, |s, h| {
                        let mut v = s.kernels[curve].to_vec();
                        v[j] += h;
                        s.kernels[curve] = KernelParams::from_slice(&v).unwrap();
                    });
                    ensure(fd_close(st[j], fd), || format!("{method} draw {draw}: score_theta[{curve}][{j}] {} vs fd {fd}", st[j]))?;
                    checked += 1;
                }
            }
            let an = score_sigma2(&state, &data).map_err(|e| e.to_string())?;
            let fd = central(&state, &data, 1e-6, |s, h| s.likelihood = s.likelihood.with_sigma2(s.likelihood.sigma2() + h));
            ensure(fd_close(an, fd), || format!("{method} draw {draw}: score_sigma2 {an} vs fd {fd}"))?;
            checked += 1;
        }
    }
    for draw in 0..20 {
        let p = EtpParams::new(rng.random_range(1.05..20.0), rng.random_range(0.05..2.0)).unwrap();
        let (y, m) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let logp = |tau: f64| emtd_logpdf(&[y], &[m + tau], &p).unwrap();
        let tau = rng.random_range(-1.0..1.0);
        let h = 1e-5;
        let (g1, g2) = g_derivs(y - m - tau, &p).unwrap();
        let fd1 = (logp(tau + h) - logp(tau - h)) / (2.0 * h);
        let d1 = |t: f64| g_derivs(y - m - t, &p).unwrap().0;
        let fd2 = (d1(tau + h) - d1(tau - h)) / (2.0 * h);
        ensure(fd_close(g1, fd1) && fd_close(g2, fd2), || format!("g_derivs draw {draw}: ({g1}, {g2}) vs fd ({fd1}, {fd2})"))?;
        checked += 2;
    }
    for draw in 0..20 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(1..=2);
        let u = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let kp = KernelParams::new(
            rng.random_range(0.2..2.0),
            (0..p).map(|_| rng.random_range(0.1..3.0)).collect(),
            (0..p).map(|_| rng.random_range(0.0..0.5)).collect(),
        )
        .unwrap();
        let grads = kernel_grad(&u, &kp).unwrap();
        let base = kp.to_vec();
        for (j, g) in grads.iter().enumerate() {
            let h = 1e-6;
            let at = |d: f64| {
                let mut v = base.clone();
                v[j] += d;
                kernel_matrix(&u, &KernelParams::from_slice(&v).unwrap()).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            for (a, f) in g.iter().zip(fd.iter()) {
                ensure(fd_close(*a, *f), || format!("kernel_grad draw {draw} param {j}: {a} vs fd {f}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} analytic derivatives within 1e-5 relative of central differences"))
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    for nu in [1.1, 2.0, 5.0, 20.0] {
        for sigma2 in [0.1, 1.0] {
            let p = EtpParams::new(nu, sigma2).unwrap();
            let total = integrate_real_line(&|x| emtd_logpdf(&[x], &[0.0], &p).unwrap().exp());
            worst = worst.max((total - 1.0).abs());
        }
    }
    ensure(worst <= 1e-8, || format!("max |∫p - 1| = {worst:.3e}"))?;
    Ok(format!("8 settings, max |∫p - 1| = {worst:.3e}"))
}

fn criterion_7() -> Outcome {
    let config = SimConfig::new(SimModel::RandomEffectTp, 11, Disturbance::None, 1, SEED);
    let data = generate(&config, &mut replicate_rng(SEED, 0)).map_err(|e| e.to_string())?;
    let fitted = fit(&data.train, &default_fit_config(SimModel::RandomEffectTp)).map_err(|e| e.to_string())?;
    let first = fitted.curves[0].curve.id.clone();
    let probe = score_boundedness_probe(&fitted, &first, 0, &[0.0, 1e3, 1e6]).map_err(|e| e.to_string())?;
    let (tp3, tp6) = (probe.tp_score_norms[1], probe.tp_score_norms[2]);
    let (gp3, gp6) = (probe.gp_score_norms[1], probe.gp_score_norms[2]);
    let line = format!("TP norm {tp3:.4} -> {tp6:.4} (ratio {:.4}); GP norm {gp3:.3e} -> {gp6:.3e} (ratio {:.3e})", tp6 / tp3, gp6 / gp3);
    ensure((tp6 - tp3).abs() <= 0.05 * tp3 && gp6 >= 100.0 * gp3, || line.clone())?;
    Ok(line)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let s2 = rng.random_range(0.05..1.0);
        let times: Vec<f64> = (0..n).map(|k| (k as f64 + rng.random_range(0.1..0.9)) * 2.0 / n as f64).collect();
        let values = times.iter().map(|t| t * t + rng.random_range(-1.0..1.0)).collect();
        let cov = DMatrix::from_fn(n, 1, |k, _| 0.2 * times[k]);
        let curve = Curve::new("a", 1, 1, times, values, cov).unwrap();
        let data = FunctionalDataset::new(vec![curve], vec!["g".into()], CovariateRule::Time { scale: 0.2 }).unwrap();
        let kp = KernelParams::new(rng.random_range(0.2..1.0), vec![rng.random_range(1.0..20.0)], vec![rng.random_range(0.0..0.5)]).unwrap();
        let state = ModelState {
            method: Method::Tp,
            basis: BSplineBasis::uniform(4, 5, (0.0, 2.0)).unwrap(),
            lambda: 0.0,
            coefficients: CoefficientMatrix(DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0))),
            kernels: vec![kp.clone()],
            likelihood: Likelihood::StudentT(EtpParams::new(1e6, s2).unwrap()),
            mode: ModeOptions {
                tol: 1e-12,
                max_iter: 500,
                ..Default::default()
            },
        };
        let fitted = ModelFit::from_state(&state, &data).map_err(|e| e.to_string())?;
        let cf = &fitted.curves[0];
        // plain GP regression of y - m on K + σ²I, with K jittered as in the fit
        let mut k = kernel_matrix(&cf.curve.covariates, &kp).unwrap();
        let j = jitter(&k);
        let mut c = k.clone();
        for i in 0..n {
            k[(i, i)] += j;
            c[(i, i)] += j + s2;
        }
        let chol = c.cholesky().ok_or("K + σ²I not positive definite")?;
        let design = fitted.basis.design_matrix(&cf.curve.times).unwrap();
        let b = &fitted.coefficients.0;
        let resid = DVector::from_column_slice(&cf.curve.values) - &design * (b.column(0) + b.column(1));
        let alpha = chol.solve(&resid);
        for _ in 0..5 {
            let t = rng.random_range(0.0..2.0);
            let p = predict(&fitted, "a", t, None).map_err(|e| e.to_string())?;
            let ks = cross_kernel(&[0.2 * t], &cf.curve.covariates, &kp).unwrap();
            let kss = eval_kernel(&[0.2 * t], &[0.2 * t], &kp).unwrap();
            let mean = p.mean_structure + ks.dot(&alpha);
            let var = kss - ks.dot(&chol.solve(&ks)) + s2;
            worst.0 = worst.0.max((p.mean - mean).abs());
            worst.1 = worst.1.max((p.variance - var).abs());
        }
    }
    ensure(worst.0 <= 1e-4 && worst.1 <= 1e-4, || format!("max error mean {:.3e}, variance {:.3e}", worst.0, worst.1))?;
    Ok(format!("50 instances x 5 points, max error mean {:.3e}, variance {:.3e}", worst.0, worst.1))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    const DRAWS: usize = 100;

    for _ in 0..DRAWS {
        let order = rng.random_range(2..=6);
        let n_basis = rng.random_range(order..=order + 12);
        let a = rng.random_range(-5.0..5.0);
        let b = a + rng.random_range(0.1..10.0);
        let basis = BSplineBasis::uniform(order, n_basis, (a, b)).unwrap();
        for t in [a, b, rng.random_range(a..b)] {
            let s = basis.eval(t).unwrap().sum();
            ensure((s - 1.0).abs() <= 1e-12, || format!("partition of unity: order {order}, sum {s} at {t}"))?;
        }
    }

    for _ in 0..DRAWS {
        let n = rng.random_range(1..=15);
        let p = rng.random_range(1..=3);
        let u = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let kp = KernelParams::new(
            rng.random_range(0.01..3.0),
            (0..p).map(|_| rng.random_range(0.0..10.0)).collect(),
            (0..p).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let k = kernel_matrix(&u, &kp).unwrap();
        let eig = SymmetricEigen::new(k.clone()).eigenvalues;
        let scale = k.diagonal().amax().max(1.0);
        ensure(eig.min() >= -1e-10 * scale, || format!("kernel matrix eigenvalue {}", eig.min()))?;
    }

    for _ in 0..DRAWS {
        let levels = rng.random_range(1..=5);
        let l = rng.random_range(4..=10);
        let b = CoefficientMatrix(DMatrix::from_fn(l, levels + 1, |_, _| rng.random_range(-3.0..3.0)));
        let once = project_identifiable(&b);
        let twice = project_identifiable(&once);
        ensure((&twice.0 - &once.0).amax() <= 1e-12, || "projection is not idempotent".into())?;
        let basis = BSplineBasis::uniform(4, l, (0.0, 1.0)).unwrap();
        for _ in 0..5 {
            let phi = basis.eval(rng.random_range(0.0..1.0)).unwrap();
            let before = b.0.tr_mul(&phi);
            let after = once.0.tr_mul(&phi);
            for i in 1..=levels {
                let diff = ((before[0] + before[i]) - (after[0] + after[i])).abs();
                ensure(diff <= 1e-12, || format!("fitted value moved by {diff:.3e}"))?;
            }
            let effects: f64 = (1..=levels).map(|i| after[i]).sum();
            ensure(effects.abs() <= 1e-12, || format!("level effects sum to {effects:.3e}"))?;
        }
    }

    for _ in 0..DRAWS {
        let l = rng.random_range(4..=10);
        let basis = BSplineBasis::uniform(4, l, (0.0, rng.random_range(0.5..3.0))).unwrap();
        let pen = penalty_matrix(&basis, &DerivativeOperator::second_derivative(), Quadrature::Exact).unwrap();
        let b = CoefficientMatrix(DMatrix::from_fn(l, 3, |_, _| rng.random_range(-2.0..2.0)));
        let lambda = rng.random_range(1e-3..1.0);
        let c = rng.random_range(-4.0..4.0);
        let base = penalty_value(&b, &pen, lambda).unwrap();
        let scaled = penalty_value(&CoefficientMatrix(&b.0 * c), &pen, lambda).unwrap();
        let doubled = penalty_value(&b, &pen, 2.0 * lambda).unwrap();
        let quad: f64 = (0..3).map(|i| b.0.column(i).dot(&(&pen * b.0.column(i)))).sum::<f64>() * lambda;
        ensure(
            (scaled - c * c * base).abs() <= 1e-12 * base.abs().max(1.0) * c * c
                && (doubled - 2.0 * base).abs() <= 1e-12 * base.abs().max(1.0)
                && (base - quad).abs() <= 1e-12 * base.abs().max(1.0)
                && base >= 0.0,
            || format!("penalty scaling: base {base}, scaled {scaled}, c {c}"),
        )?;
    }

    // Replaying the seeded experiment on a two-thread pool reproduces every
    // replicate, and any single replicate reproduces in isolation.
    let first = model1_n11();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().map_err(|e| e.to_string())?;
    let replay = pool.install(|| run_experiment(&first.config)).map_err(|e| e.to_string())?;
    ensure(replay == *first, || "experiment replay differs".into())?;
    ensure(first.failures == 0, || "cannot index replicates when some failed".into())?;
    for r in [0u64, 17, 99] {
        let alone = run_replicate(&first.config, r).map_err(|e| e.to_string())?;
        let tp = &first.result(Method::Tp).pe;
        ensure(alone.pe[0] == tp[r as usize], || format!("replicate {r} differs in isolation"))?;
    }
    Ok(format!("{DRAWS} draws each of partition of unity, kernel PSD, projection, penalty scaling; {REPS}-replicate replay identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("robust ordering, Model 1", criterion_1),
        ("robust ordering, Model 2", criterion_2),
        ("random-effect value, n = 21", criterion_3),
        ("Gaussian exactness", criterion_4),
        ("gradient suite", criterion_5),
        ("density normalization", criterion_6),
        ("boundedness probe", criterion_7),
        ("prediction limit", criterion_8),
        ("structural invariants", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
