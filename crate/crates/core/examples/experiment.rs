//! Runs a full experiment and prints the summary table with paired tests.
//!
//! `cargo run --release -p tpanova --example experiment -- [model] [n_train] [disturb] [reps] [seed] [nu|est]`

use tpanova::estimation::{Method, NuSetting};
use tpanova::simulation::{paired_less, run_experiment, SimConfig, SimModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut config = SimConfig::new(
        SimModel::from_id(arg(0, "1").parse()?)?,
        arg(1, "11").parse()?,
        arg(2, "const2").parse()?,
        arg(3, "100").parse()?,
        arg(4, "2024").parse()?,
    );
    if let Some(nu) = args.get(5) {
        config.fit.nu = if nu == "est" {
            NuSetting::Estimate { initial: 3.0 }
        } else {
            NuSetting::Fixed { value: nu.parse()? }
        };
    }
    let report = run_experiment(&config)?;
    print!("{}", report.to_csv());
    println!("failures {}, non-converged {:?}", report.failures, report.non_converged);
    let tp = &report.result(Method::Tp).pe;
    for other in [Method::Gp, Method::TpNoRandomEffect] {
        let t = paired_less(tp, &report.result(other).pe)?;
        println!("PE(TP) < PE({other}): diff {:.4}, t {:.3}, p {:.3e}", t.mean_difference, t.t_statistic, t.p_value);
    }
    Ok(())
}
