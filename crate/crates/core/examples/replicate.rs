//! Runs a few replicates of the Model-1 experiment and prints per-method
//! prediction errors with timings.
//!
//! `cargo run --release -p tpanova --example replicate -- [model] [n_train] [reps]`

use std::time::Instant;

use tpanova::simulation::{run_replicate, Disturbance, SimConfig, SimModel, METHODS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: u8 = args.first().map_or(Ok(1), |s| s.parse())?;
    let n_train: usize = args.get(1).map_or(Ok(11), |s| s.parse())?;
    let reps: u64 = args.get(2).map_or(Ok(5), |s| s.parse())?;
    let config = SimConfig::new(SimModel::from_id(model)?, n_train, Disturbance::Const2, reps as usize, 1);
    for r in 0..reps {
        let start = Instant::now();
        let out = run_replicate(&config, r)?;
        let cells: Vec<String> = METHODS
            .iter()
            .enumerate()
            .map(|(m, method)| format!("{method}: PE {:.4} MSE {:.4}{}", out.pe[m], out.mse[m], if out.converged[m] { "" } else { " (nc)" }))
            .collect();
        println!("rep {r}: {} [{:.2?}]", cells.join(" | "), start.elapsed());
    }
    Ok(())
}
