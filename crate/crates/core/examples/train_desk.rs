//! Trains on a reduced desk rig and scores the extracted depth.
//!
//! ```text
//! cargo run --release --example train_desk -- [iterations] [scale]
//! ```
//!
//! Defaults to 300 iterations on a half-resolution rig, about a minute on
//! one core. The full desk run is `neural-sl train` followed by `extract`.

use neural_sl::experiment::{Experiment, ExperimentConfig};

fn main() -> neural_sl::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let scale: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let mut config = ExperimentConfig::desk();
    config.train.iterations = iterations;
    config.train.phase1_iterations = iterations / 4;
    config.train.batch_size = 256;
    let mut exp = Experiment::new(config)?;
    exp.rig = exp.rig.scaled(scale)?;

    let data = exp.scene_data(exp.patterns()?)?;
    let every = (iterations / 10).max(1);
    let run = exp.neural_run(&data, |r| {
        if r.iteration % every == 0 {
            println!(
                "it {:>5}  rc {:.5}  sc {:.5}  reg {:.5}  1/s {:.4}",
                r.iteration, r.l_rc, r.l_sc, r.l_reg, r.inv_s
            );
        }
    })?;
    println!(
        "mean L1 {:.2} mm over {} pixels, coverage {:.3}",
        run.report.mean_l1 * 1e3,
        run.report.shared,
        run.report.coverage
    );
    Ok(())
}
