//! Incremental training: start from three patterns and add one every few
//! hundred iterations, scoring depth before each addition.
//!
//! ```text
//! cargo run --release --example incremental -- [scale]
//! ```

use neural_sl::experiment::{Experiment, ExperimentConfig};
use neural_sl::train::IncrementalSchedule;

fn main() -> neural_sl::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let mut config = ExperimentConfig::desk();
    config.train.batch_size = 256;
    let mut exp = Experiment::new(config)?;
    exp.rig = exp.rig.scaled(scale)?;

    let schedule = IncrementalSchedule::desk();
    let data = exp.scene_data(exp.random_patterns(schedule.max_patterns)?)?;
    let run = exp.incremental_run(&data, &schedule, |_| {})?;
    for s in &run.stages {
        println!(
            "{} patterns @ it {:>5}: {:.2} mm, coverage {:.3}",
            s.patterns,
            s.iteration,
            s.mean_l1 * 1e3,
            s.coverage
        );
    }
    Ok(())
}
