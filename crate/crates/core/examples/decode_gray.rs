//! Gray code decoding with fixed thresholds and with inverse patterns, on
//! the same number of projected images.

use neural_sl::experiment::{Experiment, ExperimentConfig};

fn main() -> neural_sl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::desk())?;
    println!("{:>8} {:>14} {:>14}", "images", "fixed mm", "inverse mm");
    for budget in [4, 6, 8, 10] {
        let fixed = exp.gray_baseline(budget, false)?;
        let inverse = exp.gray_baseline(budget, true)?;
        println!(
            "{budget:>8} {:>14.3} {:>14.3}",
            fixed.report.mean_l1 * 1e3,
            inverse.report.mean_l1 * 1e3
        );
    }
    Ok(())
}
