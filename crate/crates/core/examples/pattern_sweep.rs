//! Gray code error as the pattern budget grows. The neural side of the
//! sweep trains one network per budget; run `neural-sl sweep` for it.

use neural_sl::experiment::{Experiment, ExperimentConfig};
use neural_sl::patterns::gray_fringe_width;

fn main() -> neural_sl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::desk())?;
    let width = exp.rig.projector.intrinsics.width;
    println!("{:>3} {:>12} {:>12} {:>10}", "n", "fringe px", "L1 mm", "coverage");
    for n in 3..=9 {
        let run = exp.gray_baseline(n, false)?;
        println!(
            "{n:>3} {:>12.2} {:>12.3} {:>10.3}",
            gray_fringe_width(width, n as u32),
            run.report.mean_l1 * 1e3,
            run.report.coverage
        );
    }
    Ok(())
}
