//! Renders synthetic captures of the reference scene and reports what the
//! camera sees: lit coverage, shadowed pixels and the depth range.

use neural_sl::experiment::Experiment;
use neural_sl::experiment::ExperimentConfig;

fn main() -> neural_sl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::desk())?;
    let patterns = exp.random_patterns(6)?;
    let sim = exp.simulate(&patterns)?;

    let lit = sim.lit_mask();
    let n = lit.len();
    let hit = sim.truth.valid_count();
    let lit_count = lit.iter().filter(|&&l| l).count();
    let (lo, hi) = sim
        .truth
        .depth
        .iter()
        .filter(|d| d.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));

    println!("pixels       {n}");
    println!("surface hit  {hit}");
    println!("lit          {lit_count} ({:.1}%)", 100.0 * lit_count as f64 / n as f64);
    println!("shadow/out   {}", hit - lit_count);
    println!("depth range  {lo:.4} .. {hi:.4} m");

    let c = &sim.captures;
    let mean_b = lit.iter().zip(&c.b_map).filter(|(l, _)| **l).map(|(_, b)| b).sum::<f64>() / lit_count as f64;
    println!("mean contrast on lit pixels {mean_b:.3} (noise sigma {})", c.noise_sigma);
    Ok(())
}
