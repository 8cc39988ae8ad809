//! Generates the three pattern families for the desk projector and writes
//! the random set to a pattern directory.
//!
//! ```text
//! cargo run --release --example gen_patterns -- /tmp/patterns
//! ```

use std::path::PathBuf;

use neural_sl::geometry::Rig;
use neural_sl::io::write_patterns;
use neural_sl::patterns::{gen_gray_code, gen_phase_shift, gen_random_multiscale, PatternOrder, RandomPatternSpec};

fn main() -> neural_sl::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nsl-patterns"));
    let k = Rig::desk().projector.intrinsics;

    let spec = RandomPatternSpec {
        per_scale: 3,
        order: PatternOrder::Interleaved,
        ..RandomPatternSpec::default()
    };
    let random = gen_random_multiscale(k.width, k.height, &spec)?;
    let gray = gen_gray_code(k.width, k.height, 9, true)?;
    let phase = gen_phase_shift(k.width, k.height, 16.0, 4)?;

    for (name, set) in [("random", &random), ("gray+inverse", &gray), ("phase", &phase)] {
        let mean = |p: &neural_sl::patterns::Pattern| p.data.iter().map(|&v| v as f64).sum::<f64>() / p.data.len() as f64;
        let means: Vec<String> = set.patterns.iter().take(6).map(|p| format!("{:.3}", mean(p))).collect();
        println!("{name:>13}: {} patterns, mean intensity {}", set.len(), means.join(" "));
    }

    let manifest = write_patterns(&out, &random)?;
    println!("wrote {} patterns to {}", manifest.patterns.len(), out.display());
    Ok(())
}
