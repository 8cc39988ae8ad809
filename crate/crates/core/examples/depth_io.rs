//! Round-trips captures and a depth map through the on-disk formats.

use neural_sl::experiment::{Experiment, ExperimentConfig};
use neural_sl::io::{read_captures, read_depth, write_captures, write_depth, xyz_dump};

fn main() -> neural_sl::Result<()> {
    let dir = tempdir();
    let exp = Experiment::new(ExperimentConfig::desk())?;
    let sim = exp.simulate(&exp.random_patterns(3)?)?;

    let manifest = write_captures(&dir.join("captures"), &sim)?;
    let stored = read_captures(&dir.join("captures"))?;
    let worst = sim
        .captures
        .images
        .iter()
        .flatten()
        .zip(stored.captures.images.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("{} captures, worst 16-bit quantization {worst:.2e}", manifest.images.len());

    let path = dir.join("truth.nslmap");
    write_depth(&path, &sim.truth)?;
    let back = read_depth(&path)?;
    let same = sim
        .truth
        .depth
        .iter()
        .zip(&back.depth)
        .all(|(a, b)| (a.is_nan() && b.is_nan()) || (*a as f32) as f64 == *b);
    println!("depth map round trip exact at f32: {same}");

    let xyz = xyz_dump(&back, &exp.rig.camera);
    println!("{} points, first: {}", xyz.lines().count(), xyz.lines().next().unwrap_or(""));
    println!("files in {}", dir.display());
    Ok(())
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("nsl-depth-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
