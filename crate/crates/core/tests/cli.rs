use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neural_sl::io::{read_captures, read_patterns, FloatMap};

fn neural_sl(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neural-sl"))
        .args(args)
        .env("NEURAL_SL_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn gen_patterns_defaults_to_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = neural_sl(&["gen-patterns", "--seed", "4", "--patterns", "5"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("desk-seed4");
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), run.display().to_string());
    assert!(run.join("config.resolved.toml").exists());
    let set = read_patterns(&run.join("patterns")).unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(set.seed, 4);
}

#[test]
fn resolved_config_reloads_to_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    let o = neural_sl(
        &["gen-patterns", "--out", out.to_str().unwrap(), "--weight-mode", "eq3", "--patterns", "4"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let first = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(first.contains("mode = \"eq3\""));

    let cfg = tmp.path().join("resolved.toml");
    fs::write(&cfg, &first).unwrap();
    let o = neural_sl(&["gen-patterns", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("config.resolved.toml")).unwrap(), first);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&neural_sl(&["simulate", "--config", missing.to_str().unwrap()], tmp.path())), 2);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&neural_sl(&["simulate", "--config", bad.to_str().unwrap()], tmp.path())), 2);

    fs::write(&bad, "[patterns]\nkind = \"random\"\ncount = 3\nscales = [500]\n").unwrap();
    assert_eq!(code(&neural_sl(&["gen-patterns", "--config", bad.to_str().unwrap()], tmp.path())), 2);

    // Stages that need an earlier one refuse to run.
    let out = tmp.path().join("empty");
    for cmd in ["train", "extract", "eval"] {
        assert_eq!(code(&neural_sl(&[cmd, "--out", out.to_str().unwrap()], tmp.path())), 2, "{cmd}");
    }
}

#[test]
fn runaway_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("nan.toml");
    fs::write(
        &cfg,
        "[train]\niterations = 4\nphase1_iterations = 1\nbatch_size = 32\n\n[train.adam]\nlearning_rate = 1e300\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    assert_eq!(code(&neural_sl(&["gen-patterns", "--config", c, "--out", o], tmp.path())), 0);
    assert_eq!(code(&neural_sl(&["simulate", "--config", c, "--out", o], tmp.path())), 0);
    let train = neural_sl(&["train", "--config", c, "--out", o], tmp.path());
    assert_eq!(code(&train), 3, "{}", String::from_utf8_lossy(&train.stderr));
}

#[test]
fn simulate_and_decode_write_readable_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    for cmd in ["gen-patterns", "simulate", "decode-gc"] {
        let r = neural_sl(&[cmd, "--out", o, "--patterns", "8", "--workers", "1"], tmp.path());
        assert_eq!(code(&r), 0, "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
    }

    let stored = read_captures(&out.join("captures")).unwrap();
    assert_eq!(stored.captures.len(), 8);
    assert_eq!((stored.captures.width, stored.captures.height), (320, 256));
    assert!(stored.lit.iter().any(|&l| l));

    let gc = out.join("decode-gc");
    let column = FloatMap::read(&gc.join("column.nslmap")).unwrap();
    assert_eq!(column.tag, "column");
    let depth = FloatMap::read(&gc.join("depth.nslmap")).unwrap().to_depth().unwrap();
    assert!(depth.valid_count() > 0);
    for (c, z) in column.values().iter().zip(&depth.depth) {
        if z.is_finite() {
            assert!(c.is_finite() && (0.0..320.0).contains(c));
            // Range is bounded to 0.5..1.0; z is at most the range and the
            // corner rays are within 20 degrees of the axis.
            assert!(*z > 0.45 && *z <= 1.0 + 1e-6, "{z}");
        }
    }
    let csv = fs::read_to_string(gc.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,images,mean_l1_m,coverage,shared_pixels"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "gray-fixed");
    let l1: f64 = row[2].parse().unwrap();
    assert!(l1 > 0.0 && l1 < 0.01, "8-bit Gray code error {l1}");
}
