//! End-to-end runs behind the command line tool: configuration with presets
//! and overrides, the simulation, training, extraction and decoding
//! pipelines, and the files each command leaves in the run directory.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{
    correspondence_to_depth, decode_gray_fixed, decode_gray_inverse, decode_phase_shift, remove_outliers,
    unwrap_with_gray, Correspondence, DEFAULT_B_FLOOR,
};
use crate::depth::{extract_depth, extract_depth_expected, mean_l1, DepthMap, DepthSource, L1Report};
use crate::error::{Error, Result};
use crate::geometry::Rig;
use crate::io;
use crate::patterns::{
    blur, gen_gray_code, gen_phase_shift, gen_random_multiscale, PatternOrder, PatternSet, RandomPatternSpec,
};
use crate::render::WeightMode;
use crate::scene::{render_captures, AnalyticScene, CaptureSet, SimOptions, Simulation};
use crate::sdf_net::{NetConfig, SceneBox, SdfNetwork};
use crate::train::{IncrementalSchedule, LossReport, TrainConfig, Trainer};

/// Environment variable holding the default output root.
pub const OUT_ROOT_ENV: &str = "NEURAL_SL_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 320x256 camera, small network, 1000 iterations.
    #[default]
    Desk,
    /// Full-size network and the 4000 iteration schedule.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

fn default_scales() -> Vec<usize> {
    vec![20, 10, 5]
}

fn default_count() -> usize {
    6
}

fn default_gray_bits() -> u32 {
    6
}

fn default_wavelength() -> f64 {
    16.0
}

fn default_steps() -> usize {
    4
}

/// Which patterns a run projects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PatternConfig {
    /// Random binary squares, one scale after another in turn so that every
    /// prefix covers all scales.
    Random {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_scales")]
        scales: Vec<usize>,
    },
    Gray {
        #[serde(default = "default_gray_bits")]
        num_bits: u32,
        #[serde(default)]
        inverse: bool,
    },
    Phase {
        #[serde(default = "default_wavelength")]
        wavelength: f64,
        #[serde(default = "default_steps")]
        steps: usize,
    },
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig::Random {
            count: default_count(),
            scales: default_scales(),
        }
    }
}

impl PatternConfig {
    /// The same kind of set with a budget of `n` projected patterns.
    pub fn with_count(&self, n: usize) -> Self {
        match self.clone() {
            PatternConfig::Random { scales, .. } => PatternConfig::Random { count: n, scales },
            PatternConfig::Gray { inverse, .. } => PatternConfig::Gray {
                num_bits: if inverse { n / 2 } else { n } as u32,
                inverse,
            },
            PatternConfig::Phase { wavelength, .. } => PatternConfig::Phase { wavelength, steps: n },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    /// First sign change along the ray, refined by bisection.
    #[default]
    Roots,
    /// Weighted mean of the rendering samples.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub method: Extractor,
    pub samples_per_ray: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            method: Extractor::Roots,
            samples_per_ray: 64,
        }
    }
}

/// Decoder settings of the phase-shift reference depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// Gray bits, each projected with its inverse.
    pub gray_bits: u32,
    pub wavelength: f64,
    pub steps: usize,
    /// Smallest phase modulation kept by the outlier pass.
    pub min_modulation: f64,
    /// Largest departure from the 3x3 median depth, meters.
    pub max_jump: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            gray_bits: 7,
            wavelength: 16.0,
            steps: 4,
            min_modulation: 0.05,
            max_jump: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub min_patterns: usize,
    pub max_patterns: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            min_patterns: 3,
            max_patterns: 9,
        }
    }
}

/// Everything that determines a run. Loaded from TOML on top of a preset;
/// the fully resolved form is written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Seeds patterns, sensor noise, network initialization and batches.
    pub seed: u64,
    /// Run directory; defaults to `$NEURAL_SL_OUT/<preset>-seed<seed>`.
    pub out: Option<PathBuf>,
    /// Scene file; the reference plane and sphere when absent.
    pub scene: Option<PathBuf>,
    /// Calibration file; the desk rig when absent.
    pub calibration: Option<PathBuf>,
    pub noise_sigma: f64,
    /// Gaussian scatter of the projector in pixels, applied to everything
    /// it projects. The trainer renders with the same blurred patterns.
    pub projector_blur: f64,
    pub patterns: PatternConfig,
    pub scene_box: SceneBox,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub incremental: IncrementalSchedule,
    pub extract: ExtractConfig,
    pub ground_truth: GroundTruthConfig,
    pub sweep: SweepConfig,
    /// Depth map scored by `eval`; the neural estimate when absent.
    pub estimate: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (net, train, incremental) = match preset {
            Preset::Desk => (NetConfig::desk(), TrainConfig::desk(), IncrementalSchedule::desk()),
            Preset::Paper => (NetConfig::paper(), TrainConfig::paper(), IncrementalSchedule::paper()),
        };
        ExperimentConfig {
            preset,
            seed: 0,
            out: None,
            scene: None,
            calibration: None,
            noise_sigma: 0.01,
            projector_blur: 1.0,
            patterns: PatternConfig::default(),
            scene_box: SceneBox::desk(),
            net,
            train,
            incremental,
            extract: ExtractConfig::default(),
            ground_truth: GroundTruthConfig::default(),
            sweep: SweepConfig::default(),
            estimate: None,
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.projector_blur >= 0.0) {
            return bad(format!("projector blur must be >= 0, got {}", self.projector_blur));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.extract.samples_per_ray < 2 {
            return bad("extraction needs at least two samples per ray".into());
        }
        if self.sweep.min_patterns == 0 || self.sweep.min_patterns > self.sweep.max_patterns {
            return bad(format!(
                "sweep range {}..={} is empty",
                self.sweep.min_patterns, self.sweep.max_patterns
            ));
        }
        let inc = &self.incremental;
        if inc.start_patterns == 0 || inc.start_patterns > inc.max_patterns {
            return bad("incremental schedule must start with 1..=max_patterns patterns".into());
        }
        match &self.patterns {
            PatternConfig::Random { count, scales } => {
                if *count == 0 || scales.is_empty() {
                    return bad("random patterns need a count and scales".into());
                }
            }
            PatternConfig::Gray { num_bits, .. } => {
                if *num_bits == 0 {
                    return bad("gray code needs at least one bit".into());
                }
            }
            PatternConfig::Phase { steps, .. } => {
                if *steps < 3 {
                    return bad("phase shifting needs at least three steps".into());
                }
            }
        }
        Ok(())
    }

    /// Run directory: the configured one, else a per-preset, per-seed
    /// directory under the output root.
    pub fn run_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
            root.join(format!("{}-seed{}", self.preset, self.seed))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Command line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub weight_mode: Option<WeightMode>,
    pub patterns: Option<usize>,
}

/// Overlays `over` onto `base`. Tables merge key by key, except tagged
/// tables whose `kind` changes, which are replaced whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a config text over the preset it names (or `preset` when given).
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let user: toml::Value = toml::from_str(text).map_err(|e| Error::parse("config", e))?;
    let named = match user.get("preset") {
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| Error::Config("preset must be a string".into()))?
                .parse::<Preset>()?,
        ),
        None => None,
    };
    let preset = overrides.preset.or(named).unwrap_or_default();
    let mut value = toml::Value::try_from(ExperimentConfig::preset(preset)).expect("config converts");
    merge(&mut value, user);
    let mut cfg: ExperimentConfig = value.try_into().map_err(|e| Error::parse("config", e))?;
    cfg.preset = preset;
    apply_overrides(&mut cfg, overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out = Some(out.clone());
    }
    if let Some(mode) = o.weight_mode {
        cfg.train.render.mode = mode;
    }
    if let Some(n) = o.patterns {
        cfg.patterns = cfg.patterns.with_count(n);
    }
    cfg.train.seed = cfg.seed;
}

/// Loads `path` (or only the preset) and applies the overrides.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

/// Digital patterns together with their simulated captures.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub patterns: PatternSet,
    pub sim: Simulation,
}

/// Outcome of a training run scored against the simulator.
#[derive(Debug, Clone)]
pub struct NeuralRun {
    pub net: SdfNetwork,
    pub depth: DepthMap,
    pub report: L1Report,
    pub losses: Vec<LossReport>,
    pub initial_inv_s: f64,
    /// Scores taken just before each pattern addition and at the end.
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageReport {
    pub patterns: usize,
    pub iteration: usize,
    pub mean_l1: f64,
    pub coverage: f64,
}

/// Classical decoding scored against the simulator.
#[derive(Debug, Clone)]
pub struct DecodeRun {
    pub correspondence: Correspondence,
    pub depth: DepthMap,
    pub report: L1Report,
    pub sim: Simulation,
}

/// A loaded configuration with its scene and rig.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scene: AnalyticScene,
    pub rig: Rig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let read = |p: &Path, what: &str| {
            fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", p.display())))
        };
        let scene = match &config.scene {
            Some(p) => AnalyticScene::from_toml(&read(p, "scene file")?)?,
            None => AnalyticScene::reference(),
        };
        let rig = match &config.calibration {
            Some(p) => Rig::from_toml(&read(p, "calibration file")?)?,
            None => Rig::desk(),
        };
        Ok(Experiment { config, scene, rig })
    }

    fn projector_size(&self) -> (usize, usize) {
        let k = &self.rig.projector.intrinsics;
        (k.width, k.height)
    }

    /// The configured pattern set.
    pub fn patterns(&self) -> Result<PatternSet> {
        self.pattern_set(&self.config.patterns)
    }

    pub fn pattern_set(&self, spec: &PatternConfig) -> Result<PatternSet> {
        let (w, h) = self.projector_size();
        match spec {
            PatternConfig::Random { count, scales } => {
                let spec = RandomPatternSpec {
                    scales: scales.clone(),
                    per_scale: count.div_ceil(scales.len()),
                    seed: self.config.seed,
                    order: PatternOrder::Interleaved,
                    vertical_repeat: None,
                };
                Ok(gen_random_multiscale(w, h, &spec)?.prefix(*count))
            }
            PatternConfig::Gray { num_bits, inverse } => gen_gray_code(w, h, *num_bits, *inverse),
            PatternConfig::Phase { wavelength, steps } => gen_phase_shift(w, h, *wavelength, *steps),
        }
    }

    /// `count` random patterns with the configured scales.
    pub fn random_patterns(&self, count: usize) -> Result<PatternSet> {
        let spec = match &self.config.patterns {
            p @ PatternConfig::Random { .. } => p.with_count(count),
            _ => PatternConfig::default().with_count(count),
        };
        self.pattern_set(&spec)
    }

    /// What reaches the scene when `patterns` are projected.
    pub fn projected(&self, patterns: &PatternSet) -> PatternSet {
        patterns.blurred(self.config.projector_blur)
    }

    /// Captures of the digital `patterns` as the projector shows them.
    pub fn simulate(&self, patterns: &PatternSet) -> Result<Simulation> {
        let opts = SimOptions {
            noise_sigma: self.config.noise_sigma,
            seed: self.config.seed,
            bounds: self.config.train.bounds,
            ..SimOptions::default()
        };
        render_captures(&self.scene, &self.rig, &self.projected(patterns), &opts)
    }

    pub fn scene_data(&self, patterns: PatternSet) -> Result<SceneData> {
        let sim = self.simulate(&patterns)?;
        Ok(SceneData { patterns, sim })
    }

    pub fn new_network(&self) -> Result<SdfNetwork> {
        SdfNetwork::new(self.config.net, self.config.scene_box, self.config.seed)
    }

    /// Trainer for the digital `patterns`, rendering them as projected.
    pub fn trainer(&self, patterns: PatternSet, captures: CaptureSet) -> Result<Trainer> {
        Trainer::new(self.new_network()?, self.rig.clone(), self.projected(&patterns), captures, self.config.train)
    }

    pub fn extract(&self, net: &SdfNetwork) -> Result<DepthMap> {
        let bounds = self.config.train.bounds;
        match self.config.extract.method {
            Extractor::Roots => extract_depth(net, &self.rig.camera, bounds, self.config.extract.samples_per_ray),
            Extractor::Expected => {
                let mut render = self.config.train.render;
                render.jitter = false;
                extract_depth_expected(net, &self.rig.camera, bounds, &render)
            }
        }
    }

    /// Mean-L1 over pixels lit by the projector in the simulation.
    pub fn score(&self, estimate: &DepthMap, sim: &Simulation) -> Result<L1Report> {
        let lit = sim.lit_mask();
        mean_l1(&estimate.clone().masked(&lit), &sim.truth.clone().masked(&lit))
    }

    /// Trains on every pattern of `data`, then extracts and scores depth.
    pub fn neural_run(&self, data: &SceneData, on_step: impl FnMut(&LossReport)) -> Result<NeuralRun> {
        let mut trainer = self.trainer(data.patterns.clone(), data.sim.captures.clone())?;
        let initial_inv_s = trainer.net.inv_s();
        let losses = trainer.run(on_step)?;
        let depth = self.extract(&trainer.net)?;
        let report = self.score(&depth, &data.sim)?;
        let stages = vec![StageReport {
            patterns: data.patterns.len(),
            iteration: trainer.iteration(),
            mean_l1: report.mean_l1,
            coverage: report.coverage,
        }];
        Ok(NeuralRun {
            net: trainer.net,
            depth,
            report,
            losses,
            initial_inv_s,
            stages,
        })
    }

    /// Starts from the schedule's first patterns of `data` and adds the
    /// rest as the schedule asks, scoring the network before each addition.
    pub fn incremental_run(
        &self,
        data: &SceneData,
        schedule: &IncrementalSchedule,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<NeuralRun> {
        let start = schedule.start_patterns.min(data.patterns.len());
        let captures = data.sim.captures.prefix(start)?;
        let mut trainer = self.trainer(data.patterns.prefix(start), captures)?;
        let initial_inv_s = trainer.net.inv_s();
        let mut next = start;
        let mut stages = Vec::new();
        let mut losses = Vec::new();
        while trainer.iteration() < self.config.train.iterations {
            let want = schedule.patterns_at(trainer.iteration()).min(data.patterns.len());
            if next < want {
                stages.push(self.stage(&trainer, &data.sim)?);
                while next < want {
                    let image = data.sim.captures.images[next].clone();
                    let pattern = blur(&data.patterns.patterns[next], self.config.projector_blur);
                    trainer.add_pattern(pattern, image)?;
                    next += 1;
                }
            }
            let r = trainer.step()?;
            on_step(&r);
            losses.push(r);
        }
        let depth = self.extract(&trainer.net)?;
        let report = self.score(&depth, &data.sim)?;
        stages.push(StageReport {
            patterns: next,
            iteration: trainer.iteration(),
            mean_l1: report.mean_l1,
            coverage: report.coverage,
        });
        Ok(NeuralRun {
            net: trainer.net,
            depth,
            report,
            losses,
            initial_inv_s,
            stages,
        })
    }

    fn stage(&self, trainer: &Trainer, sim: &Simulation) -> Result<StageReport> {
        let report = self.score(&self.extract(&trainer.net)?, sim)?;
        Ok(StageReport {
            patterns: trainer.patterns.len(),
            iteration: trainer.iteration(),
            mean_l1: report.mean_l1,
            coverage: report.coverage,
        })
    }

    /// Gray code with `budget` projected patterns: `budget` bits against a
    /// fixed threshold, or `budget / 2` bits with inverse pairs.
    pub fn gray_baseline(&self, budget: usize, inverse: bool) -> Result<DecodeRun> {
        let bits = if inverse { budget / 2 } else { budget } as u32;
        let (w, h) = self.projector_size();
        let patterns = gen_gray_code(w, h, bits, inverse)?;
        let sim = self.simulate(&patterns)?;
        let c = &sim.captures;
        let correspondence = if inverse {
            decode_gray_inverse(c.width, c.height, &c.images, &patterns, &c.b_map, DEFAULT_B_FLOOR)?
        } else {
            decode_gray_fixed(c.width, c.height, &c.images, &patterns, &c.a_map, &c.b_map, DEFAULT_B_FLOOR)?
        };
        let depth = correspondence_to_depth(&correspondence, &self.rig, self.config.train.bounds, DepthSource::GrayCode);
        let report = self.score(&depth, &sim)?;
        Ok(DecodeRun {
            correspondence,
            depth,
            report,
            sim,
        })
    }

    /// Reference depth from Gray code with inverse pairs followed by
    /// phase shifting, unwrapped, triangulated and cleaned of outliers.
    pub fn phase_ground_truth(&self) -> Result<DecodeRun> {
        let g = &self.config.ground_truth;
        let (w, h) = self.projector_size();
        let gray = gen_gray_code(w, h, g.gray_bits, true)?;
        let phase = gen_phase_shift(w, h, g.wavelength, g.steps)?;
        let mut all = gray.patterns.clone();
        all.extend(phase.patterns.iter().cloned());
        let sim = self.simulate(&PatternSet::new(all, 0)?)?;
        let c = &sim.captures;
        let (gray_images, phase_images) = c.images.split_at(gray.len());
        let coarse = decode_gray_inverse(c.width, c.height, gray_images, &gray, &c.b_map, DEFAULT_B_FLOOR)?;
        let wrapped = decode_phase_shift(phase_images)?;
        let correspondence = unwrap_with_gray(&wrapped, &coarse, g.wavelength)?;
        let raw = correspondence_to_depth(&correspondence, &self.rig, self.config.train.bounds, DepthSource::PhaseGt);
        let depth = remove_outliers(&raw, &correspondence.margin, g.min_modulation, g.max_jump);
        let report = self.score(&depth, &sim)?;
        Ok(DecodeRun {
            correspondence,
            depth,
            report,
            sim,
        })
    }
}

/// The command line subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenPatterns,
    Simulate,
    Train,
    Extract,
    Eval,
    DecodeGc,
    DecodePs,
    Sweep,
    Incremental,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenPatterns,
        Command::Simulate,
        Command::Train,
        Command::Extract,
        Command::Eval,
        Command::DecodeGc,
        Command::DecodePs,
        Command::Sweep,
        Command::Incremental,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::GenPatterns => "gen-patterns",
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Extract => "extract",
            Command::Eval => "eval",
            Command::DecodeGc => "decode-gc",
            Command::DecodePs => "decode-ps",
            Command::Sweep => "sweep",
            Command::Incremental => "incremental",
        }
    }
}

/// Subdirectories of a run directory.
pub mod layout {
    pub const PATTERNS: &str = "patterns";
    pub const CAPTURES: &str = "captures";
    pub const TRAIN: &str = "train";
    pub const CHECKPOINT: &str = "train/net.ckpt";
    pub const LOSSES: &str = "train/losses.csv";
    pub const DEPTH: &str = "depth";
    pub const NEURAL_DEPTH: &str = "depth/neural.nslmap";
    pub const EVAL: &str = "eval";
    pub const GRAY: &str = "decode-gc";
    pub const PHASE: &str = "decode-ps";
    pub const SWEEP: &str = "sweep";
    pub const INCREMENTAL: &str = "incremental";
}

fn csv_file(path: &Path, header: &str) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    Ok(f)
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.9e}")
    }
}

fn require(path: &Path, made_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is missing; run `{made_by}` first", path.display())))
    }
}

/// Runs one command inside the configured run directory. Progress goes to
/// `log`.
pub fn run_command(cmd: Command, exp: &Experiment, log: &mut dyn Write) -> Result<PathBuf> {
    let dir = exp.config.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), exp.config.to_toml())?;
    match cmd {
        Command::GenPatterns => gen_patterns_cmd(exp, &dir, log),
        Command::Simulate => simulate_cmd(exp, &dir, log),
        Command::Train => train_cmd(exp, &dir, log),
        Command::Extract => extract_cmd(exp, &dir, log),
        Command::Eval => eval_cmd(exp, &dir, log),
        Command::DecodeGc => decode_gc_cmd(exp, &dir, log),
        Command::DecodePs => decode_ps_cmd(exp, &dir, log),
        Command::Sweep => sweep_cmd(exp, &dir, log),
        Command::Incremental => incremental_cmd(exp, &dir, log),
    }?;
    Ok(dir)
}

fn gen_patterns_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let set = exp.patterns()?;
    let manifest = io::write_patterns(&dir.join(layout::PATTERNS), &set)?;
    writeln!(log, "wrote {} patterns to {}", manifest.patterns.len(), dir.join(layout::PATTERNS).display())?;
    Ok(())
}

/// Patterns of the run: those on disk when present, else freshly generated
/// and written.
fn run_patterns(exp: &Experiment, dir: &Path) -> Result<PatternSet> {
    let pdir = dir.join(layout::PATTERNS);
    if pdir.join(io::PATTERN_MANIFEST).exists() {
        io::read_patterns(&pdir)
    } else {
        let set = exp.patterns()?;
        io::write_patterns(&pdir, &set)?;
        Ok(set)
    }
}

fn simulate_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let patterns = run_patterns(exp, dir)?;
    let sim = exp.simulate(&patterns)?;
    let cdir = dir.join(layout::CAPTURES);
    io::write_captures(&cdir, &sim)?;
    let lit = sim.lit_mask().iter().filter(|&&l| l).count();
    let mut csv = csv_file(&cdir.join(SUMMARY_CSV), "images,width,height,noise_sigma,lit_pixels,truth_valid")?;
    let c = &sim.captures;
    writeln!(csv, "{},{},{},{},{lit},{}", c.len(), c.width, c.height, c.noise_sigma, sim.truth.valid_count())?;
    writeln!(log, "simulated {} images, {lit} lit pixels", c.len())?;
    Ok(())
}

fn load_run_data(dir: &Path) -> Result<(PatternSet, io::StoredCaptures)> {
    let pdir = dir.join(layout::PATTERNS);
    let cdir = dir.join(layout::CAPTURES);
    require(&pdir.join(io::PATTERN_MANIFEST), "gen-patterns")?;
    require(&cdir.join(io::CAPTURE_MANIFEST), "simulate")?;
    Ok((io::read_patterns(&pdir)?, io::read_captures(&cdir)?))
}

fn progress(log: &mut dyn Write, r: &LossReport, every: usize) {
    if r.iteration % every == 0 {
        let _ = writeln!(
            log,
            "it {:5} patterns {} l_rc {:.5} l_sc {:.5} l_reg {:.5} 1/s {:.5}",
            r.iteration, r.num_patterns, r.l_rc, r.l_sc, r.l_reg, r.inv_s
        );
    }
}

fn train_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let (patterns, stored) = load_run_data(dir)?;
    let mut trainer = exp.trainer(patterns, stored.captures)?;
    let initial_inv_s = trainer.net.inv_s();
    let mut csv = csv_file(&dir.join(layout::LOSSES), LossReport::CSV_HEADER)?;
    let start = Instant::now();
    let mut last = None;
    while trainer.iteration() < exp.config.train.iterations {
        let r = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                writeln!(log, "training stopped: {e}")?;
                csv.flush()?;
                return Err(e);
            }
        };
        writeln!(csv, "{}", r.csv_row())?;
        progress(log, &r, 50);
        last = Some(r);
    }
    csv.flush()?;
    trainer.net.save(&dir.join(layout::CHECKPOINT))?;
    let mut s = csv_file(
        &dir.join(layout::TRAIN).join(SUMMARY_CSV),
        "iterations,patterns,l_rc,l_sc,l_reg,initial_inv_s,final_inv_s,wall_s",
    )?;
    if let Some(r) = last {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{:.2}",
            r.iteration + 1,
            r.num_patterns,
            fmt_f(r.l_rc),
            fmt_f(r.l_sc),
            fmt_f(r.l_reg),
            fmt_f(initial_inv_s),
            fmt_f(trainer.net.inv_s()),
            start.elapsed().as_secs_f64()
        )?;
    }
    writeln!(log, "saved {}", dir.join(layout::CHECKPOINT).display())?;
    Ok(())
}

fn extract_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let ckpt = dir.join(layout::CHECKPOINT);
    require(&ckpt, "train")?;
    let net = SdfNetwork::load(&ckpt)?;
    let depth = exp.extract(&net)?;
    let ddir = dir.join(layout::DEPTH);
    fs::create_dir_all(&ddir)?;
    io::write_depth(&dir.join(layout::NEURAL_DEPTH), &depth)?;
    fs::write(ddir.join("neural.xyz"), io::xyz_dump(&depth, &exp.rig.camera))?;
    let mut csv = csv_file(&ddir.join(SUMMARY_CSV), "method,samples_per_ray,valid_pixels,total_pixels")?;
    writeln!(
        csv,
        "{:?},{},{},{}",
        exp.config.extract.method,
        exp.config.extract.samples_per_ray,
        depth.valid_count(),
        depth.depth.len()
    )?;
    writeln!(log, "extracted {} valid pixels", depth.valid_count())?;
    Ok(())
}

fn eval_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let estimate_path = exp.config.estimate.clone().unwrap_or_else(|| dir.join(layout::NEURAL_DEPTH));
    require(&estimate_path, "extract")?;
    let cdir = dir.join(layout::CAPTURES);
    require(&cdir.join(io::CAPTURE_MANIFEST), "simulate")?;
    let stored = io::read_captures(&cdir)?;
    let estimate = io::read_depth(&estimate_path)?;
    let r = mean_l1(&estimate.masked(&stored.lit), &stored.truth.clone().masked(&stored.lit))?;
    let edir = dir.join(layout::EVAL);
    fs::create_dir_all(&edir)?;
    io::write_depth(&edir.join("error.nslmap"), &r.error_map)?;
    let mut csv = csv_file(&edir.join(SUMMARY_CSV), "estimate,mean_l1_m,coverage,shared_pixels")?;
    writeln!(csv, "{},{},{},{}", estimate_path.display(), fmt_f(r.mean_l1), fmt_f(r.coverage), r.shared)?;
    writeln!(log, "mean L1 {:.3} mm, coverage {:.3}", 1e3 * r.mean_l1, r.coverage)?;
    Ok(())
}

fn decode_budget(exp: &Experiment) -> (usize, bool) {
    match &exp.config.patterns {
        PatternConfig::Gray { num_bits, inverse } => {
            (*num_bits as usize * if *inverse { 2 } else { 1 }, *inverse)
        }
        PatternConfig::Random { count, .. } => (*count, false),
        PatternConfig::Phase { steps, .. } => (*steps, false),
    }
}

fn write_decode(dir: &Path, run: &DecodeRun, what: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_depth(&dir.join("depth.nslmap"), &run.depth)?;
    io::write_depth(&dir.join("error.nslmap"), &run.report.error_map)?;
    let c = &run.correspondence;
    io::FloatMap::new(c.width, c.height, run.depth.bounds, "column", &c.column).write(&dir.join("column.nslmap"))?;
    let mut csv = csv_file(&dir.join(SUMMARY_CSV), "method,images,mean_l1_m,coverage,shared_pixels")?;
    writeln!(
        csv,
        "{what},{},{},{},{}",
        run.sim.captures.len(),
        fmt_f(run.report.mean_l1),
        fmt_f(run.report.coverage),
        run.report.shared
    )?;
    Ok(())
}

fn decode_gc_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let (budget, inverse) = decode_budget(exp);
    let run = exp.gray_baseline(budget, inverse)?;
    let what = if inverse { "gray-inverse" } else { "gray-fixed" };
    write_decode(&dir.join(layout::GRAY), &run, what)?;
    writeln!(
        log,
        "{what} with {budget} patterns: mean L1 {:.3} mm, coverage {:.3}",
        1e3 * run.report.mean_l1,
        run.report.coverage
    )?;
    Ok(())
}

fn decode_ps_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let run = exp.phase_ground_truth()?;
    write_decode(&dir.join(layout::PHASE), &run, "phase-shift")?;
    writeln!(
        log,
        "phase-shift reference: mean L1 {:.4} mm, coverage {:.3}",
        1e3 * run.report.mean_l1,
        run.report.coverage
    )?;
    Ok(())
}

fn sweep_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let s = exp.config.sweep;
    let mut csv = csv_file(
        &dir.join(layout::SWEEP).join(SUMMARY_CSV),
        "patterns,neural_l1_m,neural_coverage,gray_fixed_l1_m,gray_fixed_coverage,gray_inverse_l1_m,gray_inverse_coverage",
    )?;
    for n in s.min_patterns..=s.max_patterns {
        let data = exp.scene_data(exp.random_patterns(n)?)?;
        let neural = exp.neural_run(&data, |r| progress(log, r, 250))?;
        let fixed = exp.gray_baseline(n, false)?;
        let paired = if n >= 2 { Some(exp.gray_baseline(n, true)?) } else { None };
        let (pl, pc) = paired.as_ref().map_or((f64::NAN, f64::NAN), |p| (p.report.mean_l1, p.report.coverage));
        writeln!(
            csv,
            "{n},{},{},{},{},{},{}",
            fmt_f(neural.report.mean_l1),
            fmt_f(neural.report.coverage),
            fmt_f(fixed.report.mean_l1),
            fmt_f(fixed.report.coverage),
            fmt_f(pl),
            fmt_f(pc)
        )?;
        csv.flush()?;
        writeln!(
            log,
            "{n} patterns: neural {:.3} mm, gray {:.3} mm",
            1e3 * neural.report.mean_l1,
            1e3 * fixed.report.mean_l1
        )?;
    }
    Ok(())
}

fn incremental_cmd(exp: &Experiment, dir: &Path, log: &mut dyn Write) -> Result<()> {
    let schedule = exp.config.incremental;
    let data = exp.scene_data(exp.random_patterns(schedule.max_patterns)?)?;
    let run = exp.incremental_run(&data, &schedule, |r| progress(log, r, 125))?;
    let idir = dir.join(layout::INCREMENTAL);
    fs::create_dir_all(&idir)?;
    run.net.save(&idir.join("net.ckpt"))?;
    io::write_depth(&idir.join("depth.nslmap"), &run.depth)?;
    let mut csv = csv_file(&idir.join(SUMMARY_CSV), "stage,patterns,iteration,mean_l1_m,coverage")?;
    for (i, st) in run.stages.iter().enumerate() {
        writeln!(csv, "{i},{},{},{},{}", st.patterns, st.iteration, fmt_f(st.mean_l1), fmt_f(st.coverage))?;
        writeln!(log, "stage {i}: {} patterns, mean L1 {:.3} mm", st.patterns, 1e3 * st.mean_l1)?;
    }
    Ok(())
}
