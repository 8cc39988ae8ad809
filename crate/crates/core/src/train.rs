//! Training loop: ray batches, the three losses, the two-phase schedule and
//! incremental pattern addition.
//!
//! A step splits the ray batch into chunks that record and differentiate on
//! independent tapes. The surface loss is normalized by the number of rays
//! with a defined surface, which is only known once every chunk has rendered,
//! so each step runs in two passes: record all chunks, then scale and
//! backpropagate each chunk. Gradients are summed in chunk order, which keeps
//! results independent of the worker count.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Ray, Rig};
use crate::optim::{Adam, AdamConfig};
use crate::patterns::{Pattern, PatternSet};
use crate::render::{ray_rng, record_chunk, sample_rays, ChunkInputs, RenderConfig, SURFACE_MIN_WEIGHT};
use crate::scene::CaptureSet;
use crate::sdf_net::SdfNetwork;

/// Relative weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the rendering loss; 1 except in ablations.
    pub lambda_rc: f64,
    pub lambda_sc: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rc: 1.0,
            lambda_sc: 1.0,
            lambda_reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rc, self.lambda_sc, self.lambda_reg];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rays per step.
    pub batch_size: usize,
    pub iterations: usize,
    /// Iterations run with the surface loss switched off.
    pub phase1_iterations: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub render: RenderConfig,
    pub bounds: Bounds,
    pub seed: u64,
    /// Pixels with fringe contrast below this are never drawn.
    pub b_floor: f64,
    /// Fraction of batch samples on which the Eikonal term is evaluated.
    pub eikonal_fraction: f64,
    /// Rays per tape.
    pub chunk_rays: usize,
}

impl TrainConfig {
    /// Desk-scale schedule for the reference scene.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 512,
            iterations: 1000,
            phase1_iterations: 250,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            render: RenderConfig::desk(),
            bounds: Bounds::default(),
            seed: 0,
            b_floor: 0.02,
            eikonal_fraction: 0.5,
            chunk_rays: 64,
        }
    }

    /// Full-scale schedule.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 2048,
            iterations: 4000,
            phase1_iterations: 1000,
            render: RenderConfig {
                k_coarse: 32,
                k_fine: 32,
                ..RenderConfig::desk()
            },
            eikonal_fraction: 1.0,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk_rays == 0 {
            return bad("batch size and chunk size must be >= 1");
        }
        if self.phase1_iterations > self.iterations {
            return bad("phase-1 iterations exceed the total");
        }
        if self.render.k_coarse < 2 {
            return bad("need at least two coarse samples per ray");
        }
        if !(self.eikonal_fraction > 0.0 && self.eikonal_fraction <= 1.0) {
            return bad("eikonal fraction must be in (0, 1]");
        }
        if !(self.bounds.t_near > 0.0 && self.bounds.t_near < self.bounds.t_far) {
            return bad("bounds must satisfy 0 < t_near < t_far");
        }
        if !(self.adam.learning_rate >= 0.0 && self.b_floor >= 0.0) {
            return bad("learning rate and b floor must be >= 0");
        }
        Ok(())
    }

    /// Surface-loss weight in effect at `iteration`.
    pub fn lambda_sc_at(&self, iteration: usize) -> f64 {
        if iteration < self.phase1_iterations {
            0.0
        } else {
            self.weights.lambda_sc
        }
    }
}

/// Stepwise pattern addition: `start_patterns` until `first_addition`, then
/// one more every `every` iterations up to `max_patterns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    pub start_patterns: usize,
    pub first_addition: usize,
    pub every: usize,
    pub max_patterns: usize,
}

impl IncrementalSchedule {
    pub fn desk() -> Self {
        IncrementalSchedule {
            start_patterns: 3,
            first_addition: 250,
            every: 125,
            max_patterns: 9,
        }
    }

    /// Full-scale schedule: three patterns for 1000 iterations, then one more
    /// every 500.
    pub fn paper() -> Self {
        IncrementalSchedule {
            start_patterns: 3,
            first_addition: 1000,
            every: 500,
            max_patterns: 9,
        }
    }

    /// Active pattern count at `iteration`.
    pub fn patterns_at(&self, iteration: usize) -> usize {
        if iteration < self.first_addition || self.every == 0 {
            return self.start_patterns;
        }
        let added = 1 + (iteration - self.first_addition) / self.every;
        (self.start_patterns + added).min(self.max_patterns)
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub num_patterns: usize,
    pub l_rc: f64,
    pub l_sc: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda_sc: f64,
    pub inv_s: f64,
    pub wall_seconds: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,patterns,l_rc,l_sc,l_reg,total,inv_s,wall_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.4}",
            self.iteration, self.num_patterns, self.l_rc, self.l_sc, self.l_reg, self.total, self.inv_s, self.wall_seconds
        )
    }
}

/// Mean absolute difference of two `M x N` intensity blocks.
pub fn loss_rc(rendered: &Mat, captured: &Mat) -> Result<f64> {
    if rendered.dim() != captured.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", rendered.dim(), captured.dim())));
    }
    let total: f64 = rendered.iter().zip(captured).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / rendered.len().max(1) as f64)
}

/// [`loss_rc`] restricted to rays whose surface point is defined.
pub fn loss_sc(surface: &Mat, captured: &Mat, defined: &[bool]) -> Result<f64> {
    if surface.dim() != captured.dim() || defined.len() != surface.nrows() {
        return Err(Error::Shape("surface, capture and mask disagree".into()));
    }
    let mut total = 0.0;
    let mut rows = 0;
    for (j, &d) in defined.iter().enumerate() {
        if d {
            rows += 1;
            total += surface.row(j).iter().zip(captured.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
    }
    if rows == 0 {
        return Ok(0.0);
    }
    Ok(total / (rows * surface.ncols()) as f64)
}

/// Mean of `(|g| - 1)^2` over the rows of a `P x 3` gradient block.
pub fn loss_reg(gradients: &Mat) -> f64 {
    let total: f64 = gradients
        .rows()
        .into_iter()
        .map(|g| (g.dot(&g).sqrt() - 1.0).powi(2))
        .sum();
    total / gradients.nrows().max(1) as f64
}

/// Rays, sample depths and Eikonal subset of one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pixels: Vec<usize>,
    pub rays: Vec<Ray>,
    pub t: Vec<Vec<f64>>,
    /// Eikonal sample indices per chunk, as rows of the chunk's samples.
    pub eikonal: Vec<Vec<usize>>,
}

/// Loss values of a batch, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_rc: f64,
    pub l_sc: f64,
    pub l_reg: f64,
    pub total: f64,
    pub defined_surfaces: usize,
}

struct ChunkRecord {
    tape: Tape,
    params: Vec<Var>,
    rc: Var,
    sc: Var,
    reg: Var,
    defined: usize,
}

/// Owns the network, optimizer state and data of one run.
pub struct Trainer {
    pub net: SdfNetwork,
    pub config: TrainConfig,
    pub rig: Rig,
    pub patterns: PatternSet,
    pub captures: CaptureSet,
    adam: Adam,
    iteration: usize,
    valid: Vec<usize>,
}

impl Trainer {
    pub fn new(net: SdfNetwork, rig: Rig, patterns: PatternSet, captures: CaptureSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let cam = &rig.camera.intrinsics;
        if (captures.width, captures.height) != (cam.width, cam.height) {
            return Err(Error::Config("capture resolution does not match the camera".into()));
        }
        let pk = &rig.projector.intrinsics;
        if patterns.resolution() != Some((pk.width, pk.height)) {
            return Err(Error::Config("pattern resolution does not match the projector".into()));
        }
        if patterns.len() != captures.len() {
            return Err(Error::Config(format!(
                "{} patterns but {} captured images",
                patterns.len(),
                captures.len()
            )));
        }
        let shapes: Vec<_> = net.tensors().iter().map(|t| t.dim()).collect();
        let adam = Adam::new(config.adam, &shapes);
        let mut trainer = Trainer {
            net,
            config,
            rig,
            patterns,
            captures,
            adam,
            iteration: 0,
            valid: Vec::new(),
        };
        trainer.refresh_valid()?;
        Ok(trainer)
    }

    fn refresh_valid(&mut self) -> Result<()> {
        let floor = self.config.b_floor;
        self.valid = (0..self.captures.b_map.len())
            .filter(|&i| self.captures.b_map[i] >= floor)
            .collect();
        if self.valid.is_empty() {
            return Err(Error::Config(format!("no pixel has fringe contrast above {floor}")));
        }
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn valid_pixels(&self) -> &[usize] {
        &self.valid
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Adds one pattern and its capture mid-run. `a`/`b` are re-estimated
    /// over all images; optimizer state and weights are kept.
    pub fn add_pattern(&mut self, pattern: Pattern, image: Vec<f64>) -> Result<()> {
        if self.patterns.patterns.first().is_some_and(|p| !p.same_dims(&pattern)) {
            return Err(Error::Config("new pattern resolution differs from the set".into()));
        }
        self.captures.push_image(image)?;
        self.patterns.patterns.push(pattern);
        self.refresh_valid()
    }

    /// Draws the rays, samples and Eikonal subset of `iteration`.
    pub fn draw_batch(&self, iteration: usize) -> Batch {
        let cfg = &self.config;
        let salt = iteration as u64;
        let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
        pick.set_stream(salt);
        let m = cfg.batch_size.min(self.valid.len());
        let pixels: Vec<usize> = index::sample(&mut pick, self.valid.len(), m)
            .into_iter()
            .map(|k| self.valid[k])
            .collect();
        let w = self.captures.width;
        let rays: Vec<Ray> = pixels
            .iter()
            .map(|&p| {
                self.rig
                    .camera
                    .pixel_to_ray([(p % w) as f64, (p / w) as f64], cfg.bounds)
                    .expect("bounds validated")
            })
            .collect();
        let t: Vec<Vec<f64>> = rays
            .par_chunks(cfg.chunk_rays)
            .enumerate()
            .flat_map_iter(|(c, chunk)| {
                let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
                    .map(|j| ray_rng(cfg.seed ^ 0x5eed_0002, (salt << 24) | (c * cfg.chunk_rays + j) as u64))
                    .collect();
                sample_rays(&self.net, chunk, &cfg.render, &mut rngs)
            })
            .collect();
        let k = cfg.render.samples_per_ray();
        let eikonal = rays
            .chunks(cfg.chunk_rays)
            .enumerate()
            .map(|(c, chunk)| {
                let rows = chunk.len() * k;
                let take = ((rows as f64 * cfg.eikonal_fraction).ceil() as usize).clamp(1, rows);
                let mut rng = ray_rng(cfg.seed ^ 0x5eed_0003, (salt << 24) | c as u64);
                let mut idx = index::sample(&mut rng, rows, take).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        Batch { pixels, rays, t, eikonal }
    }

    fn record_chunk(&self, batch: &Batch, c: usize) -> Result<ChunkRecord> {
        let cr = self.config.chunk_rays;
        let lo = c * cr;
        let hi = (lo + cr).min(batch.rays.len());
        let pixels = &batch.pixels[lo..hi];
        let a: Vec<f64> = pixels.iter().map(|&p| self.captures.a_map[p]).collect();
        let b: Vec<f64> = pixels.iter().map(|&p| self.captures.b_map[p]).collect();
        let n = self.patterns.len();
        let captured = Mat::from_shape_fn((pixels.len(), n), |(j, i)| self.captures.images[i][pixels[j]]);

        let mut tape = Tape::new();
        let vars = self.net.register(&mut tape);
        let s = self.net.record_sharpness(&mut tape, &vars);
        let inputs = ChunkInputs {
            rays: &batch.rays[lo..hi],
            t: &batch.t[lo..hi],
            a: &a,
            b: &b,
            patterns: &self.patterns,
            projector: &self.rig.projector,
        };
        let out = record_chunk(&mut tape, &self.net, &vars, s, &inputs, self.config.render.mode)?;
        let captured = tape.constant(captured);

        let diff = tape.sub(out.rendered, captured)?;
        let abs = tape.abs(diff);
        let rc = tape.sum(abs);

        let mask: Vec<f64> = out.weight_sum.iter().map(|&w| f64::from(w > SURFACE_MIN_WEIGHT)).collect();
        let defined = mask.iter().filter(|&&m| m > 0.0).count();
        let mask = tape.constant(Mat::from_shape_vec((mask.len(), 1), mask).expect("column"));
        let diff = tape.sub(out.surface, captured)?;
        let abs = tape.abs(diff);
        let masked = tape.mul(abs, mask)?;
        let sc = tape.sum(masked);

        let rows = &batch.eikonal[c];
        let pts = Mat::from_shape_fn((rows.len(), 3), |(r, k)| out.points[[rows[r], k]]);
        let eik = self.net.record(&mut tape, &vars, &pts, true)?;
        let [gx, gy, gz] = eik.grad.expect("recorded with gradient");
        let sq = [gx, gy, gz].map(|g| tape.square(g));
        let sum = tape.add(sq[0], sq[1])?;
        let sum = tape.add(sum, sq[2])?;
        let sum = tape.max_const(sum, 1e-24);
        let norm = tape.sqrt(sum);
        let dev = tape.add_const(norm, -1.0);
        let dev2 = tape.square(dev);
        let reg = tape.sum(dev2);

        Ok(ChunkRecord {
            tape,
            params: vars.tensors(),
            rc,
            sc,
            reg,
            defined,
        })
    }

    /// Loss values of `batch` at the current weights, with the gradient of
    /// the weighted total when `with_grad` is set.
    pub fn evaluate(&self, batch: &Batch, lambda_sc: f64, with_grad: bool) -> Result<(LossValues, Option<Vec<Mat>>)> {
        let w = self.config.weights;
        let n_chunks = batch.eikonal.len();
        let mut records: Vec<ChunkRecord> = (0..n_chunks)
            .into_par_iter()
            .map(|c| self.record_chunk(batch, c))
            .collect::<Result<_>>()?;

        let m = batch.rays.len();
        let n = self.patterns.len();
        let defined: usize = records.iter().map(|r| r.defined).sum();
        let n_sub: usize = batch.eikonal.iter().map(Vec::len).sum();
        let rc_scale = 1.0 / (m * n) as f64;
        let sc_scale = if defined > 0 { 1.0 / (defined * n) as f64 } else { 0.0 };
        let reg_scale = 1.0 / n_sub as f64;

        let (mut rc, mut sc, mut reg) = (0.0, 0.0, 0.0);
        for r in &records {
            rc += r.tape.scalar(r.rc);
            sc += r.tape.scalar(r.sc);
            reg += r.tape.scalar(r.reg);
        }
        let (l_rc, l_sc, l_reg) = (rc * rc_scale, sc * sc_scale, reg * reg_scale);
        let total = w.lambda_rc * l_rc + lambda_sc * l_sc + w.lambda_reg * l_reg;
        let values = LossValues {
            l_rc,
            l_sc,
            l_reg,
            total,
            defined_surfaces: defined,
        };
        if !with_grad {
            return Ok((values, None));
        }

        let coef = [w.lambda_rc * rc_scale, lambda_sc * sc_scale, w.lambda_reg * reg_scale];
        let grads: Vec<Vec<Mat>> = records
            .par_iter_mut()
            .map(|r| {
                let tape = &mut r.tape;
                let terms = [r.rc, r.sc, r.reg];
                let mut loss = tape.scale(terms[0], coef[0]);
                for (&t, &k) in terms[1..].iter().zip(&coef[1..]) {
                    let scaled = tape.scale(t, k);
                    loss = tape.add(loss, scaled)?;
                }
                let g = tape.backward(loss)?;
                Ok(r.params.iter().map(|v| g.wrt(*v)).collect())
            })
            .collect::<Result<_>>()?;
        let mut sum = grads[0].clone();
        for g in &grads[1..] {
            for (acc, x) in sum.iter_mut().zip(g) {
                *acc += x;
            }
        }
        Ok((values, Some(sum)))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LossReport> {
        let start = Instant::now();
        let it = self.iteration;
        let batch = self.draw_batch(it);
        let lambda_sc = self.config.lambda_sc_at(it);
        let (v, grads) = self.evaluate(&batch, lambda_sc, true)?;
        let grads = grads.expect("gradient requested");
        if !v.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("non-finite loss or gradient (total {})", v.total),
            });
        }
        let mut params = self.net.tensors_mut();
        self.adam.step(&mut params, &grads)?;
        if !self.net.sharpness().is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                message: "sharpness overflowed".into(),
            });
        }
        self.iteration += 1;
        Ok(LossReport {
            iteration: it,
            num_patterns: self.patterns.len(),
            l_rc: v.l_rc,
            l_sc: v.l_sc,
            l_reg: v.l_reg,
            total: v.total,
            lambda_sc,
            inv_s: self.net.inv_s(),
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `config.iterations`, reporting each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(self.config.iterations.saturating_sub(self.iteration));
        while self.iteration < self.config.iterations {
            let r = self.step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Runs the full schedule, feeding held-back patterns in as `schedule`
    /// asks. `pending` holds the patterns beyond the initial set, in order.
    pub fn run_incremental(
        &mut self,
        schedule: &IncrementalSchedule,
        pending: Vec<(Pattern, Vec<f64>)>,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut pending = pending.into_iter();
        let mut out = Vec::new();
        while self.iteration < self.config.iterations {
            while self.patterns.len() < schedule.patterns_at(self.iteration) {
                match pending.next() {
                    Some((p, img)) => self.add_pattern(p, img)?,
                    None => break,
                }
            }
            let r = self.step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::patterns::{gen_random_multiscale, RandomPatternSpec};
    use crate::scene::{render_captures, AnalyticScene, SimOptions};
    use crate::sdf_net::{NetConfig, SceneBox};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn rendering_loss_examples() {
        let x = Mat::from_elem((4, 3), 0.5);
        assert_eq!(loss_rc(&x, &x).unwrap(), 0.0);
        let y = &x + 0.1;
        assert!((loss_rc(&x, &y).unwrap() - 0.1).abs() < 1e-15);
        assert!(loss_rc(&x, &Mat::zeros((3, 3))).is_err());
    }

    #[test]
    fn losses_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n) = (37, 6);
        let a = random_mat(&mut rng, m, n);
        let b = random_mat(&mut rng, m, n);
        let mut naive = 0.0;
        for j in 0..m {
            for i in 0..n {
                naive += (a[[j, i]] - b[[j, i]]).abs();
            }
        }
        naive /= (m * n) as f64;
        assert!((loss_rc(&a, &b).unwrap() - naive).abs() < 1e-15);

        let defined: Vec<bool> = (0..m).map(|j| j % 3 != 0).collect();
        let mut naive = 0.0;
        let mut count = 0;
        for j in 0..m {
            if defined[j] {
                count += 1;
                for i in 0..n {
                    naive += (a[[j, i]] - b[[j, i]]).abs();
                }
            }
        }
        naive /= (count * n) as f64;
        assert!((loss_sc(&a, &b, &defined).unwrap() - naive).abs() < 1e-15);
    }

    #[test]
    fn surface_loss_examples() {
        let a = Mat::from_elem((1, 1), 0.9);
        let b = Mat::from_elem((1, 1), 0.7);
        assert!((loss_sc(&a, &b, &[true]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(loss_sc(&a, &a, &[true]).unwrap(), 0.0);
        assert_eq!(loss_sc(&a, &b, &[false]).unwrap(), 0.0);
    }

    #[test]
    fn eikonal_on_linear_fields() {
        let n = Mat::from_shape_fn((10, 3), |(_, c)| [0.6, 0.0, 0.8][c]);
        assert!(loss_reg(&n) < 1e-15);
        assert!((loss_reg(&(&n * 2.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eikonal_matches_network_gradients() {
        let net = SdfNetwork::new(NetConfig::tiny(), SceneBox::desk(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Mat::from_shape_simple_fn((50, 3), || rng.gen_range(-1.0..1.0));
        let (_, g) = net.forward_with_grad(&x);
        let mut naive = 0.0;
        for p in 0..50 {
            let norm = (0..3).map(|c| g[[p, c]].powi(2)).sum::<f64>().sqrt();
            naive += (norm - 1.0).powi(2);
        }
        naive /= 50.0;
        assert!((loss_reg(&g) - naive).abs() < 1e-12);
    }

    #[test]
    fn schedule_switches_surface_loss() {
        let cfg = TrainConfig::desk();
        assert_eq!(cfg.lambda_sc_at(0), 0.0);
        assert_eq!(cfg.lambda_sc_at(249), 0.0);
        assert_eq!(cfg.lambda_sc_at(250), 1.0);
        let s = IncrementalSchedule::desk();
        let counts: Vec<usize> = [0, 249, 250, 374, 375, 875, 999].iter().map(|&i| s.patterns_at(i)).collect();
        assert_eq!(counts, vec![3, 3, 4, 4, 5, 9, 9]);
        let mut bad = TrainConfig::desk();
        bad.phase1_iterations = 2000;
        assert!(bad.validate().is_err());
        assert!(TrainConfig::paper().validate().is_ok());
    }

    /// Tiny net on a quarter-resolution rig.
    pub(crate) fn small_trainer(lr: f64) -> Trainer {
        let rig = Rig::desk().scaled(0.25).unwrap();
        let pk = rig.projector.intrinsics;
        let spec = RandomPatternSpec {
            scales: vec![2, 4],
            per_scale: 2,
            seed: 1,
            ..RandomPatternSpec::default()
        };
        let pats = gen_random_multiscale(pk.width, pk.height, &spec).unwrap();
        let sim = render_captures(&AnalyticScene::reference(), &rig, &pats, &SimOptions::default()).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = 48;
        cfg.chunk_rays = 16;
        cfg.render.k_coarse = 8;
        cfg.render.k_fine = 4;
        cfg.adam.learning_rate = lr;
        cfg.phase1_iterations = 0;
        let net = SdfNetwork::new(NetConfig::tiny(), SceneBox::desk(), 0).unwrap();
        Trainer::new(net, rig, pats, sim.captures, cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut t = small_trainer(0.0);
        let before: Vec<Mat> = t.net.tensors().into_iter().cloned().collect();
        t.step().unwrap();
        for (a, b) in before.iter().zip(t.net.tensors()) {
            assert!(crate::sdf_net::same_bits(a, b));
        }
    }

    #[test]
    fn first_step_moves_each_parameter_by_the_learning_rate() {
        let mut t = small_trainer(1e-3);
        let before: Vec<Mat> = t.net.tensors().into_iter().cloned().collect();
        let batch = t.draw_batch(0);
        let (_, g) = t.evaluate(&batch, t.config.lambda_sc_at(0), true).unwrap();
        t.step().unwrap();
        let mut checked = 0;
        for ((b, a), g) in before.iter().zip(t.net.tensors()).zip(g.unwrap()) {
            for ((x0, x1), gi) in b.iter().zip(a.iter()).zip(g.iter()) {
                if gi.abs() > 1e-5 {
                    let step = x0 - x1;
                    assert!((step - 1e-3 * gi.signum()).abs() < 1e-5, "{step} for grad {gi}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn loss_identity_and_reproducibility() {
        let mut a = small_trainer(5e-4);
        let mut b = small_trainer(5e-4);
        for _ in 0..3 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            let w = a.config.weights;
            let rebuilt = w.lambda_rc * ra.l_rc + ra.lambda_sc * ra.l_sc + w.lambda_reg * ra.l_reg;
            assert!((ra.total - rebuilt).abs() < 1e-12);
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        }
        for (x, y) in a.net.tensors().iter().zip(b.net.tensors()) {
            assert!(crate::sdf_net::same_bits(x, y));
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let run = |workers: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| {
                let mut t = small_trainer(5e-4);
                (0..2).map(|_| t.step().unwrap().total).collect::<Vec<_>>()
            })
        };
        let one = run(1);
        let four = run(4);
        for (x, y) in one.iter().zip(&four) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn adding_patterns() {
        let mut t = small_trainer(5e-4);
        let first = t.patterns.patterns[0].clone();
        let first_img = t.captures.images[0].clone();
        let (a0, b0) = (t.captures.a_map.clone(), t.captures.b_map.clone());
        t.step().unwrap();
        t.add_pattern(first, first_img).unwrap();
        assert_eq!(t.patterns.len(), 5);
        assert_eq!(t.captures.a_map, a0);
        assert_eq!(t.captures.b_map, b0);
        assert_eq!(t.optimizer_steps(), 1);
        t.step().unwrap();
        assert_eq!(t.optimizer_steps(), 2);
        let small = Pattern::constant(4, 4, 0.5);
        assert!(matches!(t.add_pattern(small, vec![0.0; 16]), Err(Error::Config(_))));
    }

    #[test]
    fn batch_rays_come_from_lit_pixels() {
        let t = small_trainer(5e-4);
        let batch = t.draw_batch(7);
        assert_eq!(batch.pixels.len(), 48);
        let mut uniq = batch.pixels.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 48);
        for &p in &batch.pixels {
            assert!(t.captures.b_map[p] >= t.config.b_floor);
        }
        assert_eq!(batch.eikonal.len(), 3);
        let per_chunk = (16.0 * 12.0 * t.config.eikonal_fraction).ceil() as usize;
        assert!(batch.eikonal.iter().all(|e| e.len() == per_chunk));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rendering_loss_is_a_mean(v in proptest::collection::vec(-1.0f64..1.0, 1..40), c in -1.0f64..1.0) {
            let a = Mat::from_shape_vec((v.len(), 1), v.clone()).unwrap();
            let b = &a + c;
            prop_assert!((loss_rc(&a, &b).unwrap() - c.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_eikonal_matches_plain() {
        let net = SdfNetwork::new(NetConfig::tiny(), SceneBox::desk(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::from_shape_simple_fn((20, 3), || rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let out = net.record(&mut tape, &vars, &x, true).unwrap();
        let g = out.grad.unwrap();
        let (_, plain) = net.forward_with_grad(&x);
        for c in 0..3 {
            for p in 0..20 {
                assert!((tape.value(g[c])[[p, 0]] - plain[[p, c]]).abs() < 1e-12);
            }
        }
    }
}
