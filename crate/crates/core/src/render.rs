//! Volume rendering of structured-light captures from a signed distance field.
//!
//! Each camera ray is sampled at `K` depths. The SDF values there turn into
//! rendering weights, either by the normalized logistic density
//! ([`WeightMode::Eq3`]) or by alpha compositing of the logistic CDF
//! ([`WeightMode::Alpha`]). A sample's color is the photometric model
//! `a + b P_i(pi(x))` with `pi` the projector projection, and a pixel renders
//! as the weighted sum of sample colors. The weighted mean sample position is
//! the expected surface point, whose reprojected color is the surface color.
//!
//! Quadrature cells: sample `t_i` owns `[e_i, e_{i+1}]` where the inner edges
//! are midpoints between neighbours and the outer edges are `t_near` and
//! `t_far`. A sample sitting exactly on a bound therefore gets a half bin.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Bounds, DeviceModel, Ray};
use crate::patterns::PatternSet;
use crate::sdf_net::{NetVars, SdfNetwork};

/// Denominator floor of the normalized weights.
pub const WEIGHT_FLOOR: f64 = 1e-30;
/// Below this weight sum the expected surface point is undefined.
pub const SURFACE_MIN_WEIGHT: f64 = 1e-6;
/// Stabilizer of the opacity ratio. Besides guarding the division it makes
/// deeply negative regions opaque, which pins the sign of the field: a field
/// that is negative in front of the surface would block the ray early.
pub const ALPHA_EPS: f64 = 1e-5;
/// Smallest projector depth used when differentiating the projection.
const MIN_PROJECTOR_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Logistic density times cell width, normalized along the ray.
    Eq3,
    /// Discrete opacity from consecutive logistic CDF values. Opaque deep
    /// inside the surface, which pins the zero level during training.
    #[default]
    Alpha,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq3" => Ok(WeightMode::Eq3),
            "alpha" => Ok(WeightMode::Alpha),
            other => Err(Error::Config(format!(
                "unknown weight mode {other:?} (expected eq3 or alpha)"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Eq3 => "eq3",
            WeightMode::Alpha => "alpha",
        })
    }
}

/// Per-ray sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub k_coarse: usize,
    pub k_fine: usize,
    pub mode: WeightMode,
    /// Random offsets inside the strata; off for deterministic evaluation.
    pub jitter: bool,
}

impl RenderConfig {
    pub fn desk() -> Self {
        RenderConfig {
            k_coarse: 32,
            k_fine: 16,
            mode: WeightMode::Alpha,
            jitter: true,
        }
    }

    pub fn samples_per_ray(&self) -> usize {
        self.k_coarse + self.k_fine
    }
}

/// Logistic density `phi_s(x) = s e^{-sx} / (1 + e^{-sx})^2`.
pub fn logistic_density(x: f64, s: f64) -> f64 {
    let g = sigmoid(s * x);
    s * g * (1.0 - g)
}

/// Logistic CDF `Phi_s(x) = 1 / (1 + e^{-sx})`.
pub fn logistic_cdf(x: f64, s: f64) -> f64 {
    sigmoid(s * x)
}

/// Cell edges of ascending samples: bounds outside, midpoints inside.
pub fn cell_edges(t: &[f64], bounds: Bounds) -> Vec<f64> {
    let mut edges = Vec::with_capacity(t.len() + 1);
    edges.push(bounds.t_near.min(t.first().copied().unwrap_or(bounds.t_near)));
    edges.extend(t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(bounds.t_far.max(t.last().copied().unwrap_or(bounds.t_far)));
    edges
}

pub fn cell_widths(t: &[f64], bounds: Bounds) -> Vec<f64> {
    cell_edges(t, bounds).windows(2).map(|w| w[1] - w[0]).collect()
}

/// Normalized density weights.
pub fn weights_eq3(sdf: &[f64], s: f64, t: &[f64], bounds: Bounds) -> Vec<f64> {
    let raw: Vec<f64> = sdf
        .iter()
        .zip(cell_widths(t, bounds))
        .map(|(&f, dt)| logistic_density(f, s) * dt)
        .collect();
    let total = raw.iter().sum::<f64>().max(WEIGHT_FLOOR);
    raw.into_iter().map(|w| w / total).collect()
}

/// Alpha-composited weights with opacity
/// `(Phi(f_i) - Phi(f_i+1) + eps) / (Phi(f_i) + eps)` clamped at zero; the
/// last sample has no successor and gets none.
pub fn weights_alpha(sdf: &[f64], s: f64) -> Vec<f64> {
    let cdf: Vec<f64> = sdf.iter().map(|&f| logistic_cdf(f, s)).collect();
    let mut out = Vec::with_capacity(sdf.len());
    let mut transmittance = 1.0;
    for i in 0..sdf.len() {
        let alpha = match cdf.get(i + 1) {
            Some(next) => ((cdf[i] - next + ALPHA_EPS) / (cdf[i] + ALPHA_EPS)).max(0.0),
            None => 0.0,
        };
        out.push(alpha * transmittance);
        transmittance *= 1.0 - alpha;
    }
    out
}

pub fn weights(mode: WeightMode, sdf: &[f64], s: f64, t: &[f64], bounds: Bounds) -> Vec<f64> {
    match mode {
        WeightMode::Eq3 => weights_eq3(sdf, s, t, bounds),
        WeightMode::Alpha => weights_alpha(sdf, s),
    }
}

/// Pattern values at the reprojection of `point`; `None` when the point is
/// behind the projector or outside the pattern rectangle.
pub fn pattern_values(point: &Vector3<f64>, patterns: &PatternSet, projector: &DeviceModel) -> Option<Vec<f64>> {
    let uv = projector.project(point).ok()?;
    let mut out = Vec::with_capacity(patterns.len());
    for p in &patterns.patterns {
        let s = p.sample_bilinear(uv);
        if !s.in_bounds {
            return None;
        }
        out.push(s.value);
    }
    Some(out)
}

/// `a + b P_i(pi(x))`, falling back to `a` for unprojectable points.
pub fn sample_colors(point: &Vector3<f64>, patterns: &PatternSet, projector: &DeviceModel, a: f64, b: f64) -> Vec<f64> {
    match pattern_values(point, patterns, projector) {
        Some(v) => v.into_iter().map(|p| a + b * p).collect(),
        None => vec![a; patterns.len()],
    }
}

/// Weighted sum of sample colors, one intensity per pattern.
pub fn render_pixel(
    points: &[Vector3<f64>],
    weights: &[f64],
    patterns: &PatternSet,
    projector: &DeviceModel,
    a: f64,
    b: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; patterns.len()];
    for (x, &w) in points.iter().zip(weights) {
        for (o, c) in out.iter_mut().zip(sample_colors(x, patterns, projector, a, b)) {
            *o += w * c;
        }
    }
    out
}

/// Weighted mean of the sample points, `None` for an empty ray.
pub fn expected_surface(points: &[Vector3<f64>], weights: &[f64]) -> Option<Vector3<f64>> {
    let total: f64 = weights.iter().sum();
    if total <= SURFACE_MIN_WEIGHT {
        return None;
    }
    let sum = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (x, &w)| acc + x * w);
    Some(sum / total)
}

/// Intensities rendered from the expected surface point.
pub fn surface_color(point: &Vector3<f64>, patterns: &PatternSet, projector: &DeviceModel, a: f64, b: f64) -> Vec<f64> {
    sample_colors(point, patterns, projector, a, b)
}

/// Everything rendered for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub t: Vec<f64>,
    pub sdf: Vec<f64>,
    pub weights: Vec<f64>,
    pub rendered: Vec<f64>,
    pub surface: Option<Vector3<f64>>,
    pub surface_color: Option<Vec<f64>>,
    pub weight_sum: f64,
}

/// Stratified depths: one per equal bin, at the bin center without jitter.
pub fn stratified(bounds: Bounds, k: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let h = (bounds.t_far - bounds.t_near) / k as f64;
    match rng {
        Some(rng) => (0..k)
            .map(|i| bounds.t_near + (i as f64 + rng.gen::<f64>()) * h)
            .collect(),
        None => (0..k).map(|i| bounds.t_near + (i as f64 + 0.5) * h).collect(),
    }
}

/// Inverse-CDF draws from the piecewise-constant density with mass
/// `weights[i]` on `[edges[i], edges[i+1]]`.
pub fn sample_pdf(edges: &[f64], weights: &[f64], k: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    // Small floor keeps every cell reachable.
    let padded: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(padded.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &padded {
        acc += w / total;
        cdf.push(acc);
    }
    let u: Vec<f64> = match rng {
        Some(rng) => (0..k).map(|j| (j as f64 + rng.gen::<f64>()) / k as f64).collect(),
        None => (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect(),
    };
    u.into_iter()
        .map(|u| {
            let u = u.min(cdf[cdf.len() - 1]);
            let idx = cdf.partition_point(|&c| c <= u).clamp(1, padded.len()) - 1;
            let span = cdf[idx + 1] - cdf[idx];
            let frac = if span > 0.0 { (u - cdf[idx]) / span } else { 0.5 };
            edges[idx] + frac.clamp(0.0, 1.0) * (edges[idx + 1] - edges[idx])
        })
        .collect()
}

/// Sorts and makes the depths strictly increasing.
fn finalize(mut t: Vec<f64>) -> Vec<f64> {
    t.sort_by(f64::total_cmp);
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1].next_up();
        }
    }
    t
}

/// Random generator for one ray: independent streams under one seed.
pub fn ray_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// World sample points of several rays stacked row-wise and normalized.
fn stacked_points(net: &SdfNetwork, rays: &[Ray], t: &[Vec<f64>]) -> Mat {
    let total: usize = t.iter().map(Vec::len).sum();
    let mut m = Mat::zeros((total, 3));
    let mut row = 0;
    for (ray, ts) in rays.iter().zip(t) {
        for &ti in ts {
            let q = net.scene_box.normalize(ray.at(ti).into());
            for c in 0..3 {
                m[[row, c]] = q[c];
            }
            row += 1;
        }
    }
    m
}

/// Hierarchical sampling of several rays with one batched network pass.
/// `rngs` holds one generator per ray and is only used with jitter.
pub fn sample_rays(
    net: &SdfNetwork,
    rays: &[Ray],
    cfg: &RenderConfig,
    rngs: &mut [ChaCha8Rng],
) -> Vec<Vec<f64>> {
    assert_eq!(rays.len(), rngs.len());
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .zip(rngs.iter_mut())
        .map(|(r, rng)| {
            let b = Bounds::new(r.t_near, r.t_far);
            stratified(b, cfg.k_coarse, cfg.jitter.then_some(rng))
        })
        .collect();
    if cfg.k_fine == 0 {
        return coarse.into_iter().map(finalize).collect();
    }
    let sdf = net.forward(&stacked_points(net, rays, &coarse));
    let s = net.sharpness();
    coarse
        .into_iter()
        .zip(sdf.chunks(cfg.k_coarse))
        .zip(rays.iter().zip(rngs.iter_mut()))
        .map(|((tc, f), (ray, rng))| {
            let b = Bounds::new(ray.t_near, ray.t_far);
            let w = weights(cfg.mode, f, s, &tc, b);
            let fine = sample_pdf(&cell_edges(&tc, b), &w, cfg.k_fine, cfg.jitter.then_some(rng));
            let mut all = tc;
            all.extend(fine);
            finalize(all)
        })
        .collect()
}

/// Single-ray form of [`sample_rays`].
pub fn sample_ray(net: &SdfNetwork, ray: &Ray, cfg: &RenderConfig, seed: u64) -> Vec<f64> {
    let mut rngs = [ray_rng(seed, 0)];
    sample_rays(net, std::slice::from_ref(ray), cfg, &mut rngs).remove(0)
}

/// Plain (untaped) rendering of one ray at the given depths.
pub fn render_ray(
    net: &SdfNetwork,
    ray: &Ray,
    t: &[f64],
    mode: WeightMode,
    patterns: &PatternSet,
    projector: &DeviceModel,
    a: f64,
    b: f64,
) -> RenderOutput {
    let sdf = net.forward(&stacked_points(net, std::slice::from_ref(ray), &[t.to_vec()]));
    let w = weights(mode, &sdf, net.sharpness(), t, Bounds::new(ray.t_near, ray.t_far));
    let points: Vec<Vector3<f64>> = t.iter().map(|&ti| ray.at(ti)).collect();
    let rendered = render_pixel(&points, &w, patterns, projector, a, b);
    let surface = expected_surface(&points, &w);
    let surface_color = surface.map(|p| surface_color(&p, patterns, projector, a, b));
    RenderOutput {
        t: t.to_vec(),
        weight_sum: w.iter().sum(),
        sdf,
        weights: w,
        rendered,
        surface,
        surface_color,
    }
}

/// Records normalized density weights for an `R x K` block of SDF values.
pub fn record_weights_eq3(tape: &mut Tape, sdf: Var, s: Var, dt: &Mat) -> Result<Var> {
    let phi = record_density(tape, sdf, s)?;
    let dt = tape.constant(dt.clone());
    let raw = tape.mul(phi, dt)?;
    let total = tape.sum_rows(raw);
    let total = tape.max_const(total, WEIGHT_FLOOR);
    let inv = tape.reciprocal(total);
    tape.mul(raw, inv)
}

/// `phi_s(f)` on the tape.
pub fn record_density(tape: &mut Tape, sdf: Var, s: Var) -> Result<Var> {
    let sf = tape.mul(sdf, s)?;
    let g = tape.sigmoid(sf);
    let neg = tape.scale(g, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let gg = tape.mul(g, one_minus)?;
    tape.mul(gg, s)
}

/// Records alpha-composited weights for an `R x K` block of SDF values.
pub fn record_weights_alpha(tape: &mut Tape, sdf: Var, s: Var) -> Result<Var> {
    let (_, k) = sdf.shape();
    let sf = tape.mul(sdf, s)?;
    let cdf = tape.sigmoid(sf);
    // next[:, i] = cdf[:, i + 1], zero in the last column.
    let shift = tape.constant(Mat::from_shape_fn((k, k), |(r, c)| f64::from(r == c + 1)));
    let next = tape.matmul(cdf, shift)?;
    let drop = tape.sub(cdf, next)?;
    let num = tape.add_const(drop, ALPHA_EPS);
    let den = tape.add_const(cdf, ALPHA_EPS);
    let inv = tape.reciprocal(den);
    let ratio = tape.mul(num, inv)?;
    let alpha = tape.max_const(ratio, 0.0);
    let last_mask = tape.constant(Mat::from_shape_fn((1, k), |(_, c)| f64::from(c + 1 < k)));
    let alpha = tape.mul(alpha, last_mask)?;
    // Exclusive cumulative product of (1 - alpha) through logs.
    let neg_a = tape.scale(alpha, -1.0);
    let keep = tape.add_const(neg_a, 1.0);
    let keep = tape.max_const(keep, WEIGHT_FLOOR);
    let log_keep = tape.ln(keep);
    let upper = tape.constant(Mat::from_shape_fn((k, k), |(r, c)| f64::from(r < c)));
    let log_t = tape.matmul(log_keep, upper)?;
    let trans = tape.exp(log_t);
    tape.mul(alpha, trans)
}

/// Constant per-chunk inputs of the recorded renderer.
pub struct ChunkInputs<'a> {
    pub rays: &'a [Ray],
    /// `K` ascending depths per ray.
    pub t: &'a [Vec<f64>],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub patterns: &'a PatternSet,
    pub projector: &'a DeviceModel,
}

/// Recorded rendering of a chunk of `R` rays.
pub struct RecordedChunk {
    /// `R x K` weights.
    pub weights: Var,
    /// `R x N` rendered intensities.
    pub rendered: Var,
    /// `R x N` intensities at the expected surface point.
    pub surface: Var,
    /// Weight sums per ray (values only).
    pub weight_sum: Vec<f64>,
    /// Normalized sample points, `R K x 3`, reusable for regularization.
    pub points: Mat,
}

/// Records weights, rendered intensities and surface intensities for a chunk.
pub fn record_chunk(
    tape: &mut Tape,
    net: &SdfNetwork,
    vars: &NetVars,
    s: Var,
    inputs: &ChunkInputs<'_>,
    mode: WeightMode,
) -> Result<RecordedChunk> {
    let r = inputs.rays.len();
    let k = inputs.t.first().map_or(0, Vec::len);
    let n = inputs.patterns.len();
    if r == 0 || k < 2 || inputs.t.iter().any(|t| t.len() != k) {
        return Err(Error::Shape("chunk needs rays with equal sample counts >= 2".into()));
    }
    if inputs.a.len() != r || inputs.b.len() != r {
        return Err(Error::Shape("one a/b value per ray".into()));
    }
    let points = stacked_points(net, inputs.rays, inputs.t);
    let out = net.record(tape, vars, &points, false)?;
    let sdf = tape.reshape(out.sdf, r, k)?;
    let w = match mode {
        WeightMode::Eq3 => {
            let mut dt = Mat::zeros((r, k));
            for (i, (ray, t)) in inputs.rays.iter().zip(inputs.t).enumerate() {
                let widths = cell_widths(t, Bounds::new(ray.t_near, ray.t_far));
                for (j, d) in widths.into_iter().enumerate() {
                    dt[[i, j]] = d;
                }
            }
            record_weights_eq3(tape, sdf, s, &dt)?
        }
        WeightMode::Alpha => record_weights_alpha(tape, sdf, s)?,
    };

    // Sample colors are constants: gradients reach the weights only.
    let mut colors = Mat::zeros((r * k, n));
    for (i, (ray, t)) in inputs.rays.iter().zip(inputs.t).enumerate() {
        for (j, &tj) in t.iter().enumerate() {
            let c = sample_colors(&ray.at(tj), inputs.patterns, inputs.projector, inputs.a[i], inputs.b[i]);
            for (col, v) in c.into_iter().enumerate() {
                colors[[i * k + j, col]] = v;
            }
        }
    }
    let w_col = tape.reshape(w, r * k, 1)?;
    let colors = tape.constant(colors);
    let weighted = tape.mul(colors, w_col)?;
    let segments = tape.constant(Mat::from_shape_fn((r, r * k), |(i, row)| f64::from(row / k == i)));
    let rendered = tape.matmul(segments, weighted)?;

    // Expected depth along each ray, renormalized by the weight sum.
    let t_mat = tape.constant(Mat::from_shape_fn((r, k), |(i, j)| inputs.t[i][j]));
    let wt = tape.mul(w, t_mat)?;
    let num = tape.sum_rows(wt);
    let wsum = tape.sum_rows(w);
    let weight_sum: Vec<f64> = tape.value(wsum).iter().copied().collect();
    let den = tape.max_const(wsum, SURFACE_MIN_WEIGHT);
    let inv = tape.reciprocal(den);
    let t_bar = tape.mul(num, inv)?;
    let origins = tape.constant(Mat::from_shape_fn((r, 3), |(i, c)| inputs.rays[i].origin[c]));
    let dirs = tape.constant(Mat::from_shape_fn((r, 3), |(i, c)| inputs.rays[i].direction[c]));
    let offset = tape.mul(dirs, t_bar)?;
    let surface_pts = tape.add(origins, offset)?;
    let surface = record_surface_color(tape, surface_pts, inputs)?;
    Ok(RecordedChunk {
        weights: w,
        rendered,
        surface,
        weight_sum,
        points,
    })
}

/// `a + b P_i(pi(x))` for an `R x 3` block of world points, differentiable
/// through the projection and the bilinear sampler.
pub fn record_surface_color(tape: &mut Tape, pts: Var, inputs: &ChunkInputs<'_>) -> Result<Var> {
    let proj = inputs.projector;
    let rt = tape.constant(Mat::from_shape_fn((3, 3), |(i, j)| proj.rotation[(j, i)]));
    let tr = tape.constant(Mat::from_shape_fn((1, 3), |(_, j)| proj.translation[j]));
    let rotated = tape.matmul(pts, rt)?;
    let dev = tape.add(rotated, tr)?;
    let pick = |tape: &mut Tape, c: usize| -> Result<Var> {
        let sel = tape.constant(Mat::from_shape_fn((3, 1), |(i, _)| f64::from(i == c)));
        tape.matmul(dev, sel)
    };
    let x = pick(tape, 0)?;
    let y = pick(tape, 1)?;
    let z = pick(tape, 2)?;
    let z_safe = tape.max_const(z, MIN_PROJECTOR_DEPTH);
    let inv_z = tape.reciprocal(z_safe);
    let k = &proj.intrinsics;
    let xu = tape.mul(x, inv_z)?;
    let xu = tape.scale(xu, k.fx);
    let u = tape.add_const(xu, k.cx);
    let yv = tape.mul(y, inv_z)?;
    let yv = tape.scale(yv, k.fy);
    let v = tape.add_const(yv, k.cy);

    let rows = pts.shape().0;
    let n = inputs.patterns.len();
    let mut val = Mat::zeros((rows, n));
    let mut du = Mat::zeros((rows, n));
    let mut dv = Mat::zeros((rows, n));
    let (zv, uv, vv) = (tape.value(z).clone(), tape.value(u).clone(), tape.value(v).clone());
    for i in 0..rows {
        if zv[[i, 0]] <= MIN_PROJECTOR_DEPTH {
            continue;
        }
        let coords = [uv[[i, 0]], vv[[i, 0]]];
        let samples: Vec<_> = inputs.patterns.patterns.iter().map(|p| p.sample_bilinear(coords)).collect();
        if samples.iter().any(|s| !s.in_bounds) {
            continue;
        }
        for (j, s) in samples.into_iter().enumerate() {
            val[[i, j]] = s.value;
            du[[i, j]] = s.grad[0];
            dv[[i, j]] = s.grad[1];
        }
    }
    let p = tape.lookup2(u, v, val, du, dv)?;
    let b = tape.constant(Mat::from_shape_fn((rows, 1), |(i, _)| inputs.b[i]));
    let a = tape.constant(Mat::from_shape_fn((rows, 1), |(i, _)| inputs.a[i]));
    let bp = tape.mul(p, b)?;
    tape.add(bp, a)
}
