//! The neural signed distance function.
//!
//! Points are mapped into a normalized cube, lifted by a sinusoidal positional
//! encoding and passed through a softplus MLP with one skip connection that
//! re-injects the encoding. The network also owns the sharpness `s` of the
//! logistic density used by the renderer.
//!
//! Weights are stored input-major (`in x out`), so a batch of `P` points is a
//! `P x in` matrix and each layer is `H W + b`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_gate_slice, softplus_slice, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// Sinusoidal feature lifting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            num_frequencies: 6,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn dim(&self) -> usize {
        3 * usize::from(self.include_input) + 6 * self.num_frequencies
    }
}

/// Encodes one point. Layout: `x, y, z` (optional), then for each band `k`
/// the three `sin(2^k pi x)` followed by the three `cos(2^k pi x)`.
pub fn encode(x: [f64; 3], cfg: &EncodingConfig) -> Vec<f64> {
    let m = Mat::from_shape_vec((1, 3), x.to_vec()).expect("1x3");
    encode_batch(&m, cfg).0.into_raw_vec_and_offset().0
}

/// Encodes a `P x 3` batch and returns the encoding with its derivatives
/// with respect to each input coordinate.
pub fn encode_batch(x: &Mat, cfg: &EncodingConfig) -> (Mat, [Mat; 3]) {
    let p = x.nrows();
    let d = cfg.dim();
    let mut enc = Mat::zeros((p, d));
    let mut tang = [Mat::zeros((p, d)), Mat::zeros((p, d)), Mat::zeros((p, d))];
    for r in 0..p {
        let mut col = 0;
        if cfg.include_input {
            for c in 0..3 {
                enc[[r, c]] = x[[r, c]];
                tang[c][[r, c]] = 1.0;
            }
            col = 3;
        }
        for c in 0..3 {
            // Higher bands by angle doubling from the first one.
            let (mut sn, mut cs) = (PI * x[[r, c]]).sin_cos();
            for k in 0..cfg.num_frequencies {
                let f = (1u64 << k) as f64 * PI;
                let at = col + 6 * k;
                enc[[r, at + c]] = sn;
                enc[[r, at + 3 + c]] = cs;
                tang[c][[r, at + c]] = f * cs;
                tang[c][[r, at + 3 + c]] = -f * sn;
                (sn, cs) = (2.0 * sn * cs, (cs - sn) * (cs + sn));
            }
        }
    }
    (enc, tang)
}

/// Axis-aligned box mapped affinely onto `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

impl SceneBox {
    pub fn new(center: [f64; 3], half_extents: [f64; 3]) -> Result<Self> {
        if half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::Config(format!(
                "scene box needs positive extents, got {half_extents:?}"
            )));
        }
        Ok(SceneBox {
            center,
            half_extents,
        })
    }

    pub fn cube(center: [f64; 3], half_extent: f64) -> Result<Self> {
        Self::new(center, [half_extent; 3])
    }

    /// Box around the reference working volume in front of the camera.
    pub fn desk() -> Self {
        SceneBox {
            center: [0.0, 0.0, 0.75],
            half_extents: [0.3; 3],
        }
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.center[i]) / self.half_extents[i])
    }

    pub fn denormalize(&self, q: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| q[i] * self.half_extents[i] + self.center[i])
    }

    /// Metres per normalized unit along the shortest axis.
    pub fn scale(&self) -> f64 {
        self.half_extents.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Surface the network approximates at initialization, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitShape {
    /// Object-centric: `|x| - radius`, negative inside a sphere at the box center.
    Sphere { radius: f64 },
    /// Scene-centric: `radius - |x - center|`, a surface that every ray leaving
    /// `center` crosses exactly once, with the solid side beyond it.
    ViewSphere { center: [f64; 3], radius: f64 },
}

impl InitShape {
    /// Inside-out sphere around the viewpoint `eye` through the box center.
    pub fn facing(eye: [f64; 3], scene_box: &SceneBox) -> Self {
        let center = scene_box.normalize(eye);
        let radius = center.iter().map(|c| c * c).sum::<f64>().sqrt();
        InitShape::ViewSphere { center, radius }
    }

    pub fn target(&self, p: [f64; 3]) -> f64 {
        match *self {
            InitShape::Sphere { radius } => p.iter().map(|c| c * c).sum::<f64>().sqrt() - radius,
            InitShape::ViewSphere { center, radius } => {
                let d: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                radius - d.sqrt()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let r = match *self {
            InitShape::Sphere { radius } | InitShape::ViewSphere { radius, .. } => radius,
        };
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Config(format!("initial radius must be positive, got {r}")));
        }
        Ok(())
    }
}

/// Network shape and initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Hidden layer whose input is concatenated with the encoding.
    pub skip_layer: usize,
    pub encoding: EncodingConfig,
    pub softplus_beta: f64,
    pub init: InitShape,
    /// Initial `1/s` in normalized units.
    pub init_inv_s: f64,
    /// `s = exp(sharpness_scale * v)` for the trained raw value `v`.
    pub sharpness_scale: f64,
}

impl NetConfig {
    /// Four hidden layers of 64 units.
    pub fn desk() -> Self {
        NetConfig {
            hidden_width: 64,
            hidden_layers: 4,
            skip_layer: 2,
            encoding: EncodingConfig::default(),
            softplus_beta: 100.0,
            // Camera at the world origin seen from the desk box.
            init: InitShape::facing([0.0; 3], &SceneBox::desk()),
            init_inv_s: 0.3,
            sharpness_scale: 40.0,
        }
    }

    /// Eight hidden layers of 256 units.
    pub fn paper() -> Self {
        NetConfig {
            hidden_width: 256,
            hidden_layers: 8,
            skip_layer: 4,
            ..Self::desk()
        }
    }

    /// Two hidden layers of 16 units, for gradient checks.
    pub fn tiny() -> Self {
        NetConfig {
            hidden_width: 16,
            hidden_layers: 2,
            skip_layer: 1,
            encoding: EncodingConfig {
                num_frequencies: 1,
                include_input: true,
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.encoding.dim();
        if d < 3 {
            return Err(Error::Config("encoding must have at least 3 features".into()));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config("network needs a hidden layer".into()));
        }
        if self.skip_layer >= self.hidden_layers {
            return Err(Error::Config(format!(
                "skip layer {} outside {} hidden layers",
                self.skip_layer, self.hidden_layers
            )));
        }
        if self.skip_layer > 0 && self.hidden_width <= d {
            return Err(Error::Config(format!(
                "hidden width {} must exceed encoding width {d} to host the skip",
                self.hidden_width
            )));
        }
        self.init.validate()?;
        if !(self.softplus_beta > 0.0 && self.init_inv_s > 0.0 && self.sharpness_scale > 0.0) {
            return Err(Error::Config("beta, 1/s and sharpness scale must be positive".into()));
        }
        Ok(())
    }

    /// `(input width, output width, takes skip input)` per linear layer.
    fn layer_dims(&self) -> Vec<(usize, usize, bool)> {
        let d = self.encoding.dim();
        let h = self.hidden_width;
        let mut dims = Vec::new();
        for l in 0..=self.hidden_layers {
            let input = if l == 0 { d } else { h };
            let skip = l > 0 && l == self.skip_layer;
            let output = if l == self.hidden_layers {
                1
            } else if l + 1 == self.skip_layer {
                h - d
            } else {
                h
            };
            // The skip layer's hidden part is narrower: h - d.
            let input = if skip { h - d } else { input };
            dims.push((input, output, skip));
        }
        dims
    }
}

/// One linear layer. The skip layer keeps the encoding block separately so
/// that `H W + E W_enc` needs no concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub w_enc: Option<Mat>,
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfNetwork {
    pub config: NetConfig,
    pub scene_box: SceneBox,
    pub layers: Vec<Layer>,
    /// Raw sharpness value `v` with `s = exp(sharpness_scale * v)`, as `1x1`.
    pub sharpness_raw: Mat,
}

/// Tape handles for every trainable tensor of a network.
pub struct NetVars {
    layers: Vec<(Var, Option<Var>, Var)>,
    pub sharpness_raw: Var,
}

impl NetVars {
    /// Handles in [`SdfNetwork::tensors`] order.
    pub fn tensors(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, we, b) in &self.layers {
            out.push(*w);
            if let Some(we) = we {
                out.push(*we);
            }
            out.push(*b);
        }
        out.push(self.sharpness_raw);
        out
    }
}

/// Recorded network outputs for a batch of points.
pub struct NetOutput {
    /// `P x 1` signed distances in normalized units.
    pub sdf: Var,
    /// Columns of the spatial gradient, each `P x 1`, in normalized units.
    pub grad: Option<[Var; 3]>,
}

const SKIP_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl SdfNetwork {
    /// Builds a network with geometric initialization: the initial function
    /// approximates the signed distance of `config.init`.
    pub fn new(config: NetConfig, scene_box: SceneBox, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.encoding.dim();
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let mut layers = Vec::with_capacity(dims.len());
        for (l, &(input, output, skip)) in dims.iter().enumerate() {
            let mut normal = |rows: usize, cols: usize, mean: f64, std: f64| {
                let dist = Normal::new(mean, std).expect("positive std");
                Mat::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            };
            let layer = if l == last {
                let fan_in = if skip { input + d } else { input };
                let sign = match config.init {
                    InitShape::Sphere { .. } => 1.0,
                    InitShape::ViewSphere { .. } => -1.0,
                };
                let mean = sign * PI.sqrt() / (fan_in as f64).sqrt();
                let w = normal(input, output, mean, 1e-4);
                let w_enc = skip.then(|| normal(d, output, mean, 1e-4));
                Layer {
                    w,
                    w_enc,
                    b: Mat::from_elem((1, output), config.init.target([0.0; 3])),
                }
            } else {
                let std = 2f64.sqrt() / (output as f64).sqrt();
                let mut w = normal(input, output, 0.0, std);
                if l == 0 {
                    // Only the raw coordinates drive the first layer at init.
                    let raw = if config.encoding.include_input { 3 } else { 0 };
                    w.slice_mut(s![raw.., ..]).fill(0.0);
                }
                let w_enc = skip.then(|| {
                    let mut we = normal(d, output, 0.0, std);
                    let raw = if config.encoding.include_input { 3 } else { 0 };
                    we.slice_mut(s![raw.., ..]).fill(0.0);
                    we
                });
                Layer {
                    w,
                    w_enc,
                    b: Mat::zeros((1, output)),
                }
            };
            layers.push(layer);
        }
        let s0 = 1.0 / config.init_inv_s;
        let mut net = SdfNetwork {
            config,
            scene_box,
            layers,
            sharpness_raw: Mat::from_elem((1, 1), s0.ln() / config.sharpness_scale),
        };
        net.fit_output_layer(&mut rng)?;
        net.refine_sphere(&mut rng)?;
        Ok(net)
    }

    /// Short regression of all weights onto the sphere distance.
    fn refine_sphere(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        const BATCH: usize = 1024;
        const STEPS: usize = 200;
        const LR: f64 = 1e-3;
        let init = self.config.init;
        let shapes: Vec<_> = self.tensors().iter().map(|t| t.dim()).collect();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: LR,
                ..AdamConfig::default()
            },
            &shapes,
        );
        for _ in 0..STEPS {
            let x = Mat::from_shape_simple_fn((BATCH, 3), || rng.gen_range(-1.0..1.0));
            let target = Mat::from_shape_vec(
                (BATCH, 1),
                x.rows().into_iter().map(|p| init.target([p[0], p[1], p[2]])).collect(),
            )
            .expect("column");
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let out = self.record(&mut tape, &vars, &x, false)?;
            let t = tape.constant(target);
            let diff = tape.sub(out.sdf, t)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            let grads = tape.backward(loss)?;
            let mut g: Vec<Mat> = vars.tensors().iter().map(|v| grads.wrt(*v)).collect();
            // The sharpness is not part of this fit.
            g.last_mut().expect("sharpness").fill(0.0);
            let mut params = self.tensors_mut();
            adam.step(&mut params, &g)?;
        }
        Ok(())
    }

    /// Narrow networks leave a large direction-dependent error in the random
    /// draw, so the output layer is refit by ridge regression to the sphere
    /// target on random points of the box, shrunk towards the drawn weights.
    fn fit_output_layer(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        const FIT_POINTS: usize = 4096;
        const RIDGE: f64 = 1e-6;
        let x = Mat::from_shape_simple_fn((FIT_POINTS, 3), || rng.gen_range(-1.0..1.0));
        let (enc, _) = encode_batch(&x, &self.config.encoding);
        let feats = self.hidden(&enc);
        let n = feats.ncols();
        let last = self.layers.last().expect("output layer");
        if last.w_enc.is_some() {
            return Ok(());
        }
        let target: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|p| self.config.init.target([p[0], p[1], p[2]]))
            .collect();
        // Normal equations over [features, 1] with the bias left unpenalized.
        let mut a = nalgebra::DMatrix::<f64>::zeros(n + 1, n + 1);
        let mut rhs = nalgebra::DVector::<f64>::zeros(n + 1);
        for (row, &y) in feats.rows().into_iter().zip(&target) {
            for i in 0..=n {
                let fi = if i < n { row[i] } else { 1.0 };
                rhs[i] += fi * y;
                for j in 0..=i {
                    let fj = if j < n { row[j] } else { 1.0 };
                    a[(i, j)] += fi * fj;
                }
            }
        }
        for i in 0..=n {
            for j in 0..i {
                a[(j, i)] = a[(i, j)];
            }
        }
        let lambda = RIDGE * (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64;
        for i in 0..n {
            a[(i, i)] += lambda;
            rhs[i] += lambda * last.w[[i, 0]];
        }
        let sol = a
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("output layer fit is singular".into()))?
            .solve(&rhs);
        let last = self.layers.last_mut().expect("output layer");
        for i in 0..n {
            last.w[[i, 0]] = sol[i];
        }
        last.b[[0, 0]] = sol[n];
        Ok(())
    }

    /// Activations entering the output layer.
    fn hidden(&self, enc: &Mat) -> Mat {
        let beta = self.config.softplus_beta;
        let mut h = enc.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = h.dot(&layer.w);
            if let Some(we) = &layer.w_enc {
                z += &enc.dot(we);
                z *= SKIP_SCALE;
            }
            z += &layer.b;
            softplus_slice(z.as_slice_mut().expect("fresh matrix"), beta);
            h = z;
        }
        h
    }

    /// Sharpness `s` of the logistic density, always positive.
    pub fn sharpness(&self) -> f64 {
        (self.config.sharpness_scale * self.sharpness_raw[[0, 0]]).exp()
    }

    pub fn inv_s(&self) -> f64 {
        1.0 / self.sharpness()
    }

    /// Trainable tensors in a fixed order: per layer `w`, `w_enc` (skip
    /// layer only), `b`; then the raw sharpness.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.w);
            if let Some(we) = &layer.w_enc {
                out.push(we);
            }
            out.push(&layer.b);
        }
        out.push(&self.sharpness_raw);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            if let Some(we) = &mut layer.w_enc {
                out.push(we);
            }
            out.push(&mut layer.b);
        }
        out.push(&mut self.sharpness_raw);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Multiply-adds of one point's forward pass.
    pub fn macs_per_point(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.w_enc.as_ref().map_or(0, |w| w.len()))
            .sum()
    }

    /// Maps a `P x 3` batch of world points into the normalized box.
    pub fn normalize_batch(&self, world: &Mat) -> Mat {
        let mut out = world.clone();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, h) = (self.scene_box.center[c], self.scene_box.half_extents[c]);
            col.mapv_inplace(|v| (v - m) / h);
        }
        out
    }

    /// Signed distances of a `P x 3` batch of normalized points.
    pub fn forward(&self, x: &Mat) -> Vec<f64> {
        let (enc, _) = encode_batch(x, &self.config.encoding);
        let beta = self.config.softplus_beta;
        let last = self.layers.len() - 1;
        let mut h = enc.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            if let Some(we) = &layer.w_enc {
                z += &enc.dot(we);
                z *= SKIP_SCALE;
            }
            z += &layer.b;
            if l != last {
                softplus_slice(z.as_slice_mut().expect("fresh matrix"), beta);
            }
            h = z;
        }
        h.into_raw_vec_and_offset().0
    }

    /// Signed distances with their normalized-space gradients (`P x 3`).
    pub fn forward_with_grad(&self, x: &Mat) -> (Vec<f64>, Mat) {
        let (enc, tang) = encode_batch(x, &self.config.encoding);
        let beta = self.config.softplus_beta;
        let last = self.layers.len() - 1;
        let mut h = enc.clone();
        let mut dh = tang.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            let mut dz: Vec<Mat> = dh.iter().map(|t| t.dot(&layer.w)).collect();
            if let Some(we) = &layer.w_enc {
                z += &enc.dot(we);
                z *= SKIP_SCALE;
                for (c, dzc) in dz.iter_mut().enumerate() {
                    *dzc += &tang[c].dot(we);
                    *dzc *= SKIP_SCALE;
                }
            }
            z += &layer.b;
            if l == last {
                h = z;
                dh = [dz[0].clone(), dz[1].clone(), dz[2].clone()];
            } else {
                let mut gate = Mat::zeros(z.dim());
                let mut act = Mat::zeros(z.dim());
                softplus_gate_slice(
                    z.as_slice().expect("fresh matrix"),
                    beta,
                    act.as_slice_mut().expect("fresh matrix"),
                    gate.as_slice_mut().expect("fresh matrix"),
                );
                h = act;
                for (c, dzc) in dz.into_iter().enumerate() {
                    dh[c] = dzc * &gate;
                }
            }
        }
        let p = x.nrows();
        let mut grad = Mat::zeros((p, 3));
        for c in 0..3 {
            grad.column_mut(c).assign(&dh[c].column(0));
        }
        (h.into_raw_vec_and_offset().0, grad)
    }

    /// Signed distance at a world point, in normalized units.
    pub fn sdf_world(&self, p: [f64; 3]) -> f64 {
        let q = self.scene_box.normalize(p);
        self.forward(&Mat::from_shape_vec((1, 3), q.to_vec()).expect("1x3"))[0]
    }

    /// Puts every trainable tensor on `tape` as a parameter.
    pub fn register(&self, tape: &mut Tape) -> NetVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.param(l.w.clone());
                let we = l.w_enc.as_ref().map(|m| tape.param(m.clone()));
                let b = tape.param(l.b.clone());
                (w, we, b)
            })
            .collect();
        NetVars {
            layers,
            sharpness_raw: tape.param(self.sharpness_raw.clone()),
        }
    }

    /// Records `s` on the tape.
    pub fn record_sharpness(&self, tape: &mut Tape, vars: &NetVars) -> Var {
        let scaled = tape.scale(vars.sharpness_raw, self.config.sharpness_scale);
        tape.exp(scaled)
    }

    /// Records the forward pass for a `P x 3` batch of normalized points.
    /// With `with_grad`, the spatial gradient is carried as forward-mode
    /// tangents through the same tape, so losses on it stay differentiable
    /// with respect to the weights.
    pub fn record(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        x: &Mat,
        with_grad: bool,
    ) -> Result<NetOutput> {
        let (enc_m, tang_m) = encode_batch(x, &self.config.encoding);
        let beta = self.config.softplus_beta;
        let enc = tape.constant(enc_m);
        let tang: Option<[Var; 3]> = with_grad.then(|| {
            let [a, b, c] = tang_m;
            [tape.constant(a), tape.constant(b), tape.constant(c)]
        });
        let last = vars.layers.len() - 1;
        let mut h = enc;
        let mut dh = tang;
        for (l, &(w, we, b)) in vars.layers.iter().enumerate() {
            let mut z = tape.matmul(h, w)?;
            let mut dz = match dh {
                Some(t) => Some([
                    tape.matmul(t[0], w)?,
                    tape.matmul(t[1], w)?,
                    tape.matmul(t[2], w)?,
                ]),
                None => None,
            };
            if let Some(we) = we {
                let ze = tape.matmul(enc, we)?;
                let sum = tape.add(z, ze)?;
                z = tape.scale(sum, SKIP_SCALE);
                if let (Some(d), Some(t)) = (dz.as_mut(), tang) {
                    for c in 0..3 {
                        let te = tape.matmul(t[c], we)?;
                        let sum = tape.add(d[c], te)?;
                        d[c] = tape.scale(sum, SKIP_SCALE);
                    }
                }
            }
            z = tape.add(z, b)?;
            if l == last {
                h = z;
                dh = dz;
            } else {
                let (act, gate) = tape.softplus_gated(z, beta);
                h = act;
                dh = match dz {
                    Some(d) => {
                        Some([
                            tape.mul(d[0], gate)?,
                            tape.mul(d[1], gate)?,
                            tape.mul(d[2], gate)?,
                        ])
                    }
                    None => None,
                };
            }
        }
        Ok(NetOutput { sdf: h, grad: dh })
    }

    /// Writes the checkpoint container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Magic, header length, TOML header, then little-endian `f64` values of
    /// every tensor in [`tensors`](Self::tensors) order with `ln s` last.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            net: self.config,
            scene_box: self.scene_box,
            num_values: self.num_params(),
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let tensors = self.tensors();
        let n = tensors.len();
        for (i, t) in tensors.into_iter().enumerate() {
            for &v in t.iter() {
                let v = if i + 1 == n { v * self.config.sharpness_scale } else { v };
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("checkpoint", m);
        let m = CHECKPOINT_MAGIC.len();
        if bytes.len() < m + 4 || &bytes[..m] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().expect("4 bytes")) as usize;
        let body = m + 4 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[m + 4..body]).map_err(|e| bad(&e.to_string()))?;
        let header: CheckpointHeader =
            toml::from_str(text).map_err(|e| Error::parse("checkpoint header", e))?;
        let mut net = SdfNetwork::new(header.net, header.scene_box, 0)?;
        if net.num_params() != header.num_values || bytes.len() != body + 8 * header.num_values {
            return Err(bad("value count does not match the architecture"));
        }
        let scale = header.net.sharpness_scale;
        let mut values = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = net.tensors_mut();
        let n = tensors.len();
        for (i, t) in tensors.iter_mut().enumerate() {
            for v in t.iter_mut() {
                let raw = values.next().expect("count checked");
                *v = if i + 1 == n { raw / scale } else { raw };
            }
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NSLSDF01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    scene_box: SceneBox,
    num_values: usize,
}

/// Convenience: a `P x 3` matrix from points.
pub fn points_to_mat(points: &[[f64; 3]]) -> Mat {
    Array2::from_shape_fn((points.len(), 3), |(r, c)| points[r][c])
}

/// Elementwise check that two equally shaped matrices are bit-identical.
pub fn same_bits(a: &Mat, b: &Mat) -> bool {
    a.dim() == b.dim() && {
        let mut same = true;
        Zip::from(a).and(b).for_each(|x, y| same &= x.to_bits() == y.to_bits());
        same
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(lo..hi)))
            .collect()
    }

    fn desk_net(seed: u64) -> SdfNetwork {
        SdfNetwork::new(NetConfig::desk(), SceneBox::desk(), seed).unwrap()
    }

    fn sphere_net(seed: u64) -> SdfNetwork {
        let cfg = NetConfig {
            init: InitShape::Sphere { radius: 0.5 },
            ..NetConfig::desk()
        };
        SdfNetwork::new(cfg, SceneBox::desk(), seed).unwrap()
    }

    #[test]
    fn encoding_layout() {
        let cfg = EncodingConfig {
            num_frequencies: 2,
            include_input: true,
        };
        let e = encode([0.0; 3], &cfg);
        assert_eq!(e.len(), 15);
        assert_eq!(&e[3..6], &[0.0; 3]);
        assert_eq!(&e[6..9], &[1.0; 3]);
        assert_eq!(&e[9..12], &[0.0; 3]);
        assert_eq!(&e[12..15], &[1.0; 3]);
        assert_eq!(EncodingConfig::default().dim(), 39);
        let p = [0.3, -0.2, 0.7];
        let deep = encode(p, &EncodingConfig::default());
        for k in 0..6 {
            let f = (1u64 << k) as f64 * PI;
            for c in 0..3 {
                assert!((deep[3 + 6 * k + c] - (f * p[c]).sin()).abs() < 1e-13);
                assert!((deep[6 + 6 * k + c] - (f * p[c]).cos()).abs() < 1e-13);
            }
        }
        let a = encode([0.3, -0.2, 0.7], &cfg);
        let b = encode([2.3, -0.2, 0.7], &cfg);
        for i in 3..15 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_encoding_matches_single_and_its_tangents() {
        let cfg = EncodingConfig::default();
        let pts = random_points(5, 3, -1.0, 1.0);
        let (enc, tang) = encode_batch(&points_to_mat(&pts), &cfg);
        let h = 1e-6;
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(enc.row(r).to_vec(), encode(*p, &cfg));
            for c in 0..3 {
                let mut pp = *p;
                pp[c] += h;
                let mut pm = *p;
                pm[c] -= h;
                let (ep, em) = (encode(pp, &cfg), encode(pm, &cfg));
                for k in 0..cfg.dim() {
                    let fd = (ep[k] - em[k]) / (2.0 * h);
                    assert!((fd - tang[c][[r, k]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn scene_box_maps_center_and_corners() {
        let b = SceneBox::new([1.0, 2.0, 3.0], [0.5, 1.0, 2.0]).unwrap();
        assert_eq!(b.normalize([1.0, 2.0, 3.0]), [0.0; 3]);
        assert_eq!(b.normalize([1.5, 1.0, 5.0]), [1.0, -1.0, 1.0]);
        for p in random_points(100, 4, -5.0, 5.0) {
            let q = b.denormalize(b.normalize(p));
            for i in 0..3 {
                assert!((q[i] - p[i]).abs() < 1e-12);
            }
        }
        assert!(matches!(
            SceneBox::new([0.0; 3], [1.0, 0.0, 1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_shapes_follow_the_skip() {
        let net = desk_net(0);
        let shapes: Vec<_> = net.layers.iter().map(|l| l.w.dim()).collect();
        assert_eq!(shapes, vec![(39, 64), (64, 25), (25, 64), (64, 64), (64, 1)]);
        assert_eq!(net.layers[2].w_enc.as_ref().unwrap().dim(), (39, 64));
        // Two 39x64 input products make this a little over 12k.
        assert_eq!(net.macs_per_point(), 12_352);
        assert!(NetConfig::paper().validate().is_ok());
        let bad = NetConfig {
            skip_layer: 4,
            ..NetConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn geometric_init_approximates_a_sphere() {
        let net = sphere_net(7);
        let pts = random_points(1000, 5, -1.0, 1.0);
        let (f, g) = net.forward_with_grad(&points_to_mat(&pts));
        for (i, p) in pts.iter().enumerate() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((f[i] - (r - 0.5)).abs() < 0.1, "point {p:?}: {} vs {}", f[i], r - 0.5);
            let gn = g.row(i).dot(&g.row(i)).sqrt();
            assert!((0.5..=2.0).contains(&gn), "gradient norm {gn}");
        }
        assert!((net.inv_s() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_level_set_at_init_radius() {
        let net = sphere_net(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..32 {
            let mut d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            d.iter_mut().for_each(|v| *v /= n);
            let f = |t: f64| {
                net.forward(&points_to_mat(&[[d[0] * t, d[1] * t, d[2] * t]]))[0]
            };
            let (mut lo, mut hi) = (0.0, 1.0);
            assert!(f(lo) < 0.0 && f(hi) > 0.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            assert!((lo - 0.5).abs() < 0.1, "crossing at {lo}");
        }
    }

    #[test]
    fn view_sphere_init_gives_one_crossing_per_ray() {
        let net = desk_net(13);
        let InitShape::ViewSphere { center, radius } = net.config.init else {
            panic!("desk init faces the camera");
        };
        assert!((radius - 2.5).abs() < 1e-12);
        assert_eq!(center, [0.0, 0.0, -2.5]);
        let pts = random_points(1000, 14, -1.0, 1.0);
        let (f, g) = net.forward_with_grad(&points_to_mat(&pts));
        for (i, p) in pts.iter().enumerate() {
            let want = net.config.init.target(*p);
            assert!((f[i] - want).abs() < 0.1, "point {p:?}: {} vs {want}", f[i]);
            let gn = g.row(i).dot(&g.row(i)).sqrt();
            assert!((0.5..=2.0).contains(&gn), "gradient norm {gn}");
        }
        // Rays from the camera: positive in front, negative beyond, one sign change.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..32 {
            let (x, y) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let f: Vec<f64> = (0..=40)
                .map(|k| {
                    let t = 0.5 + 0.5 * k as f64 / 40.0;
                    let d = [x * t, y * t, t];
                    net.sdf_world(d)
                })
                .collect();
            assert!(f[0] > 0.0 && f[40] < 0.0);
            assert_eq!(f.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count(), 1);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(desk_net(3), desk_net(3));
        assert_ne!(desk_net(3), desk_net(4));
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut net = desk_net(2);
        // Move away from the near-radial init so the check is not trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in net.tensors_mut() {
            t.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
        }
        let pts = random_points(20, 9, -0.9, 0.9);
        let (_, g) = net.forward_with_grad(&points_to_mat(&pts));
        let h = 1e-6;
        for (i, p) in pts.iter().enumerate() {
            for c in 0..3 {
                let mut pp = *p;
                pp[c] += h;
                let mut pm = *p;
                pm[c] -= h;
                let fd = (net.forward(&points_to_mat(&[pp]))[0]
                    - net.forward(&points_to_mat(&[pm]))[0])
                    / (2.0 * h);
                let an = g[[i, c]];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "{fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn recorded_pass_matches_plain_pass() {
        let net = desk_net(5);
        let x = points_to_mat(&random_points(30, 6, -1.0, 1.0));
        let (f, g) = net.forward_with_grad(&x);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let out = net.record(&mut tape, &vars, &x, true).unwrap();
        let grad = out.grad.unwrap();
        for i in 0..30 {
            assert!((tape.value(out.sdf)[[i, 0]] - f[i]).abs() < 1e-12);
            for c in 0..3 {
                assert!((tape.value(grad[c])[[i, 0]] - g[[i, c]]).abs() < 1e-12);
            }
        }
        let s = net.record_sharpness(&mut tape, &vars);
        assert!((tape.scalar(s) - net.sharpness()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = desk_net(1);
        net.sharpness_raw[[0, 0]] = 0.4321;
        let back = SdfNetwork::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back.config, net.config);
        for (a, b) in back.tensors().iter().zip(net.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        let mut bytes = net.to_bytes();
        bytes.pop();
        assert!(SdfNetwork::from_bytes(&bytes).is_err());
        assert!(SdfNetwork::from_bytes(b"nonsense").is_err());
    }
}
