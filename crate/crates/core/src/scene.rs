//! Analytic scenes standing in for the physical capture setup.
//!
//! A scene is a min-union of exact primitive SDFs. Rendering a capture traces
//! the camera ray to the first surface, checks whether the projector sees that
//! point, and writes `I_i = a0 + b0 * P_i(pi(x)) + noise` per pattern.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthSource};
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Ray, Rig};
use crate::patterns::PatternSet;

/// Sphere tracing stops once the distance bound falls below this (meters).
pub const TRACE_EPS: f64 = 1e-6;
const MAX_TRACE_STEPS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Primitive {
    /// Half-space `dot(normal, x - point) <= 0` is solid.
    Plane { point: [f64; 3], normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Oriented box; `rotation` maps world to box axes (row-major).
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        rotation: Option<[f64; 9]>,
    },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane { point, normal } => {
                let n = Vector3::from(*normal).normalize();
                n.dot(&(p - Vector3::from(*point)))
            }
            Primitive::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Primitive::Box {
                center,
                half_extents,
                rotation,
            } => {
                let mut local = p - Vector3::from(*center);
                if let Some(r) = rotation {
                    local = Matrix3::from_row_slice(r) * local;
                }
                let q = local.abs() - Vector3::from(*half_extents);
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
        }
    }
}

/// Illumination model applied to lit points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightModel {
    /// `I = a0 + b0 * P`: every lit point has the same contrast.
    #[default]
    Linear,
    /// Contrast scaled by the incidence cosine and inverse-square distance
    /// (relative to 0.75 m) from the projector.
    Falloff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    /// Background level `a0` in `[0, 1)`.
    pub ambient: f64,
    /// Fringe contrast `b0` in `(0, 1 - a0]`.
    pub contrast: f64,
    #[serde(default)]
    pub light: LightModel,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, ambient: f64, contrast: f64) -> Result<Self> {
        let s = AnalyticScene {
            primitives,
            ambient,
            contrast,
            light: LightModel::Linear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        if !(0.0..1.0).contains(&self.ambient) {
            return Err(Error::Config(format!("ambient {} outside [0, 1)", self.ambient)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0 - self.ambient + 1e-12) {
            return Err(Error::Config(format!(
                "contrast {} outside (0, 1 - ambient]",
                self.contrast
            )));
        }
        Ok(())
    }

    /// Reference desk scene: a wall at z = 0.9 m and a 0.1 m sphere at 0.75 m.
    pub fn reference() -> Self {
        AnalyticScene::new(
            vec![
                Primitive::Plane {
                    point: [0.0, 0.0, 0.9],
                    normal: [0.0, 0.0, -1.0],
                },
                Primitive::Sphere {
                    center: [0.0, 0.0, 0.75],
                    radius: 0.1,
                },
            ],
            0.1,
            0.8,
        )
        .unwrap()
    }

    /// Wall-only variant of the reference scene.
    pub fn plane_only(z: f64) -> Self {
        AnalyticScene::new(
            vec![Primitive::Plane {
                point: [0.0, 0.0, z],
                normal: [0.0, 0.0, -1.0],
            }],
            0.1,
            0.8,
        )
        .unwrap()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: AnalyticScene = toml::from_str(text).map_err(|e| Error::parse("scene", e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene serializes")
    }
}

pub fn scene_sdf(scene: &AnalyticScene, p: &Vector3<f64>) -> f64 {
    scene
        .primitives
        .iter()
        .map(|prim| prim.sdf(p))
        .fold(f64::INFINITY, f64::min)
}

/// Outward unit normal from central differences of the scene SDF.
pub fn scene_normal(scene: &AnalyticScene, p: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-6;
    let g = Vector3::new(
        scene_sdf(scene, &(p + Vector3::x() * h)) - scene_sdf(scene, &(p - Vector3::x() * h)),
        scene_sdf(scene, &(p + Vector3::y() * h)) - scene_sdf(scene, &(p - Vector3::y() * h)),
        scene_sdf(scene, &(p + Vector3::z() * h)) - scene_sdf(scene, &(p - Vector3::z() * h)),
    );
    g.normalize()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
}

/// Marches `t <- t + sdf` from `t_near` until the bound drops below
/// [`TRACE_EPS`], then polishes the root with a few Newton steps.
pub fn sphere_trace(scene: &AnalyticScene, ray: &Ray) -> Option<Hit> {
    let mut t = ray.t_near;
    for _ in 0..MAX_TRACE_STEPS {
        let d = scene_sdf(scene, &ray.at(t));
        if d < TRACE_EPS {
            let t = polish_root(scene, ray, t, d);
            return Some(Hit { t, point: ray.at(t) });
        }
        t += d;
        if t > ray.t_far {
            return None;
        }
    }
    None
}

fn polish_root(scene: &AnalyticScene, ray: &Ray, t0: f64, d0: f64) -> f64 {
    if d0 <= 0.0 {
        return t0;
    }
    let (mut t, mut d) = (t0, d0);
    for _ in 0..8 {
        let h = 1e-7;
        let slope = (scene_sdf(scene, &ray.at(t + h)) - scene_sdf(scene, &ray.at(t - h))) / (2.0 * h);
        if slope > -1e-3 {
            break;
        }
        let next = t - d / slope;
        if (next - t0).abs() > 1e-4 {
            break;
        }
        t = next;
        d = scene_sdf(scene, &ray.at(t));
        if d.abs() < 1e-14 {
            break;
        }
    }
    t
}

/// Captured images and the per-pixel photometric model derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub width: usize,
    pub height: usize,
    /// One row-major image per pattern, values in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    /// Per-pixel background level `a = min_i I_i`.
    pub a_map: Vec<f64>,
    /// Per-pixel fringe contrast `b = max_i I_i - a`.
    pub b_map: Vec<f64>,
    pub noise_sigma: f64,
}

impl CaptureSet {
    pub fn from_images(width: usize, height: usize, images: Vec<Vec<f64>>, noise_sigma: f64) -> Result<Self> {
        if images.iter().any(|im| im.len() != width * height) {
            return Err(Error::Config("image size does not match capture resolution".into()));
        }
        let (a_map, b_map) = estimate_ab(&images)?;
        Ok(CaptureSet {
            width,
            height,
            images,
            a_map,
            b_map,
            noise_sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` images with `a`/`b` re-estimated from them.
    pub fn prefix(&self, n: usize) -> Result<CaptureSet> {
        CaptureSet::from_images(self.width, self.height, self.images[..n].to_vec(), self.noise_sigma)
    }

    /// Appends one image and re-estimates `a`/`b` over the enlarged set.
    pub fn push_image(&mut self, image: Vec<f64>) -> Result<()> {
        if image.len() != self.width * self.height {
            return Err(Error::Config("image size does not match capture resolution".into()));
        }
        self.images.push(image);
        let (a, b) = estimate_ab(&self.images)?;
        self.a_map = a;
        self.b_map = b;
        Ok(())
    }
}

/// Per-pixel `a = min_i I_i`, `b = max_i I_i - a`.
pub fn estimate_ab(images: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if images.len() < 2 {
        return Err(Error::Domain("estimating a/b needs at least two images".into()));
    }
    let n = images[0].len();
    let mut lo = images[0].clone();
    let mut hi = images[0].clone();
    for im in &images[1..] {
        if im.len() != n {
            return Err(Error::Config("images differ in size".into()));
        }
        for i in 0..n {
            lo[i] = lo[i].min(im[i]);
            hi[i] = hi[i].max(im[i]);
        }
    }
    let b = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
    Ok((lo, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub noise_sigma: f64,
    pub seed: u64,
    /// Offset of shadow rays along the surface normal, meters.
    pub shadow_offset: f64,
    pub bounds: Bounds,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            noise_sigma: 0.01,
            seed: 0,
            shadow_offset: 1e-4,
            bounds: Bounds::default(),
        }
    }
}

/// Output of [`render_captures`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub captures: CaptureSet,
    /// Camera-frame depth of the first surface per pixel.
    pub truth: DepthMap,
    /// True projector coordinates of each lit pixel's surface point.
    pub projector_uv: Vec<Option<[f64; 2]>>,
}

impl Simulation {
    pub fn lit_mask(&self) -> Vec<bool> {
        self.projector_uv.iter().map(|p| p.is_some()).collect()
    }
}

/// Standard normal draw that depends only on `(seed, pixel, image)`.
fn pixel_noise(seed: u64, pixel: usize, image: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng.set_word_pos(image as u128 * 16);
    rng.sample(StandardNormal)
}

struct PixelTruth {
    depth: f64,
    /// Projector coordinates and contrast of a lit surface point.
    lit: Option<([f64; 2], f64)>,
}

fn trace_pixel(scene: &AnalyticScene, rig: &Rig, opts: &SimOptions, x: usize, y: usize) -> Result<PixelTruth> {
    let ray = rig.camera.pixel_to_ray([x as f64, y as f64], opts.bounds)?;
    let Some(hit) = sphere_trace(scene, &ray) else {
        return Ok(PixelTruth {
            depth: f64::NAN,
            lit: None,
        });
    };
    let depth = rig.camera.depth_of(&hit.point);
    let normal = scene_normal(scene, &hit.point);
    let unlit = PixelTruth { depth, lit: None };

    let Ok(uv) = rig.projector.project(&hit.point) else {
        return Ok(unlit);
    };
    if !rig.projector.intrinsics.contains(uv) {
        return Ok(unlit);
    }
    let start = hit.point + normal * opts.shadow_offset;
    let to_proj = rig.projector.center() - start;
    let dist = to_proj.norm();
    if normal.dot(&to_proj) <= 0.0 {
        return Ok(unlit);
    }
    let shadow_ray = Ray::new(start, to_proj, 1e-9, dist)?;
    if sphere_trace(scene, &shadow_ray).is_some() {
        return Ok(unlit);
    }
    let contrast = match scene.light {
        LightModel::Linear => scene.contrast,
        LightModel::Falloff => {
            let cos = normal.dot(&to_proj) / dist;
            let d_ref = 0.75;
            (scene.contrast * cos * (d_ref / dist).powi(2)).min(scene.contrast)
        }
    };
    Ok(PixelTruth {
        depth,
        lit: Some((uv, contrast)),
    })
}

/// Synthesizes one capture per pattern plus ground-truth depth.
pub fn render_captures(
    scene: &AnalyticScene,
    rig: &Rig,
    patterns: &PatternSet,
    opts: &SimOptions,
) -> Result<Simulation> {
    let pk = &rig.projector.intrinsics;
    if patterns.resolution() != Some((pk.width, pk.height)) {
        return Err(Error::Config(format!(
            "pattern resolution {:?} does not match projector {}x{}",
            patterns.resolution(),
            pk.width,
            pk.height
        )));
    }
    let (w, h) = (rig.camera.intrinsics.width, rig.camera.intrinsics.height);
    let truths: Vec<PixelTruth> = (0..w * h)
        .into_par_iter()
        .map(|i| trace_pixel(scene, rig, opts, i % w, i / w))
        .collect::<Result<_>>()?;

    let n = patterns.len();
    let images: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let pattern = &patterns.patterns[k];
            truths
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    let clean = match t.lit {
                        Some((uv, b)) => scene.ambient + b * pattern.sample_bilinear(uv).value,
                        None => scene.ambient,
                    };
                    let noisy = if opts.noise_sigma > 0.0 {
                        clean + opts.noise_sigma * pixel_noise(opts.seed, i, k)
                    } else {
                        clean
                    };
                    noisy.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();

    let captures = if n >= 2 {
        CaptureSet::from_images(w, h, images, opts.noise_sigma)?
    } else {
        let a_map = images.first().cloned().unwrap_or_else(|| vec![scene.ambient; w * h]);
        CaptureSet {
            width: w,
            height: h,
            images,
            a_map,
            b_map: vec![0.0; w * h],
            noise_sigma: opts.noise_sigma,
        }
    };
    let truth = DepthMap::new(
        w,
        h,
        truths.iter().map(|t| t.depth).collect(),
        opts.bounds,
        DepthSource::Simulator,
    );
    Ok(Simulation {
        captures,
        truth,
        projector_uv: truths.iter().map(|t| t.lit.map(|(uv, _)| uv)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{gen_random_multiscale, Pattern, RandomPatternSpec};
    use rand::Rng;

    #[test]
    fn sdf_examples() {
        let s = Primitive::Sphere {
            center: [0.0, 0.0, 0.75],
            radius: 0.25,
        };
        assert!((s.sdf(&Vector3::zeros()) - 0.5).abs() < 1e-15);
        let p = Primitive::Plane {
            point: [0.0, 0.0, 0.9],
            normal: [0.0, 0.0, -1.0],
        };
        assert_eq!(p.sdf(&Vector3::new(0.3, -0.2, 0.9)), 0.0);
        let b = Primitive::Box {
            center: [0.0; 3],
            half_extents: [1.0, 2.0, 3.0],
            rotation: None,
        };
        assert!((b.sdf(&Vector3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((b.sdf(&Vector3::new(0.0, 0.0, 0.0)) + 1.0).abs() < 1e-15);
    }

    fn mixed_scene() -> AnalyticScene {
        let mut s = AnalyticScene::reference();
        s.primitives.push(Primitive::Box {
            center: [0.1, 0.05, 0.7],
            half_extents: [0.03, 0.04, 0.05],
            rotation: Some(
                nalgebra::Rotation3::from_euler_angles(0.3, 0.2, 0.1)
                    .into_inner()
                    .transpose()
                    .as_slice()
                    .try_into()
                    .unwrap(),
            ),
        });
        s
    }

    #[test]
    fn sdf_gradient_has_unit_norm() {
        let scene = mixed_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 1000 {
            let p = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.4..1.1));
            // Skip points near union seams or box edges where the field has kinks.
            let vals: Vec<f64> = scene.primitives.iter().map(|q| q.sdf(&p)).collect();
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted[1] - sorted[0] < 1e-3 {
                continue;
            }
            let grad = Vector3::new(
                scene_sdf(&scene, &(p + Vector3::x() * h)) - scene_sdf(&scene, &(p - Vector3::x() * h)),
                scene_sdf(&scene, &(p + Vector3::y() * h)) - scene_sdf(&scene, &(p - Vector3::y() * h)),
                scene_sdf(&scene, &(p + Vector3::z() * h)) - scene_sdf(&scene, &(p - Vector3::z() * h)),
            ) / (2.0 * h);
            let norm = grad.norm();
            // Box exterior near an edge/corner region is still unit-gradient; the
            // interior near the medial axis is not, so skip those.
            if (norm - 1.0).abs() > 1e-6 {
                let inside_box = vals[2] < 0.0;
                assert!(inside_box, "gradient norm {norm} at {p:?}");
                continue;
            }
            checked += 1;
        }
    }

    #[test]
    fn sphere_trace_examples() {
        let scene = AnalyticScene::new(
            vec![Primitive::Sphere {
                center: [0.0, 0.0, 0.75],
                radius: 0.25,
            }],
            0.1,
            0.8,
        )
        .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::z(), 0.1, 2.0).unwrap();
        let hit = sphere_trace(&scene, &ray).unwrap();
        assert!((hit.t - 0.5).abs() < 1e-5);
        let away = Ray::new(Vector3::zeros(), -Vector3::z(), 0.1, 2.0).unwrap();
        assert!(sphere_trace(&scene, &away).is_none());
    }

    #[test]
    fn plane_hits_match_closed_form() {
        let scene = AnalyticScene::plane_only(0.8);
        let rig = Rig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let px = [rng.gen_range(0.0..319.0), rng.gen_range(0.0..255.0)];
            let ray = rig.camera.pixel_to_ray(px, Bounds::default()).unwrap();
            let hit = sphere_trace(&scene, &ray).unwrap();
            let t_exact = 0.8 / ray.direction.z;
            assert!((hit.t - t_exact).abs() < 1e-6, "{} vs {}", hit.t, t_exact);
        }
    }

    #[test]
    fn estimate_ab_examples() {
        let (a, b) = estimate_ab(&[vec![0.2], vec![0.5], vec![0.8]]).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-15 && (b[0] - 0.6).abs() < 1e-15);
        let (a, b) = estimate_ab(&[vec![0.3], vec![0.3]]).unwrap();
        assert_eq!((a[0], b[0]), (0.3, 0.0));
        assert!(estimate_ab(&[vec![0.3]]).is_err());
    }

    fn constant_set(value: f32, n: usize) -> PatternSet {
        PatternSet::new((0..n).map(|_| Pattern::constant(320, 200, value)).collect(), 0).unwrap()
    }

    #[test]
    fn constant_white_pattern_reads_a_plus_b() {
        let scene = AnalyticScene::reference();
        let rig = Rig::desk();
        let opts = SimOptions {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let sim = render_captures(&scene, &rig, &constant_set(1.0, 2), &opts).unwrap();
        for (i, uv) in sim.projector_uv.iter().enumerate() {
            let v = sim.captures.images[0][i];
            if uv.is_some() {
                assert!((v - 0.9).abs() < 1e-12);
            } else {
                assert!((v - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shadows_are_constant_and_masked() {
        let scene = AnalyticScene::reference();
        let rig = Rig::desk();
        let patterns = gen_random_multiscale(320, 200, &RandomPatternSpec::default()).unwrap();
        let opts = SimOptions {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let sim = render_captures(&scene, &rig, &patterns, &opts).unwrap();
        let mut shadowed = 0;
        for i in 0..sim.projector_uv.len() {
            if sim.truth.is_valid(i) && sim.projector_uv[i].is_none() {
                shadowed += 1;
                assert!(sim.captures.images.iter().all(|im| (im[i] - 0.1).abs() < 1e-15));
                assert_eq!(sim.captures.b_map[i], 0.0);
            }
        }
        assert!(shadowed > 100, "reference scene should cast a visible shadow");

        // Binary patterns: max - min equals b0 where both values are sampled.
        let mut full = 0;
        for (i, uv) in sim.projector_uv.iter().enumerate() {
            let Some(uv) = uv else { continue };
            let vals: Vec<f64> = patterns.patterns.iter().map(|p| p.sample_bilinear(*uv).value).collect();
            let has0 = vals.iter().any(|&v| v == 0.0);
            let has1 = vals.iter().any(|&v| v == 1.0);
            if has0 && has1 {
                assert!((sim.captures.b_map[i] - 0.8).abs() < 1e-12);
                assert!((sim.captures.a_map[i] - 0.1).abs() < 1e-12);
                full += 1;
            }
        }
        assert!(full > 10_000);
    }

    #[test]
    fn resolution_mismatch_is_config_error() {
        let scene = AnalyticScene::reference();
        let rig = Rig::desk();
        let bad = PatternSet::new(vec![Pattern::constant(100, 100, 1.0)], 0).unwrap();
        assert!(matches!(
            render_captures(&scene, &rig, &bad, &SimOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noisy_capture_is_reproducible_and_bounded() {
        let scene = AnalyticScene::reference();
        let rig = Rig::desk().scaled(0.25).unwrap();
        let patterns = gen_random_multiscale(80, 50, &RandomPatternSpec { scales: vec![5, 2], ..Default::default() }).unwrap();
        let opts = SimOptions {
            noise_sigma: 0.02,
            seed: 9,
            ..Default::default()
        };
        let a = render_captures(&scene, &rig, &patterns, &opts).unwrap();
        let b = render_captures(&scene, &rig, &patterns, &opts).unwrap();
        assert_eq!(a.captures, b.captures);
        for i in 0..a.captures.a_map.len() {
            assert!(a.captures.a_map[i] >= 0.0 && a.captures.b_map[i] >= 0.0);
            assert!(a.captures.a_map[i] + a.captures.b_map[i] <= 1.0 + 3.0 * 0.02 + 1e-12);
        }
        // Noise for an image does not depend on how many images were rendered.
        let fewer = render_captures(&scene, &rig, &patterns.prefix(2), &opts).unwrap();
        assert_eq!(fewer.captures.images[1], a.captures.images[1]);
    }

    #[test]
    fn push_image_matches_batch_estimate() {
        let imgs = vec![vec![0.2, 0.4, 0.9], vec![0.5, 0.1, 0.9], vec![0.3, 0.7, 0.1]];
        let mut inc = CaptureSet::from_images(3, 1, imgs[..2].to_vec(), 0.0).unwrap();
        inc.push_image(imgs[2].clone()).unwrap();
        let full = CaptureSet::from_images(3, 1, imgs.clone(), 0.0).unwrap();
        assert_eq!(inc.a_map, full.a_map);
        assert_eq!(inc.b_map, full.b_map);
        let before = inc.clone();
        inc.push_image(imgs[0].clone()).unwrap();
        assert_eq!(before.a_map, inc.a_map);
        assert_eq!(before.b_map, inc.b_map);
    }

    #[test]
    fn scene_file_round_trip() {
        let s = mixed_scene();
        let back = AnalyticScene::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, back);
        assert!(AnalyticScene::from_toml("ambient = 0.1\ncontrast = 0.8\nprimitives = []\n").is_err());
    }
}
