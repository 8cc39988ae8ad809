//! Depth maps, depth extraction from a trained network and error metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::geometry::{Bounds, DeviceModel, Ray};
use crate::render::{ray_rng, sample_rays, weights, RenderConfig};
use crate::sdf_net::SdfNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    Neural,
    GrayCode,
    PhaseGt,
    Simulator,
    Error,
}

impl DepthSource {
    pub fn tag(&self) -> &'static str {
        match self {
            DepthSource::Neural => "neural",
            DepthSource::GrayCode => "gray-code",
            DepthSource::PhaseGt => "phase-gt",
            DepthSource::Simulator => "simulator",
            DepthSource::Error => "error",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "neural" => DepthSource::Neural,
            "gray-code" => DepthSource::GrayCode,
            "phase-gt" => DepthSource::PhaseGt,
            "simulator" => DepthSource::Simulator,
            "error" => DepthSource::Error,
            _ => return None,
        })
    }
}

/// Per-pixel camera-frame depth in meters; NaN marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub bounds: Bounds,
    pub source: DepthSource,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, bounds: Bounds, source: DepthSource) -> Self {
        assert_eq!(depth.len(), width * height);
        DepthMap {
            width,
            height,
            depth,
            bounds,
            source,
        }
    }

    pub fn invalid(width: usize, height: usize, bounds: Bounds, source: DepthSource) -> Self {
        DepthMap::new(width, height, vec![f64::NAN; width * height], bounds, source)
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        !self.depth[i].is_nan()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| !d.is_nan()).count()
    }

    /// Invalidates every pixel where `keep` is false.
    pub fn masked(mut self, keep: &[bool]) -> Self {
        for (d, &k) in self.depth.iter_mut().zip(keep) {
            if !k {
                *d = f64::NAN;
            }
        }
        self
    }
}

/// Bisection steps after the march brackets a crossing.
pub const BISECTION_STEPS: usize = 30;
/// Rays whose weight sum is below this have no expected depth.
pub const EXPECTED_MIN_WEIGHT: f64 = 1e-3;

fn camera_rays(camera: &DeviceModel, bounds: Bounds, row: usize) -> Result<Vec<Ray>> {
    (0..camera.intrinsics.width)
        .map(|x| camera.pixel_to_ray([x as f64, row as f64], bounds))
        .collect()
}

fn stacked(net: &SdfNetwork, rays: &[Ray], t: impl Fn(usize, usize) -> f64, per_ray: usize) -> Mat {
    Mat::from_shape_fn((rays.len() * per_ray, 3), |(r, c)| {
        let (i, k) = (r / per_ray, r % per_ray);
        net.scene_box.normalize(rays[i].at(t(i, k)).into())[c]
    })
}

/// First positive-to-negative crossing along each ray, `None` without one.
pub fn first_crossings(net: &SdfNetwork, rays: &[Ray], samples_per_ray: usize) -> Vec<Option<f64>> {
    let n = samples_per_ray.max(2);
    let grid = |ray: &Ray, k: usize| ray.t_near + (ray.t_far - ray.t_near) * k as f64 / (n - 1) as f64;
    let f = net.forward(&stacked(net, rays, |i, k| grid(&rays[i], k), n));
    let mut lo = vec![0.0; rays.len()];
    let mut hi = vec![0.0; rays.len()];
    let mut found = vec![false; rays.len()];
    for (i, ray) in rays.iter().enumerate() {
        let fi = &f[i * n..(i + 1) * n];
        if let Some(k) = (0..n - 1).find(|&k| fi[k] > 0.0 && fi[k + 1] <= 0.0) {
            lo[i] = grid(ray, k);
            hi[i] = grid(ray, k + 1);
            found[i] = true;
        }
    }
    let active: Vec<usize> = (0..rays.len()).filter(|&i| found[i]).collect();
    let sub: Vec<Ray> = active.iter().map(|&i| rays[i].clone()).collect();
    for _ in 0..BISECTION_STEPS {
        if active.is_empty() {
            break;
        }
        let mid: Vec<f64> = active.iter().map(|&i| 0.5 * (lo[i] + hi[i])).collect();
        let fm = net.forward(&stacked(net, &sub, |j, _| mid[j], 1));
        for (j, &i) in active.iter().enumerate() {
            if fm[j] > 0.0 {
                lo[i] = mid[j];
            } else {
                hi[i] = mid[j];
            }
        }
    }
    (0..rays.len())
        .map(|i| found[i].then(|| 0.5 * (lo[i] + hi[i])))
        .collect()
}

/// Depth map from the first zero crossing of the SDF along each camera ray:
/// a uniform march brackets the crossing, bisection refines it.
pub fn extract_depth(net: &SdfNetwork, camera: &DeviceModel, bounds: Bounds, samples_per_ray: usize) -> Result<DepthMap> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let rays = camera_rays(camera, bounds, y)?;
            Ok(first_crossings(net, &rays, samples_per_ray)
                .into_iter()
                .zip(&rays)
                .map(|(t, ray)| t.map_or(f64::NAN, |t| camera.depth_of(&ray.at(t))))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(DepthMap::new(w, h, rows.concat(), bounds, DepthSource::Neural))
}

/// Depth of the expected surface point of each ray; rays with a weight sum
/// below [`EXPECTED_MIN_WEIGHT`] are invalid.
pub fn extract_depth_expected(net: &SdfNetwork, camera: &DeviceModel, bounds: Bounds, cfg: &RenderConfig) -> Result<DepthMap> {
    let cfg = RenderConfig { jitter: false, ..*cfg };
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let k = cfg.samples_per_ray();
    let s = net.sharpness();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let rays = camera_rays(camera, bounds, y)?;
            let mut rngs: Vec<_> = (0..rays.len()).map(|x| ray_rng(0, x as u64)).collect();
            let t = sample_rays(net, &rays, &cfg, &mut rngs);
            let f = net.forward(&stacked(net, &rays, |i, j| t[i][j], k));
            Ok(rays
                .iter()
                .enumerate()
                .map(|(i, ray)| {
                    let wts = weights(cfg.mode, &f[i * k..(i + 1) * k], s, &t[i], Bounds::new(ray.t_near, ray.t_far));
                    let total: f64 = wts.iter().sum();
                    if total < EXPECTED_MIN_WEIGHT {
                        return f64::NAN;
                    }
                    let t_bar = wts.iter().zip(&t[i]).map(|(w, t)| w * t).sum::<f64>() / total;
                    camera.depth_of(&ray.at(t_bar))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(DepthMap::new(w, h, rows.concat(), bounds, DepthSource::Neural))
}

/// Mean absolute depth error with its coverage and per-pixel error map.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Report {
    /// Mean over pixels valid in both maps; NaN when there are none.
    pub mean_l1: f64,
    /// Fraction of truth-valid pixels that the estimate also covers.
    pub coverage: f64,
    pub shared: usize,
    pub error_map: DepthMap,
}

pub fn mean_l1(estimate: &DepthMap, truth: &DepthMap) -> Result<L1Report> {
    if (estimate.width, estimate.height) != (truth.width, truth.height) {
        return Err(Error::Domain(format!(
            "depth maps differ in size: {}x{} vs {}x{}",
            estimate.width, estimate.height, truth.width, truth.height
        )));
    }
    let mut err = vec![f64::NAN; truth.depth.len()];
    let mut total = 0.0;
    let mut shared = 0;
    let mut truth_valid = 0;
    for i in 0..truth.depth.len() {
        if !truth.is_valid(i) {
            continue;
        }
        truth_valid += 1;
        if estimate.is_valid(i) {
            let e = (estimate.depth[i] - truth.depth[i]).abs();
            err[i] = e;
            total += e;
            shared += 1;
        }
    }
    Ok(L1Report {
        mean_l1: if shared > 0 { total / shared as f64 } else { f64::NAN },
        coverage: if truth_valid > 0 { shared as f64 / truth_valid as f64 } else { 0.0 },
        shared,
        error_map: DepthMap::new(truth.width, truth.height, err, truth.bounds, DepthSource::Error),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::render::{weights_eq3, stratified};
    use crate::sdf_net::{InitShape, NetConfig, SceneBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(depth: Vec<f64>, w: usize) -> DepthMap {
        let h = depth.len() / w;
        DepthMap::new(w, h, depth, Bounds::default(), DepthSource::Simulator)
    }

    #[test]
    fn identical_maps_score_zero() {
        let d = map(vec![0.6, f64::NAN, 0.7, 0.8], 2);
        let r = mean_l1(&d, &d).unwrap();
        assert_eq!(r.mean_l1, 0.0);
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.shared, 3);
        assert!(r.error_map.depth[1].is_nan());
    }

    #[test]
    fn offset_and_coverage() {
        let truth = map(vec![0.6, 0.7, 0.8, 0.9], 2);
        let est = map(vec![1.6, 1.7, f64::NAN, 1.9], 2);
        let r = mean_l1(&est, &truth).unwrap();
        assert!((r.mean_l1 - 1.0).abs() < 1e-15);
        assert_eq!(r.coverage, 0.75);
        assert!(matches!(mean_l1(&map(vec![0.5; 6], 3), &truth), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_l1_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gen = || (0..48 * 32).map(|_| if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(0.5..1.0) }).collect::<Vec<_>>();
        let (a, b) = (map(gen(), 48), map(gen(), 48));
        let r = mean_l1(&a, &b).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..32 {
            for x in 0..48 {
                let (p, q) = (a.depth[y * 48 + x], b.depth[y * 48 + x]);
                if !p.is_nan() && !q.is_nan() {
                    sum += (p - q).abs();
                    n += 1;
                }
            }
        }
        assert!((r.mean_l1 - sum / n as f64).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&r.coverage));
    }

    /// A network whose zero level set is a sphere of normalized radius 0.5,
    /// i.e. 0.15 m around the box center at z = 0.75.
    fn sphere_net() -> SdfNetwork {
        let config = NetConfig {
            init: InitShape::Sphere { radius: 0.5 },
            ..NetConfig::tiny()
        };
        SdfNetwork::new(config, SceneBox::desk(), 2).unwrap()
    }

    #[test]
    fn crossing_is_a_root_of_the_network() {
        let net = sphere_net();
        let cam = DeviceModel::at_origin(Intrinsics::centered(600.0, 32, 32).unwrap());
        let rays: Vec<Ray> = (0..32).map(|x| cam.pixel_to_ray([x as f64, 16.0], Bounds::default()).unwrap()).collect();
        let hits = first_crossings(&net, &rays, 64);
        let mut valid = 0;
        for (ray, t) in rays.iter().zip(hits) {
            if let Some(t) = t {
                valid += 1;
                assert!(net.sdf_world(ray.at(t).into()).abs() < 1e-6);
                assert!(t > 0.5 && t < 0.75);
            }
        }
        assert!(valid > 0);
        // Rays that only see the outside of the sphere stay invalid.
        let far = cam.pixel_to_ray([0.0, 16.0], Bounds::new(0.5, 0.55)).unwrap();
        assert_eq!(first_crossings(&net, &[far], 64)[0], None);
    }

    #[test]
    fn expected_depth_of_a_sharp_ramp_sits_at_the_crossing() {
        let b = Bounds::default();
        let t = stratified(b, 64, None);
        let bin = 0.5 / 64.0;
        for &crossing in &[0.61, 0.7234, 0.9] {
            // Linear ramp in normalized units with |df/dt| = 1/0.3.
            let f: Vec<f64> = t.iter().map(|t| (crossing - t) / 0.3).collect();
            let w = weights_eq3(&f, 100.0, &t, b);
            let t_bar: f64 = w.iter().zip(&t).map(|(w, t)| w * t).sum();
            assert!((t_bar - crossing).abs() < bin, "{t_bar} vs {crossing}");
        }
    }

    #[test]
    fn extractors_agree_on_the_initial_sphere() {
        let mut net = sphere_net();
        // Sharpen the density so the expected depth is well defined.
        net.sharpness_raw[[0, 0]] = 1000f64.ln() / net.config.sharpness_scale;
        let cam = DeviceModel::at_origin(Intrinsics::centered(120.0, 16, 16).unwrap());
        let roots = extract_depth(&net, &cam, Bounds::default(), 128).unwrap();
        // Normalized weights would split between the entry and exit
        // crossings of the sphere; compositing stops at the entry.
        let cfg = RenderConfig {
            k_coarse: 64,
            k_fine: 64,
            mode: crate::render::WeightMode::Alpha,
            ..RenderConfig::desk()
        };
        let expected = extract_depth_expected(&net, &cam, Bounds::default(), &cfg).unwrap();
        let mut both = 0;
        for i in 0..roots.depth.len() {
            if roots.is_valid(i) && expected.is_valid(i) {
                both += 1;
                assert!((roots.depth[i] - expected.depth[i]).abs() < 2.0 * 0.5 / 64.0);
            }
        }
        assert!(both > 50);
    }
}
