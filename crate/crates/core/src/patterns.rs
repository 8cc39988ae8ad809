//! Projector patterns: multi-scale random binary squares, Gray code with
//! inverse pairs and N-step phase-shift sinusoids, plus Gaussian blur and the
//! bilinear sampler used by both the simulator and the renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest Gray-code bit count supported by the generators and decoders.
pub const MAX_GRAY_BITS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PatternKind {
    RandomBinary { scale: usize, index: usize },
    GrayCode { bit: u32, num_bits: u32 },
    GrayCodeInverse { bit: u32, num_bits: u32 },
    PhaseShift { wavelength: f64, step: usize, steps: usize },
    Constant { value: f32 },
}

/// Projector-space intensity grid, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub kind: PatternKind,
}

/// Result of [`Pattern::sample_bilinear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    /// Derivative of `value` with respect to the sampling coordinates.
    pub grad: [f64; 2],
    /// False when the coordinates fell outside the pattern rectangle and were
    /// clamped to the border.
    pub in_bounds: bool,
}

impl Pattern {
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Pattern {
            width,
            height,
            data: vec![value; width * height],
            kind: PatternKind::Constant { value },
        }
    }

    pub fn from_fn(width: usize, height: usize, kind: PatternKind, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Pattern {
            width,
            height,
            data,
            kind,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear interpolation with texel centers at integer coordinates.
    ///
    /// The gradient is the exact derivative of the bilinear surface inside
    /// the cell `[floor(u), floor(u) + 1] x [floor(v), floor(v) + 1]`; it is
    /// zero along an axis whose coordinate was clamped.
    pub fn sample_bilinear(&self, uv: [f64; 2]) -> Sample {
        let in_bounds = uv[0] >= -0.5
            && uv[0] <= self.width as f64 - 0.5
            && uv[1] >= -0.5
            && uv[1] <= self.height as f64 - 0.5;
        let (x0, fx, gx) = cell(uv[0], self.width);
        let (y0, fy, gy) = cell(uv[1], self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        let value = top + (bottom - top) * fy;
        let du = ((p10 - p00) * (1.0 - fy) + (p11 - p01) * fy) * gx;
        let dv = (bottom - top) * gy;
        Sample {
            value,
            grad: [du, dv],
            in_bounds,
        }
    }

    pub fn same_dims(&self, other: &Pattern) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixelwise complement `1 - p`.
    pub fn inverted(&self, kind: PatternKind) -> Pattern {
        Pattern {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            kind,
        }
    }
}

/// Splits a coordinate into (base texel, fraction, derivative multiplier),
/// clamping to the valid texel range.
fn cell(c: f64, n: usize) -> (usize, f64, f64) {
    let max = (n - 1) as f64;
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    if c <= 0.0 {
        return (0, 0.0, if c == 0.0 { 1.0 } else { 0.0 });
    }
    if c >= max {
        return (n - 2, 1.0, if c == max { 1.0 } else { 0.0 });
    }
    let base = c.floor();
    (base as usize, c - base, 1.0)
}

/// Ordered set of patterns sharing one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub patterns: Vec<Pattern>,
    pub seed: u64,
}

impl PatternSet {
    pub fn new(patterns: Vec<Pattern>, seed: u64) -> Result<Self> {
        if let Some(first) = patterns.first() {
            if patterns.iter().any(|p| !p.same_dims(first)) {
                return Err(Error::Config("patterns in a set must share dimensions".into()));
            }
        }
        Ok(PatternSet { patterns, seed })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.patterns.first().map(|p| (p.width, p.height))
    }

    /// First `n` patterns of the set.
    pub fn prefix(&self, n: usize) -> PatternSet {
        PatternSet {
            patterns: self.patterns[..n.min(self.len())].to_vec(),
            seed: self.seed,
        }
    }

    pub fn blurred(&self, sigma: f64) -> PatternSet {
        PatternSet {
            patterns: self.patterns.iter().map(|p| blur(p, sigma)).collect(),
            seed: self.seed,
        }
    }
}

/// Order in which the multi-scale random patterns are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternOrder {
    /// All patterns of the coarsest scale, then the next scale, ...
    #[default]
    CoarseToFine,
    /// One pattern per scale in turn, so every prefix spans all scales.
    Interleaved,
}

/// Options for [`gen_random_multiscale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPatternSpec {
    pub scales: Vec<usize>,
    pub per_scale: usize,
    pub seed: u64,
    #[serde(default)]
    pub order: PatternOrder,
    /// Generate a band of `height / repeat` rows and tile it vertically.
    #[serde(default)]
    pub vertical_repeat: Option<usize>,
}

impl Default for RandomPatternSpec {
    fn default() -> Self {
        RandomPatternSpec {
            scales: vec![20, 10, 5],
            per_scale: 2,
            seed: 0,
            order: PatternOrder::CoarseToFine,
            vertical_repeat: None,
        }
    }
}

/// Random binary squares at several scales.
///
/// Each pattern draws from its own generator seeded by `(seed, scale index,
/// pattern index)`, so a set with more patterns per scale extends a smaller
/// one instead of replacing it.
pub fn gen_random_multiscale(width: usize, height: usize, spec: &RandomPatternSpec) -> Result<PatternSet> {
    if spec.per_scale == 0 {
        return Err(Error::Domain("per_scale must be at least 1".into()));
    }
    for &s in &spec.scales {
        if s == 0 || s > width.min(height) {
            return Err(Error::Domain(format!(
                "square size {s} must be in 1..={} for a {width}x{height} projector",
                width.min(height)
            )));
        }
    }
    let band_height = match spec.vertical_repeat {
        Some(0) => return Err(Error::Domain("vertical_repeat must be positive".into())),
        Some(r) => height.div_ceil(r),
        None => height,
    };
    let make = |scale_idx: usize, index: usize| -> Pattern {
        let scale = spec.scales[scale_idx];
        let cols = width.div_ceil(scale);
        let rows = band_height.div_ceil(scale);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(((scale_idx as u64) << 32) | index as u64);
        let cells: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.5)).collect();
        Pattern::from_fn(width, height, PatternKind::RandomBinary { scale, index }, |x, y| {
            let yb = y % band_height;
            if cells[(yb / scale) * cols + x / scale] {
                1.0
            } else {
                0.0
            }
        })
    };
    let mut patterns = Vec::with_capacity(spec.scales.len() * spec.per_scale);
    match spec.order {
        PatternOrder::CoarseToFine => {
            for s in 0..spec.scales.len() {
                for i in 0..spec.per_scale {
                    patterns.push(make(s, i));
                }
            }
        }
        PatternOrder::Interleaved => {
            for i in 0..spec.per_scale {
                for s in 0..spec.scales.len() {
                    patterns.push(make(s, i));
                }
            }
        }
    }
    PatternSet::new(patterns, spec.seed)
}

#[inline]
pub fn gray_encode(n: u32) -> u32 {
    n ^ (n >> 1)
}

#[inline]
pub fn gray_decode(g: u32) -> u32 {
    let mut n = g;
    let mut shift = g >> 1;
    while shift != 0 {
        n ^= shift;
        shift >>= 1;
    }
    n
}

/// Index of the Gray-code fringe covering projector column `col`.
///
/// The `2^num_bits` code words are spread uniformly over the projector width,
/// so each fringe is `width / 2^num_bits` columns wide.
pub fn gray_fringe_of_column(col: usize, width: usize, num_bits: u32) -> u32 {
    ((col as u64 * (1u64 << num_bits)) / width as u64) as u32
}

/// Width in projector columns of one Gray-code fringe.
pub fn gray_fringe_width(width: usize, num_bits: u32) -> f64 {
    width as f64 / (1u64 << num_bits) as f64
}

/// Gray-code stripes; bit 0 is the most significant (coarsest) bit. With
/// `with_inverse`, every pattern is immediately followed by its complement.
pub fn gen_gray_code(width: usize, height: usize, num_bits: u32, with_inverse: bool) -> Result<PatternSet> {
    if num_bits == 0 || num_bits > MAX_GRAY_BITS {
        return Err(Error::Domain(format!("num_bits must be in 1..={MAX_GRAY_BITS}")));
    }
    let mut patterns = Vec::new();
    for bit in 0..num_bits {
        let shift = num_bits - 1 - bit;
        let p = Pattern::from_fn(width, height, PatternKind::GrayCode { bit, num_bits }, |x, _| {
            let g = gray_encode(gray_fringe_of_column(x, width, num_bits));
            ((g >> shift) & 1) as f32
        });
        if with_inverse {
            let inv = p.inverted(PatternKind::GrayCodeInverse { bit, num_bits });
            patterns.push(p);
            patterns.push(inv);
        } else {
            patterns.push(p);
        }
    }
    PatternSet::new(patterns, 0)
}

/// `steps` sinusoids `0.5 + 0.5 cos(2 pi x / wavelength - 2 pi k / steps)`.
pub fn gen_phase_shift(width: usize, height: usize, wavelength: f64, steps: usize) -> Result<PatternSet> {
    if wavelength < 4.0 {
        return Err(Error::Domain("wavelength must be at least 4 px".into()));
    }
    if steps < 3 {
        return Err(Error::Domain("phase shifting needs at least 3 steps".into()));
    }
    let patterns = (0..steps)
        .map(|k| {
            let kind = PatternKind::PhaseShift {
                wavelength,
                step: k,
                steps,
            };
            Pattern::from_fn(width, height, kind, |x, _| {
                let phase = std::f64::consts::TAU * (x as f64 / wavelength - k as f64 / steps as f64);
                (0.5 + 0.5 * phase.cos()) as f32
            })
        })
        .collect();
    PatternSet::new(patterns, 0)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror an out-of-range index back into `0..n` (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflective borders; `sigma == 0` is the identity.
pub fn blur(pattern: &Pattern, sigma: f64) -> Pattern {
    if sigma <= 0.0 {
        return pattern.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (pattern.width, pattern.height);
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + j as isize - radius, w);
                acc += kv * pattern.data[y * w + xi] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + j as isize - radius, h);
                acc += kv * tmp[yi * w + x];
            }
            data[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    Pattern {
        width: w,
        height: h,
        data,
        kind: pattern.kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_multiscale_set_has_six_binary_patterns() {
        let set = gen_random_multiscale(320, 200, &RandomPatternSpec::default()).unwrap();
        assert_eq!(set.len(), 6);
        for p in &set.patterns {
            assert!(p.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!((p.width, p.height), (320, 200));
        }
        let ones: usize = set.patterns[5].data.iter().filter(|&&v| v == 1.0).count();
        let frac = ones as f64 / (320.0 * 200.0);
        assert!((0.35..0.65).contains(&frac), "{frac}");
    }

    #[test]
    fn squares_are_constant_within_cells() {
        let spec = RandomPatternSpec {
            scales: vec![10],
            per_scale: 1,
            ..Default::default()
        };
        let p = &gen_random_multiscale(40, 30, &spec).unwrap().patterns[0];
        for y in 0..30 {
            for x in 0..40 {
                assert_eq!(p.get(x, y), p.get(x / 10 * 10, y / 10 * 10));
            }
        }
    }

    #[test]
    fn full_width_scale_gives_horizontal_bands() {
        let spec = RandomPatternSpec {
            scales: vec![16],
            per_scale: 3,
            ..Default::default()
        };
        let set = gen_random_multiscale(16, 48, &spec).unwrap();
        for p in &set.patterns {
            for y in 0..48 {
                assert!((0..16).all(|x| p.get(x, y) == p.get(0, y)));
            }
        }
    }

    #[test]
    fn multiscale_is_deterministic_and_nested() {
        let spec = RandomPatternSpec {
            seed: 42,
            ..Default::default()
        };
        let a = gen_random_multiscale(64, 48, &spec).unwrap();
        let b = gen_random_multiscale(64, 48, &spec).unwrap();
        assert_eq!(a, b);
        let nine = gen_random_multiscale(
            64,
            48,
            &RandomPatternSpec {
                per_scale: 3,
                order: PatternOrder::Interleaved,
                ..spec.clone()
            },
        )
        .unwrap();
        // Interleaved prefix of 6 holds the same patterns as the coarse-to-fine 6-set.
        for p in &a.patterns {
            assert!(nine.prefix(6).patterns.contains(p));
        }
        let other = gen_random_multiscale(64, 48, &RandomPatternSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn vertical_repeat_tiles_band() {
        let spec = RandomPatternSpec {
            scales: vec![5],
            per_scale: 1,
            vertical_repeat: Some(4),
            ..Default::default()
        };
        let p = &gen_random_multiscale(40, 40, &spec).unwrap().patterns[0];
        for y in 0..30 {
            for x in 0..40 {
                assert_eq!(p.get(x, y), p.get(x, y + 10));
            }
        }
    }

    #[test]
    fn oversized_scale_is_domain_error() {
        let spec = RandomPatternSpec {
            scales: vec![300],
            ..Default::default()
        };
        assert!(matches!(gen_random_multiscale(320, 200, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn gray_code_values() {
        assert_eq!(gray_encode(5), 7);
        assert_eq!(gray_encode(12), 10);
        assert_eq!(gray_decode(7), 5);
        for n in 0..(1u32 << MAX_GRAY_BITS) {
            assert_eq!(gray_decode(gray_encode(n)), n);
            if n > 0 {
                assert_eq!((gray_encode(n) ^ gray_encode(n - 1)).count_ones(), 1);
            }
        }
    }

    #[test]
    fn gray_patterns_encode_columns() {
        let bits = 5;
        let set = gen_gray_code(64, 4, bits, true).unwrap();
        assert_eq!(set.len(), 10);
        for x in 0..64 {
            let mut g = 0;
            for b in 0..bits as usize {
                let p = &set.patterns[2 * b];
                let inv = &set.patterns[2 * b + 1];
                assert_eq!(p.get(x, 2) + inv.get(x, 2), 1.0);
                g = (g << 1) | p.get(x, 0) as u32;
            }
            assert_eq!(gray_decode(g), x as u32 / 2);
        }
    }

    #[test]
    fn phase_shift_values_and_recovery() {
        let set = gen_phase_shift(64, 2, 16.0, 4).unwrap();
        let at0: Vec<f32> = set.patterns.iter().map(|p| p.get(0, 0)).collect();
        let expected = [1.0, 0.5, 0.0, 0.5];
        for (a, e) in at0.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6);
        }
        for p in &set.patterns {
            assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Closed-form 4-step inversion on noiseless analytic intensities.
        for c in 0..64 {
            let i: Vec<f64> = (0..4)
                .map(|k| {
                    0.5 + 0.5 * (std::f64::consts::TAU * (c as f64 / 16.0 - k as f64 / 4.0)).cos()
                })
                .collect();
            let phi = (i[1] - i[3]).atan2(i[0] - i[2]).rem_euclid(std::f64::consts::TAU);
            let truth = (std::f64::consts::TAU * c as f64 / 16.0).rem_euclid(std::f64::consts::TAU);
            let d = (phi - truth).abs();
            assert!(d.min(std::f64::consts::TAU - d) < 1e-9);
        }
    }

    #[test]
    fn blur_identity_constant_and_mass() {
        let spec = RandomPatternSpec::default();
        let p = gen_random_multiscale(80, 60, &spec).unwrap().patterns[0].clone();
        assert_eq!(blur(&p, 0.0), p);

        let c = Pattern::constant(30, 20, 0.37);
        let bc = blur(&c, 1.7);
        assert!(bc.data.iter().all(|v| (*v as f64 - 0.37f32 as f64).abs() < 1e-6));

        // An interior blob keeps its total intensity.
        let blob = Pattern::from_fn(60, 60, PatternKind::Constant { value: 0.0 }, |x, y| {
            if (25..35).contains(&x) && (20..30).contains(&y) {
                0.8
            } else {
                0.0
            }
        });
        let b = blur(&blob, 1.5);
        let s0: f64 = blob.data.iter().map(|&v| v as f64).sum();
        let s1: f64 = b.data.iter().map(|&v| v as f64).sum();
        assert!(((s1 - s0) / s0).abs() < 1e-6, "{s0} {s1}");
    }

    #[test]
    fn bilinear_examples() {
        let p = Pattern::from_fn(4, 3, PatternKind::Constant { value: 0.0 }, |x, y| (x * 2 + y) as f32 * 0.1);
        let s = p.sample_bilinear([1.0, 1.0]);
        assert!((s.value - p.get(1, 1) as f64).abs() < 1e-12);
        assert!((s.grad[0] - (p.get(2, 1) - p.get(1, 1)) as f64).abs() < 1e-7);
        assert!((s.grad[1] - (p.get(1, 2) - p.get(1, 1)) as f64).abs() < 1e-7);
        assert!(s.in_bounds);

        let two = Pattern::from_fn(2, 1, PatternKind::Constant { value: 0.0 }, |x, _| x as f32);
        assert!((two.sample_bilinear([0.5, 0.0]).value - 0.5).abs() < 1e-12);

        let out = p.sample_bilinear([-3.0, 1.0]);
        assert!(!out.in_bounds);
        assert!((out.value - p.get(0, 1) as f64).abs() < 1e-12);
        assert_eq!(out.grad[0], 0.0);
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let p = blur(
            &gen_random_multiscale(40, 30, &RandomPatternSpec { scales: vec![3], per_scale: 1, ..Default::default() })
                .unwrap()
                .patterns[0],
            1.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..500 {
            let u: f64 = rng.gen_range(0.0..38.0);
            let v: f64 = rng.gen_range(0.0..28.0);
            // Stay away from cell boundaries.
            if (u - u.round()).abs() < 1e-3 || (v - v.round()).abs() < 1e-3 {
                continue;
            }
            let s = p.sample_bilinear([u, v]);
            let du = (p.sample_bilinear([u + h, v]).value - p.sample_bilinear([u - h, v]).value) / (2.0 * h);
            let dv = (p.sample_bilinear([u, v + h]).value - p.sample_bilinear([u, v - h]).value) / (2.0 * h);
            assert!((s.grad[0] - du).abs() < 1e-6, "{} {}", s.grad[0], du);
            assert!((s.grad[1] - dv).abs() < 1e-6);
        }
    }
}
