//! Classical structured-light decoders: Gray code with a fixed threshold or
//! inverse pairs, N-step phase shifting, phase unwrapping by Gray code and
//! triangulation of the resulting correspondences.
//!
//! Gray bits are compared per pixel against the `a + b/2` midpoint (fixed
//! threshold) or against the inverse capture. The decoded fringe is refined
//! to a sub-pixel column from the soft values of the bits that flip at its
//! boundaries: under bilinear projection those values move linearly between
//! the two boundary texels.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::depth::{DepthMap, DepthSource};
use crate::error::{Error, Result};
use crate::geometry::{triangulate, Bounds, Rig};
use crate::patterns::{gray_decode, Pattern, PatternKind, PatternSet};

/// Fringe contrast below which a pixel carries no code.
pub const DEFAULT_B_FLOOR: f64 = 0.02;
/// Soft-bit offset from a fringe edge needed before the column leaves the
/// fringe center.
const EDGE_THRESHOLD: f64 = 0.05;
/// Largest accepted gap between the phase column and the Gray column, as a
/// fraction of the wavelength.
const UNWRAP_TOLERANCE: f64 = 0.25;

/// Projector column per camera pixel, NaN where undecodable.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub width: usize,
    pub height: usize,
    pub column: Vec<f64>,
    /// Smallest distance of any bit from its decision threshold.
    pub margin: Vec<f64>,
}

impl Correspondence {
    pub fn invalid(width: usize, height: usize) -> Self {
        Correspondence {
            width,
            height,
            column: vec![f64::NAN; width * height],
            margin: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        !self.column[i].is_nan()
    }

    pub fn valid_count(&self) -> usize {
        self.column.iter().filter(|c| !c.is_nan()).count()
    }
}

/// Texel values of each Gray bit along a projector row, and the column run
/// covered by each fringe.
struct GrayLayout {
    bits: Vec<Vec<f64>>,
    runs: Vec<Option<(usize, usize)>>,
}

impl GrayLayout {
    fn new(patterns: &[&Pattern], num_bits: u32) -> Self {
        let width = patterns[0].width;
        let bits: Vec<Vec<f64>> = patterns
            .iter()
            .map(|p| (0..width).map(|x| f64::from(p.get(x, 0))).collect())
            .collect();
        let mut runs = vec![None; 1 << num_bits];
        for x in 0..width {
            let code = bits.iter().fold(0u32, |acc, b| (acc << 1) | u32::from(b[x] > 0.5));
            let run: &mut Option<(usize, usize)> = &mut runs[gray_decode(code) as usize];
            *run = Some(run.map_or((x, x), |(lo, _)| (lo, x)));
        }
        GrayLayout { bits, runs }
    }

    fn width(&self) -> usize {
        self.bits[0].len()
    }

    /// Mean interpolation fraction over the bits that change between texels
    /// `x0` and `x0 + 1` but not across `other`, the opposite edge of the run.
    fn edge_fraction(&self, soft: &[f64], x0: usize, other: Option<usize>) -> Option<f64> {
        let flips = |row: &[f64], at: usize| (row[at + 1] - row[at]).abs() > 0.5;
        let mut sum = 0.0;
        let mut n = 0;
        for (k, row) in self.bits.iter().enumerate() {
            if flips(row, x0) && !other.is_some_and(|o| flips(row, o)) {
                sum += (soft[k] - row[x0]) / (row[x0 + 1] - row[x0]);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Sub-pixel column from soft bits, `None` for an unused code word.
    fn column(&self, soft: &[f64]) -> Option<f64> {
        let code = soft.iter().fold(0u32, |acc, &m| (acc << 1) | u32::from(m > 0.5));
        let (lo, hi) = self.runs[gray_decode(code) as usize]?;
        let left_edge = (lo > 0).then(|| lo - 1);
        let right_edge = (hi + 1 < self.width()).then_some(hi);
        let left = left_edge
            .and_then(|e| self.edge_fraction(soft, e, right_edge))
            .map(|s| s.clamp(0.5, 1.0));
        let right = right_edge
            .and_then(|e| self.edge_fraction(soft, e, left_edge))
            .map(|s| s.clamp(0.0, 0.5));
        let dev_left = left.map_or(0.0, |s| 1.0 - s);
        let dev_right = right.unwrap_or(0.0);
        Some(if dev_left.max(dev_right) <= EDGE_THRESHOLD {
            0.5 * (lo + hi) as f64
        } else if dev_left >= dev_right {
            (lo - 1) as f64 + left.expect("left edge")
        } else {
            hi as f64 + right.expect("right edge")
        })
    }
}

/// Gray patterns in decoding order, checking the set layout.
fn gray_patterns(patterns: &PatternSet, with_inverse: bool) -> Result<(Vec<&Pattern>, u32)> {
    let stride = if with_inverse { 2 } else { 1 };
    if patterns.is_empty() || patterns.len() % stride != 0 {
        return Err(Error::Config(format!(
            "{} patterns cannot form a Gray sequence{}",
            patterns.len(),
            if with_inverse { " with inverse pairs" } else { "" }
        )));
    }
    let n = (patterns.len() / stride) as u32;
    let mut out = Vec::new();
    for (i, p) in patterns.patterns.iter().enumerate() {
        let k = (i / stride) as u32;
        let ok = match (p.kind, i % stride) {
            (PatternKind::GrayCode { bit, num_bits }, 0) => bit == k && num_bits == n,
            (PatternKind::GrayCodeInverse { bit, num_bits }, 1) => bit == k && num_bits == n,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!("pattern {i} ({:?}) breaks the Gray sequence", p.kind)));
        }
        if i % stride == 0 {
            out.push(p);
        }
    }
    Ok((out, n))
}

fn check_images(images: &[Vec<f64>], expected: usize, pixels: usize) -> Result<()> {
    if images.len() != expected {
        return Err(Error::Config(format!("expected {expected} images, got {}", images.len())));
    }
    if images.iter().any(|im| im.len() != pixels) {
        return Err(Error::Config("images differ in size".into()));
    }
    Ok(())
}

/// Soft bits `(I - a) / b` and hard bits `I > a + b/2`, indexed `[bit][pixel]`.
pub fn gray_bits_fixed(images: &[Vec<f64>], a_map: &[f64], b_map: &[f64]) -> Vec<Vec<bool>> {
    images
        .iter()
        .map(|im| (0..im.len()).map(|p| im[p] > a_map[p] + 0.5 * b_map[p]).collect())
        .collect()
}

/// Hard bits `I > I_inv` from alternating pattern/inverse captures.
pub fn gray_bits_inverse(images: &[Vec<f64>]) -> Vec<Vec<bool>> {
    images
        .chunks(2)
        .map(|pair| (0..pair[0].len()).map(|p| pair[0][p] > pair[1][p]).collect())
        .collect()
}

fn decode_with(
    width: usize,
    height: usize,
    layout: &GrayLayout,
    b_map: &[f64],
    b_floor: f64,
    soft_of: impl Fn(usize) -> (Vec<f64>, f64) + Sync,
) -> Correspondence {
    let (column, margin): (Vec<f64>, Vec<f64>) = (0..width * height)
        .into_par_iter()
        .map(|p| {
            if !(b_map[p] >= b_floor) {
                return (f64::NAN, 0.0);
            }
            let (soft, margin) = soft_of(p);
            (layout.column(&soft).unwrap_or(f64::NAN), margin)
        })
        .unzip();
    Correspondence {
        width,
        height,
        column,
        margin,
    }
}

/// Gray code against the per-pixel `a + b/2` midpoint.
pub fn decode_gray_fixed(
    width: usize,
    height: usize,
    images: &[Vec<f64>],
    patterns: &PatternSet,
    a_map: &[f64],
    b_map: &[f64],
    b_floor: f64,
) -> Result<Correspondence> {
    let (pats, n) = gray_patterns(patterns, false)?;
    check_images(images, pats.len(), width * height)?;
    let layout = GrayLayout::new(&pats, n);
    Ok(decode_with(width, height, &layout, b_map, b_floor, |p| {
        let (a, b) = (a_map[p], b_map[p]);
        let soft = images.iter().map(|im| (im[p] - a) / b).collect();
        let margin = images
            .iter()
            .map(|im| (im[p] - a - 0.5 * b).abs())
            .fold(f64::INFINITY, f64::min);
        (soft, margin)
    }))
}

/// Gray code with every pattern compared against its inverse capture.
pub fn decode_gray_inverse(
    width: usize,
    height: usize,
    images: &[Vec<f64>],
    patterns: &PatternSet,
    b_map: &[f64],
    b_floor: f64,
) -> Result<Correspondence> {
    let (pats, n) = gray_patterns(patterns, true)?;
    check_images(images, 2 * pats.len(), width * height)?;
    let layout = GrayLayout::new(&pats, n);
    Ok(decode_with(width, height, &layout, b_map, b_floor, |p| {
        let b = b_map[p];
        let soft = images.chunks(2).map(|pair| 0.5 + (pair[0][p] - pair[1][p]) / (2.0 * b)).collect();
        let margin = images
            .chunks(2)
            .map(|pair| (pair[0][p] - pair[1][p]).abs())
            .fold(f64::INFINITY, f64::min);
        (soft, margin)
    }))
}

/// Wrapped phase and modulation amplitude per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    /// In `(-pi, pi]`.
    pub phase: Vec<f64>,
    pub modulation: Vec<f64>,
}

/// Phase of `I_k = A + B cos(phi - 2 pi k / N)`; for four steps this is
/// `atan2(I_1 - I_3, I_0 - I_2)`.
pub fn decode_phase_shift(images: &[Vec<f64>]) -> Result<PhaseMap> {
    let n = images.len();
    if n < 3 {
        return Err(Error::Config(format!("phase shifting needs at least 3 images, got {n}")));
    }
    let pixels = images[0].len();
    check_images(images, n, pixels)?;
    let basis: Vec<(f64, f64)> = (0..n).map(|k| (TAU * k as f64 / n as f64).sin_cos()).collect();
    let (phase, modulation) = (0..pixels)
        .map(|p| {
            let (mut s, mut c) = (0.0, 0.0);
            for (im, &(sk, ck)) in images.iter().zip(&basis) {
                s += im[p] * sk;
                c += im[p] * ck;
            }
            (s.atan2(c), 2.0 / n as f64 * s.hypot(c))
        })
        .unzip();
    Ok(PhaseMap { phase, modulation })
}

/// Unwraps the phase with the period closest to the Gray column. The
/// margin of the result is the phase modulation amplitude.
pub fn unwrap_with_gray(phase: &PhaseMap, gray: &Correspondence, wavelength: f64) -> Result<Correspondence> {
    if phase.phase.len() != gray.column.len() {
        return Err(Error::Config("phase map and correspondence differ in size".into()));
    }
    if !(wavelength > 0.0) {
        return Err(Error::Domain(format!("wavelength must be positive, got {wavelength}")));
    }
    let column = gray
        .column
        .iter()
        .zip(&phase.phase)
        .map(|(&g, &phi)| {
            if g.is_nan() || !phi.is_finite() {
                return f64::NAN;
            }
            let base = wavelength * phi.rem_euclid(TAU) / TAU;
            let period = ((g - base) / wavelength).round();
            let col = base + period * wavelength;
            if (col - g).abs() > UNWRAP_TOLERANCE * wavelength {
                f64::NAN
            } else {
                col
            }
        })
        .collect();
    Ok(Correspondence {
        width: gray.width,
        height: gray.height,
        column,
        margin: phase.modulation.clone(),
    })
}

/// Triangulates every valid pixel. Degenerate pixels and points whose range
/// along the camera ray falls outside `bounds` become invalid.
pub fn correspondence_to_depth(corr: &Correspondence, rig: &Rig, bounds: Bounds, source: DepthSource) -> DepthMap {
    let w = corr.width;
    let depth = (0..corr.column.len())
        .into_par_iter()
        .map(|i| {
            if !corr.is_valid(i) {
                return f64::NAN;
            }
            let pixel = [(i % w) as f64, (i / w) as f64];
            let along = (rig.camera.rotation * rig.camera.pixel_direction(pixel)).z;
            match triangulate(&rig.camera, pixel, &rig.projector, corr.column[i]) {
                Ok(z) if z.is_finite() => {
                    let range = z / along;
                    if range >= bounds.t_near && range <= bounds.t_far {
                        z
                    } else {
                        f64::NAN
                    }
                }
                _ => f64::NAN,
            }
        })
        .collect();
    DepthMap::new(w, corr.height, depth, bounds, source)
}

/// Outlier pass for decoded depth: drops pixels whose bit margin is below
/// `min_margin` or whose depth departs from the median of their valid 3x3
/// neighbourhood by more than `max_jump` meters.
pub fn remove_outliers(depth: &DepthMap, margin: &[f64], min_margin: f64, max_jump: f64) -> DepthMap {
    let (w, h) = (depth.width, depth.height);
    let out = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let d = depth.depth[i];
            if d.is_nan() || margin[i] < min_margin {
                return f64::NAN;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut near: Vec<f64> = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (x + dx, y + dy)))
                .filter(|&(u, v)| u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h)
                .map(|(u, v)| depth.depth[v as usize * w + u as usize])
                .filter(|v| !v.is_nan())
                .collect();
            near.sort_by(f64::total_cmp);
            let median = near[near.len() / 2];
            if (d - median).abs() > max_jump {
                f64::NAN
            } else {
                d
            }
        })
        .collect();
    DepthMap::new(w, h, out, depth.bounds, depth.source)
}
