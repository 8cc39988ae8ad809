//! On-disk formats: 16-bit graymaps for intensities, a float map container
//! for depth, contrast and error maps, and TOML manifests tying a directory
//! of images together. Byte layouts are described in `FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthSource};
use crate::error::{Error, Result};
use crate::geometry::Bounds;
use crate::patterns::{Pattern, PatternKind, PatternSet};
use crate::scene::{CaptureSet, Simulation};

/// First token of every float map header.
pub const FLOAT_MAP_MAGIC: &str = "NSLMAP1";
pub const PATTERN_MANIFEST: &str = "patterns.toml";
pub const CAPTURE_MANIFEST: &str = "captures.toml";

/// Binary 16-bit graymap (`P5`, maxval 65535, big-endian samples) of values
/// in `[0, 1]`.
pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(2 * values.len());
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Splits `count` whitespace-separated header tokens off the front of
/// `bytes`, returning them and the offset just past the single whitespace
/// byte that ends the last one.
fn header_tokens(bytes: &[u8], count: usize, what: &str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i || i >= bytes.len() {
            return Err(Error::parse(what, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn parse_token<T: std::str::FromStr>(token: &str, what: &str) -> Result<T> {
    token.parse().map_err(|_| Error::parse(what, format!("bad header field {token:?}")))
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (t, start) = header_tokens(bytes, 4, "pgm")?;
    if t[0] != "P5" {
        return Err(Error::parse("pgm", format!("expected P5, found {:?}", t[0])));
    }
    let (w, h, max): (usize, usize, u32) = (parse_token(&t[1], "pgm")?, parse_token(&t[2], "pgm")?, parse_token(&t[3], "pgm")?);
    if max == 0 || max > 65535 {
        return Err(Error::parse("pgm", format!("unsupported maxval {max}")));
    }
    let wide = max > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let body = &bytes[start..];
    if body.len() < need {
        return Err(Error::parse("pgm", format!("expected {need} sample bytes, found {}", body.len())));
    }
    let scale = 1.0 / f64::from(max);
    let values = if wide {
        body[..need].chunks_exact(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) * scale).collect()
    } else {
        body[..need].iter().map(|&b| f64::from(b) * scale).collect()
    };
    Ok((w, h, values))
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm16(width, height, values))?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm16(&fs::read(path)?)
}

/// Row-major grid of 32-bit floats with depth bounds and a source tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub bounds: Bounds,
    pub tag: String,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, bounds: Bounds, tag: &str, data: &[f64]) -> Self {
        assert_eq!(data.len(), width * height);
        FloatMap {
            width,
            height,
            bounds,
            tag: tag.to_string(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        FloatMap::new(depth.width, depth.height, depth.bounds, depth.source.tag(), &depth.depth)
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        let source = DepthSource::from_tag(&self.tag)
            .ok_or_else(|| Error::parse("float map", format!("{:?} is not a depth source", self.tag)))?;
        Ok(DepthMap::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| f64::from(v)).collect(),
            self.bounds,
            source,
        ))
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{FLOAT_MAP_MAGIC} {} {} {:e} {:e} {}\n",
            self.width, self.height, self.bounds.t_near, self.bounds.t_far, self.tag
        )
        .into_bytes();
        out.reserve(4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, start) = header_tokens(bytes, 6, "float map")?;
        if t[0] != FLOAT_MAP_MAGIC {
            return Err(Error::parse("float map", format!("bad magic {:?}", t[0])));
        }
        let (width, height): (usize, usize) = (parse_token(&t[1], "float map")?, parse_token(&t[2], "float map")?);
        let bounds = Bounds::new(parse_token(&t[3], "float map")?, parse_token(&t[4], "float map")?);
        let body = &bytes[start..];
        if body.len() != 4 * width * height {
            return Err(Error::parse(
                "float map",
                format!("expected {} data bytes, found {}", 4 * width * height, body.len()),
            ));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(FloatMap {
            width,
            height,
            bounds,
            tag: t[5].clone(),
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        FloatMap::from_bytes(&fs::read(path)?)
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    FloatMap::from_depth(depth).write(path)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    FloatMap::read(path)?.to_depth()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(flatten)]
    pub kind: PatternKind,
}

/// Index of a pattern directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub patterns: Vec<ManifestEntry>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::parse(what, e))
}

/// Writes `pattern_NNN.pgm` files and the manifest into `dir`.
pub fn write_patterns(dir: &Path, patterns: &PatternSet) -> Result<PatternManifest> {
    let (width, height) = patterns
        .resolution()
        .ok_or_else(|| Error::Config("cannot write an empty pattern set".into()))?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(patterns.len());
    for (i, p) in patterns.patterns.iter().enumerate() {
        let file = format!("pattern_{i:03}.pgm");
        let values: Vec<f64> = p.data.iter().map(|&v| f64::from(v)).collect();
        write_pgm16(&dir.join(&file), width, height, &values)?;
        entries.push(ManifestEntry { file, kind: p.kind });
    }
    let manifest = PatternManifest {
        seed: patterns.seed,
        width,
        height,
        patterns: entries,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::parse("pattern manifest", e))?;
    fs::write(dir.join(PATTERN_MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_patterns(dir: &Path) -> Result<PatternSet> {
    let manifest: PatternManifest = read_toml(&dir.join(PATTERN_MANIFEST), "pattern manifest")?;
    let mut patterns = Vec::with_capacity(manifest.patterns.len());
    for entry in &manifest.patterns {
        let (w, h, values) = read_pgm16(&dir.join(&entry.file))?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(Error::Config(format!("{} is {w}x{h}, manifest says {}x{}", entry.file, manifest.width, manifest.height)));
        }
        patterns.push(Pattern {
            width: w,
            height: h,
            data: values.iter().map(|&v| v as f32).collect(),
            kind: entry.kind,
        });
    }
    PatternSet::new(patterns, manifest.seed)
}

/// Index of a capture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub images: Vec<String>,
    pub a_map: String,
    pub b_map: String,
    pub truth: String,
    /// Pixels lit by the projector, as a 0/1 graymap.
    pub lit: String,
}

/// Captures, photometric maps, ground-truth depth and the lit mask loaded
/// from a capture directory.
#[derive(Debug, Clone)]
pub struct StoredCaptures {
    pub captures: CaptureSet,
    pub truth: DepthMap,
    pub lit: Vec<bool>,
}

pub fn write_captures(dir: &Path, sim: &Simulation) -> Result<CaptureManifest> {
    fs::create_dir_all(dir)?;
    let c = &sim.captures;
    let mut images = Vec::with_capacity(c.len());
    for (i, im) in c.images.iter().enumerate() {
        let file = format!("capture_{i:03}.pgm");
        write_pgm16(&dir.join(&file), c.width, c.height, im)?;
        images.push(file);
    }
    let bounds = sim.truth.bounds;
    FloatMap::new(c.width, c.height, bounds, "a-map", &c.a_map).write(&dir.join("a.nslmap"))?;
    FloatMap::new(c.width, c.height, bounds, "b-map", &c.b_map).write(&dir.join("b.nslmap"))?;
    write_depth(&dir.join("truth.nslmap"), &sim.truth)?;
    let lit: Vec<f64> = sim.projector_uv.iter().map(|p| if p.is_some() { 1.0 } else { 0.0 }).collect();
    write_pgm16(&dir.join("lit.pgm"), c.width, c.height, &lit)?;
    let manifest = CaptureManifest {
        width: c.width,
        height: c.height,
        noise_sigma: c.noise_sigma,
        images,
        a_map: "a.nslmap".into(),
        b_map: "b.nslmap".into(),
        truth: "truth.nslmap".into(),
        lit: "lit.pgm".into(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::parse("capture manifest", e))?;
    fs::write(dir.join(CAPTURE_MANIFEST), text)?;
    Ok(manifest)
}

/// Reads a capture directory. The photometric maps are recomputed from the
/// quantized images so that they match what a decoder sees.
pub fn read_captures(dir: &Path) -> Result<StoredCaptures> {
    let m: CaptureManifest = read_toml(&dir.join(CAPTURE_MANIFEST), "capture manifest")?;
    let check = |w: usize, h: usize, file: &str| -> Result<()> {
        if (w, h) != (m.width, m.height) {
            return Err(Error::Config(format!("{file} is {w}x{h}, manifest says {}x{}", m.width, m.height)));
        }
        Ok(())
    };
    let mut images = Vec::with_capacity(m.images.len());
    for file in &m.images {
        let (w, h, values) = read_pgm16(&dir.join(file))?;
        check(w, h, file)?;
        images.push(values);
    }
    let captures = CaptureSet::from_images(m.width, m.height, images, m.noise_sigma)?;
    let truth = read_depth(&dir.join(&m.truth))?;
    check(truth.width, truth.height, &m.truth)?;
    let (w, h, lit) = read_pgm16(&dir.join(&m.lit))?;
    check(w, h, &m.lit)?;
    Ok(StoredCaptures {
        captures,
        truth,
        lit: lit.iter().map(|&v| v > 0.5).collect(),
    })
}

/// `x y z` per valid pixel, meters in the camera frame.
pub fn xyz_dump(depth: &DepthMap, camera: &crate::geometry::DeviceModel) -> String {
    let mut out = String::new();
    for i in 0..depth.depth.len() {
        if depth.is_valid(i) {
            let d = camera.pixel_direction([(i % depth.width) as f64, (i / depth.width) as f64]);
            let p = d * (depth.depth[i] / d.z);
            out.push_str(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, p.z));
        }
    }
    out
}
