//! Procedurally generated image datasets.
//!
//! Two labeled in-distribution families, four semantic OOD families, two
//! noise OOD families and one auxiliary OOD family reserved for OOD-augmented
//! training. Every generator is a pure function of `(family, n, shape, seed)`
//! and draws from a glyph/pattern vocabulary that no other family shares;
//! [`check_disjointness`] asserts that at registration.
//!
//! Dataset file layout: magic `OWDS1`, a length-prefixed JSON metadata block,
//! the image tensor in `OWBT` encoding, then a `u32` label count followed by
//! that many `u16` labels (zero for unlabeled OOD sets).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const DATASET_MAGIC: &[u8; 5] = b"OWDS1";

/// Default evaluation size per OOD family.
pub const OOD_SET_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub const DESK: ImageShape = ImageShape { c: 1, h: 32, w: 32 };

    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h < 4 || self.w < 4 {
            return Err(invalid(format!("image shape {self:?} too small (need c ≥ 1, h, w ≥ 4)")));
        }
        Ok(())
    }

    pub fn batch_dims(&self, n: usize) -> [usize; 4] {
        [n, self.c, self.h, self.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    InDistribution,
    OodSemantic,
    OodNoise,
    OodTraining,
}

/// Every generator family, in-distribution or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "shapes-A")]
    ShapesA,
    #[serde(rename = "textures-B")]
    TexturesB,
    #[serde(rename = "glyphs-disjoint")]
    GlyphsDisjoint,
    #[serde(rename = "gradients")]
    Gradients,
    #[serde(rename = "blobs")]
    Blobs,
    #[serde(rename = "ring-patterns")]
    RingPatterns,
    #[serde(rename = "gaussian-noise")]
    GaussianNoise,
    #[serde(rename = "uniform-noise")]
    UniformNoise,
    #[serde(rename = "mosaic")]
    Mosaic,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::ShapesA,
        Family::TexturesB,
        Family::GlyphsDisjoint,
        Family::Gradients,
        Family::Blobs,
        Family::RingPatterns,
        Family::GaussianNoise,
        Family::UniformNoise,
        Family::Mosaic,
    ];

    /// The six evaluation OOD families, semantic first.
    pub const EVAL_OOD: [Family; 6] = [
        Family::GlyphsDisjoint,
        Family::Gradients,
        Family::Blobs,
        Family::RingPatterns,
        Family::GaussianNoise,
        Family::UniformNoise,
    ];

    pub const SEMANTIC: [Family; 4] =
        [Family::GlyphsDisjoint, Family::Gradients, Family::Blobs, Family::RingPatterns];

    pub fn name(self) -> &'static str {
        match self {
            Family::ShapesA => "shapes-A",
            Family::TexturesB => "textures-B",
            Family::GlyphsDisjoint => "glyphs-disjoint",
            Family::Gradients => "gradients",
            Family::Blobs => "blobs",
            Family::RingPatterns => "ring-patterns",
            Family::GaussianNoise => "gaussian-noise",
            Family::UniformNoise => "uniform-noise",
            Family::Mosaic => "mosaic",
        }
    }

    pub fn role(self) -> DatasetRole {
        match self {
            Family::ShapesA | Family::TexturesB => DatasetRole::InDistribution,
            Family::GlyphsDisjoint | Family::Gradients | Family::Blobs | Family::RingPatterns => {
                DatasetRole::OodSemantic
            }
            Family::GaussianNoise | Family::UniformNoise => DatasetRole::OodNoise,
            Family::Mosaic => DatasetRole::OodTraining,
        }
    }

    /// The generative vocabulary this family draws from.
    pub fn primitives(self) -> &'static [&'static str] {
        match self {
            Family::ShapesA => &[
                "disc", "square", "triangle_up", "plus", "x_cross", "hbar", "vbar", "diamond",
                "l_corner", "t_shape",
            ],
            Family::TexturesB => &["sinusoid_grating"],
            Family::GlyphsDisjoint => &["frame", "hourglass", "chevron", "two_dots", "crescent", "checker"],
            Family::Gradients => &["linear_ramp"],
            Family::Blobs => &["gaussian_blob_field"],
            Family::RingPatterns => &["annulus", "concentric_rings"],
            Family::GaussianNoise => &["iid_gaussian_pixels"],
            Family::UniformNoise => &["iid_uniform_pixels"],
            Family::Mosaic => &["block_mosaic", "stroke"],
        }
    }

    /// Number of distinct classes an in-distribution family can render.
    pub fn max_classes(self) -> usize {
        match self {
            Family::ShapesA => 10,
            Family::TexturesB => 12,
            _ => 0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Unknown { what: "dataset family", name: s.to_string() })
    }
}

/// Asserts that no OOD family shares a generative primitive with any
/// in-distribution family (and that families do not share primitives at all).
pub fn check_disjointness() -> Result<()> {
    let mut owner: BTreeMap<&str, Family> = BTreeMap::new();
    for fam in Family::ALL {
        for p in fam.primitives() {
            if let Some(prev) = owner.insert(p, fam) {
                return Err(invalid(format!("primitive `{p}` shared by {prev} and {fam}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub family: Family,
    pub role: DatasetRole,
    pub seed: u64,
    pub shape: ImageShape,
    pub n: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    /// Empty unless the role is in-distribution.
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn shape(&self) -> ImageShape {
        self.meta.shape
    }

    pub fn family(&self) -> Family {
        self.meta.family
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.select_rows(&[i])
    }

    /// Subset by index, preserving metadata other than `n`.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let labels = if self.labels.is_empty() { vec![] } else { idx.iter().map(|&i| self.labels[i]).collect() };
        let mut meta = self.meta.clone();
        meta.n = idx.len();
        Self { images: self.images.select_rows(idx), labels, meta }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Replaces the images (same count and shape), e.g. after corruption.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_images",
                detail: format!("{:?} vs {:?}", images.shape(), self.images.shape()),
            });
        }
        Ok(Self { images, labels: self.labels.clone(), meta: self.meta.clone() })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        tensor::write_json_block(w, &self.meta)?;
        self.images.write_to(w)?;
        w.write_all(&(self.labels.len() as u32).to_le_bytes())?;
        for &l in &self.labels {
            w.write_all(&(l as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        tensor::expect_magic(r, DATASET_MAGIC, "dataset")?;
        let meta: DatasetMeta = tensor::read_json_block(r)?;
        let images = Tensor::read_from(r)?;
        if images.shape() != meta.shape.batch_dims(meta.n) {
            return Err(Error::Format(format!(
                "image tensor {:?} disagrees with metadata ({} x {:?})",
                images.shape(),
                meta.n,
                meta.shape
            )));
        }
        let count = tensor::read_u32(r)? as usize;
        if count != 0 && count != meta.n {
            return Err(Error::Format(format!("{count} labels for {} images", meta.n)));
        }
        let mut raw = vec![0u8; count * 2];
        tensor::read_exact(r, &mut raw, "labels")?;
        let labels: Vec<usize> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= meta.classes.max(1)) {
            return Err(Error::Format(format!("label {bad} out of range for {} classes", meta.classes)));
        }
        Ok(Self { images, labels, meta })
    }
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    ds.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    LabeledDataset::read_from(&mut bytes.as_slice())
}

// ---------------------------------------------------------------------------
// Rendering

/// Placement of a glyph inside the frame, in pixel units.
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    fn sample(rng: &mut ChaCha8Rng, shape: ImageShape, max_rot_deg: f64) -> Self {
        let size = shape.h.min(shape.w) as f64;
        let rot = rng.random_range(-max_rot_deg..=max_rot_deg).to_radians();
        Self {
            cx: shape.w as f64 / 2.0 + rng.random_range(-0.12..0.12) * size,
            cy: shape.h as f64 / 2.0 + rng.random_range(-0.12..0.12) * size,
            radius: rng.random_range(0.24..0.34) * size,
            cos: rot.cos(),
            sin: rot.sin(),
        }
    }

    /// Maps a pixel-space point into the glyph's normalized frame.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.cx) / self.radius, (y - self.cy) / self.radius);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

/// 3x3 supersampled coverage of an implicit shape.
fn coverage(x: usize, y: usize, inside: &impl Fn(f64, f64) -> bool) -> f64 {
    const OFF: [f64; 3] = [1.0 / 6.0, 0.5, 5.0 / 6.0];
    let mut hits = 0;
    for oy in OFF {
        for ox in OFF {
            if inside(x as f64 + ox, y as f64 + oy) {
                hits += 1;
            }
        }
    }
    hits as f64 / 9.0
}

fn glyph_inside(name: &str, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match name {
        "disc" => u * u + v * v <= 1.0,
        "square" => au <= 0.85 && av <= 0.85,
        "triangle_up" => v <= 0.9 && au <= (v + 0.9) / 2.0,
        "plus" => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
        "x_cross" => ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && au <= 0.9 && av <= 0.9,
        "hbar" => av <= 0.3 && au <= 0.95,
        "vbar" => au <= 0.3 && av <= 0.95,
        "diamond" => au + av <= 1.0,
        "l_corner" => ((u + 0.6).abs() <= 0.3 && av <= 0.9) || ((v - 0.6).abs() <= 0.3 && au <= 0.9),
        "t_shape" => ((v + 0.6).abs() <= 0.3 && au <= 0.9) || (au <= 0.3 && av <= 0.9),
        "frame" => au.max(av) <= 0.9 && au.max(av) >= 0.6,
        "hourglass" => au <= av && av <= 0.9,
        "chevron" => (v - (au * 1.2 - 0.5)).abs() <= 0.25 && au <= 0.9,
        "two_dots" => (u + 0.5).powi(2) + v * v <= 0.16 || (u - 0.5).powi(2) + v * v <= 0.16,
        "crescent" => u * u + v * v <= 1.0 && (u - 0.45).powi(2) + v * v > 0.64,
        "checker" => au <= 0.9 && av <= 0.9 && ((u > 0.0) ^ (v > 0.0)),
        _ => false,
    }
}

fn pixel_noise(rng: &mut ChaCha8Rng, img: &mut [f64], sigma: f64) {
    let normal = Normal::new(0.0, sigma).unwrap();
    for p in img.iter_mut() {
        *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Smooth illumination field: a coarse random grid upsampled bilinearly,
/// with values in `[0, 1]`.
fn illumination(rng: &mut ChaCha8Rng, shape: ImageShape, cells: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            let fy = y as f64 / (shape.h - 1) as f64 * cells as f64;
            let fx = x as f64 / (shape.w - 1) as f64 * cells as f64;
            let (y0, x0) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |a: usize, b: usize| g[a * (cells + 1) + b];
            out[y * shape.w + x] = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                + at(y0, x0 + 1) * (1.0 - ty) * tx
                + at(y0 + 1, x0) * ty * (1.0 - tx)
                + at(y0 + 1, x0 + 1) * ty * tx;
        }
    }
    out
}

/// Renders one single-glyph image; all channels share the luminance. The
/// glyph sits brighter than an unevenly lit background, at low contrast.
fn render_glyph(rng: &mut ChaCha8Rng, shape: ImageShape, inside: impl Fn(f64, f64) -> bool, max_rot: f64) -> Vec<f64> {
    let place = Placement::sample(rng, shape, max_rot);
    let base = rng.random_range(0.3..0.7);
    let light = illumination(rng, shape, 3);
    let swing = rng.random_range(0.05..0.2);
    let contrast = rng.random_range(GLYPH_CONTRAST.0..GLYPH_CONTRAST.1);
    let mut plane = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            let cov = coverage(x, y, &|px, py| {
                let (u, v) = place.local(px, py);
                inside(u, v)
            });
            let bg = base + swing * (light[y * shape.w + x] - 0.5);
            plane[y * shape.w + x] = (bg + contrast * cov).clamp(0.0, 1.0);
        }
    }
    pixel_noise(rng, &mut plane, GLYPH_NOISE);
    replicate_channels(&plane, shape.c)
}

/// Glyph-to-background luminance difference range.
const GLYPH_CONTRAST: (f64, f64) = (0.1, 0.24);
const GLYPH_NOISE: f64 = 0.02;

fn replicate_channels(plane: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(plane.len() * c);
    for _ in 0..c {
        out.extend_from_slice(plane);
    }
    out
}

fn render_grating(rng: &mut ChaCha8Rng, shape: ImageShape, class: usize) -> Vec<f64> {
    let theta = (class % 4) as f64 * std::f64::consts::FRAC_PI_4 + rng.random_range(-0.08..0.08);
    let cycles = [2.0, 3.5, 5.0][class / 4 % 3];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.5..1.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut plane = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            let u = x as f64 / shape.w as f64;
            let v = y as f64 / shape.h as f64;
            let s = (std::f64::consts::TAU * cycles * (u * ct + v * st) + phase).sin();
            plane[y * shape.w + x] = 0.5 + 0.5 * contrast * s;
        }
    }
    pixel_noise(rng, &mut plane, 0.03);
    replicate_channels(&plane, shape.c)
}

fn render_ramp(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let lo = rng.random_range(0.2..0.45);
    let hi = rng.random_range(0.55..0.8);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut plane = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            let u = x as f64 / (shape.w - 1) as f64 - 0.5;
            let v = y as f64 / (shape.h - 1) as f64 - 0.5;
            let t = ((u * ct + v * st) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            plane[y * shape.w + x] = lo + (hi - lo) * t;
        }
    }
    pixel_noise(rng, &mut plane, GLYPH_NOISE);
    replicate_channels(&plane, shape.c)
}

fn render_blobs(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let count = rng.random_range(3..=6);
    let size = shape.h.min(shape.w) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.0..shape.w as f64),
                rng.random_range(0.0..shape.h as f64),
                rng.random_range(0.08..0.25) * size,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut plane = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            plane[y * shape.w + x] = blobs
                .iter()
                .map(|&(bx, by, s, a)| a * (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (2.0 * s * s)).exp())
                .sum();
        }
    }
    let (min, max) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-9);
    let (lo, hi) = (rng.random_range(0.2..0.4), rng.random_range(0.6..0.8));
    for p in plane.iter_mut() {
        *p = lo + (hi - lo) * (*p - min) / span;
    }
    pixel_noise(rng, &mut plane, GLYPH_NOISE);
    replicate_channels(&plane, shape.c)
}

/// Ring family: one annulus placed exactly like a shapes-A glyph, or a set of
/// concentric rings; foreground/background levels follow shapes-A.
fn render_rings(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    if rng.random_bool(0.7) {
        let inner = rng.random_range(0.4..0.7);
        render_glyph(rng, shape, move |u, v| {
            let r2 = u * u + v * v;
            r2 <= 1.0 && r2 >= inner * inner
        }, 0.0)
    } else {
        let bands = rng.random_range(2..=3) as f64;
        render_glyph(rng, shape, move |u, v| {
            let r = (u * u + v * v).sqrt();
            r <= 1.0 && ((r * bands * 2.0).floor() as i64) % 2 == 1
        }, 0.0)
    }
}

fn render_mosaic(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let block = [2usize, 4, 8][rng.random_range(0..3)];
    let (bw, bh) = (shape.w.div_ceil(block), shape.h.div_ceil(block));
    let levels: Vec<f64> = (0..bw * bh).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut plane = vec![0.0; shape.h * shape.w];
    for y in 0..shape.h {
        for x in 0..shape.w {
            plane[y * shape.w + x] = levels[(y / block) * bw + x / block];
        }
    }
    // a few bright or dark strokes across the mosaic
    for _ in 0..rng.random_range(0..=3) {
        let (x0, y0) = (rng.random_range(0.0..shape.w as f64), rng.random_range(0.0..shape.h as f64));
        let (x1, y1) = (rng.random_range(0.0..shape.w as f64), rng.random_range(0.0..shape.h as f64));
        let level = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let steps = 2 * shape.h.max(shape.w);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = ((x0 + t * (x1 - x0)) as usize, (y0 + t * (y1 - y0)) as usize);
            if x < shape.w && y < shape.h {
                plane[y * shape.w + x] = level;
            }
        }
    }
    replicate_channels(&plane, shape.c)
}

fn finish(family: Family, images: Vec<f64>, labels: Vec<usize>, n: usize, shape: ImageShape, seed: u64, classes: usize) -> Result<LabeledDataset> {
    debug_assert!(images.iter().all(|v| (0.0..=1.0).contains(v)));
    let images = Tensor::new(shape.batch_dims(n).to_vec(), images)?;
    Ok(LabeledDataset {
        images,
        labels,
        meta: DatasetMeta { family, role: family.role(), seed, shape, n, classes },
    })
}

/// Balanced labeled in-distribution data.
pub fn gen_indist(family: Family, classes: usize, n: usize, shape: ImageShape, seed: u64) -> Result<LabeledDataset> {
    shape.validate()?;
    if family.role() != DatasetRole::InDistribution {
        return Err(invalid(format!("{family} is not an in-distribution family")));
    }
    if classes < 2 || classes > family.max_classes() {
        return Err(invalid(format!("{family} supports 2..={} classes, got {classes}", family.max_classes())));
    }
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = rng::stream(seed, &[rng::tag(family.name())]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let glyphs = Family::ShapesA.primitives();
    let mut images = Vec::with_capacity(n * shape.numel());
    for &label in &labels {
        let img = match family {
            Family::ShapesA => {
                let g = glyphs[label];
                render_glyph(&mut rng, shape, |u, v| glyph_inside(g, u, v), 12.0)
            }
            _ => render_grating(&mut rng, shape, label),
        };
        images.extend(img);
    }
    finish(family, images, labels, n, shape, seed, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

/// Noise OOD: gaussian pixels `N(0.5, 0.25²)` clipped to `[0,1]`, or
/// uniform pixels on `[0,1]`.
pub fn gen_ood_noise(kind: NoiseKind, n: usize, shape: ImageShape, seed: u64) -> Result<LabeledDataset> {
    shape.validate()?;
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let family = match kind {
        NoiseKind::Gaussian => Family::GaussianNoise,
        NoiseKind::Uniform => Family::UniformNoise,
    };
    let mut rng = rng::stream(seed, &[rng::tag(family.name())]);
    let total = n * shape.numel();
    let images: Vec<f64> = match kind {
        NoiseKind::Gaussian => {
            let normal = Normal::<f64>::new(0.5, 0.25).unwrap();
            (0..total).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)).collect()
        }
        NoiseKind::Uniform => (0..total).map(|_| rng.random_range(0.0..=1.0)).collect(),
    };
    finish(family, images, vec![], n, shape, seed, 0)
}

/// Semantic OOD families (and the auxiliary training family `mosaic`).
pub fn gen_ood_semantic(family: Family, n: usize, shape: ImageShape, seed: u64) -> Result<LabeledDataset> {
    shape.validate()?;
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = rng::stream(seed, &[rng::tag(family.name())]);
    let glyphs = Family::GlyphsDisjoint.primitives();
    let mut images = Vec::with_capacity(n * shape.numel());
    for _ in 0..n {
        let img = match family {
            Family::GlyphsDisjoint => {
                let g = glyphs[rng.random_range(0..glyphs.len())];
                render_glyph(&mut rng, shape, |u, v| glyph_inside(g, u, v), 12.0)
            }
            Family::Gradients => render_ramp(&mut rng, shape),
            Family::Blobs => render_blobs(&mut rng, shape),
            Family::RingPatterns => render_rings(&mut rng, shape),
            Family::Mosaic => render_mosaic(&mut rng, shape),
            other => {
                return Err(Error::Unknown { what: "semantic OOD family", name: other.name().to_string() })
            }
        };
        images.extend(img);
    }
    finish(family, images, vec![], n, shape, seed, 0)
}

/// Dispatches to the right generator for any family.
pub fn generate(family: Family, classes: usize, n: usize, shape: ImageShape, seed: u64) -> Result<LabeledDataset> {
    match family.role() {
        DatasetRole::InDistribution => gen_indist(family, classes, n, shape, seed),
        DatasetRole::OodNoise => {
            let kind = if family == Family::GaussianNoise { NoiseKind::Gaussian } else { NoiseKind::Uniform };
            gen_ood_noise(kind, n, shape, seed)
        }
        _ => gen_ood_semantic(family, n, shape, seed),
    }
}

/// Bilinear resize of `[n,c,h,w]` images to `target` spatial size
/// (corner-aligned sampling, so linear ramps are reproduced exactly).
/// Channel counts must agree.
pub fn rescale_to(x: &Tensor, target: ImageShape) -> Result<Tensor> {
    if target.h == 0 || target.w == 0 || target.c == 0 {
        return Err(invalid("zero-sized rescale target"));
    }
    let s = x.shape();
    if s.len() != 4 || s[1] != target.c {
        return Err(Error::ShapeMismatch { op: "rescale_to", detail: format!("{s:?} -> {target:?}") });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (target.h, target.w) {
        return Ok(x.clone());
    }
    let scale = |src: usize, dst: usize| if dst > 1 { (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(h, target.h), scale(w, target.w));
    let mut out = Vec::with_capacity(n * c * target.h * target.w);
    for plane in x.data().chunks(h * w) {
        for ty in 0..target.h {
            let fy = ty as f64 * sy;
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for tx in 0..target.w {
                let fx = tx as f64 * sx;
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, c, target.h, target.w], out)
}
