//! Severity-parameterized image corruptions in five categories.
//!
//! Every corruption is a pure function of the image, its position in the
//! batch, and the [`CorruptionSpec`]; random draws come from a stream keyed
//! by `(seed, kind, severity, index)`. Outputs are clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detectors::DetectorModel;
use crate::error::{invalid, Error, Result};
use crate::metrics::compute_fpr;
use crate::models::TrainedClassifier;
use crate::rng;
use crate::tensor::Tensor;

/// Version tag of the severity table below. Bump on any parameter change.
pub const TABLE_VERSION: &str = "owb-corruptions/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Geometric,
    Blurring,
    Noise,
    Photometric,
    Weather,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Geometric => "geometric",
            Category::Blurring => "blurring",
            Category::Noise => "noise",
            Category::Photometric => "photometric",
            Category::Weather => "weather",
        }
    }
}

macro_rules! kinds {
    ($($variant:ident => $name:literal, $cat:ident, $param:literal, [$($v:expr),*];)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum CorruptionKind { $($variant),* }

        impl CorruptionKind {
            pub const ALL: [CorruptionKind; 22] = [$(CorruptionKind::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(CorruptionKind::$variant => $name),* }
            }

            pub fn category(self) -> Category {
                match self { $(CorruptionKind::$variant => Category::$cat),* }
            }

            /// Name of the parameter the severity table sets.
            pub fn parameter(self) -> &'static str {
                match self { $(CorruptionKind::$variant => $param),* }
            }

            /// Parameter values for severities 1 through 5.
            pub fn table(self) -> [f64; 5] {
                match self { $(CorruptionKind::$variant => [$($v as f64),*]),* }
            }
        }
    };
}

kinds! {
    Rotate => "rotate", Geometric, "degrees", [6, 12, 18, 24, 30];
    Translate => "translate", Geometric, "shift_fraction", [0.04, 0.08, 0.12, 0.16, 0.20];
    Shear => "shear", Geometric, "shear_factor", [0.08, 0.16, 0.24, 0.32, 0.40];
    Scale => "scale", Geometric, "zoom", [0.92, 0.84, 0.76, 0.68, 0.60];
    HorizontalFlip => "horizontal_flip", Geometric, "none", [1, 1, 1, 1, 1];
    GaussianBlur => "gaussian_blur", Blurring, "sigma_px", [0.5, 0.8, 1.1, 1.5, 2.0];
    BoxBlur => "box_blur", Blurring, "radius_px", [1, 2, 3, 4, 5];
    MotionBlur => "motion_blur", Blurring, "length_px", [3, 5, 7, 9, 11];
    DefocusBlur => "defocus_blur", Blurring, "disk_radius_px", [1.0, 1.5, 2.0, 2.5, 3.0];
    GaussianNoise => "gaussian_noise", Noise, "sigma", [0.04, 0.08, 0.12, 0.18, 0.26];
    UniformNoise => "uniform_noise", Noise, "half_width", [0.06, 0.12, 0.20, 0.30, 0.40];
    SaltPepper => "salt_pepper", Noise, "fraction", [0.01, 0.02, 0.04, 0.07, 0.10];
    ShotNoise => "shot_noise", Noise, "photons", [60, 25, 12, 5, 3];
    Speckle => "speckle", Noise, "sigma", [0.06, 0.12, 0.20, 0.30, 0.45];
    Brightness => "brightness", Photometric, "offset", [0.1, 0.2, 0.3, 0.4, 0.5];
    Contrast => "contrast", Photometric, "factor", [0.75, 0.60, 0.45, 0.30, 0.15];
    Gamma => "gamma", Photometric, "gamma", [1.3, 1.6, 2.0, 2.5, 3.0];
    SaturateTowardGray => "saturate_toward_gray", Photometric, "blend", [0.15, 0.30, 0.45, 0.60, 0.75];
    Invert => "invert", Photometric, "blend", [0.2, 0.4, 0.6, 0.8, 1.0];
    FogHaze => "fog_haze", Weather, "blend", [0.15, 0.30, 0.45, 0.60, 0.75];
    SnowSpecks => "snow_specks", Weather, "density", [0.01, 0.02, 0.04, 0.06, 0.09];
    FrostOverlay => "frost_overlay", Weather, "blend", [0.20, 0.35, 0.50, 0.65, 0.80];
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(Error::Unknown { what: "corruption", name: s })
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    /// Replaces the table parameter; for diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_override: Option<f64>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed, param_override: None }
    }

    pub fn category(&self) -> Category {
        self.kind.category()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(invalid(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        if let Some(p) = self.param_override {
            if !p.is_finite() {
                return Err(invalid("parameter override must be finite"));
            }
        }
        Ok(())
    }

    pub fn parameter(&self) -> f64 {
        self.param_override.unwrap_or(self.kind.table()[self.severity as usize - 1])
    }

    /// Condition label used in reports, e.g. `gaussian_noise:3`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind, self.severity)
    }
}

/// The roster and severity table as a versioned tab-separated manifest.
pub fn roster_manifest() -> String {
    let mut out = format!("# {TABLE_VERSION}\nkind\tcategory\tparameter\ts1\ts2\ts3\ts4\ts5\n");
    for k in CorruptionKind::ALL {
        let vals: Vec<String> = k.table().iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{}\t{}\t{}\t{}\n", k.name(), k.category().name(), k.parameter(), vals.join("\t")));
    }
    out
}

/// One image plane stack `[c, h, w]` in row-major order.
struct Image<'a> {
    c: usize,
    h: usize,
    w: usize,
    px: &'a [f64],
}

impl Image<'_> {
    fn at(&self, ch: usize, i: usize, j: usize) -> f64 {
        self.px[(ch * self.h + i) * self.w + j]
    }

    /// Bilinear sample at fractional pixel coordinates, zero outside.
    fn bilinear(&self, ch: usize, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let get = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= self.h as f64 || xx >= self.w as f64 {
                0.0
            } else {
                self.at(ch, yy as usize, xx as usize)
            }
        };
        get(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + get(y0, x0 + 1.0) * (1.0 - fy) * fx
            + get(y0 + 1.0, x0) * fy * (1.0 - fx)
            + get(y0 + 1.0, x0 + 1.0) * fy * fx
    }

    /// Resamples through an inverse map from output to source coordinates,
    /// both measured from the image center.
    fn warp(&self, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
        let (cy, cx) = ((self.h as f64 - 1.0) / 2.0, (self.w as f64 - 1.0) / 2.0);
        let mut out = vec![0.0; self.px.len()];
        for ch in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    let (sy, sx) = inverse(i as f64 - cy, j as f64 - cx);
                    out[(ch * self.h + i) * self.w + j] = self.bilinear(ch, sy + cy, sx + cx);
                }
            }
        }
        out
    }

    /// 2-D correlation with a `kh × kw` kernel, replicating edge pixels.
    fn convolve(&self, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
        let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0; self.px.len()];
        for ch in 0..self.c {
            for i in 0..self.h as isize {
                for j in 0..self.w as isize {
                    let mut acc = 0.0;
                    for a in 0..kh as isize {
                        for b in 0..kw as isize {
                            let y = (i + a - ry).clamp(0, self.h as isize - 1) as usize;
                            let x = (j + b - rx).clamp(0, self.w as isize - 1) as usize;
                            acc += kernel[(a * kw as isize + b) as usize] * self.at(ch, y, x);
                        }
                    }
                    out[(ch * self.h + i as usize) * self.w + j as usize] = acc;
                }
            }
        }
        out
    }
}

fn normalized(mut k: Vec<f64>) -> Vec<f64> {
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Smooth random field in `[0, 1]`: a coarse uniform grid upsampled bilinearly.
fn smooth_field(h: usize, w: usize, cells: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| r.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let y = i as f64 / (h - 1).max(1) as f64 * cells as f64;
            let x = j as f64 / (w - 1).max(1) as f64 * cells as f64;
            let (y0, x0) = ((y.floor() as usize).min(cells - 1), (x.floor() as usize).min(cells - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |a: usize, b: usize| g[a * (cells + 1) + b];
            out[i * w + j] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
        }
    }
    out
}

fn corrupt_one(img: &Image<'_>, kind: CorruptionKind, p: f64, r: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    use CorruptionKind::*;
    let (c, h, w) = (img.c, img.h, img.w);
    let plane = h * w;
    let pointwise = |f: &dyn Fn(f64) -> f64| img.px.iter().map(|&v| f(v)).collect::<Vec<f64>>();
    let out = match kind {
        Rotate => {
            let (s, co) = p.to_radians().sin_cos();
            img.warp(|y, x| (co * y - s * x, s * y + co * x))
        }
        Translate => {
            let (dy, dx) = (p * h as f64, p * w as f64);
            img.warp(|y, x| (y - dy, x - dx))
        }
        Shear => img.warp(|y, x| (y, x - p * y)),
        Scale => img.warp(|y, x| (y / p, x / p)),
        HorizontalFlip => {
            let mut out = vec![0.0; img.px.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(ch * h + i) * w + j] = img.at(ch, i, w - 1 - j);
                    }
                }
            }
            out
        }
        GaussianBlur => {
            if p <= 0.0 {
                img.px.to_vec()
            } else {
                let rad = (3.0 * p).ceil() as isize;
                let k1: Vec<f64> = (-rad..=rad).map(|t| (-(t * t) as f64 / (2.0 * p * p)).exp()).collect();
                let n = k1.len();
                let k2 = normalized((0..n * n).map(|i| k1[i / n] * k1[i % n]).collect());
                img.convolve(&k2, n, n)
            }
        }
        BoxBlur => {
            let n = 2 * p.max(0.0).round() as usize + 1;
            img.convolve(&vec![1.0 / (n * n) as f64; n * n], n, n)
        }
        MotionBlur => {
            let n = (p.max(1.0).round() as usize) | 1;
            img.convolve(&vec![1.0 / n as f64; n], 1, n)
        }
        DefocusBlur => {
            let rad = p.max(0.0).ceil() as isize;
            let n = (2 * rad + 1) as usize;
            let k = (0..n * n)
                .map(|i| {
                    let (a, b) = ((i / n) as isize - rad, (i % n) as isize - rad);
                    if ((a * a + b * b) as f64) <= p * p + 1e-9 { 1.0 } else { 0.0 }
                })
                .collect();
            img.convolve(&normalized(k), n, n)
        }
        GaussianNoise => {
            if p == 0.0 {
                img.px.to_vec()
            } else {
                let d = Normal::new(0.0, p.abs()).map_err(|e| invalid(e.to_string()))?;
                img.px.iter().map(|&v| v + d.sample(r)).collect()
            }
        }
        UniformNoise => img.px.iter().map(|&v| v + p * (2.0 * r.random::<f64>() - 1.0)).collect(),
        SaltPepper => img
            .px
            .iter()
            .map(|&v| {
                let u: f64 = r.random();
                if u < p / 2.0 {
                    0.0
                } else if u < p {
                    1.0
                } else {
                    v
                }
            })
            .collect(),
        ShotNoise => {
            if p <= 0.0 {
                return Err(invalid("shot noise needs a positive photon count"));
            }
            img.px
                .iter()
                .map(|&v| {
                    let lam = (v.clamp(0.0, 1.0) * p).max(0.0);
                    if lam == 0.0 {
                        0.0
                    } else {
                        Poisson::new(lam).map(|d| d.sample(r) / p).unwrap_or(v)
                    }
                })
                .collect()
        }
        Speckle => {
            let d = Normal::new(0.0, p.abs().max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
            img.px.iter().map(|&v| v + v * d.sample(r)).collect()
        }
        Brightness => pointwise(&|v| v + p),
        Contrast => {
            let mean = img.px.iter().sum::<f64>() / img.px.len() as f64;
            pointwise(&|v| (v - mean) * p + mean)
        }
        Gamma => pointwise(&|v| v.clamp(0.0, 1.0).powf(p)),
        SaturateTowardGray => {
            let mut out = vec![0.0; img.px.len()];
            for idx in 0..plane {
                let gray = if c == 1 { 0.5 } else { (0..c).map(|ch| img.px[ch * plane + idx]).sum::<f64>() / c as f64 };
                for ch in 0..c {
                    let v = img.px[ch * plane + idx];
                    out[ch * plane + idx] = (1.0 - p) * v + p * gray;
                }
            }
            out
        }
        Invert => pointwise(&|v| (1.0 - p) * v + p * (1.0 - v)),
        FogHaze => {
            let field = smooth_field(h, w, 4, r);
            let mut out = img.px.to_vec();
            for ch in 0..c {
                for idx in 0..plane {
                    let fog = 0.5 + 0.5 * field[idx];
                    let v = &mut out[ch * plane + idx];
                    *v = (1.0 - p) * *v + p * fog;
                }
            }
            out
        }
        SnowSpecks => {
            let mut out = img.px.to_vec();
            for i in 0..h {
                for j in 0..w {
                    if r.random::<f64>() >= p {
                        continue;
                    }
                    let bright = 0.85 + 0.15 * r.random::<f64>();
                    let big = r.random::<f64>() < 0.5;
                    let offsets: &[(isize, isize)] =
                        if big { &[(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] } else { &[(0, 0)] };
                    for &(a, b) in offsets {
                        let (y, x) = (i as isize + a, j as isize + b);
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            let v = &mut out[ch * plane + y as usize * w + x as usize];
                            *v = v.max(bright);
                        }
                    }
                }
            }
            out
        }
        FrostOverlay => {
            // thin random crystal strokes over a faint smooth sheen
            let mut frost = smooth_field(h, w, 3, r).into_iter().map(|v| 0.3 * v).collect::<Vec<_>>();
            let strokes = (h * w) / 24;
            for _ in 0..strokes {
                let (mut y, mut x) = (r.random::<f64>() * h as f64, r.random::<f64>() * w as f64);
                let ang = r.random::<f64>() * std::f64::consts::PI;
                let len = 2 + r.random_range(0..5usize);
                for _ in 0..len {
                    if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                        let f = &mut frost[y as usize * w + x as usize];
                        *f = f.max(0.9);
                    }
                    y += ang.sin();
                    x += ang.cos();
                }
            }
            let mut out = img.px.to_vec();
            for ch in 0..c {
                for idx in 0..plane {
                    let v = &mut out[ch * plane + idx];
                    *v = (1.0 - 0.5 * p) * *v + p * frost[idx];
                }
            }
            out
        }
    };
    Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Applies `spec` to an image `[c,h,w]` or to each image of a batch
/// `[n,c,h,w]`.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, c, h, w) = match x.shape() {
        &[c, h, w] => (1, c, h, w),
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(Error::ShapeMismatch { op: "corrupt", detail: format!("expected an image or batch, got {s:?}") }),
    };
    if c == 0 || h < 2 || w < 2 {
        return Err(invalid(format!("image shape {:?} too small to corrupt", x.shape())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "corrupt" });
    }
    let p = spec.parameter();
    let per = c * h * w;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..n {
        let img = Image { c, h, w, px: &x.data()[i * per..(i + 1) * per] };
        let mut r = rng::stream(spec.seed, &[rng::tag(spec.kind.name()), spec.severity as u64, i as u64]);
        out.extend(corrupt_one(&img, spec.kind, p, &mut r)?);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A calibrated detector with its paired classifier, labeled for reports.
#[derive(Clone, Copy)]
pub struct SweepSystem<'a> {
    pub label: &'a str,
    pub classifier: &'a TrainedClassifier,
    pub detector: &'a DetectorModel,
}

/// One cell of a sweep: FPR of a detector on corrupted OOD data, against the
/// clean FPR at the same threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub system: String,
    pub kind: CorruptionKind,
    pub category: Category,
    pub severity: u8,
    pub n: usize,
    pub tau: f64,
    pub clean_fpr: f64,
    pub fpr: f64,
}

impl SweepCell {
    pub fn delta(&self) -> f64 {
        self.fpr - self.clean_fpr
    }
}

/// FPR grid over `kinds × severities × systems`, kind-major. Thresholds stay
/// as calibrated on clean in-distribution data.
pub fn corruption_sweep(
    ood: &Tensor,
    systems: &[SweepSystem<'_>],
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<Vec<SweepCell>> {
    if ood.rows() == 0 {
        return Err(Error::Empty("sweep OOD data"));
    }
    let mut clean = Vec::with_capacity(systems.len());
    for s in systems {
        let tau = s.detector.threshold()?;
        clean.push((tau, compute_fpr(&s.detector.score(s.classifier, ood)?, tau)?));
    }
    let mut cells = Vec::with_capacity(kinds.len() * severities.len() * systems.len());
    for &kind in kinds {
        for &severity in severities {
            let xc = corrupt(ood, &CorruptionSpec::new(kind, severity, seed))?;
            for (s, &(tau, clean_fpr)) in systems.iter().zip(&clean) {
                let fpr = compute_fpr(&s.detector.score(s.classifier, &xc)?, tau)?;
                cells.push(SweepCell {
                    system: s.label.to_string(),
                    kind,
                    category: kind.category(),
                    severity,
                    n: ood.rows(),
                    tau,
                    clean_fpr,
                    fpr,
                });
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn roster_has_22_kinds_in_5_categories() {
        let count = |c| CorruptionKind::ALL.iter().filter(|k| k.category() == c).count();
        assert_eq!(CorruptionKind::ALL.len(), 22);
        assert_eq!(
            [Category::Geometric, Category::Blurring, Category::Noise, Category::Photometric, Category::Weather].map(count),
            [5, 4, 5, 5, 3]
        );
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
    }

    #[test]
    fn pinned_gaussian_noise_table() {
        assert_eq!(CorruptionKind::GaussianNoise.table(), [0.04, 0.08, 0.12, 0.18, 0.26]);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = ramp(8, 8);
        let s = CorruptionSpec::new(CorruptionKind::HorizontalFlip, 1, 0);
        assert_eq!(corrupt(&corrupt(&x, &s).unwrap(), &s).unwrap(), x);
    }

    #[test]
    fn zero_sigma_override_is_identity() {
        let x = ramp(8, 8);
        let s = CorruptionSpec { param_override: Some(0.0), ..CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 1) };
        assert_eq!(corrupt(&x, &s).unwrap(), x);
    }

    #[test]
    fn severity_out_of_range() {
        let x = ramp(8, 8);
        assert!(corrupt(&x, &CorruptionSpec::new(CorruptionKind::Gamma, 0, 0)).is_err());
        assert!(corrupt(&x, &CorruptionSpec::new(CorruptionKind::Gamma, 6, 0)).is_err());
    }

    #[test]
    fn manifest_lists_every_kind() {
        let m = roster_manifest();
        assert!(m.starts_with(&format!("# {TABLE_VERSION}")));
        assert_eq!(m.lines().count(), 2 + 22);
    }
}
