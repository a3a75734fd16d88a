//! Class-conditional Gaussians with a tied covariance per feature tap.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::models::TrainedClassifier;
use crate::tensor::Tensor;

/// How per-tap distances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// Normalized positive coefficients of a one-feature logistic fit that
    /// separates in-distribution from OOD distances.
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapStats {
    pub tap: String,
    /// Class means `[K, d]`.
    pub means: Tensor,
    /// Pooled within-class covariance `[d, d]`, before regularization.
    pub cov: Tensor,
    pub lambda_reg: f64,
    /// `L⁻ᵀ` for `Σ + λI = L Lᵀ`, so that `‖(φ − μ)·whitener‖²` is the
    /// squared Mahalanobis distance.
    whitener: Tensor,
}

impl TapStats {
    /// Fits class means and the tied covariance from `features` `[n, d]`.
    /// `lambda_reg = None` uses `1e-3·trace(Σ)/d`.
    pub fn fit(tap: &str, features: &Tensor, labels: &[usize], classes: usize, lambda_reg: Option<f64>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(invalid("features must be [n, d] with one label per row"));
        }
        if features.rows() == 0 {
            return Err(Error::Empty("Mahalanobis training features"));
        }
        let (n, d) = (features.rows(), features.row_len());
        let mut counts = vec![0usize; classes];
        let mut means = vec![0.0; classes * d];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            counts[l] += 1;
            means[l * d..(l + 1) * d].iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
        }
        if let Some(k) = counts.iter().position(|&c| c < 2) {
            return Err(invalid(format!("class {k} has {} examples; at least 2 are needed", counts[k])));
        }
        for (k, &c) in counts.iter().enumerate() {
            means[k * d..(k + 1) * d].iter_mut().for_each(|m| *m /= c as f64);
        }
        let centered = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - means[labels[i] * d + j]);
        let cov = centered.tr_mul(&centered) / n as f64;
        let lambda_reg = lambda_reg.unwrap_or(1e-3 * cov.trace() / d as f64);
        if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
            return Err(invalid(format!("lambda_reg must be non-negative, got {lambda_reg}")));
        }
        let cov_t = Tensor::new(vec![d, d], cov.transpose().as_slice().to_vec())?;
        Self::from_parts(tap, Tensor::new(vec![classes, d], means)?, cov_t, lambda_reg)
    }

    /// Rebuilds the cached factorization from stored moments.
    pub fn from_parts(tap: &str, means: Tensor, cov: Tensor, lambda_reg: f64) -> Result<Self> {
        let d = means.row_len();
        if cov.shape() != [d, d] {
            return Err(invalid(format!("covariance {:?} does not match mean width {d}", cov.shape())));
        }
        // Row-major data read as column-major is the transpose; Σ is symmetric.
        let reg = DMatrix::from_column_slice(d, d, cov.data()) + DMatrix::identity(d, d) * lambda_reg;
        let chol = reg.cholesky().ok_or(Error::Singular)?;
        let l_inv = chol.l().solve_lower_triangular(&DMatrix::identity(d, d)).ok_or(Error::Singular)?;
        // whitener = L⁻ᵀ; its row-major layout is L⁻¹ in column-major order.
        let whitener = Tensor::new(vec![d, d], l_inv.as_slice().to_vec())?;
        if !whitener.is_finite() {
            return Err(Error::Singular);
        }
        Ok(Self { tap: tap.to_string(), means, cov, lambda_reg, whitener })
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.row_len()
    }

    fn bind(&self, tape: &mut Tape) -> Result<TapBinding> {
        let whitener = tape.constant(self.whitener.clone())?;
        let white_means = self.means_whitened()?;
        let neg_means = (0..self.classes())
            .map(|k| tape.constant(Tensor::new(vec![self.dim()], white_means.row(k).iter().map(|v| -v).collect())?))
            .collect::<Result<_>>()?;
        Ok(TapBinding { whitener, neg_means })
    }

    fn means_whitened(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = tape.constant(self.means.clone())?;
        let w = tape.constant(self.whitener.clone())?;
        let out = tape.matmul(m, w)?;
        Ok(tape.value(out).clone())
    }

    /// Squared distance to the nearest class mean, shape `[n]`.
    fn min_distance_on(&self, tape: &mut Tape, b: &TapBinding, feats: Var) -> Result<Var> {
        let w = tape.value(feats).row_len();
        if w != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "mahalanobis",
                detail: format!("tap `{}` has width {w}, statistics expect {}", self.tap, self.dim()),
            });
        }
        let z = tape.matmul(feats, b.whitener)?;
        let mut per_class = Vec::with_capacity(b.neg_means.len());
        for &nm in &b.neg_means {
            let diff = tape.add(z, nm)?;
            let sq = tape.mul(diff, diff)?;
            per_class.push(tape.sum_rows(sq)?);
        }
        let all = tape.concat_cols(&per_class)?;
        let neg = tape.mul_scalar(all, -1.0)?;
        let m = tape.max(neg)?;
        tape.mul_scalar(m, -1.0)
    }
}

pub(crate) struct TapBinding {
    whitener: Var,
    neg_means: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassStats {
    pub taps: Vec<TapStats>,
    pub weights: Vec<f64>,
    pub weight_mode: WeightMode,
}

impl GaussianClassStats {
    pub fn new(taps: Vec<TapStats>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Empty("Mahalanobis taps"));
        }
        let w = 1.0 / taps.len() as f64;
        Ok(Self { weights: vec![w; taps.len()], taps, weight_mode: WeightMode::Uniform })
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|t| t.tap.as_str()).collect()
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<Vec<TapBinding>> {
        self.taps.iter().map(|t| t.bind(tape)).collect()
    }

    /// Per-tap minimum squared distances, one `[n]` var per tap.
    pub(crate) fn distances_on(&self, tape: &mut Tape, b: &[TapBinding], feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != self.taps.len() {
            return Err(invalid(format!("{} feature taps supplied, statistics hold {}", feats.len(), self.taps.len())));
        }
        self.taps.iter().zip(b).zip(feats).map(|((t, b), &f)| t.min_distance_on(tape, b, f)).collect()
    }

    /// `Σ_ℓ w_ℓ·d_ℓ`, shape `[n]`.
    pub(crate) fn score_on(&self, tape: &mut Tape, b: &[TapBinding], feats: &[Var]) -> Result<Var> {
        let dists = self.distances_on(tape, b, feats)?;
        let mut total = tape.mul_scalar(dists[0], self.weights[0])?;
        for (&d, &w) in dists.iter().zip(&self.weights).skip(1) {
            let s = tape.mul_scalar(d, w)?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    /// Per-tap distances from precomputed features, as `[tap][example]`.
    pub fn tap_distances(&self, feats: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let vars = feats.iter().map(|f| tape.constant(f.clone())).collect::<Result<Vec<_>>>()?;
        let d = self.distances_on(&mut tape, &b, &vars)?;
        Ok(d.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }

    /// Weighted score from precomputed per-tap features `[n, d_ℓ]`.
    pub fn score_features(&self, feats: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let vars = feats.iter().map(|f| tape.constant(f.clone())).collect::<Result<Vec<_>>>()?;
        let s = self.score_on(&mut tape, &b, &vars)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn features(&self, model: &TrainedClassifier, x: &Tensor) -> Result<Vec<Tensor>> {
        self.taps.iter().map(|t| model.extract_features(x, &t.tap)).collect()
    }

    /// Replaces the tap weights by logistic-separation coefficients fitted on
    /// in-distribution versus OOD distances. Falls back to uniform weights
    /// when no tap separates in the OOD direction.
    pub fn calibrate_weights(&mut self, model: &TrainedClassifier, x_in: &Tensor, x_ood: &Tensor) -> Result<()> {
        if x_in.rows() == 0 || x_ood.rows() == 0 {
            return Err(Error::Empty("weight calibration data"));
        }
        let d_in = self.tap_distances(&self.features(model, x_in)?)?;
        let d_ood = self.tap_distances(&self.features(model, x_ood)?)?;
        let coefs: Vec<f64> = d_in.iter().zip(&d_ood).map(|(a, b)| logistic_slope(a, b).max(0.0)).collect();
        let total: f64 = coefs.iter().sum();
        if total > 0.0 && total.is_finite() {
            self.weights = coefs.iter().map(|c| c / total).collect();
        } else {
            self.weights = vec![1.0 / self.taps.len() as f64; self.taps.len()];
        }
        self.weight_mode = WeightMode::Logistic;
        Ok(())
    }
}

/// Slope, on the raw scale, of a logistic regression of `label = ood` on a
/// single distance feature. Fitted by Newton's method on standardized inputs.
fn logistic_slope(d_in: &[f64], d_ood: &[f64]) -> f64 {
    let xs: Vec<(f64, f64)> = d_in.iter().map(|&d| (d, 0.0)).chain(d_ood.iter().map(|&d| (d, 1.0))).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().map(|p| p.0).sum::<f64>() / n;
    let sd = (xs.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return 0.0;
    }
    let (mut a, mut b) = (0.0, 0.0);
    let ridge = 1e-6;
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (ridge * a, 0.0, ridge, 0.0, 1e-12);
        for &(d, y) in &xs {
            let s = (d - mean) / sd;
            let p = 1.0 / (1.0 + (-(a * s + b)).exp());
            let r = p - y;
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a -= da;
        b -= db;
        if da.abs() + db.abs() < 1e-10 {
            break;
        }
    }
    a / sd
}

/// Fits the statistics on the named taps of `model` over labeled `train`.
pub fn mahalanobis_fit(
    model: &TrainedClassifier,
    train: &LabeledDataset,
    taps: &[&str],
    lambda_reg: Option<f64>,
) -> Result<GaussianClassStats> {
    if taps.is_empty() {
        return Err(Error::Empty("Mahalanobis taps"));
    }
    if train.labels.len() != train.len() {
        return Err(invalid("Mahalanobis fitting needs labeled data"));
    }
    let stats = taps
        .iter()
        .map(|&tap| {
            let name = model.arch.taps()[model.arch.resolve_tap(tap)?.0].0;
            let f = model.extract_features(&train.images, tap)?;
            TapStats::fit(name, &f, &train.labels, model.arch.classes, lambda_reg)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianClassStats::new(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_stats(means: &[Vec<f64>]) -> GaussianClassStats {
        let d = means[0].len();
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let tap = TapStats::from_parts("t", Tensor::from_rows(means).unwrap(), Tensor::new(vec![d, d], eye).unwrap(), 0.0)
            .unwrap();
        GaussianClassStats::new(vec![tap]).unwrap()
    }

    #[test]
    fn pythagorean_distance() {
        let s = identity_stats(&[vec![0.0, 0.0]]);
        let f = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!((s.score_features(&[f]).unwrap()[0] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_class_minimum() {
        let s = identity_stats(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
        let f = Tensor::from_rows(&[vec![2.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let sc = s.score_features(&[f]).unwrap();
        assert!((sc[0] - 4.0).abs() < 1e-12);
        assert!(sc[1].abs() < 1e-12);
    }

    #[test]
    fn singleton_class_rejected() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(TapStats::fit("t", &f, &[0, 0, 1], 2, None).is_err());
    }

    #[test]
    fn zero_covariance_without_regularization_is_singular() {
        let f = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(TapStats::fit("t", &f, &[0, 0], 1, Some(0.0)), Err(Error::Singular)));
    }

    #[test]
    fn logistic_slope_sign() {
        let lo: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let hi: Vec<f64> = (0..50).map(|i| 3.0 + i as f64 * 0.1).collect();
        assert!(logistic_slope(&lo, &hi) > 0.0);
        assert!(logistic_slope(&hi, &lo) < 0.0);
    }
}
