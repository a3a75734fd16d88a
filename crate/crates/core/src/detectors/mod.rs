//! OOD detectors behind one interface: a scalar distance where higher means
//! more anomalous, and a threshold `τ` above which inputs are rejected.

mod calibration;
mod io;
mod mahalanobis;
mod svdd;

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

pub use calibration::{calibrate_threshold, pass_rate, CalibrationRecord, MIN_RECOMMENDED_SCORES};
pub use io::{write_scores_csv, DETECTOR_MAGIC};
pub use mahalanobis::{mahalanobis_fit, GaussianClassStats, TapStats, WeightMode};
pub use svdd::{svdd_fit, Hypersphere, DEFAULT_NU};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::models::{Activations, AutoencoderModel, Regime, TrainedClassifier, EVAL_BATCH};
use crate::tensor::Tensor;

pub const ODIN_TEMPERATURE: f64 = 1000.0;
pub const ODIN_EPS_PRE: f64 = 0.0014;
/// Pass rate the thresholds are calibrated to by default.
pub const DEFAULT_TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Odin,
    Agnostophobia,
    Mahalanobis,
    Autoencoder,
    DeepSvdd,
    OutlierExposure,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Odin,
        DetectorKind::Agnostophobia,
        DetectorKind::Mahalanobis,
        DetectorKind::Autoencoder,
        DetectorKind::DeepSvdd,
        DetectorKind::OutlierExposure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Odin => "odin",
            DetectorKind::Agnostophobia => "agnostophobia",
            DetectorKind::Mahalanobis => "mahalanobis",
            DetectorKind::Autoencoder => "autoencoder",
            DetectorKind::DeepSvdd => "deep_svdd",
            DetectorKind::OutlierExposure => "outlier_exposure",
        }
    }

    /// Training regime of the classifier the detector is normally paired
    /// with. Confidence detectors need the matching OOD-augmented model.
    pub fn natural_regime(self) -> Regime {
        match self {
            DetectorKind::Agnostophobia => Regime::Agnostophobia,
            DetectorKind::OutlierExposure => Regime::OutlierExposure,
            _ => Regime::Natural,
        }
    }

    /// Whether the score depends on the classifier at all.
    pub fn uses_classifier(self) -> bool {
        !matches!(self, DetectorKind::Autoencoder | DetectorKind::DeepSvdd)
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(Error::Unknown { what: "detector", name: s })
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorState {
    Odin { temperature: f64, eps_pre: f64 },
    /// `1 − max softmax` of a classifier trained with an OOD loss term.
    Confidence,
    Mahalanobis(GaussianClassStats),
    Autoencoder(AutoencoderModel),
    DeepSvdd { encoder: AutoencoderModel, sphere: Hypersphere },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    InDistribution(usize),
    Ood,
}

impl Decision {
    pub fn is_ood(self) -> bool {
        self == Decision::Ood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub state: DetectorState,
    pub threshold: Option<f64>,
    pub calibration: Option<CalibrationRecord>,
    /// Whether the attack graph can differentiate the score.
    pub differentiable: bool,
}

/// Detector constants registered on an attack tape.
pub struct DetectorBinding(Binding);

enum Binding {
    Logits,
    Mahalanobis(Vec<mahalanobis::TapBinding>, Vec<usize>),
    Autoencoder(Vec<Var>),
    Svdd(Vec<Var>, Var),
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {t}")))
    }
}

impl DetectorModel {
    fn with_state(kind: DetectorKind, state: DetectorState) -> Self {
        Self { kind, state, threshold: None, calibration: None, differentiable: true }
    }

    pub fn odin(temperature: f64, eps_pre: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if !(eps_pre >= 0.0 && eps_pre.is_finite()) {
            return Err(invalid(format!("eps_pre must be non-negative, got {eps_pre}")));
        }
        Ok(Self::with_state(DetectorKind::Odin, DetectorState::Odin { temperature, eps_pre }))
    }

    /// Agnostophobia or outlier-exposure scoring.
    pub fn confidence(kind: DetectorKind) -> Result<Self> {
        match kind {
            DetectorKind::Agnostophobia | DetectorKind::OutlierExposure => {
                Ok(Self::with_state(kind, DetectorState::Confidence))
            }
            other => Err(invalid(format!("{other} is not a confidence detector"))),
        }
    }

    pub fn mahalanobis(stats: GaussianClassStats) -> Self {
        Self::with_state(DetectorKind::Mahalanobis, DetectorState::Mahalanobis(stats))
    }

    pub fn autoencoder(ae: AutoencoderModel) -> Self {
        Self::with_state(DetectorKind::Autoencoder, DetectorState::Autoencoder(ae))
    }

    /// Fits the hypersphere on the encoder's bottleneck codes of `train_x`.
    pub fn deep_svdd(encoder: AutoencoderModel, train_x: &Tensor, nu: f64) -> Result<Self> {
        let sphere = svdd_fit(&encoder.encode(train_x)?, nu)?;
        Ok(Self::with_state(DetectorKind::DeepSvdd, DetectorState::DeepSvdd { encoder, sphere }))
    }

    pub fn is_calibrated(&self) -> bool {
        self.threshold.is_some()
    }

    /// Scores of `x` `[n,c,h,w]`, evaluated in batches.
    pub fn score(&self, clf: &TrainedClassifier, x: &Tensor) -> Result<Vec<f64>> {
        if self.kind.uses_classifier() && matches!(self.state, DetectorState::Confidence) && clf.regime != self.kind.natural_regime() {
            warn!("{} detector paired with a {} classifier", self.kind, clf.regime);
        }
        if let DetectorState::Odin { temperature, eps_pre } = self.state {
            if eps_pre > 0.0 {
                return odin_score(clf, x, temperature, eps_pre);
            }
        }
        let n = x.rows();
        let mut tape = Tape::new();
        let params = if self.kind.uses_classifier() { clf.bind_params(&mut tape, false)? } else { vec![] };
        let binding = self.bind(&mut tape, clf)?;
        let mark = tape.mark();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let xv = tape.constant(x.select_rows(&idx))?;
            let acts = if self.kind.uses_classifier() { Some(clf.forward(&mut tape, &params, xv)?) } else { None };
            let s = self.score_on(&mut tape, &binding, acts.as_ref(), xv)?;
            out.extend_from_slice(tape.value(s).data());
            tape.rewind(mark);
        }
        Ok(out)
    }

    /// Registers the detector's fitted constants on `tape`.
    pub fn bind(&self, tape: &mut Tape, clf: &TrainedClassifier) -> Result<DetectorBinding> {
        Ok(DetectorBinding(match &self.state {
            DetectorState::Odin { .. } | DetectorState::Confidence => Binding::Logits,
            DetectorState::Mahalanobis(stats) => {
                let idx = stats
                    .taps
                    .iter()
                    .map(|t| Ok(clf.arch.resolve_tap(&t.tap)?.0))
                    .collect::<Result<Vec<_>>>()?;
                Binding::Mahalanobis(stats.bind(tape)?, idx)
            }
            DetectorState::Autoencoder(ae) => Binding::Autoencoder(ae.bind_params(tape, false)?),
            DetectorState::DeepSvdd { encoder, sphere } => {
                Binding::Svdd(encoder.bind_params(tape, false)?, sphere.bind(tape)?)
            }
        }))
    }

    /// Differentiable score `[n]` for the attack graph. `acts` are the
    /// classifier activations on `x` (required by classifier-based kinds).
    /// ODIN's input preprocessing is not part of this graph; its temperature is.
    pub fn score_on(&self, tape: &mut Tape, b: &DetectorBinding, acts: Option<&Activations>, x: Var) -> Result<Var> {
        let need_acts = || acts.ok_or_else(|| invalid(format!("{} score needs classifier activations", self.kind)));
        match (&self.state, &b.0) {
            (DetectorState::Odin { temperature, .. }, Binding::Logits) => {
                max_softmax_distance(tape, need_acts()?.logits, *temperature)
            }
            (DetectorState::Confidence, Binding::Logits) => max_softmax_distance(tape, need_acts()?.logits, 1.0),
            (DetectorState::Mahalanobis(stats), Binding::Mahalanobis(tb, idx)) => {
                let acts = need_acts()?;
                let feats: Vec<Var> = idx.iter().map(|&i| acts.taps[i]).collect();
                stats.score_on(tape, tb, &feats)
            }
            (DetectorState::Autoencoder(ae), Binding::Autoencoder(p)) => ae.reconstruction_error_on(tape, p, x),
            (DetectorState::DeepSvdd { encoder, sphere }, Binding::Svdd(p, c)) => {
                let code = encoder.encode_on(tape, p, x)?;
                sphere.score_on(tape, *c, code)
            }
            _ => Err(invalid("detector binding does not match its state")),
        }
    }

    /// Calibrates `τ` on held-out in-distribution inputs.
    pub fn calibrate(&mut self, clf: &TrainedClassifier, x_in: &Tensor, target_tpr: f64) -> Result<f64> {
        let scores = self.score(clf, x_in)?;
        self.calibrate_on_scores(scores, target_tpr)
    }

    pub fn calibrate_on_scores(&mut self, scores: Vec<f64>, target_tpr: f64) -> Result<f64> {
        let tau = calibrate_threshold(&scores, target_tpr)?;
        let achieved_tpr = pass_rate(&scores, tau);
        self.threshold = Some(tau);
        self.calibration = Some(CalibrationRecord { target_tpr, achieved_tpr, scores });
        Ok(tau)
    }

    pub fn threshold(&self) -> Result<f64> {
        self.threshold.ok_or(Error::Uncalibrated)
    }

    /// OOD iff `score > τ`; otherwise the classifier's prediction.
    pub fn decide(&self, scores: &[f64], predictions: &[usize]) -> Result<Vec<Decision>> {
        let tau = self.threshold()?;
        Ok(scores
            .iter()
            .zip(predictions)
            .map(|(&s, &p)| if s > tau { Decision::Ood } else { Decision::InDistribution(p) })
            .collect())
    }

    pub fn detect(&self, clf: &TrainedClassifier, x: &Tensor) -> Result<Vec<Decision>> {
        self.threshold()?;
        let scores = self.score(clf, x)?;
        self.decide(&scores, &clf.predict(x)?)
    }
}

/// `1 − max_k softmax(z / T)`, shape `[n]`.
fn max_softmax_distance(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let z = if temperature == 1.0 { logits } else { tape.mul_scalar(logits, 1.0 / temperature)? };
    let p = tape.softmax(z)?;
    let m = tape.max(p)?;
    let neg = tape.mul_scalar(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `sign` with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `1 − max softmax(f(x̃)/T)` with `x̃ = clip(x − ε·sign(∇ₓ ℓ_xent(f(x), ŷ)), 0, 1)`.
pub fn odin_score(clf: &TrainedClassifier, x: &Tensor, temperature: f64, eps_pre: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if !(eps_pre >= 0.0 && eps_pre.is_finite()) {
        return Err(invalid(format!("eps_pre must be non-negative, got {eps_pre}")));
    }
    let n = x.rows();
    let mut tape = Tape::new();
    let params = clf.bind_params(&mut tape, false)?;
    let mark = tape.mark();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let xb = x.select_rows(&idx);
        let input = if eps_pre > 0.0 {
            let xv = tape.leaf(xb.clone(), true)?;
            let logits = clf.forward(&mut tape, &params, xv)?.logits;
            let pred = tape.value(logits).argmax_rows();
            let rows = tape.softmax_xent_rows(logits, &pred)?;
            let loss = tape.sum(rows)?;
            let grads = tape.backward(loss)?;
            let g = grads.get(xv).ok_or(Error::MissingGradient(0))?;
            let data = xb.data().iter().zip(g).map(|(&v, &gi)| (v - eps_pre * sign(gi)).clamp(0.0, 1.0)).collect();
            tape.constant(Tensor::new(xb.shape().to_vec(), data)?)?
        } else {
            tape.constant(xb)?
        };
        let logits = clf.forward(&mut tape, &params, input)?.logits;
        let s = max_softmax_distance(&mut tape, logits, temperature)?;
        out.extend_from_slice(tape.value(s).data());
        tape.rewind(mark);
    }
    Ok(out)
}

/// `1 − max softmax(f(x))`.
pub fn confidence_score(clf: &TrainedClassifier, x: &Tensor) -> Result<Vec<f64>> {
    if !matches!(clf.regime, Regime::Agnostophobia | Regime::OutlierExposure) {
        warn!("confidence score on a {} classifier", clf.regime);
    }
    odin_score(clf, x, 1.0, 0.0)
}

/// Weighted nearest-class Mahalanobis distance of the classifier features.
pub fn mahalanobis_score(stats: &GaussianClassStats, clf: &TrainedClassifier, x: &Tensor) -> Result<Vec<f64>> {
    DetectorModel::mahalanobis(stats.clone()).score(clf, x)
}

/// Mean squared reconstruction error.
pub fn autoencoder_score(ae: &AutoencoderModel, x: &Tensor) -> Result<Vec<f64>> {
    ae.reconstruction_error(x)
}

/// `1 − max softmax` computed directly from logits rows.
pub fn max_softmax_distance_of(logits: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone())?;
    let s = max_softmax_distance(&mut tape, z, temperature)?;
    Ok(tape.value(s).data().to_vec())
}
