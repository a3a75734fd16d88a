//! Training regimes: natural, PGD adversarial, and OOD-augmented (entropy
//! maximization / outlier exposure) with an optional adversarial inner loop.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, Regime, TrainedClassifier};
use crate::attacks::pgd_untargeted;
use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::optim::Sgd;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.02, momentum: 0.9, batch: 64, seed: 0 }
    }
}

/// Inner-loop PGD used by adversarial training (untargeted, L∞).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    /// Radius in normalized `[0,1]` pixel units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl AdvTrainConfig {
    /// `step_size = 2.5·ε/steps`.
    pub fn new(epsilon: f64, steps: usize) -> Self {
        let steps = steps.max(1);
        Self { epsilon, steps, step_size: 2.5 * epsilon / steps as f64 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.steps == 0 || self.step_size.is_nan() || self.step_size < 0.0 {
            return Err(invalid("adversarial training needs steps ≥ 1 and a non-negative step size"));
        }
        Ok(())
    }
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self::new(8.0 / 255.0, 7)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    Agnostophobia,
    OutlierExposure,
}

impl OodMode {
    pub fn regime(self) -> Regime {
        match self {
            OodMode::Agnostophobia => Regime::Agnostophobia,
            OodMode::OutlierExposure => Regime::OutlierExposure,
        }
    }

    /// Default weight of the OOD term.
    pub fn default_weight(self) -> f64 {
        match self {
            OodMode::Agnostophobia => 1.0,
            OodMode::OutlierExposure => 0.5,
        }
    }
}

pub fn train_natural(arch: &Architecture, data: &LabeledDataset, hyper: &TrainHyper) -> Result<TrainedClassifier> {
    fit(arch, data, hyper, Regime::Natural, None, None)
}

/// Madry-style training: every minibatch is replaced by its PGD-perturbed
/// counterpart before the gradient step. `epsilon = 0` reproduces
/// [`train_natural`] exactly.
pub fn train_adversarial(
    arch: &Architecture,
    data: &LabeledDataset,
    hyper: &TrainHyper,
    attack: &AdvTrainConfig,
) -> Result<TrainedClassifier> {
    attack.validate()?;
    fit(arch, data, hyper, Regime::Adversarial, Some(attack), None)
}

/// Cross-entropy on in-distribution batches plus `ood_weight` times the
/// cross-entropy between the softmax on an auxiliary OOD batch and the
/// uniform distribution. `attack`, when given, perturbs the in-distribution
/// batches adversarially as in [`train_adversarial`].
pub fn train_with_ood_loss(
    arch: &Architecture,
    in_data: &LabeledDataset,
    ood_data: &LabeledDataset,
    mode: OodMode,
    hyper: &TrainHyper,
    ood_weight: f64,
    attack: Option<&AdvTrainConfig>,
) -> Result<TrainedClassifier> {
    if ood_data.is_empty() {
        return Err(Error::Empty("OOD training data"));
    }
    if ood_data.shape() != in_data.shape() {
        return Err(invalid("OOD training data must match the in-distribution image shape"));
    }
    if !(ood_weight >= 0.0 && ood_weight.is_finite()) {
        return Err(invalid(format!("ood_weight must be non-negative, got {ood_weight}")));
    }
    if let Some(a) = attack {
        a.validate()?;
    }
    let mut model = fit(arch, in_data, hyper, mode.regime(), attack, Some((ood_data, ood_weight)))?;
    model.meta.ood_weight = Some(ood_weight);
    Ok(model)
}

fn validate_data(arch: &Architecture, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if data.labels.len() != data.len() {
        return Err(invalid("training data must be labeled"));
    }
    if data.shape() != arch.input {
        return Err(invalid(format!("data shape {:?} does not match architecture input {:?}", data.shape(), arch.input)));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= arch.classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes: arch.classes });
    }
    let mut seen = vec![false; arch.classes];
    data.labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().any(|s| !s) {
        warn!("training data lacks examples for some classes");
    }
    Ok(())
}

fn fit(
    arch: &Architecture,
    data: &LabeledDataset,
    hyper: &TrainHyper,
    regime: Regime,
    attack: Option<&AdvTrainConfig>,
    ood: Option<(&LabeledDataset, f64)>,
) -> Result<TrainedClassifier> {
    arch.validate()?;
    validate_data(arch, data)?;
    if hyper.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut model = TrainedClassifier::init(arch.clone(), hyper.seed)?;
    model.regime = regime;
    model.meta.adversarial = attack.cloned();
    let mut opt = Sgd::new(hyper.lr, hyper.momentum)?;
    // Independent streams so that optional ingredients never perturb the
    // shuffle order of the others.
    let mut order_rng = rng::stream(hyper.seed, &[rng::tag("shuffle")]);
    let mut attack_rng = rng::stream(hyper.seed, &[rng::tag("adv-train")]);
    let mut ood_rng = rng::stream(hyper.seed, &[rng::tag("ood-batch")]);
    let active_attack = attack.filter(|a| a.epsilon > 0.0);
    let active_ood = ood.filter(|(_, w)| *w > 0.0);

    // The attack radius grows linearly over the first half of training.
    let warmup = hyper.epochs.div_ceil(2).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut x = data.images.select_rows(chunk);
            if let Some(a) = active_attack {
                let ramp = ((epoch + 1) as f64 / warmup as f64).min(1.0);
                let eps = a.epsilon * ramp;
                x = pgd_untargeted(&model, &x, &labels, eps, a.steps, a.step_size * ramp, &mut attack_rng)?;
            }
            let mut tape = Tape::new();
            let params = model.bind_params(&mut tape, true)?;
            let xv = tape.constant(x)?;
            let logits = model.forward(&mut tape, &params, xv)?.logits;
            let mut loss = tape.softmax_cross_entropy(logits, &labels)?;
            if let Some((ood_data, w)) = active_ood {
                let idx: Vec<usize> = (0..chunk.len()).map(|_| ood_rng.random_range(0..ood_data.len())).collect();
                let ov = tape.constant(ood_data.images.select_rows(&idx))?;
                let ologits = model.forward(&mut tape, &params, ov)?.logits;
                let u = tape.uniform_xent_rows(ologits)?;
                let u = tape.mean(u)?;
                let u = tape.mul_scalar(u, w)?;
                loss = tape.add(loss, u)?;
            }
            epoch_loss += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&[f64]>> = params.iter().map(|&p| grads.get(p)).collect();
            opt.step(&mut model.params, &g)?;
        }
        let mean = epoch_loss / batches as f64;
        debug!("{} epoch {epoch}: loss {mean:.4}", regime.name());
        model.meta.loss_history.push(mean);
    }
    model.meta.epochs = hyper.epochs;
    model.meta.train_accuracy = model.accuracy(data)?;
    Ok(model)
}

/// Components of the OOD-augmented objective on fixed batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodLossBreakdown {
    pub total: f64,
    pub in_loss: f64,
    pub ood_loss: f64,
}

/// Evaluates the OOD-augmented training objective exactly as the training
/// graph records it, along with its separately measured parts.
pub fn ood_training_loss(
    model: &TrainedClassifier,
    in_x: &Tensor,
    in_labels: &[usize],
    ood_x: &Tensor,
    weight: f64,
) -> Result<OodLossBreakdown> {
    let mut tape = Tape::new();
    let params = model.bind_params(&mut tape, false)?;
    let xv = tape.constant(in_x.clone())?;
    let logits = model.forward(&mut tape, &params, xv)?.logits;
    let in_loss = tape.softmax_cross_entropy(logits, in_labels)?;
    let ov = tape.constant(ood_x.clone())?;
    let ologits = model.forward(&mut tape, &params, ov)?.logits;
    let u = tape.uniform_xent_rows(ologits)?;
    let u = tape.mean(u)?;
    let scaled = tape.mul_scalar(u, weight)?;
    let total = tape.add(in_loss, scaled)?;
    Ok(OodLossBreakdown {
        total: tape.value(total).data()[0],
        in_loss: tape.value(in_loss).data()[0],
        ood_loss: tape.value(u).data()[0],
    })
}
