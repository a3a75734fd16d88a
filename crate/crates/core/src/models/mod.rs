//! Classifier architectures, training regimes and the autoencoder.

mod autoencoder;
mod train;

pub use autoencoder::{train_autoencoder, AeHyper, AutoencoderArch, AutoencoderModel, OutputActivation, DEFAULT_SIGMA_DAE};
pub use train::{
    ood_training_loss, train_adversarial, train_natural, train_with_ood_loss, AdvTrainConfig, OodLossBreakdown,
    OodMode, TrainHyper,
};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{ImageShape, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OWMC1";

/// Inference batch size used by every batched evaluation helper.
pub const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    /// flatten → dense+relu → dense+relu → logits
    #[serde(rename = "mlp-3")]
    Mlp3,
    /// conv+relu → conv+relu → flatten → dense+relu → logits
    #[serde(rename = "convnet-2")]
    ConvNet2,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp3 => "mlp-3",
            ArchKind::ConvNet2 => "convnet-2",
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-3" => Ok(ArchKind::Mlp3),
            "convnet-2" => Ok(ArchKind::ConvNet2),
            _ => Err(Error::Unknown { what: "architecture", name: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// mlp-3: `[hidden1, hidden2]`; convnet-2: `[conv1 channels, conv2 channels, dense]`.
    pub widths: Vec<usize>,
    pub input: ImageShape,
    pub classes: usize,
}

const KERNEL: usize = 3;

/// Fixed input standardization applied before the first layer.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

impl Architecture {
    pub fn mlp3(input: ImageShape, classes: usize) -> Self {
        Self { kind: ArchKind::Mlp3, widths: vec![160, 64], input, classes }
    }

    pub fn convnet2(input: ImageShape, classes: usize) -> Self {
        Self { kind: ArchKind::ConvNet2, widths: vec![4, 4, 16], input, classes }
    }

    pub fn named(kind: ArchKind, input: ImageShape, classes: usize) -> Self {
        match kind {
            ArchKind::Mlp3 => Self::mlp3(input, classes),
            ArchKind::ConvNet2 => Self::convnet2(input, classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        let want = match self.kind {
            ArchKind::Mlp3 => 2,
            ArchKind::ConvNet2 => 3,
        };
        if self.widths.len() != want || self.widths.contains(&0) {
            return Err(invalid(format!("{} needs {want} positive widths, got {:?}", self.kind.name(), self.widths)));
        }
        if self.classes < 2 {
            return Err(invalid("a classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.input.numel();
        let k = self.classes;
        match self.kind {
            ArchKind::Mlp3 => {
                let (h1, h2) = (self.widths[0], self.widths[1]);
                vec![vec![d, h1], vec![h1], vec![h1, h2], vec![h2], vec![h2, k], vec![k]]
            }
            ArchKind::ConvNet2 => {
                let (c1, c2, hd) = (self.widths[0], self.widths[1], self.widths[2]);
                let flat = c2 * self.input.h * self.input.w;
                vec![
                    vec![c1, self.input.c, KERNEL, KERNEL],
                    vec![c1],
                    vec![c2, c1, KERNEL, KERNEL],
                    vec![c2],
                    vec![flat, hd],
                    vec![hd],
                    vec![hd, k],
                    vec![k],
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Feature taps in forward order with their per-example widths.
    pub fn taps(&self) -> Vec<(&'static str, usize)> {
        let hw = self.input.h * self.input.w;
        match self.kind {
            ArchKind::Mlp3 => vec![("hidden1", self.widths[0]), ("hidden2", self.widths[1]), ("logits", self.classes)],
            ArchKind::ConvNet2 => vec![
                ("conv1", self.widths[0] * hw),
                ("conv2", self.widths[1] * hw),
                ("dense", self.widths[2]),
                ("logits", self.classes),
            ],
        }
    }

    /// Name of the penultimate tap; `"penultimate"` is accepted as an alias.
    pub fn penultimate(&self) -> &'static str {
        match self.kind {
            ArchKind::Mlp3 => "hidden2",
            ArchKind::ConvNet2 => "dense",
        }
    }

    /// The last convolutional (or, for mlp-3, last hidden) layer.
    pub fn last_feature_layer(&self) -> &'static str {
        match self.kind {
            ArchKind::Mlp3 => "hidden2",
            ArchKind::ConvNet2 => "conv2",
        }
    }

    pub fn resolve_tap(&self, name: &str) -> Result<(usize, usize)> {
        let name = if name == "penultimate" { self.penultimate() } else { name };
        self.taps()
            .iter()
            .position(|(t, _)| *t == name)
            .map(|i| (i, self.taps()[i].1))
            .ok_or_else(|| Error::Unknown { what: "feature tap", name: name.to_string() })
    }

    /// He-normal weights for rectified layers, `1/fan_in` variance for the
    /// logit layer, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = rng::stream(seed, &[rng::tag("init"), rng::tag(self.kind.name())]);
        let shapes = self.param_shapes();
        let last = shapes.len() - 2;
        shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let gain = if i == last { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                let n: usize = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
            })
            .collect()
    }
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// One entry per [`Architecture::taps`] element, each `[batch, width]`.
    pub taps: Vec<Var>,
    pub logits: Var,
}

/// Anything that maps images to logits on a tape. Implemented by
/// [`TrainedClassifier`]; tests substitute simpler models.
pub trait LogitModel {
    fn input_shape(&self) -> ImageShape;
    fn classes(&self) -> usize;
    /// Registers the parameters on `tape` as constants.
    fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>>;
    fn logits_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Natural,
    Adversarial,
    Agnostophobia,
    OutlierExposure,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Natural => "natural",
            Regime::Adversarial => "adversarial",
            Regime::Agnostophobia => "agnostophobia",
            Regime::OutlierExposure => "outlier_exposure",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Regime::Natural, Regime::Adversarial, Regime::Agnostophobia, Regime::OutlierExposure]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Unknown { what: "training regime", name: s.to_string() })
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Mean minibatch loss per epoch.
    pub loss_history: Vec<f64>,
    /// PGD settings when the inner loop was adversarial.
    pub adversarial: Option<AdvTrainConfig>,
    pub ood_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub arch: Architecture,
    pub params: Vec<Tensor>,
    pub regime: Regime,
    pub meta: TrainingMeta,
}

impl TrainedClassifier {
    /// Freshly initialized, untrained model.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(seed);
        Ok(Self {
            arch,
            params,
            regime: Regime::Natural,
            meta: TrainingMeta {
                seed,
                epochs: 0,
                train_accuracy: 0.0,
                test_accuracy: None,
                loss_history: vec![],
                adversarial: None,
                ood_weight: None,
            },
        })
    }

    pub fn bind_params(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let s = tape.value(x).shape();
        let i = self.arch.input;
        if s.len() != 4 || s[1..] != [i.c, i.h, i.w] {
            return Err(Error::ShapeMismatch {
                op: "classifier forward",
                detail: format!("input {s:?}, expected [n, {}, {}, {}]", i.c, i.h, i.w),
            });
        }
        Ok(s[0])
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Activations> {
        let n = self.check_input(tape, x)?;
        let x = tape.add_scalar(x, -INPUT_CENTER)?;
        let x = tape.mul_scalar(x, INPUT_GAIN)?;
        match self.arch.kind {
            ArchKind::Mlp3 => {
                let flat = tape.reshape(x, &[n, self.arch.input.numel()])?;
                let h1 = dense(tape, flat, params[0], params[1], true)?;
                let h2 = dense(tape, h1, params[2], params[3], true)?;
                let logits = dense(tape, h2, params[4], params[5], false)?;
                Ok(Activations { taps: vec![h1, h2, logits], logits })
            }
            ArchKind::ConvNet2 => {
                let hw = self.arch.input.h * self.arch.input.w;
                let c1 = tape.conv2d_small(x, params[0], params[1])?;
                let c1 = tape.relu(c1)?;
                let c2 = tape.conv2d_small(c1, params[2], params[3])?;
                let c2 = tape.relu(c2)?;
                let f1 = tape.reshape(c1, &[n, self.arch.widths[0] * hw])?;
                let f2 = tape.reshape(c2, &[n, self.arch.widths[1] * hw])?;
                let d = dense(tape, f2, params[4], params[5], true)?;
                let logits = dense(tape, d, params[6], params[7], false)?;
                Ok(Activations { taps: vec![f1, f2, d, logits], logits })
            }
        }
    }

    /// Batched inference of logits `[n, K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.tap_batched(x, None)
    }

    /// Named activation, detached, as `[n, width]`.
    pub fn extract_features(&self, x: &Tensor, tap: &str) -> Result<Tensor> {
        let (idx, _) = self.arch.resolve_tap(tap)?;
        self.tap_batched(x, Some(idx))
    }

    fn tap_batched(&self, x: &Tensor, tap: Option<usize>) -> Result<Tensor> {
        let n = x.rows();
        let mut tape = Tape::new();
        let params = self.bind_params(&mut tape, false)?;
        let mark = tape.mark();
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let xv = tape.constant(x.select_rows(&idx))?;
            let acts = self.forward(&mut tape, &params, xv)?;
            let v = tap.map_or(acts.logits, |i| acts.taps[i]);
            let t = tape.value(v);
            width = t.row_len();
            out.extend_from_slice(t.data());
            tape.rewind(mark);
        }
        Tensor::new(vec![n, width], out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.labels.is_empty() {
            return Err(invalid("accuracy needs a labeled dataset"));
        }
        let pred = self.predict(&ds.images)?;
        let hits = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / ds.len() as f64)
    }

    /// Softmax of the logits, row-wise.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let k = logits.row_len();
        let mut out = logits.into_data();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter_mut().map(|v| {
                *v = (*v - max).exp();
                *v
            }).sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Tensor::new(vec![x.rows(), k], out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = CheckpointHeader {
            architecture: self.arch.clone(),
            regime: self.regime,
            seed: self.meta.seed,
            classes: self.arch.classes,
            input: self.arch.input,
            meta: self.meta.clone(),
        };
        tensor::write_json_block(w, &header)?;
        tensor::write_tensors(w, &self.params)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        tensor::expect_magic(r, CHECKPOINT_MAGIC, "model checkpoint")?;
        let header: CheckpointHeader = tensor::read_json_block(r)?;
        header.architecture.validate()?;
        let params = tensor::read_tensors(r)?;
        let shapes = header.architecture.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Format("checkpoint parameters do not match the architecture".into()));
        }
        Ok(Self { arch: header.architecture, params, regime: header.regime, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::fs::read(path)?.as_slice())
    }
}

impl LogitModel for TrainedClassifier {
    fn input_shape(&self) -> ImageShape {
        self.arch.input
    }

    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.bind_params(tape, false)
    }

    fn logits_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward(tape, params, x)?.logits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    regime: Regime,
    seed: u64,
    classes: usize,
    input: ImageShape,
    meta: TrainingMeta,
}

pub(crate) fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architectures_differ_in_size() {
        let a = Architecture::mlp3(ImageShape::DESK, 10).param_count();
        let b = Architecture::convnet2(ImageShape::DESK, 10).param_count();
        assert!(a.max(b) >= 2 * a.min(b), "{a} vs {b}");
    }

    #[test]
    fn penultimate_width() {
        let arch = Architecture::mlp3(ImageShape::new(1, 8, 8), 3);
        let m = TrainedClassifier::init(arch, 1).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        assert_eq!(m.extract_features(&x, "penultimate").unwrap().shape(), &[2, 64]);
        assert!(matches!(m.extract_features(&x, "conv9"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        for arch in [Architecture::mlp3(ImageShape::new(1, 8, 8), 3), Architecture::convnet2(ImageShape::new(1, 8, 8), 3)] {
            let mut m = TrainedClassifier::init(arch.clone(), 1).unwrap();
            m.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
            let x = Tensor::full(&[1, 1, 8, 8], 0.7);
            for (tap, width) in arch.taps() {
                let f = m.extract_features(&x, tap).unwrap();
                assert_eq!(f.shape(), &[1, width]);
                assert!(f.data().iter().all(|&v| v == 0.0), "{tap}");
            }
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = TrainedClassifier::init(Architecture::mlp3(ImageShape::new(1, 8, 8), 3), 1).unwrap();
        assert!(m.logits(&Tensor::zeros(&[1, 1, 8, 9])).is_err());
    }
}
