//! Dense denoising autoencoder: `x → relu(hidden) → bottleneck` and back.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{dense, EVAL_BATCH};
use crate::autodiff::{Tape, Var};
use crate::data::ImageShape;
use crate::error::{invalid, Error, Result};
use crate::optim::Sgd;
use crate::rng;
use crate::tensor::{self, Tensor};

pub const AUTOENCODER_MAGIC: &[u8; 5] = b"OWAE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    pub input: ImageShape,
    pub hidden: usize,
    pub bottleneck: usize,
    pub output: OutputActivation,
}

impl AutoencoderArch {
    pub fn new(input: ImageShape) -> Self {
        Self { input, hidden: 128, bottleneck: 32, output: OutputActivation::Sigmoid }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h, z) = (self.input.numel(), self.hidden, self.bottleneck);
        vec![vec![d, h], vec![h], vec![h, z], vec![z], vec![z, h], vec![h], vec![h, d], vec![d]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AeHyper {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.05, momentum: 0.9, batch: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub arch: AutoencoderArch,
    pub params: Vec<Tensor>,
    /// Standard deviation of the training-time input corruption.
    pub sigma_dae: f64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AeHeader {
    arch: AutoencoderArch,
    sigma_dae: f64,
    seed: u64,
    loss_history: Vec<f64>,
}

impl AutoencoderModel {
    pub fn init(arch: AutoencoderArch, seed: u64) -> Result<Self> {
        if arch.hidden == 0 || arch.bottleneck == 0 {
            return Err(invalid("autoencoder widths must be positive"));
        }
        arch.input.validate()?;
        let mut r = rng::stream(seed, &[rng::tag("ae-init")]);
        let params = arch
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(&shape);
                }
                let normal = Normal::new(0.0, (2.0 / shape[0] as f64).sqrt()).unwrap();
                let n = shape[0] * shape[1];
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut r)).collect()).unwrap()
            })
            .collect();
        Ok(Self { arch, params, sigma_dae: 0.0, seed, loss_history: vec![] })
    }

    pub fn bind_params(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    fn flatten(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        let i = self.arch.input;
        if s.len() != 4 || s[1..] != [i.c, i.h, i.w] {
            return Err(Error::ShapeMismatch {
                op: "autoencoder",
                detail: format!("input {s:?}, expected [n, {}, {}, {}]", i.c, i.h, i.w),
            });
        }
        tape.reshape(x, &[s[0], i.numel()])
    }

    /// Bottleneck code `[n, bottleneck]`.
    pub fn encode_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let flat = self.flatten(tape, x)?;
        let h = dense(tape, flat, params[0], params[1], true)?;
        dense(tape, h, params[2], params[3], false)
    }

    /// Flattened reconstruction `[n, d]`.
    pub fn decode_on(&self, tape: &mut Tape, params: &[Var], code: Var) -> Result<Var> {
        let h = dense(tape, code, params[4], params[5], true)?;
        let out = dense(tape, h, params[6], params[7], false)?;
        match self.arch.output {
            OutputActivation::Sigmoid => tape.sigmoid(out),
            OutputActivation::Linear => Ok(out),
        }
    }

    /// Per-example mean squared reconstruction error, shape `[n]`.
    pub fn reconstruction_error_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let code = self.encode_on(tape, params, x)?;
        let rec = self.decode_on(tape, params, code)?;
        let flat = self.flatten(tape, x)?;
        let diff = tape.sub(rec, flat)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum_rows(sq)?;
        tape.mul_scalar(s, 1.0 / self.arch.input.numel() as f64)
    }

    fn batched(&self, x: &Tensor, f: impl Fn(&Self, &mut Tape, &[Var], Var) -> Result<Var>) -> Result<Tensor> {
        let n = x.rows();
        let mut tape = Tape::new();
        let params = self.bind_params(&mut tape, false)?;
        let mark = tape.mark();
        let mut out = Vec::new();
        let mut width = 1;
        for start in (0..n).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let xv = tape.constant(x.select_rows(&idx))?;
            let v = f(self, &mut tape, &params, xv)?;
            let t = tape.value(v);
            width = t.numel() / idx.len();
            out.extend_from_slice(t.data());
            tape.rewind(mark);
        }
        Tensor::new(vec![n, width], out)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.batched(x, |m, t, p, v| m.encode_on(t, p, v))
    }

    /// Reconstructions reshaped to the input layout.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let flat = self.batched(x, |m, t, p, v| {
            let c = m.encode_on(t, p, v)?;
            m.decode_on(t, p, c)
        })?;
        flat.reshape(x.shape())
    }

    pub fn reconstruction_error(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.batched(x, |m, t, p, v| m.reconstruction_error_on(t, p, v))?.into_data())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(AUTOENCODER_MAGIC)?;
        let header = AeHeader {
            arch: self.arch.clone(),
            sigma_dae: self.sigma_dae,
            seed: self.seed,
            loss_history: self.loss_history.clone(),
        };
        tensor::write_json_block(w, &header)?;
        tensor::write_tensors(w, &self.params)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        tensor::expect_magic(r, AUTOENCODER_MAGIC, "autoencoder")?;
        let h: AeHeader = tensor::read_json_block(r)?;
        let params = tensor::read_tensors(r)?;
        let shapes = h.arch.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Format("autoencoder parameters do not match the architecture".into()));
        }
        Ok(Self { arch: h.arch, params, sigma_dae: h.sigma_dae, seed: h.seed, loss_history: h.loss_history })
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

/// Input noise level used for the denoising objective unless configured.
pub const DEFAULT_SIGMA_DAE: f64 = 0.05;

/// Minimizes `MSE(x, decode(encode(x + N(0, σ²))))` over `data` (`[n,c,h,w]`).
pub fn train_autoencoder(arch: &AutoencoderArch, data: &Tensor, hyper: &AeHyper, sigma_dae: f64) -> Result<AutoencoderModel> {
    if data.numel() == 0 || data.rank() != 4 {
        return Err(Error::Empty("autoencoder training data"));
    }
    if !(sigma_dae >= 0.0 && sigma_dae.is_finite()) {
        return Err(invalid(format!("sigma_dae must be non-negative, got {sigma_dae}")));
    }
    if hyper.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut model = AutoencoderModel::init(arch.clone(), hyper.seed)?;
    model.sigma_dae = sigma_dae;
    let mut opt = Sgd::new(hyper.lr, hyper.momentum)?;
    let mut order_rng = rng::stream(hyper.seed, &[rng::tag("ae-shuffle")]);
    let mut noise_rng = rng::stream(hyper.seed, &[rng::tag("ae-noise")]);
    let noise = (sigma_dae > 0.0).then(|| Normal::new(0.0, sigma_dae).unwrap());
    let d = arch.input.numel();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(hyper.batch) {
            let clean = data.select_rows(chunk);
            let mut noisy = clean.clone();
            if let Some(dist) = &noise {
                noisy.data_mut().iter_mut().for_each(|v| *v += dist.sample(&mut noise_rng));
            }
            let mut tape = Tape::new();
            let params = model.bind_params(&mut tape, true)?;
            let xin = tape.constant(noisy)?;
            let target = tape.constant(clean.reshape(&[chunk.len(), d])?)?;
            let code = model.encode_on(&mut tape, &params, xin)?;
            let rec = model.decode_on(&mut tape, &params, code)?;
            let diff = tape.sub(rec, target)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq)?;
            total += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&[f64]>> = params.iter().map(|&p| grads.get(p)).collect();
            opt.step(&mut model.params, &g)?;
        }
        model.loss_history.push(total / batches as f64);
    }
    Ok(model)
}
