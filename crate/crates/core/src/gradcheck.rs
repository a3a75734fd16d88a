//! Central finite-difference checks for the tape's reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::data::ImageShape;
use crate::error::{invalid, Result};
use crate::models::{ArchKind, Architecture, TrainedClassifier};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Every primitive with a gradient check case.
pub const PRIMITIVES: [&str; 24] = [
    "matmul",
    "add",
    "add_row",
    "add_col",
    "add_scalar_broadcast",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "relu",
    "sigmoid",
    "sqrt",
    "reshape",
    "mean",
    "sum",
    "sum_rows",
    "max",
    "softmax",
    "softmax_xent_rows",
    "softmax_cross_entropy",
    "uniform_xent_rows",
    "concat_cols",
    "conv2d_small",
    "conv2d_small_5x5",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where a relu or max kink lies within one step, so central
    /// differences are meaningless there.
    pub kinks: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            kinks: self.kinks + other.kinks,
        }
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences over every input coordinate.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(invalid("gradient check needs a scalar function"));
    }
    let f0 = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let mut report = GradReport::default();
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let g = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &x) in inputs[k].data().iter().enumerate() {
            xs[k].data_mut()[i] = x + FD_STEP;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = x - FD_STEP;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = x;
            let (up, down) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(g[i], numeric);
            // For smooth f the one-sided slopes differ by about h·f'', far
            // less than any real gradient error; a jump at least as large as
            // the discrepancy means a kink lies within the step.
            if err >= FD_TOLERANCE && (up - down).abs() >= (g[i] - numeric).abs() {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    Ok(report)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()).unwrap()
}

/// Values at least `gap` away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    normal(rng, shape, 1.0).map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

/// Rows whose entries are pairwise at least 0.05 apart, so the row maximum
/// is unique and stable under one finite-difference step.
fn distinct_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut slots: Vec<usize> = (0..cols).collect();
        for i in (1..cols).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        data.extend(slots.iter().map(|&s| 0.1 * s as f64 + rng.random_range(0.0..0.05)));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Reduces a tensor to a scalar through a fixed random weighting, so every
/// output coordinate contributes a distinct amount.
fn project(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshape(tape.value(v).shape())?)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Runs the check for one named primitive on a random instance drawn from
/// `seed`.
pub fn check_primitive(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (rng.random_range(2..5), rng.random_range(2..5));
    let proj = |rng: &mut ChaCha8Rng, len: usize| normal(rng, &[len], 1.0);
    match name {
        "matmul" => {
            let k = rng.random_range(2..5);
            let (a, b, w) = (normal(&mut rng, &[m, k], 1.0), normal(&mut rng, &[k, n], 1.0), proj(&mut rng, m * n));
            check_gradients(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, &w) }, &[a, b])
        }
        "add" | "add_row" | "add_col" | "add_scalar_broadcast" | "sub" | "mul" => {
            let a = normal(&mut rng, &[m, n], 1.0);
            let b = match name {
                "add_row" => normal(&mut rng, &[n], 1.0),
                "add_col" => normal(&mut rng, &[m, 1], 1.0),
                "add_scalar_broadcast" => normal(&mut rng, &[1], 1.0),
                _ => normal(&mut rng, &[m, n], 1.0),
            };
            let w = proj(&mut rng, m * n);
            let op = name.to_string();
            check_gradients(
                move |t, v| {
                    let y = match op.as_str() {
                        "sub" => t.sub(v[0], v[1])?,
                        "mul" => t.mul(v[0], v[1])?,
                        _ => t.add(v[0], v[1])?,
                    };
                    project(t, y, &w)
                },
                &[a, b],
            )
        }
        "mul_scalar" | "add_scalar" => {
            let s: f64 = StandardNormal.sample(&mut rng);
            let (a, w) = (normal(&mut rng, &[m, n], 1.0), proj(&mut rng, m * n));
            let mul = name == "mul_scalar";
            check_gradients(
                |t, v| {
                    let y = if mul { t.mul_scalar(v[0], s)? } else { t.add_scalar(v[0], s)? };
                    project(t, y, &w)
                },
                &[a],
            )
        }
        "relu" | "sigmoid" | "sqrt" => {
            let a = match name {
                "relu" => off_zero(&mut rng, &[m, n], 0.05),
                "sqrt" => normal(&mut rng, &[m, n], 1.0).map(|x| 0.5 + x.abs()),
                _ => normal(&mut rng, &[m, n], 2.0),
            };
            let w = proj(&mut rng, m * n);
            let op = name.to_string();
            check_gradients(
                move |t, v| {
                    let y = match op.as_str() {
                        "relu" => t.relu(v[0])?,
                        "sqrt" => t.sqrt(v[0])?,
                        _ => t.sigmoid(v[0])?,
                    };
                    project(t, y, &w)
                },
                &[a],
            )
        }
        "reshape" => {
            let (a, w) = (normal(&mut rng, &[m, n], 1.0), proj(&mut rng, m * n));
            check_gradients(|t, v| { let y = t.reshape(v[0], &[n, m])?; project(t, y, &w) }, &[a])
        }
        "mean" | "sum" => {
            let a = normal(&mut rng, &[m, n], 1.0);
            let mean = name == "mean";
            check_gradients(
                |t, v| {
                    let y = if mean { t.mean(v[0])? } else { t.sum(v[0])? };
                    // squared so that the gradient depends on the input
                    t.mul(y, y)
                },
                &[a],
            )
        }
        "sum_rows" | "max" | "softmax" | "uniform_xent_rows" => {
            let a = if name == "max" { distinct_rows(&mut rng, m, n) } else { normal(&mut rng, &[m, n], 2.0) };
            let width = if name == "softmax" { m * n } else { m };
            let w = proj(&mut rng, width);
            let op = name.to_string();
            check_gradients(
                move |t, v| {
                    let y = match op.as_str() {
                        "sum_rows" => t.sum_rows(v[0])?,
                        "max" => t.max(v[0])?,
                        "softmax" => t.softmax(v[0])?,
                        _ => t.uniform_xent_rows(v[0])?,
                    };
                    project(t, y, &w)
                },
                &[a],
            )
        }
        "softmax_xent_rows" | "softmax_cross_entropy" => {
            let a = normal(&mut rng, &[m, n], 2.0);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let w = proj(&mut rng, m);
            let rows = name == "softmax_xent_rows";
            check_gradients(
                |t, v| {
                    if rows {
                        let y = t.softmax_xent_rows(v[0], &labels)?;
                        project(t, y, &w)
                    } else {
                        t.softmax_cross_entropy(v[0], &labels)
                    }
                },
                &[a],
            )
        }
        "concat_cols" => {
            let n2 = rng.random_range(1..4);
            let (a, b, c) = (normal(&mut rng, &[m, n], 1.0), normal(&mut rng, &[m, n2], 1.0), normal(&mut rng, &[m], 1.0));
            let w = proj(&mut rng, m * (n + n2 + 1));
            check_gradients(|t, v| { let y = t.concat_cols(v)?; project(t, y, &w) }, &[a, b, c])
        }
        "conv2d_small" | "conv2d_small_5x5" => {
            let k = if name == "conv2d_small" { 3 } else { 5 };
            let (batch, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let (h, wd) = (rng.random_range(3..6), rng.random_range(3..6));
            let x = normal(&mut rng, &[batch, c, h, wd], 1.0);
            let kern = normal(&mut rng, &[o, c, k, k], 0.5);
            let bias = normal(&mut rng, &[o], 0.5);
            let w = proj(&mut rng, batch * o * h * wd);
            check_gradients(|t, v| { let y = t.conv2d_small(v[0], v[1], v[2])?; project(t, y, &w) }, &[x, kern, bias])
        }
        other => Err(invalid(format!("no gradient check case for primitive `{other}`"))),
    }
}

/// Small instance of a classifier architecture for gradient checks.
pub fn small_architecture(kind: ArchKind) -> Architecture {
    let input = ImageShape::new(1, 5, 5);
    let mut arch = Architecture::named(kind, input, 3);
    arch.widths = match kind {
        ArchKind::Mlp3 => vec![6, 5],
        ArchKind::ConvNet2 => vec![2, 2, 4],
    };
    arch
}

/// Checks gradients of mean cross-entropy with respect to every parameter
/// and the input, for a randomly initialized small network.
pub fn check_architecture(kind: ArchKind, seed: u64) -> Result<GradReport> {
    let arch = small_architecture(kind);
    let model = TrainedClassifier::init(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let batch = 2;
    let x = Tensor::new(
        vec![batch, arch.input.c, arch.input.h, arch.input.w],
        (0..batch * arch.input.numel()).map(|_| rng.random::<f64>()).collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..arch.classes)).collect();
    let mut inputs = model.params.clone();
    inputs.push(x);
    let np = model.params.len();
    check_gradients(
        |t, v| {
            let logits = model.forward(t, &v[..np], v[np])?.logits;
            t.softmax_cross_entropy(logits, &labels)
        },
        &inputs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the constant copies the input, so the tape differentiates x·c
        // while the evaluated function is x²
        let x = Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap();
        let r = check_gradients(
            |t, v| {
                let d = t.value(v[0]).clone();
                let c = t.constant(d)?;
                let y = t.mul(v[0], c)?;
                t.sum(y)
            },
            &[x],
        )
        .unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn unknown_primitive() {
        assert!(check_primitive("tanh", 0).is_err());
    }
}
