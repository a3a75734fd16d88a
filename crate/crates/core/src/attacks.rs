//! L∞ projected gradient descent against the classifier alone and against
//! the full classifier + detector system.
//!
//! All attacks are batched: the per-example losses are summed before the
//! backward pass, so each example's input gradient is the gradient of its
//! own loss. Every iterate after the first step is a candidate; starting
//! points are not.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::detectors::{sign, DetectorModel};
use crate::error::{invalid, Error, Result};
use crate::models::{LogitModel, TrainedClassifier};
use crate::rng;
use crate::tensor::Tensor;

/// Examples attacked together in one graph by [`attack_campaign`].
pub const ATTACK_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ radius in `[0,1]` pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// `None` selects `2.5·ε/steps`.
    pub step_size: Option<f64>,
    pub lambda_grid: Vec<f64>,
    /// Number of PGD runs per λ. The first starts at the clean input, the
    /// others at uniform random points of the feasible box.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 200,
            step_size: None,
            lambda_grid: vec![0.01, 0.1, 1.0, 10.0],
            restarts: 2,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(invalid("steps and restarts must be at least 1"));
        }
        if !(self.alpha() >= 0.0 && self.alpha().is_finite()) {
            return Err(invalid(format!("step size must be non-negative, got {}", self.alpha())));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::Empty("lambda grid"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(invalid(format!("lambda must be non-negative, got {l}")));
        }
        Ok(())
    }
}

fn bounds(x0: f64, eps: f64) -> (f64, f64) {
    ((x0 - eps).max(0.0), (x0 + eps).min(1.0))
}

/// Projects one coordinate onto `[max(0, x0−ε), min(1, x0+ε)]`, moving it
/// inward by ulps if rounding would leave `|x − x0| > ε`.
fn project_scalar(v: f64, x0: f64, eps: f64) -> f64 {
    let (lo, hi) = bounds(x0, eps);
    let mut v = v.clamp(lo, hi);
    while v - x0 > eps {
        v = v.next_down();
    }
    while x0 - v > eps {
        v = v.next_up();
    }
    v
}

/// Projection onto the feasible set `ℋ(x0, ε)`.
pub fn project(x: &Tensor, x0: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape() != x0.shape() {
        return Err(Error::ShapeMismatch { op: "project", detail: format!("{:?} vs {:?}", x.shape(), x0.shape()) });
    }
    let data = x.data().iter().zip(x0.data()).map(|(&v, &o)| project_scalar(v, o, eps)).collect();
    Ok(Tensor::new(x.shape().to_vec(), data).unwrap_or_else(|_| x.clone()))
}

/// Exact membership in `ℋ(x0, ε)`.
pub fn is_feasible(x: &Tensor, x0: &Tensor, eps: f64) -> bool {
    x.shape() == x0.shape()
        && x.data().iter().zip(x0.data()).all(|(&v, &o)| {
            let (lo, hi) = bounds(o, eps);
            (0.0..=1.0).contains(&v) && v >= lo && v <= hi && (v - o).abs() <= eps
        })
}

fn check_box(x0: &Tensor) -> Result<()> {
    if x0.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(invalid("attack inputs must lie in [0, 1]"))
    }
}

/// Per-example evaluation of one iterate.
struct StepEval {
    objective: Vec<f64>,
    success: Vec<bool>,
    grad: Option<Vec<f64>>,
}

/// Best candidate per example: successful candidates beat unsuccessful ones,
/// then lower objective wins; the first seen wins ties.
struct Best {
    x: Tensor,
    objective: Vec<f64>,
    success: Vec<bool>,
    lambda: Vec<f64>,
    trace: Vec<Vec<f64>>,
}

impl Best {
    fn new(x0: &Tensor) -> Self {
        let n = x0.rows();
        Self {
            x: x0.clone(),
            objective: vec![f64::INFINITY; n],
            success: vec![false; n],
            lambda: vec![f64::NAN; n],
            trace: vec![vec![]; n],
        }
    }
}

struct PgdRun<'a> {
    x0: &'a Tensor,
    ids: &'a [u64],
    eps: f64,
    alpha: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
}

impl PgdRun<'_> {
    /// Descends the summed objective; feeds every post-step iterate to
    /// `best` and returns each example's running-minimum objective trace.
    fn run(&self, lambda: f64, best: &mut Best, mut eval: impl FnMut(&Tensor, bool) -> Result<StepEval>) -> Result<Vec<Vec<f64>>> {
        let n = self.x0.rows();
        let w = self.x0.row_len();
        let mut trace = vec![Vec::with_capacity(self.restarts * self.steps); n];
        let mut running = vec![f64::INFINITY; n];
        for r in 0..self.restarts {
            let mut x = if r == 0 { self.x0.clone() } else { self.random_start(r as u64)? };
            for t in 0..=self.steps {
                let ev = eval(&x, t < self.steps)?;
                if t > 0 {
                    for i in 0..n {
                        running[i] = running[i].min(ev.objective[i]);
                        trace[i].push(running[i]);
                        let better = (ev.success[i] && !best.success[i])
                            || (ev.success[i] == best.success[i] && ev.objective[i] < best.objective[i]);
                        if better {
                            best.objective[i] = ev.objective[i];
                            best.success[i] = ev.success[i];
                            best.lambda[i] = lambda;
                            best.x.data_mut()[i * w..(i + 1) * w].copy_from_slice(x.row(i));
                        }
                    }
                }
                if t < self.steps {
                    let g = ev.grad.ok_or(Error::MissingGradient(0))?;
                    let stepped: Vec<f64> = x.data().iter().zip(&g).map(|(&v, &gi)| v - self.alpha * sign(gi)).collect();
                    x = project(&Tensor::new(x.shape().to_vec(), stepped)?, self.x0, self.eps)?;
                }
            }
        }
        Ok(trace)
    }

    fn random_start(&self, restart: u64) -> Result<Tensor> {
        let w = self.x0.row_len();
        let mut data = Vec::with_capacity(self.x0.numel());
        for (i, &id) in self.ids.iter().enumerate() {
            let mut r = rng::stream(self.seed, &[rng::tag("pgd-start"), restart, id]);
            data.extend(self.x0.row(i).iter().map(|&o| {
                let (lo, hi) = bounds(o, self.eps);
                lo + (hi - lo) * r.random::<f64>()
            }));
        }
        project(&Tensor::new(self.x0.shape().to_vec(), data)?, self.x0, self.eps).inspect(|t| debug_assert_eq!(t.row_len(), w))
    }
}

/// Sum-reduced loss gradient w.r.t. the input, or zeros when the loss does
/// not depend on it.
fn input_grad(tape: &mut Tape, x: crate::autodiff::Var, rows: crate::autodiff::Var) -> Result<Vec<f64>> {
    let loss = tape.sum(rows)?;
    if !tape.requires_grad(loss) {
        return Ok(vec![0.0; tape.value(x).numel()]);
    }
    let mut g = tape.backward(loss)?;
    g.take(x).ok_or(Error::MissingGradient(0))
}

fn check_targets(model: &impl LogitModel, x0: &Tensor, targets: &[usize]) -> Result<()> {
    if targets.len() != x0.rows() {
        return Err(invalid(format!("{} targets for {} inputs", targets.len(), x0.rows())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.classes()) {
        return Err(invalid(format!("invalid target class {t} for {} classes", model.classes())));
    }
    Ok(())
}

/// Targeted PGD on `ℓ_xent(f(x), T)`: `x ← Π(x − α·sign ∇ₓ ℓ)`. Returns,
/// per example, the iterate with the lowest target loss over all steps and
/// restarts.
pub fn pgd_targeted(model: &impl LogitModel, x0: &Tensor, targets: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let ids: Vec<u64> = (0..x0.rows() as u64).collect();
    pgd_targeted_ids(model, x0, targets, cfg, &ids)
}

fn pgd_targeted_ids(model: &impl LogitModel, x0: &Tensor, targets: &[usize], cfg: &AttackConfig, ids: &[u64]) -> Result<Tensor> {
    cfg.validate()?;
    check_box(x0)?;
    check_targets(model, x0, targets)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let mark = tape.mark();
    let run = PgdRun { x0, ids, eps: cfg.epsilon, alpha: cfg.alpha(), steps: cfg.steps, restarts: cfg.restarts, seed: cfg.seed };
    let mut best = Best::new(x0);
    run.run(0.0, &mut best, |x, want_grad| {
        let xv = tape.leaf(x.clone(), want_grad)?;
        let logits = model.logits_on(&mut tape, &params, xv)?;
        let rows = tape.softmax_xent_rows(logits, targets)?;
        let objective = tape.value(rows).data().to_vec();
        let grad = if want_grad { Some(input_grad(&mut tape, xv, rows)?) } else { None };
        tape.rewind(mark);
        Ok(StepEval { success: vec![false; objective.len()], objective, grad })
    })?;
    Ok(best.x)
}

/// Untargeted PGD ascent on `ℓ_xent(f(x), y)` from a uniform random start,
/// returning the final iterate (the inner loop of adversarial training).
pub fn pgd_untargeted(
    model: &impl LogitModel,
    x0: &Tensor,
    labels: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    check_targets(model, x0, labels)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let mark = tape.mark();
    let start: Vec<f64> = x0
        .data()
        .iter()
        .map(|&o| {
            let (lo, hi) = bounds(o, eps);
            lo + (hi - lo) * rng.random::<f64>()
        })
        .collect();
    let mut x = project(&Tensor::new(x0.shape().to_vec(), start)?, x0, eps)?;
    for _ in 0..steps {
        let xv = tape.leaf(x.clone(), true)?;
        let logits = model.logits_on(&mut tape, &params, xv)?;
        let rows = tape.softmax_xent_rows(logits, labels)?;
        let g = input_grad(&mut tape, xv, rows)?;
        tape.rewind(mark);
        let stepped: Vec<f64> = x.data().iter().zip(&g).map(|(&v, &gi)| v + step_size * sign(gi)).collect();
        x = project(&Tensor::new(x.shape().to_vec(), stepped)?, x0, eps)?;
    }
    Ok(x)
}

/// Classifier plus the detector gating it. `surrogate` supplies the
/// differentiable score when the detector has none.
#[derive(Clone, Copy)]
pub struct AttackSystem<'a> {
    pub classifier: &'a TrainedClassifier,
    pub detector: &'a DetectorModel,
    pub surrogate: Option<&'a DetectorModel>,
}

impl<'a> AttackSystem<'a> {
    pub fn new(classifier: &'a TrainedClassifier, detector: &'a DetectorModel) -> Self {
        Self { classifier, detector, surrogate: None }
    }

    fn graph_detector(&self) -> Result<&'a DetectorModel> {
        if self.detector.differentiable {
            Ok(self.detector)
        } else {
            self.surrogate.ok_or_else(|| Error::NotDifferentiable(self.detector.kind.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvEntry {
    pub example_id: usize,
    /// Target class; `None` in the score-only diagnostic mode.
    pub target: Option<usize>,
    pub lambda: f64,
    /// Detector score of the adversarial input.
    pub score: f64,
    pub predicted: usize,
    pub bypass: bool,
    pub target_hit: bool,
    /// Objective of the chosen candidate under its λ.
    pub objective: f64,
    /// Running minimum of the objective over iterations of the chosen λ.
    pub trace: Vec<f64>,
}

impl AdvEntry {
    pub fn success(&self) -> bool {
        self.bypass && self.target_hit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    /// Clean inputs `[n,c,h,w]`.
    pub sources: Tensor,
    /// Adversarial inputs, row-aligned with `sources` and `entries`.
    pub adversarial: Tensor,
    pub entries: Vec<AdvEntry>,
    /// Examples whose attack failed, with the error.
    pub failures: Vec<(usize, String)>,
    pub threshold: f64,
}

impl AdvBatch {
    fn empty(shape: &[usize], threshold: f64) -> Self {
        let mut s = shape.to_vec();
        s[0] = 0;
        Self { sources: Tensor::zeros(&s), adversarial: Tensor::zeros(&s), entries: vec![], failures: vec![], threshold }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bypass_count(&self) -> usize {
        self.entries.iter().filter(|e| e.bypass).count()
    }

    pub fn target_hit_count(&self) -> usize {
        self.entries.iter().filter(|e| e.target_hit).count()
    }

    /// Examples that both evade the detector and reach their target.
    pub fn success_count(&self) -> usize {
        self.entries.iter().filter(|e| e.success()).count()
    }

    fn append(&mut self, other: AdvBatch) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if self.is_empty() {
            self.sources = other.sources;
            self.adversarial = other.adversarial;
        } else {
            self.sources = concat_rows(&self.sources, &other.sources)?;
            self.adversarial = concat_rows(&self.adversarial, &other.adversarial)?;
        }
        self.entries.extend(other.entries);
        self.failures.extend(other.failures);
        Ok(())
    }

    /// CSV with columns `example_id,lambda,D_h,predicted,bypass,target_hit`.
    pub fn write_manifest<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "example_id,lambda,D_h,predicted,bypass,target_hit")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:e},{},{},{}", e.example_id, e.lambda, e.score, e.predicted, e.bypass, e.target_hit)?;
        }
        Ok(())
    }

    /// Writes `<stem>.owbt` (adversarial inputs) and `<stem>.csv`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        if !self.is_empty() {
            self.adversarial.write_to(&mut buf)?;
        }
        std::fs::write(dir.join(format!("{stem}.owbt")), buf)?;
        let mut csv = Vec::new();
        self.write_manifest(&mut csv)?;
        std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
        Ok(())
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.rows();
    Tensor::new(shape, [a.data(), b.data()].concat())
}

/// Minimizes `λ·D_h(x) + ℓ_xent(f(x), T)` over `ℋ(x_ood, ε)` for every λ in
/// the grid. Per example, the returned candidate is the lowest-objective one
/// among those that evade the detector and hit the target, or the
/// lowest-objective candidate overall if none does. `targets = None` drops
/// the classifier term (score descent only).
pub fn combined_attack(system: AttackSystem<'_>, x_ood: &Tensor, targets: Option<&[usize]>, cfg: &AttackConfig) -> Result<AdvBatch> {
    let ids: Vec<usize> = (0..x_ood.rows()).collect();
    combined_attack_ids(system, x_ood, targets, cfg, &ids)
}

fn combined_attack_ids(
    system: AttackSystem<'_>,
    x_ood: &Tensor,
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
    ids: &[usize],
) -> Result<AdvBatch> {
    cfg.validate()?;
    check_box(x_ood)?;
    let clf = system.classifier;
    let graph_det = system.graph_detector()?;
    let tau = system.detector.threshold()?;
    let graph_tau = graph_det.threshold.unwrap_or(tau);
    if let Some(t) = targets {
        check_targets(clf, x_ood, t)?;
    }
    let n = x_ood.rows();
    if n == 0 {
        return Ok(AdvBatch::empty(x_ood.shape(), tau));
    }
    let id64: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
    let run = PgdRun {
        x0: x_ood,
        ids: &id64,
        eps: cfg.epsilon,
        alpha: cfg.alpha(),
        steps: cfg.steps,
        restarts: cfg.restarts,
        seed: cfg.seed,
    };
    let mut tape = Tape::new();
    let params = clf.bind_params(&mut tape, false)?;
    let binding = graph_det.bind(&mut tape, clf)?;
    let mark = tape.mark();
    let mut best = Best::new(x_ood);
    for &lambda in &cfg.lambda_grid {
        let trace = run.run(lambda, &mut best, |x, want_grad| {
            let xv = tape.leaf(x.clone(), want_grad)?;
            let acts = clf.forward(&mut tape, &params, xv)?;
            let score = graph_det.score_on(&mut tape, &binding, Some(&acts), xv)?;
            let pred = tape.value(acts.logits).argmax_rows();
            let bypass: Vec<bool> = tape.value(score).data().iter().map(|&s| s <= graph_tau).collect();
            let rows = match (targets, lambda > 0.0) {
                (Some(t), true) => {
                    let xent = tape.softmax_xent_rows(acts.logits, t)?;
                    let weighted = tape.mul_scalar(score, lambda)?;
                    tape.add(weighted, xent)?
                }
                (Some(t), false) => tape.softmax_xent_rows(acts.logits, t)?,
                (None, _) => tape.mul_scalar(score, lambda)?,
            };
            let objective = tape.value(rows).data().to_vec();
            let success = match targets {
                Some(t) => bypass.iter().zip(pred.iter().zip(t)).map(|(&b, (p, t))| b && p == t).collect(),
                None => bypass,
            };
            let grad = if want_grad { Some(input_grad(&mut tape, xv, rows)?) } else { None };
            tape.rewind(mark);
            Ok(StepEval { objective, success, grad })
        })?;
        for (i, t) in trace.iter().enumerate() {
            if best.lambda[i] == lambda {
                best.trace[i] = t.clone();
            }
        }
        debug!("λ = {lambda}: {} of {n} candidates successful so far", best.success.iter().filter(|s| **s).count());
    }
    let scores = system.detector.score(clf, &best.x)?;
    let predicted = clf.predict(&best.x)?;
    let entries = (0..n)
        .map(|i| {
            let target = targets.map(|t| t[i]);
            AdvEntry {
                example_id: ids[i],
                target,
                lambda: best.lambda[i],
                score: scores[i],
                predicted: predicted[i],
                bypass: scores[i] <= tau,
                target_hit: target == Some(predicted[i]),
                objective: best.objective[i],
                trace: std::mem::take(&mut best.trace[i]),
            }
        })
        .collect();
    Ok(AdvBatch { sources: x_ood.clone(), adversarial: best.x, entries, failures: vec![], threshold: tau })
}

/// Target rule for campaigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Fixed(usize),
    /// Uniform over the classes other than the clean prediction.
    RandomPerExample,
}

/// Draws one target per input according to `rule`.
pub fn choose_targets(clf: &TrainedClassifier, x: &Tensor, rule: Targets, seed: u64) -> Result<Vec<usize>> {
    let k = clf.arch.classes;
    match rule {
        Targets::Fixed(t) if t < k => Ok(vec![t; x.rows()]),
        Targets::Fixed(t) => Err(invalid(format!("invalid target class {t} for {k} classes"))),
        Targets::RandomPerExample => {
            if x.rows() == 0 {
                return Ok(vec![]);
            }
            let clean = clf.predict(x)?;
            let mut r = rng::stream(seed, &[rng::tag("targets")]);
            Ok(clean
                .iter()
                .map(|&c| {
                    let t = r.random_range(0..k - 1);
                    if t >= c {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect())
        }
    }
}

/// Runs [`combined_attack`] over `x_ood` in batches of [`ATTACK_BATCH`].
/// A batch that fails is retried example by example; examples that still
/// fail are recorded in [`AdvBatch::failures`] and left out of the entries.
pub fn attack_campaign(system: AttackSystem<'_>, x_ood: &Tensor, cfg: &AttackConfig, targets: Targets) -> Result<AdvBatch> {
    cfg.validate()?;
    let tau = system.detector.threshold()?;
    let n = x_ood.rows();
    let mut out = AdvBatch::empty(x_ood.shape(), tau);
    if n == 0 {
        return Ok(out);
    }
    let chosen = choose_targets(system.classifier, x_ood, targets, cfg.seed)?;
    for start in (0..n).step_by(ATTACK_BATCH) {
        let ids: Vec<usize> = (start..(start + ATTACK_BATCH).min(n)).collect();
        let xb = x_ood.select_rows(&ids);
        let tb: Vec<usize> = ids.iter().map(|&i| chosen[i]).collect();
        match combined_attack_ids(system, &xb, Some(&tb), cfg, &ids) {
            Ok(b) => out.append(b)?,
            Err(e) => {
                warn!("attack batch at {start} failed ({e}); retrying per example");
                for (j, &i) in ids.iter().enumerate() {
                    let xi = xb.select_rows(&[j]);
                    match combined_attack_ids(system, &xi, Some(&tb[j..j + 1]), cfg, &[i]) {
                        Ok(b) => out.append(b)?,
                        Err(e) => out.failures.push((i, e.to_string())),
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_idempotent_and_feasible() {
        let x0 = Tensor::new(vec![1, 5], vec![0.0, 0.3, 0.5, 0.99, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 5], vec![-1.0, 0.9, 0.5 + 1e-17, 0.0, 2.0]).unwrap();
        let eps = 0.1;
        let p = project(&x, &x0, eps).unwrap();
        assert!(is_feasible(&p, &x0, eps));
        assert_eq!(project(&p, &x0, eps).unwrap(), p);
    }

    #[test]
    fn rounding_never_leaves_the_ball() {
        for i in 0..1000 {
            let o = i as f64 / 997.0;
            let eps = 8.0 / 255.0;
            let v = project_scalar(o + 1.0, o, eps);
            assert!(v - o <= eps && v <= 1.0);
            let v = project_scalar(o - 1.0, o, eps);
            assert!(o - v <= eps && v >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!((AttackConfig::default().alpha() - 2.5 * 8.0 / 255.0 / 200.0).abs() < 1e-18);
        let bad = AttackConfig { lambda_grid: vec![], ..AttackConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { epsilon: -0.1, ..AttackConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { steps: 0, ..AttackConfig::default() };
        assert!(bad.validate().is_err());
    }
}
