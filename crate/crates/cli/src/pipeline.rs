//! The experiment stages. Every stage reads and writes one directory keyed
//! by the configuration hash:
//!
//! ```text
//! config.toml
//! models/{classifier,agnostophobia,outlier_exposure}.owbm, autoencoder.owae
//! train_log.csv, accuracy.csv
//! detectors/<detector>.owbd
//! calibration.csv
//! reports/{evaluate,corruption,attack}.<fmt>, reports/errors.csv
//! attacks/<detector>__<family>.{owbt,csv}
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use owb_core::attacks::{attack_campaign, AdvBatch, AttackSystem, Targets};
use owb_core::corruptions::{corruption_sweep, SweepSystem};
use owb_core::data::{gen_indist, generate, Family, LabeledDataset};
use owb_core::detectors::{mahalanobis_fit, DetectorKind, DetectorModel, WeightMode, MIN_RECOMMENDED_SCORES};
use owb_core::metrics::{adversarial_fpr, compute_fpr, compute_ow_tsr, compute_tpr, emit_report, EvalReport, ReportRow, ScoreHistogram};
use owb_core::models::{
    train_adversarial, train_autoencoder, train_natural, train_with_ood_loss, AutoencoderModel, OodMode, TrainedClassifier,
};
use owb_core::rng;

use crate::config::{ConditionKind, ConfigError, Experiment};

const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] owb_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("missing {what} at {}; run `owb {stage}` first", path.display())]
    Missing { what: String, path: PathBuf, stage: &'static str },
    #[error("{failed} cell(s) failed; partial report at {}, errors in {}", report.display(), errors.display())]
    Partial { failed: usize, report: PathBuf, errors: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A single `(detector, dataset)` cell selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub detector: DetectorKind,
    pub dataset: Family,
}

impl FromStr for Cell {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let err = |m: String| ConfigError { line: None, message: m };
        let (d, f) = s.split_once(':').ok_or_else(|| err(format!("--cell expects DETECTOR:DATASET, got `{s}`")))?;
        Ok(Cell {
            detector: d.parse().map_err(|_| err(format!("unknown detector `{d}` in --cell")))?,
            dataset: f.parse().map_err(|_| err(format!("unknown dataset `{f}` in --cell")))?,
        })
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.detector, self.dataset)
    }
}

/// Worker count: `OWB_THREADS` when set, else the available parallelism.
pub fn threads() -> usize {
    std::env::var("OWB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to [`threads`] workers; results keep the
/// input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = threads().min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut done: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    done.sort_by_key(|p| p.0);
    done.into_iter().map(|p| p.1).collect()
}

/// Which trained network a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Classifier,
    Agnostophobia,
    OutlierExposure,
    Autoencoder,
}

impl ModelRole {
    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Classifier => "classifier",
            ModelRole::Agnostophobia => "agnostophobia",
            ModelRole::OutlierExposure => "outlier_exposure",
            ModelRole::Autoencoder => "autoencoder",
        }
    }

    fn file(self) -> String {
        match self {
            ModelRole::Autoencoder => "autoencoder.owae".into(),
            r => format!("{}.owbm", r.name()),
        }
    }
}

enum Trained {
    Classifier(TrainedClassifier),
    Autoencoder(AutoencoderModel),
}

/// Classifiers a detector run needs, loaded from the run directory.
pub struct Models {
    pub classifier: TrainedClassifier,
    pub agnostophobia: Option<TrainedClassifier>,
    pub outlier_exposure: Option<TrainedClassifier>,
    pub autoencoder: Option<AutoencoderModel>,
}

impl Models {
    /// Classifier whose logits and decisions pair with `kind`. Autoencoder
    /// based detectors leave the class decision to the base classifier.
    pub fn for_detector(&self, kind: DetectorKind) -> &TrainedClassifier {
        let own = match kind {
            DetectorKind::Agnostophobia => self.agnostophobia.as_ref(),
            DetectorKind::OutlierExposure => self.outlier_exposure.as_ref(),
            _ => None,
        };
        own.unwrap_or(&self.classifier)
    }
}

/// Failure of one report cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellError {
    pub stage: &'static str,
    pub detector: String,
    pub dataset: String,
    pub message: String,
}

pub struct Run {
    pub exp: Experiment,
    pub dir: PathBuf,
    pub cell: Option<Cell>,
}

impl Run {
    /// Checks the cell filter against the configuration. Nothing is written.
    pub fn new(exp: Experiment, cell: Option<Cell>) -> CliResult<Self> {
        if let Some(c) = cell {
            if !exp.detectors.contains(&c.detector) {
                return Err(ConfigError { line: None, message: format!("--cell detector `{}` is not in the detector list", c.detector) }.into());
            }
            if !exp.ood.contains(&c.dataset) {
                return Err(ConfigError { line: None, message: format!("--cell dataset `{}` is not among the OOD families", c.dataset) }.into());
            }
        }
        let dir = exp.run_dir();
        Ok(Self { exp, dir, cell })
    }

    fn prepare(&self) -> CliResult<()> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join("config.toml"), self.exp.config.to_toml())?;
        Ok(())
    }

    fn data_seed(&self, role: &str) -> u64 {
        rng::derive(self.exp.config.seed, &[rng::tag("data"), rng::tag(role)])
    }

    fn split(&self, role: &str, n: usize) -> CliResult<LabeledDataset> {
        let d = &self.exp.config.data;
        Ok(gen_indist(self.exp.indist, d.classes, n, self.exp.shape, self.data_seed(role))?)
    }

    pub fn train_split(&self) -> CliResult<LabeledDataset> {
        self.split("train", self.exp.config.data.train)
    }

    pub fn calibration_split(&self) -> CliResult<LabeledDataset> {
        self.split("calibration", self.exp.config.data.calibration)
    }

    pub fn test_split(&self) -> CliResult<LabeledDataset> {
        self.split("test", self.exp.config.data.test)
    }

    pub fn ood_set(&self, family: Family) -> CliResult<LabeledDataset> {
        Ok(generate(family, 0, self.exp.config.data.ood_n, self.exp.shape, self.data_seed(family.name()))?)
    }

    pub fn auxiliary_set(&self) -> CliResult<LabeledDataset> {
        let d = &self.exp.config.data;
        Ok(generate(self.exp.auxiliary, 0, d.auxiliary_n, self.exp.shape, self.data_seed("auxiliary"))?)
    }

    pub fn model_path(&self, role: ModelRole) -> PathBuf {
        self.dir.join("models").join(role.file())
    }

    pub fn detector_path(&self, kind: DetectorKind) -> PathBuf {
        self.dir.join("detectors").join(format!("{}.owbd", kind.name()))
    }

    fn report_path(&self, stage: &str) -> PathBuf {
        let stem = match self.cell {
            Some(c) => format!("{stage}__{}__{}", c.detector, c.dataset),
            None => stage.to_string(),
        };
        self.dir.join("reports").join(format!("{stem}.{}", self.exp.config.format.extension()))
    }

    fn roles(&self) -> Vec<ModelRole> {
        let mut roles = vec![ModelRole::Classifier];
        if self.exp.needs(DetectorKind::Agnostophobia) {
            roles.push(ModelRole::Agnostophobia);
        }
        if self.exp.needs(DetectorKind::OutlierExposure) {
            roles.push(ModelRole::OutlierExposure);
        }
        if self.exp.needs_autoencoder() {
            roles.push(ModelRole::Autoencoder);
        }
        roles
    }

    /// Trains every network the detector list needs. Existing checkpoints of
    /// the same configuration are kept.
    pub fn train(&self) -> CliResult<()> {
        self.prepare()?;
        fs::create_dir_all(self.dir.join("models"))?;
        let todo: Vec<ModelRole> = self.roles().into_iter().filter(|&r| !self.model_path(r).exists()).collect();
        if todo.is_empty() {
            info!("all checkpoints present in {}", self.dir.display());
            return Ok(());
        }
        let train = self.train_split()?;
        let test = self.test_split()?;
        let aux = if todo.iter().any(|r| matches!(r, ModelRole::Agnostophobia | ModelRole::OutlierExposure)) {
            Some(self.auxiliary_set()?)
        } else {
            None
        };
        let exp = &self.exp;
        let adv = exp.adversarial();
        let results = par_map(&todo, |&role| -> CliResult<Trained> {
            info!("training {}", role.name());
            let hyper = exp.train_hyper(role.name());
            let ood_loss = |mode: OodMode| {
                let aux = aux.as_ref().expect("auxiliary data generated");
                train_with_ood_loss(&exp.arch, &train, aux, mode, &hyper, exp.ood_weight(mode), adv.as_ref())
            };
            let mut clf = match role {
                ModelRole::Classifier => match &adv {
                    Some(a) => train_adversarial(&exp.arch, &train, &hyper, a)?,
                    None => train_natural(&exp.arch, &train, &hyper)?,
                },
                ModelRole::Agnostophobia => ood_loss(OodMode::Agnostophobia)?,
                ModelRole::OutlierExposure => ood_loss(OodMode::OutlierExposure)?,
                ModelRole::Autoencoder => {
                    let sigma = exp.config.detectors.autoencoder.sigma;
                    return Ok(Trained::Autoencoder(train_autoencoder(&exp.ae_arch(), &train.images, &exp.ae_hyper(), sigma)?));
                }
            };
            clf.meta.test_accuracy = Some(clf.accuracy(&test)?);
            Ok(Trained::Classifier(clf))
        });
        let mut log = String::from("model,epoch,loss\n");
        let mut acc = String::from("model,train_accuracy,test_accuracy\n");
        for (role, r) in todo.iter().zip(results) {
            let path = self.model_path(*role);
            match r? {
                Trained::Classifier(c) => {
                    let test_acc = c.meta.test_accuracy.unwrap_or(f64::NAN);
                    info!("{}: train accuracy {:.4}, test accuracy {test_acc:.4}", role.name(), c.meta.train_accuracy);
                    for (e, l) in c.meta.loss_history.iter().enumerate() {
                        log += &format!("{},{},{l:e}\n", role.name(), e + 1);
                    }
                    acc += &format!("{},{:.4},{test_acc:.4}\n", role.name(), c.meta.train_accuracy);
                    c.save(&path)?;
                }
                Trained::Autoencoder(a) => {
                    for (e, l) in a.loss_history.iter().enumerate() {
                        log += &format!("{},{},{l:e}\n", role.name(), e + 1);
                    }
                    a.save(&path)?;
                }
            }
        }
        fs::write(self.dir.join("train_log.csv"), log)?;
        fs::write(self.dir.join("accuracy.csv"), acc)?;
        Ok(())
    }

    fn load_classifier(&self, role: ModelRole) -> CliResult<TrainedClassifier> {
        let path = self.model_path(role);
        if !path.exists() {
            return Err(CliError::Missing { what: format!("{} checkpoint", role.name()), path, stage: "train" });
        }
        Ok(TrainedClassifier::load(&path)?)
    }

    pub fn load_models(&self) -> CliResult<Models> {
        let optional = |role, needed: bool| needed.then(|| self.load_classifier(role)).transpose();
        let autoencoder = if self.exp.needs_autoencoder() {
            let path = self.model_path(ModelRole::Autoencoder);
            if !path.exists() {
                return Err(CliError::Missing { what: "autoencoder checkpoint".into(), path, stage: "train" });
            }
            Some(AutoencoderModel::load(&path)?)
        } else {
            None
        };
        Ok(Models {
            classifier: self.load_classifier(ModelRole::Classifier)?,
            agnostophobia: optional(ModelRole::Agnostophobia, self.exp.needs(DetectorKind::Agnostophobia))?,
            outlier_exposure: optional(ModelRole::OutlierExposure, self.exp.needs(DetectorKind::OutlierExposure))?,
            autoencoder,
        })
    }

    fn fit_detector(&self, kind: DetectorKind, models: &Models, train: &LabeledDataset) -> CliResult<DetectorModel> {
        let s = &self.exp.config.detectors;
        let ae = || models.autoencoder.clone().expect("autoencoder loaded");
        Ok(match kind {
            DetectorKind::Odin => DetectorModel::odin(s.odin.temperature, s.odin.eps_pre)?,
            DetectorKind::Agnostophobia | DetectorKind::OutlierExposure => DetectorModel::confidence(kind)?,
            DetectorKind::Mahalanobis => {
                let taps: Vec<&str> = self.exp.taps.iter().map(String::as_str).collect();
                let mut stats = mahalanobis_fit(&models.classifier, train, &taps, s.mahalanobis.lambda_reg)?;
                if s.mahalanobis.weights == WeightMode::Logistic {
                    stats.calibrate_weights(&models.classifier, &train.images, &self.auxiliary_set()?.images)?;
                }
                DetectorModel::mahalanobis(stats)
            }
            DetectorKind::Autoencoder => DetectorModel::autoencoder(ae()),
            DetectorKind::DeepSvdd => DetectorModel::deep_svdd(ae(), &train.images, s.deep_svdd.nu)?,
        })
    }

    /// Fits every listed detector and sets its threshold on the calibration
    /// split.
    pub fn calibrate(&self) -> CliResult<()> {
        let models = self.load_models()?;
        self.prepare()?;
        let train = self.train_split()?;
        let calib = self.calibration_split()?;
        if calib.len() < MIN_RECOMMENDED_SCORES {
            warn!("calibration split has only {} examples; thresholds will be coarse", calib.len());
        }
        let target = self.exp.config.target_tpr;
        let fitted = par_map(&self.exp.detectors, |&kind| -> CliResult<DetectorModel> {
            let mut det = self.fit_detector(kind, &models, &train)?;
            det.calibrate(models.for_detector(kind), &calib.images, target)?;
            Ok(det)
        });
        fs::create_dir_all(self.dir.join("detectors"))?;
        let mut csv = String::from("detector,target_tpr,achieved_tpr,tau,n\n");
        for det in fitted {
            let det = det?;
            let rec = det.calibration.as_ref().expect("calibrated");
            let tau = det.threshold()?;
            info!("{}: tau {tau:.6}, achieved TPR {:.4}", det.kind, rec.achieved_tpr);
            csv += &format!("{},{},{},{tau:e},{}\n", det.kind, rec.target_tpr, rec.achieved_tpr, rec.scores.len());
            det.save(&self.detector_path(det.kind))?;
        }
        fs::write(self.dir.join("calibration.csv"), csv)?;
        Ok(())
    }

    pub fn load_detectors(&self) -> CliResult<Vec<DetectorModel>> {
        self.exp
            .detectors
            .iter()
            .map(|&k| {
                let path = self.detector_path(k);
                if !path.exists() {
                    return Err(CliError::Missing { what: format!("{k} detector state"), path, stage: "calibrate" });
                }
                Ok(DetectorModel::load(&path)?)
            })
            .collect()
    }

    fn selected(&self, families: &[Family]) -> Vec<(DetectorKind, Family)> {
        let mut cells = Vec::new();
        for &d in &self.exp.detectors {
            for &f in families {
                if self.cell.is_none_or(|c| c.detector == d && c.dataset == f) {
                    cells.push((d, f));
                }
            }
        }
        cells
    }

    /// Row identity; rates are filled in by the caller.
    fn row(&self, det: &DetectorModel, ood: Family, condition: String, n: usize) -> ReportRow {
        ReportRow {
            detector: det.kind.name().into(),
            regime: self.exp.regime.name().into(),
            arch: self.exp.arch.kind.name().into(),
            indist: self.exp.indist.name().into(),
            ood: ood.name().into(),
            condition,
            n,
            tau: 0.0,
            tpr: 0.0,
            fpr: 0.0,
            ow_tsr: None,
            histogram: None,
        }
    }

    /// Writes the report and any cell errors; errors make the result
    /// [`CliError::Partial`] with the report still on disk.
    fn finish(&self, stage: &'static str, report: &EvalReport, errors: Vec<CellError>) -> CliResult<PathBuf> {
        let path = self.report_path(stage);
        emit_report(report, self.exp.config.format, &path)?;
        let err_path = self.dir.join("reports").join(format!("{stage}_errors.csv"));
        if errors.is_empty() {
            if err_path.exists() {
                fs::remove_file(&err_path)?;
            }
            return Ok(path);
        }
        let mut f = fs::File::create(&err_path)?;
        writeln!(f, "stage,detector,dataset,error")?;
        for e in &errors {
            writeln!(f, "{},{},{},\"{}\"", e.stage, e.detector, e.dataset, e.message.replace('"', "'"))?;
        }
        Err(CliError::Partial { failed: errors.len(), report: path, errors: err_path })
    }

    /// Clean FPR of every `(detector, OOD family)` cell, and the corruption
    /// grid when the condition asks for it.
    pub fn evaluate(&self) -> CliResult<PathBuf> {
        let models = self.load_models()?;
        let detectors = self.load_detectors()?;
        self.prepare()?;
        let test = self.test_split()?;
        let tprs = par_map(&detectors, |d| -> CliResult<f64> {
            Ok(compute_tpr(&d.score(models.for_detector(d.kind), &test.images)?, d.threshold()?)?)
        });
        let tprs: Vec<f64> = tprs.into_iter().collect::<CliResult<_>>()?;
        let cells = self.selected(&self.exp.ood);
        let families: Vec<Family> = self.exp.ood.iter().copied().filter(|f| cells.iter().any(|c| c.1 == *f)).collect();
        let sets: Vec<LabeledDataset> = families.iter().map(|&f| self.ood_set(f)).collect::<CliResult<_>>()?;
        let set_of = |f: Family| &sets[families.iter().position(|&g| g == f).expect("generated")];
        let det_of = |k: DetectorKind| self.exp.detectors.iter().position(|&d| d == k).expect("listed");

        let clean = par_map(&cells, |&(k, f)| -> owb_core::Result<ReportRow> {
            let det = &detectors[det_of(k)];
            let ood = set_of(f);
            let tau = det.threshold()?;
            let scores = det.score(models.for_detector(k), &ood.images)?;
            Ok(ReportRow {
                tau,
                tpr: tprs[det_of(k)],
                fpr: compute_fpr(&scores, tau)?,
                histogram: ScoreHistogram::new(&scores, HISTOGRAM_BINS),
                ..self.row(det, f, "clean".into(), ood.len())
            })
        });
        let mut report = EvalReport::new();
        let mut errors = Vec::new();
        for (&(k, f), r) in cells.iter().zip(clean) {
            match r.and_then(|row| report.push(row)) {
                Ok(()) => {}
                Err(e) => errors.push(CellError { stage: "evaluate", detector: k.to_string(), dataset: f.to_string(), message: e.to_string() }),
            }
        }
        let path = self.finish("evaluate", &report, errors)?;
        if self.exp.config.condition.kind == ConditionKind::Corruption {
            self.corruption(&models, &detectors, &tprs, &cells, &families, &sets)?;
        }
        Ok(path)
    }

    fn corruption(
        &self,
        models: &Models,
        detectors: &[DetectorModel],
        tprs: &[f64],
        cells: &[(DetectorKind, Family)],
        families: &[Family],
        sets: &[LabeledDataset],
    ) -> CliResult<PathBuf> {
        let c = &self.exp.config.condition;
        let seed = rng::derive(self.exp.config.seed, &[rng::tag("corruption")]);
        let mut report = EvalReport::new();
        let mut errors = Vec::new();
        let sweeps = par_map(families, |&f| {
            let idx: Vec<usize> = (0..detectors.len()).filter(|&i| cells.contains(&(detectors[i].kind, f))).collect();
            let labels: Vec<String> = idx.iter().map(|&i| detectors[i].kind.name().to_string()).collect();
            let systems: Vec<SweepSystem> = idx
                .iter()
                .zip(&labels)
                .map(|(&i, l)| SweepSystem { label: l, classifier: models.for_detector(detectors[i].kind), detector: &detectors[i] })
                .collect();
            let set = &sets[families.iter().position(|&g| g == f).expect("generated")];
            (idx, corruption_sweep(&set.images, &systems, &self.exp.corruptions, &c.severities, seed))
        });
        for (&f, (idx, sweep)) in families.iter().zip(sweeps) {
            match sweep {
                Ok(grid) => {
                    for (cell, &i) in grid.iter().zip(idx.iter().cycle()) {
                        let det = &detectors[i];
                        let cond = format!("{}:{}", cell.kind, cell.severity);
                        report.push(ReportRow { tau: cell.tau, tpr: tprs[i], fpr: cell.fpr, ..self.row(det, f, cond, cell.n) })?;
                    }
                }
                Err(e) => {
                    for &i in &idx {
                        errors.push(CellError { stage: "corruption", detector: detectors[i].kind.to_string(), dataset: f.to_string(), message: e.to_string() });
                    }
                }
            }
        }
        self.finish("corruption", &report, errors)
    }

    /// Attack campaign on the first examples of every attacked family,
    /// against every detector.
    pub fn attack(&self) -> CliResult<PathBuf> {
        let models = self.load_models()?;
        let detectors = self.load_detectors()?;
        self.prepare()?;
        let test = self.test_split()?;
        let cells = self.selected(&self.exp.attack_families);
        let families: Vec<Family> = self.exp.attack_families.iter().copied().filter(|f| cells.iter().any(|c| c.1 == *f)).collect();
        let take = self.exp.config.attack.examples.min(self.exp.config.data.ood_n);
        let ids: Vec<usize> = (0..take).collect();
        let sets: Vec<_> = families.iter().map(|&f| Ok(self.ood_set(f)?.images.select_rows(&ids))).collect::<CliResult<Vec<_>>>()?;
        let cfg = self.exp.attack_config();
        let targets = self.exp.config.attack.target.map_or(Targets::RandomPerExample, Targets::Fixed);
        let det_of = |k: DetectorKind| self.exp.detectors.iter().position(|&d| d == k).expect("listed");
        let out_dir = self.dir.join("attacks");
        let results = par_map(&cells, |&(k, f)| -> owb_core::Result<(AdvBatch, f64)> {
            let det = &detectors[det_of(k)];
            let clf = models.for_detector(k);
            let x = &sets[families.iter().position(|&g| g == f).expect("generated")];
            info!("attacking {k} on {f} ({} examples)", x.rows());
            let batch = attack_campaign(AttackSystem::new(clf, det), x, &cfg, targets)?;
            batch.export(&out_dir, &format!("{}__{}", k.name(), f.name()))?;
            let tpr = compute_tpr(&det.score(clf, &test.images)?, det.threshold()?)?;
            Ok((batch, tpr))
        });
        let mut report = EvalReport::new();
        let mut errors = Vec::new();
        let condition = format!("attack:eps={:.4}", cfg.epsilon);
        for (&(k, f), r) in cells.iter().zip(results) {
            let fail = |m: String| CellError { stage: "attack", detector: k.to_string(), dataset: f.to_string(), message: m };
            match r {
                Ok((batch, tpr)) => {
                    for (i, m) in &batch.failures {
                        errors.push(fail(format!("example {i}: {m}")));
                    }
                    if batch.is_empty() {
                        continue;
                    }
                    let det = &detectors[det_of(k)];
                    let scores: Vec<f64> = batch.entries.iter().map(|e| e.score).collect();
                    report.push(ReportRow {
                        tau: batch.threshold,
                        tpr,
                        fpr: adversarial_fpr(&batch)?,
                        ow_tsr: Some(compute_ow_tsr(&batch)?),
                        histogram: ScoreHistogram::new(&scores, HISTOGRAM_BINS),
                        ..self.row(det, f, condition.clone(), batch.len())
                    })?;
                }
                Err(e) => errors.push(fail(e.to_string())),
            }
        }
        self.finish("attack", &report, errors)
    }

    /// Every stage in order; the attack stage runs when the condition asks
    /// for it.
    pub fn all(&self) -> CliResult<Vec<PathBuf>> {
        self.train()?;
        self.calibrate()?;
        let mut reports = vec![self.evaluate()?];
        if self.exp.config.condition.kind == ConditionKind::Attack {
            reports.push(self.attack()?);
        }
        Ok(reports)
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_parsing() {
        let c: Cell = "mahalanobis:ring-patterns".parse().unwrap();
        assert_eq!(c, Cell { detector: DetectorKind::Mahalanobis, dataset: Family::RingPatterns });
        assert_eq!(c.to_string(), "mahalanobis:ring-patterns");
        assert!("odin".parse::<Cell>().is_err());
        assert!("lof:blobs".parse::<Cell>().is_err());
        assert!("odin:cifar".parse::<Cell>().is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u64> = (0..97).collect();
        assert_eq!(par_map(&items, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!(par_map(&[] as &[u64], |x| *x).is_empty());
    }
}
