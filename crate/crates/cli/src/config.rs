//! Experiment configuration: a TOML document naming the data, model,
//! detectors, condition and attack budget of one run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use owb_core::corruptions::CorruptionKind;
use owb_core::data::{DatasetRole, Family, ImageShape};
use owb_core::detectors::{DetectorKind, WeightMode, DEFAULT_NU, ODIN_EPS_PRE, ODIN_TEMPERATURE};
use owb_core::metrics::ReportFormat;
use owb_core::models::{
    AdvTrainConfig, AeHyper, ArchKind, Architecture, AutoencoderArch, OodMode, Regime, TrainHyper, DEFAULT_SIGMA_DAE,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem, located at a line of the source when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Root under which each configuration gets its own hashed directory.
    pub out: PathBuf,
    pub target_tpr: f64,
    pub format: ReportFormat,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub detectors: DetectorsConfig,
    pub condition: ConditionConfig,
    pub attack: AttackSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub indist: String,
    pub classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
    pub ood: Vec<String>,
    pub ood_n: usize,
    /// OOD family used by the outlier-exposure and agnostophobia losses and
    /// by logistic Mahalanobis weights. Never an evaluation family.
    pub auxiliary: String,
    pub auxiliary_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: String,
    /// `natural` or `adversarial`; the OOD-loss classifiers inherit it.
    pub regime: String,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub adv_epsilon: f64,
    pub adv_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorsConfig {
    pub list: Vec<String>,
    pub odin: OdinSettings,
    pub mahalanobis: MahalanobisSettings,
    pub autoencoder: AutoencoderSettings,
    pub deep_svdd: SvddSettings,
    pub outlier_exposure: OodLossSettings,
    pub agnostophobia: OodLossSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdinSettings {
    pub temperature: f64,
    pub eps_pre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MahalanobisSettings {
    /// Empty selects every hidden layer of the architecture.
    pub taps: Vec<String>,
    pub lambda_reg: Option<f64>,
    pub weights: WeightMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSettings {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvddSettings {
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodLossSettings {
    /// `None` keeps the mode's default weight.
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Clean,
    Corruption,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConfig {
    pub kind: ConditionKind,
    /// Empty selects the whole roster.
    pub corruptions: Vec<String>,
    pub severities: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub restarts: usize,
    /// Examples attacked per OOD family (the first ones of each set).
    pub examples: usize,
    /// Empty attacks every OOD family of the data section.
    pub families: Vec<String>,
    /// Fixed target class; `None` draws one per example.
    pub target: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            target_tpr: 0.95,
            format: ReportFormat::Csv,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            detectors: DetectorsConfig::default(),
            condition: ConditionConfig::default(),
            attack: AttackSettings::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            indist: Family::ShapesA.name().into(),
            classes: 10,
            shape: [1, 32, 32],
            train: 2000,
            calibration: 1000,
            test: 1000,
            ood: Family::EVAL_OOD.iter().map(|f| f.name().to_string()).collect(),
            ood_n: 1000,
            auxiliary: Family::Mosaic.name().into(),
            auxiliary_n: 2000,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        let a = AdvTrainConfig::default();
        Self {
            arch: ArchKind::Mlp3.name().into(),
            regime: Regime::Natural.name().into(),
            epochs: h.epochs,
            lr: h.lr,
            momentum: h.momentum,
            batch: h.batch,
            adv_epsilon: a.epsilon,
            adv_steps: a.steps,
        }
    }
}

impl Default for DetectorsConfig {
    fn default() -> Self {
        Self {
            list: DetectorKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            odin: OdinSettings::default(),
            mahalanobis: MahalanobisSettings::default(),
            autoencoder: AutoencoderSettings::default(),
            deep_svdd: SvddSettings::default(),
            outlier_exposure: OodLossSettings::default(),
            agnostophobia: OodLossSettings::default(),
        }
    }
}

impl Default for OdinSettings {
    fn default() -> Self {
        Self { temperature: ODIN_TEMPERATURE, eps_pre: ODIN_EPS_PRE }
    }
}

impl Default for MahalanobisSettings {
    fn default() -> Self {
        Self { taps: vec![], lambda_reg: None, weights: WeightMode::Uniform }
    }
}

impl Default for AutoencoderSettings {
    fn default() -> Self {
        let a = AutoencoderArch::new(ImageShape::DESK);
        let h = AeHyper::default();
        Self { hidden: a.hidden, bottleneck: a.bottleneck, epochs: h.epochs, lr: h.lr, batch: h.batch, sigma: DEFAULT_SIGMA_DAE }
    }
}

impl Default for SvddSettings {
    fn default() -> Self {
        Self { nu: DEFAULT_NU }
    }
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self { kind: ConditionKind::Clean, corruptions: vec![], severities: vec![3] }
    }
}

impl Default for AttackSettings {
    fn default() -> Self {
        let a = owb_core::attacks::AttackConfig::default();
        Self {
            epsilon: a.epsilon,
            steps: a.steps,
            step_size: a.step_size,
            lambda_grid: a.lambda_grid,
            restarts: a.restarts,
            examples: 50,
            families: vec![],
            target: None,
        }
    }
}

/// A validated configuration with every name resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub indist: Family,
    pub shape: ImageShape,
    pub ood: Vec<Family>,
    pub auxiliary: Family,
    pub arch: Architecture,
    pub regime: Regime,
    pub detectors: Vec<DetectorKind>,
    pub taps: Vec<String>,
    pub corruptions: Vec<CorruptionKind>,
    pub attack_families: Vec<Family>,
}

/// 1-based line of byte offset `pos`.
fn line_of(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].matches('\n').count() + 1
}

/// Line holding the assignment of `key` whose value mentions `value`, or
/// failing that the first line mentioning the quoted value.
fn locate(text: &str, key: &str, value: &str) -> Option<usize> {
    let quoted = format!("\"{value}\"");
    let lines: Vec<&str> = text.lines().collect();
    let keyed = lines.iter().position(|l| {
        let t = l.trim_start();
        t.starts_with(key) && t[key.len()..].trim_start().starts_with('=') && l.contains(&quoted)
    });
    keyed.or_else(|| lines.iter().position(|l| l.contains(&quoted))).map(|i| i + 1)
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
        })
        .map(|i| i + 1)
}

struct Validator<'a> {
    text: &'a str,
}

impl Validator<'_> {
    fn name<T: FromStr>(&self, key: &str, value: &str) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError {
            line: locate(self.text, key, value),
            message: format!("unknown {key} `{value}`"),
        })
    }

    fn check(&self, ok: bool, key: &str, message: impl Into<String>) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(ConfigError { line: key_line(self.text, key), message: format!("{key}: {}", message.into()) })
        }
    }
}

impl ExperimentConfig {
    /// Deserializes without checking names or ranges.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Experiment, ConfigError> {
        Self::from_toml(text)?.resolve(text)
    }

    pub fn read(path: &Path) -> Result<String, ConfigError> {
        std::fs::read_to_string(path).map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })
    }

    /// Canonical TOML with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical form, ignoring where and how reports are
    /// written.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { out: PathBuf::new(), format: ReportFormat::Csv, ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every name and range; `text` is the source the config was
    /// read from, used to point at offending lines.
    pub fn resolve(self, text: &str) -> Result<Experiment, ConfigError> {
        let v = Validator { text };
        let d = &self.data;
        let indist: Family = v.name("indist", &d.indist)?;
        v.check(indist.role() == DatasetRole::InDistribution, "indist", format!("`{indist}` is not an in-distribution family"))?;
        v.check(
            (2..=indist.max_classes()).contains(&d.classes),
            "classes",
            format!("{indist} renders 2 to {} classes", indist.max_classes()),
        )?;
        let shape = ImageShape::new(d.shape[0], d.shape[1], d.shape[2]);
        v.check(shape.validate().is_ok() && shape.h >= 8 && shape.w >= 8, "shape", "images must be at least 8×8")?;
        v.check(d.train >= d.classes * 2, "train", "need at least two training examples per class")?;
        v.check(d.calibration > 0, "calibration", "the calibration split must not be empty")?;
        v.check(d.test > 0, "test", "the test split must not be empty")?;
        v.check(d.ood_n > 0, "ood_n", "OOD sets must not be empty")?;
        v.check(!d.ood.is_empty(), "ood", "list at least one OOD family")?;
        let mut ood = Vec::new();
        for name in &d.ood {
            let f: Family = v.name("ood", name)?;
            let is_eval = matches!(f.role(), DatasetRole::OodSemantic | DatasetRole::OodNoise);
            if !is_eval {
                return Err(ConfigError { line: locate(text, "ood", name), message: format!("`{f}` is not an evaluation OOD family") });
            }
            if ood.contains(&f) {
                return Err(ConfigError { line: locate(text, "ood", name), message: format!("`{f}` listed twice") });
            }
            ood.push(f);
        }
        let auxiliary: Family = v.name("auxiliary", &d.auxiliary)?;
        v.check(auxiliary.role() == DatasetRole::OodTraining, "auxiliary", format!("`{auxiliary}` is not an OOD-training family"))?;
        v.check(d.auxiliary_n > 0, "auxiliary_n", "the auxiliary set must not be empty")?;

        let m = &self.model;
        let kind: ArchKind = v.name("arch", &m.arch)?;
        let regime: Regime = v.name("regime", &m.regime)?;
        v.check(
            matches!(regime, Regime::Natural | Regime::Adversarial),
            "regime",
            "choose `natural` or `adversarial`; OOD-loss classifiers follow from the detector list",
        )?;
        v.check(m.lr > 0.0 && m.lr.is_finite(), "lr", "must be positive")?;
        v.check((0.0..1.0).contains(&m.momentum), "momentum", "must lie in [0, 1)")?;
        v.check(m.batch > 0, "batch", "must be positive")?;
        v.check(m.adv_epsilon >= 0.0 && m.adv_epsilon.is_finite(), "adv_epsilon", "must be non-negative")?;
        v.check(m.adv_steps > 0, "adv_steps", "must be positive")?;
        let arch = Architecture::named(kind, shape, d.classes);

        let dc = &self.detectors;
        v.check(!dc.list.is_empty(), "list", "list at least one detector")?;
        let mut detectors = Vec::new();
        for name in &dc.list {
            let k: DetectorKind = v.name("detector", name).map_err(|e| ConfigError { line: locate(text, "list", name), ..e })?;
            if detectors.contains(&k) {
                return Err(ConfigError { line: locate(text, "list", name), message: format!("detector `{k}` listed twice") });
            }
            detectors.push(k);
        }
        v.check(dc.odin.temperature > 0.0 && dc.odin.temperature.is_finite(), "temperature", "must be positive")?;
        v.check(dc.odin.eps_pre >= 0.0 && dc.odin.eps_pre.is_finite(), "eps_pre", "must be non-negative")?;
        let hidden: Vec<&str> = arch.taps().iter().map(|t| t.0).filter(|&t| t != "logits").collect();
        let taps: Vec<String> = if dc.mahalanobis.taps.is_empty() {
            hidden.iter().map(|t| t.to_string()).collect()
        } else {
            for t in &dc.mahalanobis.taps {
                if arch.resolve_tap(t).is_err() {
                    return Err(ConfigError {
                        line: locate(text, "taps", t),
                        message: format!("unknown tap `{t}` for {}; available: {}", kind.name(), hidden.join(", ")),
                    });
                }
            }
            dc.mahalanobis.taps.clone()
        };
        if let Some(l) = dc.mahalanobis.lambda_reg {
            v.check(l >= 0.0 && l.is_finite(), "lambda_reg", "must be non-negative")?;
        }
        let ae = &dc.autoencoder;
        v.check(ae.hidden > 0 && ae.bottleneck > 0, "hidden", "autoencoder widths must be positive")?;
        v.check(ae.lr > 0.0 && ae.batch > 0, "lr", "autoencoder lr and batch must be positive")?;
        v.check(ae.sigma >= 0.0 && ae.sigma.is_finite(), "sigma", "must be non-negative")?;
        v.check(dc.deep_svdd.nu > 0.0 && dc.deep_svdd.nu <= 1.0, "nu", "must lie in (0, 1]")?;
        for w in [dc.outlier_exposure.weight, dc.agnostophobia.weight].into_iter().flatten() {
            v.check(w >= 0.0 && w.is_finite(), "weight", "must be non-negative")?;
        }

        v.check(self.target_tpr > 0.0 && self.target_tpr <= 1.0, "target_tpr", "must lie in (0, 1]")?;
        let c = &self.condition;
        let corruptions = if c.corruptions.is_empty() {
            CorruptionKind::ALL.to_vec()
        } else {
            c.corruptions.iter().map(|n| v.name("corruption", n).map_err(|e| ConfigError { line: locate(text, "corruptions", n), ..e })).collect::<Result<_, _>>()?
        };
        v.check(!c.severities.is_empty() && c.severities.iter().all(|s| (1..=5).contains(s)), "severities", "list severities between 1 and 5")?;

        let a = &self.attack;
        v.check(a.epsilon >= 0.0 && a.epsilon.is_finite(), "epsilon", "must be non-negative")?;
        v.check(a.steps > 0, "steps", "must be positive")?;
        v.check(a.restarts > 0, "restarts", "must be positive")?;
        v.check(
            !a.lambda_grid.is_empty() && a.lambda_grid.iter().all(|l| *l >= 0.0 && l.is_finite()),
            "lambda_grid",
            "list non-negative λ values",
        )?;
        if let Some(s) = a.step_size {
            v.check(s >= 0.0 && s.is_finite(), "step_size", "must be non-negative")?;
        }
        v.check(a.examples > 0, "examples", "must be positive")?;
        if let Some(t) = a.target {
            v.check(t < d.classes, "target", format!("class {t} does not exist ({} classes)", d.classes))?;
        }
        let attack_families = if a.families.is_empty() {
            ood.clone()
        } else {
            let mut fams = Vec::new();
            for n in &a.families {
                let f: Family = v.name("families", n)?;
                if !ood.contains(&f) {
                    return Err(ConfigError { line: locate(text, "families", n), message: format!("`{f}` is not among the OOD families") });
                }
                fams.push(f);
            }
            fams
        };
        Ok(Experiment {
            indist,
            shape,
            ood,
            auxiliary,
            arch,
            regime,
            detectors,
            taps,
            corruptions,
            attack_families,
            config: self,
        })
    }
}

impl Experiment {
    pub fn train_hyper(&self, seed_tag: &str) -> TrainHyper {
        let m = &self.config.model;
        TrainHyper {
            epochs: m.epochs,
            lr: m.lr,
            momentum: m.momentum,
            batch: m.batch,
            seed: owb_core::rng::derive(self.config.seed, &[owb_core::rng::tag(seed_tag)]),
        }
    }

    /// Inner-loop attack for adversarial regimes.
    pub fn adversarial(&self) -> Option<AdvTrainConfig> {
        (self.regime == Regime::Adversarial).then(|| AdvTrainConfig::new(self.config.model.adv_epsilon, self.config.model.adv_steps))
    }

    pub fn ood_weight(&self, mode: OodMode) -> f64 {
        let s = match mode {
            OodMode::OutlierExposure => &self.config.detectors.outlier_exposure,
            OodMode::Agnostophobia => &self.config.detectors.agnostophobia,
        };
        s.weight.unwrap_or(mode.default_weight())
    }

    pub fn ae_arch(&self) -> AutoencoderArch {
        let s = &self.config.detectors.autoencoder;
        AutoencoderArch { hidden: s.hidden, bottleneck: s.bottleneck, ..AutoencoderArch::new(self.shape) }
    }

    pub fn ae_hyper(&self) -> AeHyper {
        let s = &self.config.detectors.autoencoder;
        AeHyper {
            epochs: s.epochs,
            lr: s.lr,
            momentum: AeHyper::default().momentum,
            batch: s.batch,
            seed: owb_core::rng::derive(self.config.seed, &[owb_core::rng::tag("autoencoder")]),
        }
    }

    pub fn attack_config(&self) -> owb_core::attacks::AttackConfig {
        let a = &self.config.attack;
        owb_core::attacks::AttackConfig {
            epsilon: a.epsilon,
            steps: a.steps,
            step_size: a.step_size,
            lambda_grid: a.lambda_grid.clone(),
            restarts: a.restarts,
            seed: owb_core::rng::derive(self.config.seed, &[owb_core::rng::tag("attack")]),
        }
    }

    /// Whether any listed detector needs the given OOD-loss classifier.
    pub fn needs(&self, kind: DetectorKind) -> bool {
        self.detectors.contains(&kind)
    }

    pub fn needs_autoencoder(&self) -> bool {
        self.needs(DetectorKind::Autoencoder) || self.needs(DetectorKind::DeepSvdd)
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    /// Directory holding every artifact of this configuration.
    pub fn run_dir(&self) -> PathBuf {
        self.config.out.join(&self.hash()[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_desk_run() {
        let e = ExperimentConfig::parse("").unwrap();
        assert_eq!(e.config, ExperimentConfig::default());
        assert_eq!(e.detectors.len(), 6);
        assert_eq!(e.ood.len(), 6);
        assert_eq!(e.taps, ["hidden1", "hidden2"]);
        assert_eq!(e.corruptions.len(), 22);
    }

    #[test]
    fn canonical_form_round_trips() {
        let e = ExperimentConfig::parse("seed = 4\n[model]\narch = \"convnet-2\"\n").unwrap();
        let again = ExperimentConfig::parse(&e.config.to_toml()).unwrap();
        assert_eq!(again, e);
        assert_eq!(again.hash(), e.hash());
    }

    #[test]
    fn hash_ignores_output_location_and_format() {
        let a = ExperimentConfig::parse("out = \"a\"").unwrap();
        let b = ExperimentConfig::parse("out = \"b\"\nformat = \"json\"").unwrap();
        let c = ExperimentConfig::parse("seed = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_detector_points_at_its_line() {
        let text = "seed = 1\n\n[detectors]\nlist = [\"odin\", \"lof\"]\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.message.contains("lof"), "{err}");
    }

    #[test]
    fn syntax_and_schema_errors_have_lines() {
        let err = ExperimentConfig::parse("seed = 1\n[data]\ntrain = \"many\"\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        let err = ExperimentConfig::parse("seed = 1\ncolour = 3\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = ExperimentConfig::parse("[model]\nregime = \"agnostophobia\"\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = ExperimentConfig::parse("target_tpr = 1.5\n").unwrap_err();
        assert_eq!(err.line, Some(1));
        let err = ExperimentConfig::parse("[data]\nood = [\"mosaic\"]\n").unwrap_err();
        assert_eq!(err.line, Some(2));
    }

    #[test]
    fn attack_families_must_be_evaluated() {
        let err = ExperimentConfig::parse("[data]\nood = [\"blobs\"]\n[attack]\nfamilies = [\"gradients\"]\n").unwrap_err();
        assert_eq!(err.line, Some(4));
        let ok = ExperimentConfig::parse("[data]\nood = [\"blobs\", \"gradients\"]\n[attack]\nfamilies = [\"gradients\"]\n").unwrap();
        assert_eq!(ok.attack_families, [Family::Gradients]);
    }
}
