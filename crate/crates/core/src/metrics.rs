//! Evaluation quantities and report emission.
//!
//! Rates follow the pass rule `score ≤ τ`: TPR is the pass rate of
//! in-distribution scores, FPR the pass rate of OOD scores, and OW-TSR the
//! fraction of adversarial OOD inputs that pass and land on their target.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attacks::AdvBatch;
use crate::error::{invalid, Error, Result};
use crate::models::TrainedClassifier;
use crate::tensor::Tensor;

fn pass_fraction(scores: &[f64], tau: f64, what: &'static str) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(scores.iter().filter(|&&s| s <= tau).count() as f64 / scores.len() as f64)
}

/// Fraction of OOD scores that pass as in-distribution.
pub fn compute_fpr(ood_scores: &[f64], tau: f64) -> Result<f64> {
    pass_fraction(ood_scores, tau, "OOD scores")
}

/// Fraction of in-distribution scores that pass.
pub fn compute_tpr(in_scores: &[f64], tau: f64) -> Result<f64> {
    pass_fraction(in_scores, tau, "in-distribution scores")
}

/// `count(bypass ∧ target_hit) / n`.
pub fn compute_ow_tsr(batch: &AdvBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("adversarial batch"));
    }
    Ok(batch.success_count() as f64 / batch.len() as f64)
}

/// Detector FPR on the adversarial inputs of a batch.
pub fn adversarial_fpr(batch: &AdvBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("adversarial batch"));
    }
    Ok(batch.bypass_count() as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating points at every distinct score, ascending in `τ`. With
/// `grid = Some(g)` and more than `g` distinct scores, `g` of them are taken
/// at evenly spaced ranks (always including the largest).
pub fn roc_sweep(scores_in: &[f64], scores_ood: &[f64], grid: Option<usize>) -> Result<Vec<RocPoint>> {
    if scores_in.is_empty() || scores_ood.is_empty() {
        return Err(Error::Empty("ROC scores"));
    }
    if scores_in.iter().chain(scores_ood).any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "roc_sweep" });
    }
    let mut a = scores_in.to_vec();
    let mut b = scores_ood.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut taus: Vec<f64> = a.iter().chain(&b).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    if let Some(g) = grid {
        if g == 0 {
            return Err(invalid("ROC grid size must be positive"));
        }
        if taus.len() > g {
            let m = taus.len();
            taus = (1..=g).map(|i| taus[(i * m).div_ceil(g) - 1]).collect();
        }
    }
    // Both sorted lists are walked once alongside the ascending thresholds.
    let (mut ia, mut ib) = (0, 0);
    Ok(taus
        .into_iter()
        .map(|tau| {
            while ia < a.len() && a[ia] <= tau {
                ia += 1;
            }
            while ib < b.len() && b[ib] <= tau {
                ib += 1;
            }
            RocPoint { tau, tpr: ia as f64 / a.len() as f64, fpr: ib as f64 / b.len() as f64 }
        })
        .collect())
}

/// Top-two principal directions of a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub mean: Vec<f64>,
    /// Two unit rows of length `d`.
    pub components: [Vec<f64>; 2],
}

impl Projection2d {
    /// PCA on `features` `[n, d]`. Each component's sign is fixed so its
    /// largest-magnitude entry is positive.
    pub fn fit(features: &Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() < 2 {
            return Err(invalid("PCA needs a [n, d] matrix with n ≥ 2"));
        }
        let (n, d) = (features.rows(), features.row_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - mean[j]);
        let cov = centered.tr_mul(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let component = |k: usize| -> Vec<f64> {
            let Some(&col) = order.get(k) else { return vec![0.0; d] };
            let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Self { mean, components: [component(0), component(1)] })
    }

    /// Coordinates `[n, 2]`.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.row_len() != d {
            return Err(Error::ShapeMismatch { op: "project", detail: format!("{:?} vs width {d}", features.shape()) });
        }
        let mut out = Vec::with_capacity(features.rows() * 2);
        for i in 0..features.rows() {
            let row = features.row(i);
            for c in &self.components {
                out.push(row.iter().zip(&self.mean).zip(c).map(|((x, m), v)| (x - m) * v).sum());
            }
        }
        Tensor::new(vec![features.rows(), 2], out)
    }
}

/// Raw features and their 2-D projection, with the dataset of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub tap: String,
    pub features: Tensor,
    pub coords: Tensor,
    pub labels: Vec<String>,
}

fn centroid2(rows: &[[f64; 2]]) -> [f64; 2] {
    let n = rows.len() as f64;
    let (sx, sy) = rows.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

impl EmbeddingExport {
    fn rows_of(&self, name: &str) -> Result<Vec<[f64; 2]>> {
        let rows: Vec<[f64; 2]> = (0..self.labels.len())
            .filter(|&i| self.labels[i] == name)
            .map(|i| [self.coords.row(i)[0], self.coords.row(i)[1]])
            .collect();
        if rows.is_empty() {
            return Err(Error::Unknown { what: "embedding dataset", name: name.to_string() });
        }
        Ok(rows)
    }

    /// Euclidean distance between the projected centroids of two datasets.
    pub fn centroid_separation(&self, a: &str, b: &str) -> Result<f64> {
        let (ca, cb) = (centroid2(&self.rows_of(a)?), centroid2(&self.rows_of(b)?));
        Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt())
    }

    /// Centroid distance in units of the pooled within-dataset spread
    /// (root mean squared distance of each point to its own centroid), so
    /// that models with different feature scales compare directly.
    pub fn standardized_separation(&self, a: &str, b: &str) -> Result<f64> {
        let (ra, rb) = (self.rows_of(a)?, self.rows_of(b)?);
        let mut ss = 0.0;
        for rows in [&ra, &rb] {
            let c = centroid2(rows);
            ss += rows.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>();
        }
        let spread = (ss / (ra.len() + rb.len()) as f64).sqrt();
        let d = self.centroid_separation(a, b)?;
        if spread == 0.0 {
            return Ok(if d == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok(d / spread)
    }

    /// Writes `<stem>.owbt` (raw features) and `<stem>.csv` with
    /// `x,y,series` rows.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.features.write_to(&mut buf)?;
        std::fs::write(dir.join(format!("{stem}.owbt")), buf)?;
        let points: Vec<PlotPoint> = (0..self.labels.len())
            .map(|i| PlotPoint { x: self.coords.row(i)[0], y: self.coords.row(i)[1], series: self.labels[i].clone() })
            .collect();
        let mut csv = Vec::new();
        write_plot_data(&mut csv, &points)?;
        std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
        Ok(())
    }
}

/// Extracts `tap` features for each named dataset and projects all of them
/// with one PCA fitted on their union.
pub fn export_embeddings(model: &TrainedClassifier, datasets: &[(&str, &Tensor)], tap: &str) -> Result<EmbeddingExport> {
    if datasets.is_empty() {
        return Err(Error::Empty("embedding datasets"));
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (name, x) in datasets {
        let f = model.extract_features(x, tap)?;
        labels.extend(std::iter::repeat_n(name.to_string(), f.rows()));
        feats.push(f);
    }
    let refs: Vec<&Tensor> = feats.iter().collect();
    let width = refs[0].row_len();
    let data: Vec<f64> = refs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let features = Tensor::new(vec![labels.len(), width], data)?;
    let coords = Projection2d::fit(&features)?.project(&features)?;
    Ok(EmbeddingExport { tap: tap.to_string(), features, coords, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// CSV `x,y,series`.
pub fn write_plot_data<W: Write>(w: &mut W, points: &[PlotPoint]) -> Result<()> {
    writeln!(w, "x,y,series")?;
    for p in points {
        writeln!(w, "{:.6},{:.6},{}", p.x, p.y, p.series)?;
    }
    Ok(())
}

/// ROC curve as plot data: `x = FPR`, `y = TPR`.
pub fn roc_plot_data(series: &str, points: &[RocPoint]) -> Vec<PlotPoint> {
    points.iter().map(|p| PlotPoint { x: p.fpr, y: p.tpr, series: series.to_string() }).collect()
}

fn round4(v: f64) -> f64 {
    if v.is_finite() {
        let r = (v * 1e4).round() / 1e4;
        if r == 0.0 {
            0.0
        } else {
            r
        }
    } else {
        v
    }
}

fn fmt4(v: f64) -> String {
    if v.is_finite() {
        format!("{:.4}", round4(v))
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn ser4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(round4(*v))
    } else {
        s.serialize_str(&fmt4(*v))
    }
}

fn ser4_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser4(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Num {
    F(f64),
    S(String),
}

impl Num {
    fn value<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            Num::F(v) => Ok(v),
            Num::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("bad number `{other}`"))),
            },
        }
    }
}

fn de4<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Num::deserialize(d)?.value()
}

fn de4_opt<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    Option::<Num>::deserialize(d)?.map(Num::value).transpose()
}

/// Counts of scores in equal-width bins between the observed extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    #[serde(serialize_with = "ser4", deserialize_with = "de4")]
    pub min: f64,
    #[serde(serialize_with = "ser4", deserialize_with = "de4")]
    pub max: f64,
    pub counts: Vec<usize>,
}

impl ScoreHistogram {
    pub fn new(scores: &[f64], bins: usize) -> Option<Self> {
        let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        if finite.is_empty() || bins == 0 {
            return None;
        }
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for s in finite {
            let b = if width > 0.0 { (((s - min) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        Some(Self { min, max, counts })
    }
}

/// One evaluated cell of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub detector: String,
    pub regime: String,
    pub arch: String,
    pub indist: String,
    pub ood: String,
    /// `clean`, a corruption label such as `gaussian_noise:3`, or an attack
    /// label.
    pub condition: String,
    pub n: usize,
    #[serde(serialize_with = "ser4", deserialize_with = "de4")]
    pub tau: f64,
    #[serde(serialize_with = "ser4", deserialize_with = "de4")]
    pub tpr: f64,
    #[serde(serialize_with = "ser4", deserialize_with = "de4")]
    pub fpr: f64,
    #[serde(serialize_with = "ser4_opt", deserialize_with = "de4_opt", default)]
    pub ow_tsr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<ScoreHistogram>,
}

impl ReportRow {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.tpr) || !unit(self.fpr) || self.ow_tsr.is_some_and(|v| !unit(v)) {
            return Err(invalid(format!("rates out of [0, 1] in row {}/{}", self.detector, self.ood)));
        }
        Ok(())
    }

    /// The row as it reads back after emission.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        r.tau = round4(r.tau);
        r.tpr = round4(r.tpr);
        r.fpr = round4(r.fpr);
        r.ow_tsr = r.ow_tsr.map(round4);
        if let Some(h) = &mut r.histogram {
            h.min = round4(h.min);
            h.max = round4(h.max);
        }
        r
    }
}

pub const REPORT_COLUMNS: [&str; 11] =
    ["detector", "regime", "arch", "indist", "ood", "condition", "n", "tau", "tpr", "fpr", "ow_tsr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Unknown { what: "report format", name: other.to_string() }),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        row.validate()?;
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => {
                let mut out = REPORT_COLUMNS.join(",");
                out.push('\n');
                for r in &self.rows {
                    let fields = [
                        r.detector.clone(),
                        r.regime.clone(),
                        r.arch.clone(),
                        r.indist.clone(),
                        r.ood.clone(),
                        r.condition.clone(),
                        r.n.to_string(),
                        fmt4(r.tau),
                        fmt4(r.tpr),
                        fmt4(r.fpr),
                        r.ow_tsr.map(fmt4).unwrap_or_default(),
                    ];
                    out.push_str(&fields.join(","));
                    out.push('\n');
                }
                Ok(out)
            }
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self)?;
                s.push('\n');
                Ok(s)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes the report to `path` in `format`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, report.render(format)?)?;
    Ok(())
}
