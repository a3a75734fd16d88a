//! Detector state files and score exports.
//!
//! Layout: magic `OWBD1`, a JSON header (kind, calibration, per-kind
//! scalars), the threshold as a presence byte plus `f64` LE, then the
//! per-kind payload (Mahalanobis moments as tensors, or an embedded
//! autoencoder checkpoint).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CalibrationRecord, Decision, DetectorKind, DetectorModel, DetectorState, GaussianClassStats, Hypersphere, TapStats, WeightMode};
use crate::error::{Error, Result};
use crate::models::AutoencoderModel;
use crate::tensor::{self, Tensor};

pub const DETECTOR_MAGIC: &[u8; 5] = b"OWBD1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: DetectorKind,
    differentiable: bool,
    calibration: Option<CalibrationRecord>,
    state: StateHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StateHeader {
    Odin { temperature: f64, eps_pre: f64 },
    Confidence,
    Mahalanobis { taps: Vec<(String, f64)>, weights: Vec<f64>, weight_mode: WeightMode },
    Autoencoder,
    DeepSvdd { sphere: Hypersphere },
}

impl DetectorModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DETECTOR_MAGIC)?;
        let state = match &self.state {
            DetectorState::Odin { temperature, eps_pre } => {
                StateHeader::Odin { temperature: *temperature, eps_pre: *eps_pre }
            }
            DetectorState::Confidence => StateHeader::Confidence,
            DetectorState::Mahalanobis(s) => StateHeader::Mahalanobis {
                taps: s.taps.iter().map(|t| (t.tap.clone(), t.lambda_reg)).collect(),
                weights: s.weights.clone(),
                weight_mode: s.weight_mode,
            },
            DetectorState::Autoencoder(_) => StateHeader::Autoencoder,
            DetectorState::DeepSvdd { sphere, .. } => StateHeader::DeepSvdd { sphere: sphere.clone() },
        };
        let header = Header {
            kind: self.kind,
            differentiable: self.differentiable,
            calibration: self.calibration.clone(),
            state,
        };
        tensor::write_json_block(w, &header)?;
        match self.threshold {
            Some(t) => {
                w.write_all(&[1])?;
                w.write_all(&t.to_le_bytes())?;
            }
            None => w.write_all(&[0; 9])?,
        }
        match &self.state {
            DetectorState::Mahalanobis(s) => {
                let ts: Vec<Tensor> = s.taps.iter().flat_map(|t| [t.means.clone(), t.cov.clone()]).collect();
                tensor::write_tensors(w, &ts)?;
            }
            DetectorState::Autoencoder(ae) | DetectorState::DeepSvdd { encoder: ae, .. } => ae.write_to(w)?,
            _ => {}
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        tensor::expect_magic(r, DETECTOR_MAGIC, "detector state")?;
        let header: Header = tensor::read_json_block(r)?;
        let mut tb = [0u8; 9];
        tensor::read_exact(r, &mut tb, "threshold")?;
        let threshold = match tb[0] {
            0 => None,
            1 => Some(f64::from_le_bytes(tb[1..].try_into().unwrap())),
            b => return Err(Error::Format(format!("bad threshold flag {b}"))),
        };
        let state = match header.state {
            StateHeader::Odin { temperature, eps_pre } => DetectorState::Odin { temperature, eps_pre },
            StateHeader::Confidence => DetectorState::Confidence,
            StateHeader::Mahalanobis { taps, weights, weight_mode } => {
                let ts = tensor::read_tensors(r)?;
                if ts.len() != 2 * taps.len() || weights.len() != taps.len() {
                    return Err(Error::Format("Mahalanobis payload does not match its header".into()));
                }
                let stats = taps
                    .iter()
                    .zip(ts.chunks(2))
                    .map(|((name, lambda), p)| TapStats::from_parts(name, p[0].clone(), p[1].clone(), *lambda))
                    .collect::<Result<Vec<_>>>()?;
                let mut g = GaussianClassStats::new(stats)?;
                g.weights = weights;
                g.weight_mode = weight_mode;
                DetectorState::Mahalanobis(g)
            }
            StateHeader::Autoencoder => DetectorState::Autoencoder(AutoencoderModel::read_from(r)?),
            StateHeader::DeepSvdd { sphere } => {
                let encoder = AutoencoderModel::read_from(r)?;
                if sphere.center.len() != encoder.arch.bottleneck {
                    return Err(Error::Format("hypersphere center does not match the encoder".into()));
                }
                DetectorState::DeepSvdd { encoder, sphere }
            }
        };
        let kind_ok = matches!(
            (header.kind, &state),
            (DetectorKind::Odin, DetectorState::Odin { .. })
                | (DetectorKind::Agnostophobia | DetectorKind::OutlierExposure, DetectorState::Confidence)
                | (DetectorKind::Mahalanobis, DetectorState::Mahalanobis(_))
                | (DetectorKind::Autoencoder, DetectorState::Autoencoder(_))
                | (DetectorKind::DeepSvdd, DetectorState::DeepSvdd { .. })
        );
        if !kind_ok {
            return Err(Error::Format(format!("state does not belong to a {} detector", header.kind)));
        }
        Ok(Self { kind: header.kind, state, threshold, calibration: header.calibration, differentiable: header.differentiable })
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

/// CSV with columns `example_id,dataset,score,decision`; decision is `in`
/// or `ood`.
pub fn write_scores_csv<W: Write>(w: &mut W, dataset: &str, scores: &[f64], decisions: &[Decision]) -> Result<()> {
    if scores.len() != decisions.len() {
        return Err(crate::error::invalid("one decision per score is required"));
    }
    writeln!(w, "example_id,dataset,score,decision")?;
    for (i, (s, d)) in scores.iter().zip(decisions).enumerate() {
        let label = if d.is_ood() { "ood" } else { "in" };
        writeln!(w, "{i},{dataset},{s:e},{label}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odin_round_trip_with_infinite_threshold() {
        let mut d = DetectorModel::odin(1000.0, 0.0014).unwrap();
        d.threshold = Some(f64::INFINITY);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], DETECTOR_MAGIC);
        assert_eq!(DetectorModel::read_from(&mut buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn wrong_magic() {
        assert!(matches!(DetectorModel::read_from(&mut &b"OWBX1...."[..]), Err(Error::Format(_))));
    }

    #[test]
    fn scores_csv_layout() {
        let mut out = Vec::new();
        write_scores_csv(&mut out, "noise", &[0.5, 2.0], &[Decision::InDistribution(1), Decision::Ood]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "example_id,dataset,score,decision");
        assert_eq!(lines[2], "1,noise,2e0,ood");
    }
}
