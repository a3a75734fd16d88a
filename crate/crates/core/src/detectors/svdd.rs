use serde::{Deserialize, Serialize};

use super::calibration::calibrate_threshold;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Default quantile of training distances used as the radius.
pub const DEFAULT_NU: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypersphere {
    pub center: Vec<f64>,
    pub radius: f64,
    pub nu: f64,
}

/// Center at the feature mean; radius at the `nu` nearest-rank quantile of
/// the distances from training features to the center.
pub fn svdd_fit(features: &Tensor, nu: f64) -> Result<Hypersphere> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::Empty("SVDD features"));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(invalid(format!("nu must lie in (0, 1], got {nu}")));
    }
    let (n, d) = (features.rows(), features.row_len());
    let mut center = vec![0.0; d];
    for i in 0..n {
        center.iter_mut().zip(features.row(i)).for_each(|(c, v)| *c += v);
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    let sphere = Hypersphere { center, radius: 0.0, nu };
    let dists = sphere.distances(features)?;
    let radius = calibrate_threshold(&dists, nu)?;
    Ok(Hypersphere { radius, ..sphere })
}

impl Hypersphere {
    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<Var> {
        tape.constant(Tensor::new(vec![self.center.len()], self.center.iter().map(|c| -c).collect())?)
    }

    /// `‖φ − c‖`, shape `[n]`.
    pub(crate) fn distance_on(&self, tape: &mut Tape, neg_center: Var, feats: Var) -> Result<Var> {
        let w = tape.value(feats).row_len();
        if tape.value(feats).rank() != 2 || w != self.center.len() {
            return Err(Error::ShapeMismatch {
                op: "svdd",
                detail: format!("features {:?}, center width {}", tape.value(feats).shape(), self.center.len()),
            });
        }
        let diff = tape.add(feats, neg_center)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum_rows(sq)?;
        tape.sqrt(s)
    }

    /// `‖φ − c‖ − r`, shape `[n]`.
    pub(crate) fn score_on(&self, tape: &mut Tape, neg_center: Var, feats: Var) -> Result<Var> {
        let d = self.distance_on(tape, neg_center, feats)?;
        tape.add_scalar(d, -self.radius)
    }

    pub fn distances(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let c = self.bind(&mut tape)?;
        let f = tape.constant(features.clone())?;
        let d = self.distance_on(&mut tape, c, f)?;
        Ok(tape.value(d).data().to_vec())
    }

    pub fn score_features(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.distances(features)?.into_iter().map(|d| d - self.radius).collect())
    }
}
