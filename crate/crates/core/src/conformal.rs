//! Split-conformal quantiles and the two output-space baselines: vanilla
//! split CP with the `l_inf` residual score, and conformalized quantile
//! regression (CQR).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Mlp, SplitModel};

/// Anything that maps an input row to a response vector.
pub trait Predictor: Sync {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for Mlp {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

impl Predictor for SplitModel {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

impl<F> Predictor for F
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self(x))
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Rank `ceil((1 - alpha)(n + 1))` of the conformal quantile.
///
/// The `1e-10` guard stops products such as `0.9 * 10` that land a hair
/// above an integer from bumping the rank by one.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let t = (1.0 - alpha) * (n + 1) as f64;
    (t - 1e-10).ceil().max(1.0) as usize
}

/// The `(1 - alpha)` quantile of `1/(n+1) * (sum_i delta_{V_i} + delta_inf)`.
///
/// Returns the `k`-th smallest score for `k = ceil((1 - alpha)(n + 1))`, or
/// `+inf` when `k > n`. No interpolation.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN non-conformity score".into()));
    }
    let k = conformal_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Same as [`conformal_quantile`] for scores already sorted ascending.
pub(crate) fn conformal_quantile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let k = conformal_rank(sorted.len(), alpha);
    if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

/// Smallest score `s` with `#{V <= s} / n >= level`.
pub fn empirical_quantile(scores: &[f64], level: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("empirical quantile input"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!("quantile level {level} outside [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((level * n as f64) - 1e-10).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[k - 1])
}

/// Which non-conformity score produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    OutputLinf,
    FeatureSurrogate,
    CqrSigned,
    FeatureCqrSignedLo,
    FeatureCqrSignedHi,
}

/// Sorted calibration scores and their conformal quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub alpha: f64,
    #[serde(with = "extended_real")]
    pub q: f64,
    pub score_kind: ScoreKind,
    pub score_config_digest: String,
    #[serde(with = "extended_real_vec")]
    pub scores: Vec<f64>,
}

impl CalibrationRecord {
    /// Sorts `scores` and computes `q`. Scores may be `+inf` (a sample for
    /// which no finite score exists) but never NaN or `-inf`.
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64, score_kind: ScoreKind, score_config_digest: String) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(Error::Empty("calibration scores"));
        }
        if scores.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidConfig("calibration scores must be finite or +inf".into()));
        }
        scores.sort_by(f64::total_cmp);
        let q = conformal_quantile_sorted(&scores, alpha);
        Ok(Self {
            alpha,
            q,
            score_kind,
            score_config_digest,
            scores,
        })
    }

    /// Same scores, different level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            q: conformal_quantile_sorted(&self.scores, alpha),
            ..self.clone()
        })
    }

    pub fn is_bounded(&self) -> bool {
        self.q.is_finite()
    }

    pub(crate) fn expect_kind(&self, kind: ScoreKind) -> Result<()> {
        if self.score_kind == kind {
            Ok(())
        } else {
            Err(Error::ScoreKindMismatch {
                expected: self.score_kind,
                got: kind,
            })
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Hex SHA-256 of a canonical description of a scoring procedure.
pub(crate) fn digest_of(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-dimension closed intervals with `lo <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBand {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl OutputBand {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("band bounds", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidConfig("band bounds must be finite with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(center: &[f64]) -> Self {
        Self {
            lo: center.to_vec(),
            hi: center.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h - l).collect()
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.dim() as f64
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.len() == self.dim() && y.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Whether `other` lies inside `self` componentwise.
    pub fn encloses(&self, other: &OutputBand) -> bool {
        self.dim() == other.dim()
            && self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }
}

/// A prediction band, or one of the two cases that have no finite box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Band {
    Bounded(OutputBand),
    /// The quantile was `+inf`: every response is accepted.
    Unbounded { dim: usize },
    /// Endpoint combination produced `lo > hi` in some coordinate; treated as
    /// empty (zero length, covers nothing).
    Crossed { lo: Vec<f64>, hi: Vec<f64> },
}

impl Band {
    fn from_endpoints(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        if lo.iter().zip(&hi).all(|(l, h)| l <= h) {
            Band::Bounded(OutputBand { lo, hi })
        } else {
            Band::Crossed { lo, hi }
        }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        match self {
            Band::Bounded(b) => b.contains(y),
            Band::Unbounded { .. } => true,
            Band::Crossed { .. } => false,
        }
    }

    pub fn bounded(&self) -> Option<&OutputBand> {
        match self {
            Band::Bounded(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, Band::Unbounded { .. })
    }
}

/// `V_i = ||Y_i - mu(X_i)||_inf` on the calibration rows.
pub fn vanilla_cp_calibrate<P: Predictor>(model: &P, ds: &Dataset, cal_indices: &[usize], alpha: f64) -> Result<CalibrationRecord> {
    check_alpha(alpha)?;
    if cal_indices.is_empty() {
        return Err(Error::Empty("calibration fold"));
    }
    let scores = cal_indices
        .par_iter()
        .map(|&i| linf_residual(model, ds.x.row(i), ds.y.row(i)))
        .collect::<Result<Vec<f64>>>()?;
    CalibrationRecord::from_scores(scores, alpha, ScoreKind::OutputLinf, digest_of("output_linf/v1"))
}

/// `||y - mu(x)||_inf`.
pub fn linf_residual<P: Predictor>(model: &P, x: &[f64], y: &[f64]) -> Result<f64> {
    let pred = model.predict(x)?;
    check_dim("response", pred.len(), y.len())?;
    Ok(pred.iter().zip(y).map(|(p, t)| (t - p).abs()).fold(0.0, f64::max))
}

/// `[mu(x) - q, mu(x) + q]` in every dimension.
pub fn vanilla_cp_band<P: Predictor>(record: &CalibrationRecord, model: &P, x: &[f64]) -> Result<Band> {
    record.expect_kind(ScoreKind::OutputLinf)?;
    let pred = model.predict(x)?;
    if !record.q.is_finite() {
        return Ok(Band::Unbounded { dim: pred.len() });
    }
    let q = record.q;
    Ok(Band::Bounded(OutputBand {
        lo: pred.iter().map(|p| p - q).collect(),
        hi: pred.iter().map(|p| p + q).collect(),
    }))
}

/// `E = max(q_lo(x) - y, y - q_hi(x))`.
pub fn cqr_score(lo: f64, hi: f64, y: f64) -> f64 {
    (lo - y).max(y - hi)
}

fn scalar_prediction<P: Predictor>(model: &P, x: &[f64]) -> Result<f64> {
    let p = model.predict(x)?;
    check_dim("quantile model output", 1, p.len())?;
    Ok(p[0])
}

pub fn cqr_calibrate<P: Predictor, Q: Predictor>(
    model_lo: &P,
    model_hi: &Q,
    ds: &Dataset,
    cal_indices: &[usize],
    alpha: f64,
) -> Result<CalibrationRecord> {
    check_alpha(alpha)?;
    check_dim("CQR response dimension", 1, ds.output_dim())?;
    if cal_indices.is_empty() {
        return Err(Error::Empty("calibration fold"));
    }
    let scores = cal_indices
        .par_iter()
        .map(|&i| {
            let x = ds.x.row(i);
            Ok(cqr_score(scalar_prediction(model_lo, x)?, scalar_prediction(model_hi, x)?, ds.y.row(i)[0]))
        })
        .collect::<Result<Vec<f64>>>()?;
    CalibrationRecord::from_scores(scores, alpha, ScoreKind::CqrSigned, digest_of("cqr_signed/v1"))
}

/// `[q_lo(x) - q, q_hi(x) + q]`.
pub fn cqr_band<P: Predictor, Q: Predictor>(record: &CalibrationRecord, model_lo: &P, model_hi: &Q, x: &[f64]) -> Result<Band> {
    record.expect_kind(ScoreKind::CqrSigned)?;
    if !record.q.is_finite() {
        return Ok(Band::Unbounded { dim: 1 });
    }
    let lo = scalar_prediction(model_lo, x)? - record.q;
    let hi = scalar_prediction(model_hi, x)? + record.q;
    Ok(Band::from_endpoints(vec![lo], vec![hi]))
}

/// Serializes `+inf` as the string `"inf"` since JSON has no infinity.
pub(crate) mod extended_real {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Finite(f64),
        Named(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Finite(v)
        } else if v > 0.0 {
            Repr::Named("inf".into())
        } else if v < 0.0 {
            Repr::Named("-inf".into())
        } else {
            Repr::Named("nan".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Finite(v) => Ok(v),
            Repr::Named(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("unexpected extended real {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub(crate) mod extended_real_vec {
    use super::extended_real::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}
