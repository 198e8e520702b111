//! Coverage, band length and the feature-vs-output spread diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{empirical_quantile, Band, CalibrationRecord, ScoreKind};
use crate::data::{Dataset, Matrix};
use crate::error::{check_dim, Error, Result};
use crate::feature::{estimate_ball, surrogate_score, SurrogateSearchConfig};
use crate::nn::SplitModel;

/// Fraction of `true` entries.
pub fn coverage(membership: &[bool]) -> Result<f64> {
    if membership.is_empty() {
        return Err(Error::Empty("membership list"));
    }
    Ok(membership.iter().filter(|&&m| m).count() as f64 / membership.len() as f64)
}

/// Mean per-dimension width of a band; `None` when unbounded. Crossed bands
/// are empty and have length zero.
pub fn band_length(band: &Band) -> Option<f64> {
    match band {
        Band::Bounded(b) => Some(b.mean_width()),
        Band::Unbounded { .. } => None,
        Band::Crossed { .. } => Some(0.0),
    }
}

/// Mean over bounded bands of the mean per-dimension width. Unbounded bands
/// are skipped; it is an error if every band is unbounded.
pub fn avg_length(bands: &[Band]) -> Result<f64> {
    if bands.is_empty() {
        return Err(Error::Empty("band list"));
    }
    let lengths: Vec<f64> = bands.iter().filter_map(band_length).collect();
    if lengths.is_empty() {
        return Err(Error::UnboundedQuantile);
    }
    Ok(lengths.iter().sum::<f64>() / lengths.len() as f64)
}

/// Weighted length and how many samples were left out of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedLength {
    pub value: f64,
    /// Samples with all targets at 0.5 (zero total weight) or unbounded bands.
    pub skipped: usize,
}

/// `sum_j w_j |C|_j` with `w_j = |2 y_j - 1| / sum_k |2 y_k - 1|`, averaged
/// over samples. Meant for targets in `[0, 1]`.
pub fn weighted_length(bands: &[Band], y_true: &Matrix) -> Result<WeightedLength> {
    check_dim("bands vs targets", y_true.rows(), bands.len())?;
    if bands.is_empty() {
        return Err(Error::Empty("band list"));
    }
    if y_true.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig("weighted length needs targets in [0, 1]".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (i, band) in bands.iter().enumerate() {
        let y = y_true.row(i);
        let w_sum: f64 = y.iter().map(|v| (2.0 * v - 1.0).abs()).sum();
        let widths = match band {
            Band::Bounded(b) => b.widths(),
            Band::Crossed { .. } => vec![0.0; y.len()],
            Band::Unbounded { .. } => continue,
        };
        check_dim("band width", y.len(), widths.len())?;
        if w_sum == 0.0 {
            continue;
        }
        total += y.iter().zip(&widths).map(|(v, w)| (2.0 * v - 1.0).abs() / w_sum * w).sum::<f64>();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("samples with nonzero weight"));
    }
    Ok(WeightedLength {
        value: total / used as f64,
        skipped: bands.len() - used,
    })
}

/// Minimum coverage over `n_groups` equal-count groups of the test set
/// ordered by response value.
pub fn group_coverage(membership: &[bool], y_true: &[f64], n_groups: usize) -> Result<f64> {
    check_dim("membership vs responses", y_true.len(), membership.len())?;
    if n_groups == 0 || membership.len() < n_groups {
        return Err(Error::InvalidConfig(format!(
            "cannot form {n_groups} groups from {} samples",
            membership.len()
        )));
    }
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| y_true[a].total_cmp(&y_true[b]));
    let n = order.len();
    let mut worst = f64::INFINITY;
    for g in 0..n_groups {
        let group = &order[g * n / n_groups..(g + 1) * n / n_groups];
        let hits = group.iter().filter(|&&i| membership[i]).count();
        worst = worst.min(hits as f64 / group.len() as f64);
    }
    Ok(worst)
}

/// Per-method evaluation on the test fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of test responses accepted. For Feature CP this is band
    /// detection; for the other methods it is band membership.
    pub coverage: f64,
    /// Fraction of test responses inside the reported band. Equals
    /// `coverage` except for Feature CP, whose estimated band is a superset
    /// of the detection region.
    pub band_coverage: f64,
    /// `inf` when every band is unbounded.
    #[serde(with = "crate::conformal::extended_real")]
    pub avg_length: f64,
    pub weighted_length: Option<f64>,
    pub group_coverage: Option<f64>,
    pub per_sample_lengths: Vec<Option<f64>>,
    pub unbounded_count: usize,
}

impl EvalReport {
    /// Assembles a report. Weighted length is filled in when every target lies
    /// in `[0, 1]`; group coverage when responses are 1-dimensional and there
    /// are at least three test samples.
    pub fn new(membership: &[bool], bands: &[Band], y_true: &Matrix) -> Result<Self> {
        check_dim("membership vs bands", bands.len(), membership.len())?;
        check_dim("bands vs targets", y_true.rows(), bands.len())?;
        let band_hits: Vec<bool> = bands.iter().enumerate().map(|(i, b)| b.contains(y_true.row(i))).collect();
        let per_sample_lengths: Vec<Option<f64>> = bands.iter().map(band_length).collect();
        let unbounded_count = per_sample_lengths.iter().filter(|l| l.is_none()).count();
        let avg_length = if unbounded_count == bands.len() {
            f64::INFINITY
        } else {
            avg_length(bands)?
        };
        let weighted = if y_true.as_slice().iter().all(|v| (0.0..=1.0).contains(v)) {
            weighted_length(bands, y_true).ok().map(|w| w.value)
        } else {
            None
        };
        let group = if y_true.cols() == 1 && membership.len() >= 3 {
            Some(group_coverage(membership, y_true.as_slice(), 3)?)
        } else {
            None
        };
        Ok(Self {
            coverage: coverage(membership)?,
            band_coverage: coverage(&band_hits)?,
            avg_length,
            weighted_length: weighted,
            group_coverage: group,
            per_sample_lengths,
            unbounded_count,
        })
    }
}

/// Spread of calibration scores around their quantile, in feature space and
/// in output space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicReport {
    /// `mean |Q(V) - V_i|` over feature-space scores.
    pub feature_spread: f64,
    /// `mean (Q(H) - H_i)` with `H_i` the estimated band length at radius
    /// `V_i` around sample `i`'s own feature.
    pub output_spread: f64,
    /// `1 - level` of the empirical quantile used.
    pub alpha_used: f64,
    /// Calibration samples left out because their score was infinite.
    pub excluded: usize,
}

/// Both spreads from plain numbers: `mean |Q(v) - v_i|` and
/// `mean (Q(h) - h_i)` at the given quantile level.
pub fn spreads(scores: &[f64], lengths: &[f64], level: f64) -> Result<(f64, f64)> {
    check_dim("scores vs lengths", scores.len(), lengths.len())?;
    let qv = empirical_quantile(scores, level)?;
    let qh = empirical_quantile(lengths, level)?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|v| (qv - v).abs()).sum::<f64>() / n,
        lengths.iter().map(|h| qh - h).sum::<f64>() / n,
    ))
}

/// Cubic-condition diagnostics on the calibration fold at quantile level
/// `1 - alpha`. `cfg` must be the configuration `record` was calibrated with.
pub fn cubic_diagnostics(
    record: &CalibrationRecord,
    model: &SplitModel,
    ds: &Dataset,
    cal_indices: &[usize],
    alpha: f64,
    cfg: &SurrogateSearchConfig,
) -> Result<CubicReport> {
    record.expect_kind(ScoreKind::FeatureSurrogate)?;
    if cfg.digest() != record.score_config_digest {
        return Err(Error::DigestMismatch {
            record: record.score_config_digest.clone(),
            detector: cfg.digest(),
        });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let pairs = cal_indices
        .par_iter()
        .map(|&i| {
            let x = ds.x.row(i);
            let v = surrogate_score(model, x, ds.y.row(i), cfg)?.score;
            if !v.is_finite() {
                return Ok(None);
            }
            let band = estimate_ball(model, model.feature_forward(x)?, v, cfg)?;
            Ok(Some((v, band.mean_width())))
        })
        .collect::<Result<Vec<Option<(f64, f64)>>>>()?;
    let finite: Vec<(f64, f64)> = pairs.iter().flatten().copied().collect();
    if finite.is_empty() {
        return Err(Error::Empty("calibration samples with finite scores"));
    }
    let (scores, lengths): (Vec<f64>, Vec<f64>) = finite.into_iter().unzip();
    let (feature_spread, output_spread) = spreads(&scores, &lengths, 1.0 - alpha)?;
    Ok(CubicReport {
        feature_spread,
        output_spread,
        alpha_used: alpha,
        excluded: pairs.len() - scores.len(),
    })
}
