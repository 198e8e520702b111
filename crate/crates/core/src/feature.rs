//! Feature-space conformal prediction.
//!
//! The non-conformity score of `(x, y)` is the distance from the trained
//! feature `f(x)` to a *surrogate feature* `u` with `g(u) ≈ y`, found by
//! gradient descent on `||g(u) - y||^2` starting at `f(x)`. Calibration takes
//! the conformal quantile of these distances; a test response is accepted
//! (band detection) when its own surrogate distance is below the quantile, and
//! the output band is estimated by propagating the feature ball of that radius
//! through the head (see [`crate::bounds`]).
//!
//! Calibration and detection must run the exact same search. Every record
//! carries a digest of the search configuration and detection refuses to run
//! under a different one.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{attack_inner_box, estimate_box, sample_ball, BoundMethod};
use crate::conformal::{check_alpha, conformal_quantile, digest_of, Band, CalibrationRecord, OutputBand, ScoreKind};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{HeadWorkspace, LossKind, SplitModel};

/// Norm used to measure feature-space distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    Linf,
    L2,
}

impl FeatureNorm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            FeatureNorm::Linf => diffs.fold(0.0, f64::max),
            FeatureNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

/// Ball `{v : ||v - center|| <= radius}` in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBand {
    pub center: Vec<f64>,
    pub radius: f64,
    pub norm: FeatureNorm,
}

impl FeatureBand {
    pub fn new(center: Vec<f64>, radius: f64, norm: FeatureNorm) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidConfig(format!("feature ball radius {radius} must be nonnegative")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("feature ball center must be finite".into()));
        }
        Ok(Self { center, radius, norm })
    }
}

/// What the surrogate search fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Squared error against a real response; converged when
    /// `||g(u) - y||^2 / max(||y||^2, abs_tol) < rel_tol`.
    Regression,
    /// Cross-entropy against a one-hot label; converged when
    /// `argmax g(u)` equals the label.
    Classification,
}

/// How a search that exhausts its step budget is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnconvergedScore {
    /// `||u - f(x)||` after the last step, converged or not.
    Distance,
    /// `+inf`: no surrogate feature was found, so nothing is certified.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSearchConfig {
    /// Gradient step size.
    pub eta: f64,
    /// Step budget `M`.
    pub max_steps: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub feature_norm: FeatureNorm,
    #[serde(default = "default_mode")]
    pub mode: SearchMode,
    #[serde(default = "default_unconverged")]
    pub unconverged: UnconvergedScore,
    /// Band estimation bound. Not part of the digest: it changes the
    /// reported band, never the score.
    #[serde(default)]
    pub estimator: BoundMethod,
}

fn default_mode() -> SearchMode {
    SearchMode::Regression
}

fn default_unconverged() -> UnconvergedScore {
    UnconvergedScore::Infinite
}

impl Default for SurrogateSearchConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            max_steps: 1000,
            rel_tol: 0.01,
            abs_tol: 1e-8,
            feature_norm: FeatureNorm::Linf,
            mode: SearchMode::Regression,
            unconverged: UnconvergedScore::Infinite,
            estimator: BoundMethod::Crown,
        }
    }
}

/// Default candidate step budgets for the `M` search.
pub const DEFAULT_STEP_CANDIDATES: [usize; 5] = [10, 30, 100, 300, 1000];

impl SurrogateSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("step size {} must be positive", self.eta)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn with_max_steps(self, max_steps: usize) -> Self {
        Self { max_steps, ..self }
    }

    /// Opaque token identifying this exact scoring procedure.
    pub fn digest(&self) -> String {
        digest_of(&format!(
            "feature_surrogate/v1;norm={:?};mode={:?};unconverged={:?};eta={:016x};steps={};rel={:016x};abs={:016x}",
            self.feature_norm,
            self.mode,
            self.unconverged,
            self.eta.to_bits(),
            self.max_steps,
            self.rel_tol.to_bits(),
            self.abs_tol.to_bits()
        ))
    }

    fn loss(&self) -> LossKind {
        match self.mode {
            SearchMode::Regression => LossKind::Mse,
            SearchMode::Classification => LossKind::SoftmaxCrossEntropy,
        }
    }

    fn converged(&self, out: &[f64], y: &[f64], y_norm2: f64, sq_err: f64) -> bool {
        match self.mode {
            SearchMode::Regression => sq_err / y_norm2.max(self.abs_tol) < self.rel_tol,
            SearchMode::Classification => argmax(out) == argmax(y),
        }
    }

    fn finalize(&self, distance: f64, converged: bool) -> f64 {
        match (converged, self.unconverged) {
            (false, UnconvergedScore::Infinite) => f64::INFINITY,
            _ => distance,
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Result of one surrogate-feature search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOutcome {
    /// Non-conformity score; `+inf` for an unconverged search under
    /// [`UnconvergedScore::Infinite`].
    pub score: f64,
    /// `||u - f(x)||` in the configured norm, regardless of convergence.
    pub distance: f64,
    pub steps_used: usize,
    pub converged: bool,
}

/// Runs the search from `v_hat` and reports the outcome the search would have
/// had with each step budget in `checkpoints` (ascending). Running once with
/// budget `M` is a prefix of running with any larger budget, so one pass
/// serves every candidate.
pub(crate) fn surrogate_trace(
    model: &SplitModel,
    v_hat: &[f64],
    y: &[f64],
    cfg: &SurrogateSearchConfig,
    checkpoints: &[usize],
    ws: &mut HeadWorkspace,
) -> Result<Vec<SurrogateOutcome>> {
    debug_assert!(checkpoints.windows(2).all(|w| w[0] <= w[1]));
    let loss = cfg.loss();
    let y_norm2: f64 = y.iter().map(|v| v * v).sum();
    let mut u = v_hat.to_vec();
    let mut grad = vec![0.0; u.len()];
    let mut sq_err = vec![0.0; y.len()];
    let mut outcomes = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let mut step = 0;
    let budget = checkpoints.last().copied().unwrap_or(0);

    loop {
        let value = ws.value_and_grad(model, &u, y, loss, &mut grad);
        let out = ws.output();
        let err2 = match cfg.mode {
            SearchMode::Regression => value,
            SearchMode::Classification => {
                sq_err.iter_mut().zip(out.iter().zip(y)).for_each(|(e, (o, t))| *e = (o - t) * (o - t));
                sq_err.iter().sum()
            }
        };
        let converged = cfg.converged(out, y, y_norm2, err2);
        if converged || step == budget {
            let distance = cfg.feature_norm.distance(&u, v_hat);
            while next < checkpoints.len() {
                // Budgets below `step` were recorded on the way here.
                outcomes.push(SurrogateOutcome {
                    score: cfg.finalize(distance, converged),
                    distance,
                    steps_used: step,
                    converged,
                });
                next += 1;
            }
            return Ok(outcomes);
        }
        while next < checkpoints.len() && checkpoints[next] == step {
            let distance = cfg.feature_norm.distance(&u, v_hat);
            outcomes.push(SurrogateOutcome {
                score: cfg.finalize(distance, false),
                distance,
                steps_used: step,
                converged: false,
            });
            next += 1;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        for (ui, gi) in u.iter_mut().zip(&grad) {
            *ui -= cfg.eta * gi;
        }
        step += 1;
    }
}

/// Surrogate-feature score of `(x, y)`: gradient descent on
/// `||g(u) - y||^2` (cross-entropy in classification mode) from `u = f(x)`
/// for at most `max_steps` steps, stopping early once converged. The score is
/// `||u - f(x)||`, which upper-bounds the distance from `f(x)` to the nearest
/// exact surrogate feature when the search converges.
pub fn surrogate_score(model: &SplitModel, x: &[f64], y: &[f64], cfg: &SurrogateSearchConfig) -> Result<SurrogateOutcome> {
    cfg.validate()?;
    check_dim("response", model.output_dim(), y.len())?;
    let v_hat = model.feature_forward(x)?;
    let mut ws = HeadWorkspace::new(model);
    let mut out = surrogate_trace(model, &v_hat, y, cfg, &[cfg.max_steps], &mut ws)?;
    Ok(out.pop().expect("one checkpoint"))
}

/// Outcome of choosing the step budget `M` on a held-out part of the
/// calibration fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSelectionReport {
    pub candidate_steps: Vec<usize>,
    pub validation_coverages: Vec<f64>,
    #[serde(with = "crate::conformal::extended_real_vec")]
    pub candidate_quantiles: Vec<f64>,
    pub chosen_m: usize,
    /// False when no candidate reached `1 - alpha` and the largest was used.
    pub reached_target: bool,
    pub scoring_size: usize,
    pub validation_size: usize,
}

/// Smallest candidate with a finite quantile whose validation coverage is at
/// least `1 - alpha`; otherwise the largest candidate, flagged.
pub fn select_step_budget(candidates: &[usize], coverages: &[f64], quantiles: &[f64], alpha: f64) -> (usize, bool) {
    candidates
        .iter()
        .zip(coverages.iter().zip(quantiles))
        .find(|(_, (&c, q))| c >= 1.0 - alpha - 1e-12 && q.is_finite())
        .map(|(&m, _)| (m, true))
        .unwrap_or((*candidates.last().expect("nonempty candidates"), false))
}

/// Feature CP calibration with the step budget chosen on one fifth of the
/// calibration fold.
///
/// The first four fifths of `cal_indices` are scored for every candidate in
/// `candidates`; each candidate's quantile is checked against the remaining
/// fifth by band detection. The returned record holds the scoring part's
/// scores under the chosen budget, and its digest binds `cfg` with that
/// budget.
pub fn fcp_calibrate(
    model: &SplitModel,
    ds: &Dataset,
    cal_indices: &[usize],
    alpha: f64,
    cfg: &SurrogateSearchConfig,
    candidates: &[usize],
) -> Result<(CalibrationRecord, MSelectionReport)> {
    check_alpha(alpha)?;
    cfg.validate()?;
    check_dim("response", model.output_dim(), ds.output_dim())?;
    if cal_indices.is_empty() {
        return Err(Error::Empty("calibration fold"));
    }
    let mut candidates = candidates.to_vec();
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::InvalidConfig("step candidates must be nonempty and positive".into()));
    }
    candidates.sort_unstable();
    candidates.dedup();

    let n_val = (cal_indices.len() as f64 / 5.0).round() as usize;
    if n_val == 0 || n_val == cal_indices.len() {
        return Err(Error::Empty("validation part of the calibration fold"));
    }
    let (scoring, validation) = cal_indices.split_at(cal_indices.len() - n_val);

    let traces = score_rows(model, ds, cal_indices, cfg, &candidates)?;
    let (score_traces, val_traces) = traces.split_at(scoring.len());

    let mut coverages = Vec::with_capacity(candidates.len());
    let mut quantiles = Vec::with_capacity(candidates.len());
    for k in 0..candidates.len() {
        let scores: Vec<f64> = score_traces.iter().map(|t| t[k].score).collect();
        let q = conformal_quantile(&scores, alpha)?;
        let hits = val_traces.iter().filter(|t| t[k].score <= q).count();
        coverages.push(hits as f64 / val_traces.len() as f64);
        quantiles.push(q);
    }
    let (chosen_m, reached_target) = select_step_budget(&candidates, &coverages, &quantiles, alpha);
    let k = candidates.iter().position(|&m| m == chosen_m).expect("chosen from candidates");
    let final_cfg = cfg.with_max_steps(chosen_m);
    let record = CalibrationRecord::from_scores(
        score_traces.iter().map(|t| t[k].score).collect(),
        alpha,
        ScoreKind::FeatureSurrogate,
        final_cfg.digest(),
    )?;
    let report = MSelectionReport {
        candidate_steps: candidates,
        validation_coverages: coverages,
        candidate_quantiles: quantiles,
        chosen_m,
        reached_target,
        scoring_size: scoring.len(),
        validation_size: validation.len(),
    };
    Ok((record, report))
}

/// Feature CP calibration with a fixed step budget (`cfg.max_steps`) on all
/// of `cal_indices`.
pub fn fcp_calibrate_fixed(
    model: &SplitModel,
    ds: &Dataset,
    cal_indices: &[usize],
    alpha: f64,
    cfg: &SurrogateSearchConfig,
) -> Result<CalibrationRecord> {
    check_alpha(alpha)?;
    cfg.validate()?;
    check_dim("response", model.output_dim(), ds.output_dim())?;
    if cal_indices.is_empty() {
        return Err(Error::Empty("calibration fold"));
    }
    let traces = score_rows(model, ds, cal_indices, cfg, &[cfg.max_steps])?;
    CalibrationRecord::from_scores(traces.iter().map(|t| t[0].score).collect(), alpha, ScoreKind::FeatureSurrogate, cfg.digest())
}

fn score_rows(
    model: &SplitModel,
    ds: &Dataset,
    rows: &[usize],
    cfg: &SurrogateSearchConfig,
    checkpoints: &[usize],
) -> Result<Vec<Vec<SurrogateOutcome>>> {
    rows.par_iter()
        .map_init(
            || HeadWorkspace::new(model),
            |ws, &i| {
                let v_hat = model.feature_forward(ds.x.row(i))?;
                surrogate_trace(model, &v_hat, ds.y.row(i), cfg, checkpoints, ws)
            },
        )
        .collect()
}

fn check_record(record: &CalibrationRecord, kind: ScoreKind, cfg: &SurrogateSearchConfig) -> Result<()> {
    record.expect_kind(kind)?;
    let digest = cfg.digest();
    if digest != record.score_config_digest {
        return Err(Error::DigestMismatch {
            record: record.score_config_digest.clone(),
            detector: digest,
        });
    }
    Ok(())
}

/// Band detection: accepts `y_tilde` when its surrogate score is at most the
/// calibrated quantile. `cfg` must be the configuration the record was
/// calibrated with.
pub fn fcp_detect(model: &SplitModel, record: &CalibrationRecord, x: &[f64], y_tilde: &[f64], cfg: &SurrogateSearchConfig) -> Result<bool> {
    check_record(record, ScoreKind::FeatureSurrogate, cfg)?;
    if record.q == f64::INFINITY {
        return Ok(true);
    }
    Ok(surrogate_score(model, x, y_tilde, cfg)?.score <= record.q)
}

/// Band estimation: a box containing `g(v)` for every `v` within the
/// calibrated radius of `f(x)`.
pub fn fcp_estimate(model: &SplitModel, record: &CalibrationRecord, x: &[f64], cfg: &SurrogateSearchConfig) -> Result<Band> {
    check_record(record, ScoreKind::FeatureSurrogate, cfg)?;
    if !record.q.is_finite() {
        return Ok(Band::Unbounded { dim: model.output_dim() });
    }
    let v_hat = model.feature_forward(x)?;
    Ok(Band::Bounded(estimate_ball(model, v_hat, record.q, cfg)?))
}

/// Output box of the ball of `radius` around `v_hat`; a zero radius gives the
/// point `g(v_hat)` exactly.
pub fn estimate_ball(model: &SplitModel, v_hat: Vec<f64>, radius: f64, cfg: &SurrogateSearchConfig) -> Result<OutputBand> {
    if radius == 0.0 {
        return Ok(OutputBand::point(&model.head_forward(&v_hat)?));
    }
    let band = FeatureBand::new(v_hat, radius, cfg.feature_norm)?;
    Ok(estimate_box(model, &band, cfg.estimator)?.into_band())
}

/// Signs `Ṽ` by whether the head already covers `y` (`c = +1`) or not
/// (`c = -1`) and stores `-c * Ṽ`, so a positive score means the head must
/// move outward and the upper conformal quantile stays valid.
fn fcqr_signed(raw: SurrogateOutcome, covered: bool) -> f64 {
    match (covered, raw.score.is_finite()) {
        (true, true) => -raw.score,
        // An unconverged covered point earns no shrinkage.
        (true, false) => 0.0,
        (false, _) => raw.score,
    }
}

/// Indicator `c` as `+1` / `-1`.
pub fn fcqr_indicator(covered: bool) -> i8 {
    if covered {
        1
    } else {
        -1
    }
}

fn fcqr_cfg_digest(cfg: &SurrogateSearchConfig, side: &str) -> String {
    digest_of(&format!("feature_cqr/{side};{}", cfg.digest()))
}

/// Feature CQR calibration: per-head surrogate scores against the response,
/// signed by whether that head already covers it, each with its own
/// conformal quantile.
pub fn fcqr_calibrate(
    model_lo: &SplitModel,
    model_hi: &SplitModel,
    ds: &Dataset,
    cal_indices: &[usize],
    alpha: f64,
    cfg: &SurrogateSearchConfig,
) -> Result<(CalibrationRecord, CalibrationRecord)> {
    check_alpha(alpha)?;
    cfg.validate()?;
    check_dim("Feature CQR response dimension", 1, ds.output_dim())?;
    check_dim("lower quantile head output", 1, model_lo.output_dim())?;
    check_dim("upper quantile head output", 1, model_hi.output_dim())?;
    if cal_indices.is_empty() {
        return Err(Error::Empty("calibration fold"));
    }
    let pairs = cal_indices
        .par_iter()
        .map_init(
            || (HeadWorkspace::new(model_lo), HeadWorkspace::new(model_hi)),
            |(ws_lo, ws_hi), &i| {
                let x = ds.x.row(i);
                let y = ds.y.row(i);
                let v_lo = model_lo.feature_forward(x)?;
                let v_hi = model_hi.feature_forward(x)?;
                let pred_lo = model_lo.head_forward(&v_lo)?[0];
                let pred_hi = model_hi.head_forward(&v_hi)?[0];
                let raw_lo = surrogate_trace(model_lo, &v_lo, y, cfg, &[cfg.max_steps], ws_lo)?[0];
                let raw_hi = surrogate_trace(model_hi, &v_hi, y, cfg, &[cfg.max_steps], ws_hi)?[0];
                Ok((fcqr_signed(raw_lo, pred_lo <= y[0]), fcqr_signed(raw_hi, pred_hi >= y[0])))
            },
        )
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (lo, hi): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok((
        CalibrationRecord::from_scores(lo, alpha / 2.0, ScoreKind::FeatureCqrSignedLo, fcqr_cfg_digest(cfg, "lo"))?,
        CalibrationRecord::from_scores(hi, alpha / 2.0, ScoreKind::FeatureCqrSignedHi, fcqr_cfg_digest(cfg, "hi"))?,
    ))
}

/// Endpoint rule for Feature CQR. `c_lo` and `c_hi` are the indicator signs
/// attached to each head's quantile (`c = -sign(q)`, zero counted as
/// positive); `lo_band` and `hi_band` are `[C0, C1]` from band estimation on
/// each head with radius `|q|`.
pub fn fcqr_combine(c_lo: i8, c_hi: i8, lo_band: (f64, f64), hi_band: (f64, f64)) -> (f64, f64) {
    let (c0_lo, c1_lo) = lo_band;
    let (c0_hi, c1_hi) = hi_band;
    match (c_lo < 0, c_hi < 0) {
        (true, true) => (c0_lo, c1_hi),
        (true, false) => (c0_lo, c0_hi),
        (false, true) => (c1_lo, c1_hi),
        (false, false) => (c1_lo, c0_hi),
    }
}

fn quantile_indicator(q: f64) -> i8 {
    if q > 0.0 {
        -1
    } else {
        1
    }
}

/// Outer `(min, max)` from band estimation and inner `(min, max)` from
/// projected gradient search, for a 1-output head.
fn head_extremes(model: &SplitModel, x: &[f64], radius: f64, cfg: &SurrogateSearchConfig) -> Result<((f64, f64), (f64, f64))> {
    let v_hat = model.feature_forward(x)?;
    if radius == 0.0 {
        let y = model.head_forward(&v_hat)?[0];
        return Ok(((y, y), (y, y)));
    }
    let band = FeatureBand::new(v_hat, radius, cfg.feature_norm)?;
    let outer = estimate_box(model, &band, cfg.estimator)?;
    let inner = attack_inner_box(model, &band, INNER_SEARCH_STEPS)?;
    Ok(((outer.lo[0], outer.hi[0]), (inner.lo[0], inner.hi[0])))
}

/// Projected gradient steps per direction for the inner endpoints.
const INNER_SEARCH_STEPS: usize = 20;

/// Feature CQR band for `x`.
pub fn fcqr_band(
    record_lo: &CalibrationRecord,
    record_hi: &CalibrationRecord,
    model_lo: &SplitModel,
    model_hi: &SplitModel,
    x: &[f64],
    cfg: &SurrogateSearchConfig,
) -> Result<Band> {
    record_lo.expect_kind(ScoreKind::FeatureCqrSignedLo)?;
    record_hi.expect_kind(ScoreKind::FeatureCqrSignedHi)?;
    for (rec, side) in [(record_lo, "lo"), (record_hi, "hi")] {
        let digest = fcqr_cfg_digest(cfg, side);
        if digest != rec.score_config_digest {
            return Err(Error::DigestMismatch {
                record: rec.score_config_digest.clone(),
                detector: digest,
            });
        }
    }
    if !record_lo.q.is_finite() || !record_hi.q.is_finite() {
        return Ok(Band::Unbounded { dim: 1 });
    }
    let (lo_outer, lo_inner) = head_extremes(model_lo, x, record_lo.q.abs(), cfg)?;
    let (hi_outer, hi_inner) = head_extremes(model_hi, x, record_hi.q.abs(), cfg)?;
    // Endpoints that move outward come from the sound outer box; endpoints
    // that move inward come from values attained inside the ball, so neither
    // direction can over-shrink.
    let (a, b) = fcqr_combine(
        quantile_indicator(record_lo.q),
        quantile_indicator(record_hi.q),
        (lo_outer.0, lo_inner.1),
        (hi_inner.0, hi_outer.1),
    );
    Ok(if a <= b {
        Band::Bounded(OutputBand { lo: vec![a], hi: vec![b] })
    } else {
        Band::Crossed { lo: vec![a], hi: vec![b] }
    })
}

/// Classification prediction set: labels reached by `g` on `n_samples`
/// uniform draws from the calibrated feature ball, plus the label of the
/// unperturbed prediction. An infinite quantile yields every label.
pub fn fcp_classify_set(
    model: &SplitModel,
    record: &CalibrationRecord,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    cfg: &SurrogateSearchConfig,
) -> Result<BTreeSet<usize>> {
    check_record(record, ScoreKind::FeatureSurrogate, cfg)?;
    if !record.q.is_finite() {
        return Ok((0..model.output_dim()).collect());
    }
    let v_hat = model.feature_forward(x)?;
    let mut ws = HeadWorkspace::new(model);
    let mut labels = BTreeSet::new();
    labels.insert(argmax(ws.forward(model, &v_hat)));
    if record.q == 0.0 {
        return Ok(labels);
    }
    let band = FeatureBand::new(v_hat, record.q, cfg.feature_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; band.center.len()];
    for _ in 0..n_samples {
        sample_ball(&band, &mut rng, &mut v);
        labels.insert(argmax(ws.forward(model, &v)));
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::nn::{Dense, Mlp, MlpParams, MlpSpec};

    /// Identity feature map on nonnegative inputs followed by the given head.
    pub(crate) fn with_head(feature_dim: usize, head: Vec<Dense>) -> SplitModel {
        let d = feature_dim;
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let mut widths = vec![d, d];
        widths.extend(head.iter().map(|l| l.out_dim));
        let mut layers = vec![Dense::new(d, d, eye, vec![0.0; d]).unwrap()];
        layers.extend(head);
        SplitModel::new(Mlp::new(MlpSpec::relu(widths).unwrap(), MlpParams { layers }).unwrap(), 1).unwrap()
    }

    fn identity_head(d: usize) -> SplitModel {
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        with_head(d, vec![Dense::new(d, d, eye, vec![0.0; d]).unwrap()])
    }

    #[test]
    fn identity_head_moves_feature_onto_target() {
        let m = identity_head(2);
        let cfg = SurrogateSearchConfig {
            feature_norm: FeatureNorm::L2,
            rel_tol: 1e-12,
            max_steps: 10_000,
            ..Default::default()
        };
        let out = surrogate_score(&m, &[0.0, 0.0], &[3.0, 4.0], &cfg).unwrap();
        assert!(out.converged);
        assert!((out.score - 5.0).abs() < 1e-5, "{out:?}");
    }

    #[test]
    fn coordinate_head_distance_to_hyperplane() {
        let m = with_head(2, vec![Dense::new(2, 1, vec![1.0, 0.0], vec![0.0]).unwrap()]);
        let cfg = SurrogateSearchConfig {
            feature_norm: FeatureNorm::L2,
            abs_tol: 1.0,
            rel_tol: 1e-8,
            ..Default::default()
        };
        let out = surrogate_score(&m, &[2.0, 3.0], &[0.0], &cfg).unwrap();
        assert!(out.converged);
        assert!((out.score - 2.0).abs() / 2.0 < 0.02, "{out:?}");
        assert!(out.score <= 2.0);
    }

    #[test]
    fn score_is_zero_iff_search_never_moves() {
        let m = identity_head(2);
        let cfg = SurrogateSearchConfig::default();
        let out = surrogate_score(&m, &[1.0, 2.0], &[1.0, 2.0], &cfg).unwrap();
        assert_eq!((out.score, out.steps_used, out.converged), (0.0, 0, true));
        let out = surrogate_score(&m, &[1.0, 2.0], &[1.5, 2.0], &cfg).unwrap();
        assert!(out.score > 0.0 && out.steps_used > 0);
    }

    #[test]
    fn unconverged_policies() {
        let m = identity_head(1);
        let mut cfg = SurrogateSearchConfig {
            max_steps: 1,
            eta: 0.05,
            ..Default::default()
        };
        let out = surrogate_score(&m, &[0.0], &[5.0], &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.score, f64::INFINITY);
        assert!((out.distance - 0.5).abs() < 1e-12);
        cfg.unconverged = UnconvergedScore::Distance;
        let out = surrogate_score(&m, &[0.0], &[5.0], &cfg).unwrap();
        assert!((out.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trace_checkpoints_match_independent_runs() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![3, 6, 5, 2]).unwrap(), 8).unwrap(), 2).unwrap();
        let cfg = SurrogateSearchConfig {
            unconverged: UnconvergedScore::Distance,
            rel_tol: 1e-6,
            ..Default::default()
        };
        let x = [0.4, 1.0, -0.3];
        let y = [1.0, -2.0];
        let v_hat = m.feature_forward(&x).unwrap();
        let checkpoints = [1, 3, 10, 40];
        let mut ws = HeadWorkspace::new(&m);
        let trace = surrogate_trace(&m, &v_hat, &y, &cfg, &checkpoints, &mut ws).unwrap();
        for (k, &budget) in checkpoints.iter().enumerate() {
            let single = surrogate_score(&m, &x, &y, &cfg.with_max_steps(budget)).unwrap();
            assert_eq!(trace[k], single, "budget {budget}");
        }
    }

    #[test]
    fn step_budget_selection_rule() {
        assert_eq!(select_step_budget(&[10, 100], &[0.84, 0.93], &[1.0, 2.0], 0.1), (100, true));
        assert_eq!(select_step_budget(&[10, 100], &[0.91, 0.93], &[1.0, 2.0], 0.1), (10, true));
        assert_eq!(select_step_budget(&[10, 100], &[0.5, 0.6], &[1.0, 2.0], 0.1), (100, false));
        assert_eq!(select_step_budget(&[10, 100], &[1.0, 0.95], &[f64::INFINITY, 2.0], 0.1), (100, true));
    }

    fn perfect_dataset(m: &SplitModel, n: usize) -> Dataset {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64, 1.0 - i as f64 / n as f64]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| m.forward(x).unwrap()).collect();
        Dataset::new(Matrix::from_rows(&xs).unwrap(), Matrix::from_rows(&ys).unwrap()).unwrap()
    }

    #[test]
    fn perfect_model_calibrates_to_zero() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![2, 8, 8, 3]).unwrap(), 1).unwrap(), 2).unwrap();
        let ds = perfect_dataset(&m, 50);
        let idx: Vec<usize> = (0..50).collect();
        let cfg = SurrogateSearchConfig::default();
        let (rec, report) = fcp_calibrate(&m, &ds, &idx, 0.1, &cfg, &DEFAULT_STEP_CANDIDATES).unwrap();
        assert_eq!(rec.q, 0.0);
        assert_eq!(report.chosen_m, 10);
        assert_eq!((report.scoring_size, report.validation_size), (40, 10));
        let (again, _) = fcp_calibrate(&m, &ds, &idx, 0.1, &cfg, &DEFAULT_STEP_CANDIDATES).unwrap();
        assert_eq!(rec, again);

        let cfg = cfg.with_max_steps(report.chosen_m);
        let x = ds.x.row(3);
        assert!(fcp_detect(&m, &rec, x, &m.forward(x).unwrap(), &cfg).unwrap());
        let band = fcp_estimate(&m, &rec, x, &cfg).unwrap();
        assert_eq!(band, Band::Bounded(OutputBand::point(&m.forward(x).unwrap())));
    }

    #[test]
    fn calibration_needs_a_validation_part() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![2, 4, 4, 1]).unwrap(), 1).unwrap(), 1).unwrap();
        let ds = perfect_dataset(&m, 2);
        let cfg = SurrogateSearchConfig::default();
        assert!(matches!(fcp_calibrate(&m, &ds, &[0, 1], 0.1, &cfg, &[10]), Err(Error::Empty(_))));
        assert!(matches!(fcp_calibrate(&m, &ds, &[], 0.1, &cfg, &[10]), Err(Error::Empty(_))));
    }

    #[test]
    fn detection_requires_matching_digest() {
        let m = identity_head(2);
        let cfg = SurrogateSearchConfig::default();
        let rec = CalibrationRecord::from_scores(vec![0.1; 30], 0.1, ScoreKind::FeatureSurrogate, cfg.digest()).unwrap();
        assert!(fcp_detect(&m, &rec, &[0.0, 0.0], &[0.0, 0.0], &cfg).unwrap());
        let other = SurrogateSearchConfig { eta: 0.2, ..cfg };
        assert!(matches!(fcp_detect(&m, &rec, &[0.0, 0.0], &[0.0, 0.0], &other), Err(Error::DigestMismatch { .. })));
        let inf = CalibrationRecord::from_scores(vec![0.1], 0.1, ScoreKind::FeatureSurrogate, cfg.digest()).unwrap();
        assert!(fcp_detect(&m, &inf, &[0.0, 0.0], &[1e6, -1e6], &cfg).unwrap());
        assert!(fcp_estimate(&m, &inf, &[0.0, 0.0], &cfg).unwrap().is_unbounded());
    }

    #[test]
    fn linear_head_band_is_closed_form() {
        let a = [0.5, -2.0, 1.5];
        let m = with_head(3, vec![Dense::new(3, 1, a.to_vec(), vec![0.25]).unwrap()]);
        let cfg = SurrogateSearchConfig::default();
        let rec = CalibrationRecord::from_scores(vec![0.3; 30], 0.1, ScoreKind::FeatureSurrogate, cfg.digest()).unwrap();
        let x = [1.0, 0.5, 2.0];
        let band = fcp_estimate(&m, &rec, &x, &cfg).unwrap();
        let b = band.bounded().unwrap();
        let center = 0.5 * 1.0 - 2.0 * 0.5 + 1.5 * 2.0 + 0.25;
        let half = 0.3 * (0.5 + 2.0 + 1.5);
        assert!((b.lo[0] - (center - half)).abs() < 1e-12);
        assert!((b.hi[0] - (center + half)).abs() < 1e-12);
    }

    #[test]
    fn fcqr_indicator_evaluation() {
        // Lower head at 1 is below y = 2: covered.
        assert_eq!(fcqr_indicator(1.0 <= 2.0), 1);
        // Upper head at 3 is above y = 2: covered.
        assert_eq!(fcqr_indicator(3.0 >= 2.0), 1);
        assert_eq!(fcqr_indicator(2.5 <= 2.0), -1);
    }

    #[test]
    fn fcqr_combination_table() {
        let lo = (0.0, 1.0);
        let hi = (4.0, 5.0);
        assert_eq!(fcqr_combine(-1, -1, lo, hi), (0.0, 5.0));
        assert_eq!(fcqr_combine(-1, 1, lo, hi), (0.0, 4.0));
        assert_eq!(fcqr_combine(1, -1, lo, hi), (1.0, 5.0));
        assert_eq!(fcqr_combine(1, 1, lo, hi), (1.0, 4.0));
    }

    #[test]
    fn fcqr_zero_quantiles_give_head_predictions() {
        let m_lo = with_head(2, vec![Dense::new(2, 1, vec![1.0, 1.0], vec![-1.0]).unwrap()]);
        let m_hi = with_head(2, vec![Dense::new(2, 1, vec![1.0, 1.0], vec![1.0]).unwrap()]);
        let cfg = SurrogateSearchConfig::default();
        let lo = CalibrationRecord::from_scores(vec![0.0; 20], 0.1, ScoreKind::FeatureCqrSignedLo, fcqr_cfg_digest(&cfg, "lo")).unwrap();
        let hi = CalibrationRecord::from_scores(vec![0.0; 20], 0.1, ScoreKind::FeatureCqrSignedHi, fcqr_cfg_digest(&cfg, "hi")).unwrap();
        let band = fcqr_band(&lo, &hi, &m_lo, &m_hi, &[0.5, 1.0], &cfg).unwrap();
        assert_eq!(band, Band::Bounded(OutputBand { lo: vec![0.5], hi: vec![2.5] }));
    }

    #[test]
    fn classify_set_zero_radius_and_saturation() {
        let m = with_head(2, vec![Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap()]);
        let cfg = SurrogateSearchConfig {
            mode: SearchMode::Classification,
            ..Default::default()
        };
        let zero = CalibrationRecord::from_scores(vec![0.0; 30], 0.1, ScoreKind::FeatureSurrogate, cfg.digest()).unwrap();
        let set = fcp_classify_set(&m, &zero, &[1.0, 0.2], 1000, 0, &cfg).unwrap();
        assert_eq!(set, BTreeSet::from([0]));
        let big = CalibrationRecord::from_scores(vec![50.0; 30], 0.1, ScoreKind::FeatureSurrogate, cfg.digest()).unwrap();
        let set = fcp_classify_set(&m, &big, &[1.0, 0.2], 1000, 0, &cfg).unwrap();
        assert_eq!(set, BTreeSet::from([0, 1]));
    }

    #[test]
    fn classification_search_stops_at_label_flip() {
        let m = with_head(2, vec![Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap()]);
        let cfg = SurrogateSearchConfig {
            mode: SearchMode::Classification,
            ..Default::default()
        };
        let out = surrogate_score(&m, &[1.0, 0.2], &[0.0, 1.0], &cfg).unwrap();
        assert!(out.converged && out.steps_used > 0);
        let v = m.feature_forward(&[1.0, 0.2]).unwrap();
        assert!(out.distance > 0.0 && out.distance < 1.0, "{out:?} from {v:?}");
        let already = surrogate_score(&m, &[1.0, 0.2], &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(already.score, 0.0);
    }
}
