//! End-to-end runs: split, standardize, train, calibrate, evaluate and
//! diagnose, once per seed, with JSON and CSV output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{estimate_box, sample_inner_box, tightness_ratio};
use crate::conformal::{cqr_band, cqr_calibrate, vanilla_cp_band, vanilla_cp_calibrate, CalibrationRecord};
use crate::data::{gen_synthetic_1d_hetero, gen_synthetic_multidim, load_csv, split, standardize, Dataset, Matrix, SplitIndices};
use crate::error::{Error, Result};
use crate::feature::{
    argmax, fcp_calibrate, fcp_classify_set, fcp_detect, fcp_estimate, fcqr_band, fcqr_calibrate, FeatureBand,
    MSelectionReport, SearchMode, SurrogateSearchConfig, DEFAULT_STEP_CANDIDATES,
};
use crate::metrics::{cubic_diagnostics, CubicReport, EvalReport};
use crate::nn::{train, LossKind, Mlp, MlpSpec, SplitModel, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SyntheticMultidim { n: usize },
    #[serde(rename = "synthetic_1d_hetero")]
    Synthetic1dHetero { n: usize },
    Csv { path: PathBuf, targets: Vec<String> },
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::SyntheticMultidim { .. } => "synthetic_multidim".into(),
            DatasetSpec::Synthetic1dHetero { .. } => "synthetic_1d_hetero".into(),
            DatasetSpec::Csv { path, .. } => path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// Loads or generates the raw (unstandardized) data.
    pub fn load(&self, data_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::SyntheticMultidim { n } => gen_synthetic_multidim(data_seed, *n),
            DatasetSpec::Synthetic1dHetero { n } => gen_synthetic_1d_hetero(data_seed, *n),
            DatasetSpec::Csv { path, targets } => {
                let t: Vec<&str> = targets.iter().map(String::as_str).collect();
                load_csv(path, &t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VanillaCp,
    FeatureCp,
    Cqr,
    FeatureCqr,
    FeatureCpClassify,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::VanillaCp => "vanilla_cp",
            Method::FeatureCp => "feature_cp",
            Method::Cqr => "cqr",
            Method::FeatureCqr => "feature_cqr",
            Method::FeatureCpClassify => "feature_cp_classify",
        }
    }

    pub fn is_quantile(self) -> bool {
        matches!(self, Method::Cqr | Method::FeatureCqr)
    }
}

/// Network shape between the dataset's input and output widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    /// Number of layers in the feature extractor.
    pub split_index: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64, 64],
            split_index: 2,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(output_dim);
        MlpSpec::relu(widths)
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_ratios() -> [f64; 3] {
    [2.0, 2.0, 1.0]
}
fn default_candidates() -> Vec<usize> {
    DEFAULT_STEP_CANDIDATES.to_vec()
}
fn default_classify_samples() -> usize {
    1000
}
fn default_tightness_probes() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    pub method: Method,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    /// Seed of the synthetic generators; the run seeds drive splitting,
    /// initialization and shuffling.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SurrogateSearchConfig,
    #[serde(default = "default_candidates")]
    pub step_candidates: Vec<usize>,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    #[serde(default)]
    pub untrained_control: bool,
    #[serde(default = "default_classify_samples")]
    pub classify_samples: usize,
    /// Test points used for the inner/outer tightness ratio.
    #[serde(default = "default_tightness_probes")]
    pub tightness_probes: usize,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, method: Method) -> Self {
        Self {
            name: default_name(),
            dataset,
            method,
            alpha: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            data_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
            search: SurrogateSearchConfig::default(),
            step_candidates: default_candidates(),
            split_ratios: default_ratios(),
            untrained_control: false,
            classify_samples: default_classify_samples(),
            tightness_probes: default_tightness_probes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        let layers = self.model.hidden_widths.len() + 1;
        if self.model.split_index == 0 || self.model.split_index >= layers {
            return Err(Error::InvalidConfig(format!(
                "split_index {} outside [1, {}]",
                self.model.split_index,
                layers - 1
            )));
        }
        self.search.validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn search_cfg(&self) -> SurrogateSearchConfig {
        let mut s = self.search;
        if self.method == Method::FeatureCpClassify {
            s.mode = SearchMode::Classification;
        }
        s
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }

    fn of_all(values: &[Option<f64>]) -> Option<Self> {
        values.iter().copied().collect::<Option<Vec<f64>>>().and_then(|v| Self::of(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub alpha: f64,
    pub split_index: usize,
    /// Calibrated quantile(s): one for single-score methods, lower then upper
    /// for the quantile methods.
    #[serde(with = "crate::conformal::extended_real_vec")]
    pub quantiles: Vec<f64>,
    pub eval: EvalReport,
    pub cubic: Option<CubicReport>,
    pub m_selection: Option<MSelectionReport>,
    pub tightness_ratio: Option<f64>,
    /// Training loss before the first epoch and after the last one.
    pub train_loss: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub coverage: MeanStd,
    /// Mean coverage minus `1 - alpha`.
    pub coverage_gap: f64,
    pub band_coverage: MeanStd,
    pub avg_length: MeanStd,
    pub weighted_length: Option<MeanStd>,
    pub group_coverage: Option<MeanStd>,
    pub feature_spread: Option<MeanStd>,
    pub output_spread: Option<MeanStd>,
    pub tightness_ratio: Option<MeanStd>,
}

impl Aggregate {
    pub fn from_seeds(alpha: f64, seeds: &[SeedResult]) -> Result<Self> {
        let pick = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
        let pick_opt = |f: &dyn Fn(&SeedResult) -> Option<f64>| MeanStd::of_all(&seeds.iter().map(f).collect::<Vec<_>>());
        let coverage = pick(&|s| s.eval.coverage).ok_or(Error::Empty("seed results"))?;
        Ok(Self {
            coverage,
            coverage_gap: coverage.mean - (1.0 - alpha),
            band_coverage: pick(&|s| s.eval.band_coverage).expect("nonempty"),
            avg_length: pick(&|s| s.eval.avg_length).expect("nonempty"),
            weighted_length: pick_opt(&|s| s.eval.weighted_length),
            group_coverage: pick_opt(&|s| s.eval.group_coverage),
            feature_spread: pick_opt(&|s| s.cubic.map(|c| c.feature_spread)),
            output_spread: pick_opt(&|s| s.cubic.map(|c| c.output_spread)),
            tightness_ratio: pick_opt(&|s| s.tightness_ratio),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub method: Method,
    pub dataset: String,
    pub alpha: f64,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

impl RunResult {
    pub fn new(config: &ExperimentConfig, name: String, alpha: f64, seeds: Vec<SeedResult>) -> Result<Self> {
        let aggregate = Aggregate::from_seeds(alpha, &seeds)?;
        Ok(Self {
            name,
            method: config.method,
            dataset: config.dataset.label(),
            alpha,
            config: config.clone(),
            seeds,
            aggregate,
        })
    }
}

/// Standardized data and folds for one seed.
pub struct SeedData {
    pub seed: u64,
    pub ds: Dataset,
    pub folds: SplitIndices,
}

/// Splits and standardizes on the training fold. For classification the
/// targets become one-hot labels of the raw response's argmax.
pub fn prepare_seed(config: &ExperimentConfig, raw: &Dataset, seed: u64) -> Result<SeedData> {
    let folds = split(raw.len(), config.split_ratios, seed).map_err(|e| e.at_stage("split", seed))?;
    let (mut ds, _) = standardize(raw, &folds.train).map_err(|e| e.at_stage("standardize", seed))?;
    if config.method == Method::FeatureCpClassify {
        ds.y = one_hot_argmax(&raw.y).map_err(|e| e.at_stage("labels", seed))?;
        ds.target_names = None;
    }
    Ok(SeedData { seed, ds, folds })
}

fn one_hot_argmax(y: &Matrix) -> Result<Matrix> {
    if y.cols() < 2 {
        return Err(Error::InvalidConfig("classification needs at least two target columns".into()));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let k = argmax(y.row(i));
        out.row_mut(i)[k] = 1.0;
    }
    Ok(out)
}

/// The trained (or, under the untrained control, freshly initialized)
/// network for `loss`.
pub fn fit_model(config: &ExperimentConfig, data: &SeedData, loss: LossKind) -> Result<(Mlp, Option<(f64, f64)>)> {
    let seed = data.seed;
    let spec = config.model.spec(data.ds.input_dim(), data.ds.output_dim()).map_err(|e| e.at_stage("train", seed))?;
    let cfg = TrainConfig { seed, ..config.train.clone() };
    if config.untrained_control {
        return Ok((Mlp::init(spec, seed).map_err(|e| e.at_stage("train", seed))?, None));
    }
    let tr = data.ds.subset(&data.folds.train);
    let out = train(&spec, &tr.x, &tr.y, loss, &cfg).map_err(|e| e.at_stage("train", seed))?;
    let first = out.losses.first().copied().unwrap_or(f64::NAN);
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    Ok((out.mlp, Some((first, last))))
}

fn main_loss(method: Method) -> LossKind {
    match method {
        Method::FeatureCpClassify => LossKind::SoftmaxCrossEntropy,
        _ => LossKind::Mse,
    }
}

/// Models a method needs at level `alpha`: one network, or a lower and an
/// upper quantile network.
pub struct FittedModels {
    pub nets: Vec<Mlp>,
    pub train_loss: Option<(f64, f64)>,
}

pub fn fit_models(config: &ExperimentConfig, data: &SeedData, alpha: f64) -> Result<FittedModels> {
    if config.method.is_quantile() {
        let lo = LossKind::pinball(alpha / 2.0).map_err(|e| e.at_stage("train", data.seed))?;
        let hi = LossKind::pinball(1.0 - alpha / 2.0).map_err(|e| e.at_stage("train", data.seed))?;
        let (m_lo, l_lo) = fit_model(config, data, lo)?;
        let (m_hi, _) = fit_model(config, data, hi)?;
        Ok(FittedModels {
            nets: vec![m_lo, m_hi],
            train_loss: l_lo,
        })
    } else {
        let (m, l) = fit_model(config, data, main_loss(config.method))?;
        Ok(FittedModels {
            nets: vec![m],
            train_loss: l,
        })
    }
}

/// Calibration output for one seed: one record per calibrated score (two for
/// Feature CQR) plus the step-budget selection when there was one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub method: Method,
    pub alpha: f64,
    pub split_index: usize,
    pub records: Vec<CalibrationRecord>,
    pub m_selection: Option<MSelectionReport>,
}

impl Calibration {
    /// Search configuration the records were calibrated with.
    fn search(&self, config: &ExperimentConfig) -> SurrogateSearchConfig {
        let s = config.search_cfg();
        match &self.m_selection {
            Some(r) => s.with_max_steps(r.chosen_m),
            None => s,
        }
    }
}

fn split_models(models: &FittedModels, split_index: usize, seed: u64) -> Result<Vec<SplitModel>> {
    models
        .nets
        .iter()
        .map(|m| SplitModel::new(m.clone(), split_index))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("model", seed))
}

/// Calibrates `models` on the calibration fold at level `alpha`.
pub fn calibrate_seed(
    config: &ExperimentConfig,
    data: &SeedData,
    models: &FittedModels,
    alpha: f64,
    split_index: usize,
) -> Result<Calibration> {
    let seed = data.seed;
    let sm = split_models(models, split_index, seed)?;
    let (ds, cal) = (&data.ds, &data.folds.cal);
    let search = config.search_cfg();
    let (records, m_selection) = match config.method {
        Method::VanillaCp => (vec![vanilla_cp_calibrate(&sm[0], ds, cal, alpha)], None),
        Method::Cqr => (vec![cqr_calibrate(&sm[0], &sm[1], ds, cal, alpha)], None),
        Method::FeatureCp | Method::FeatureCpClassify => {
            let (rec, report) = fcp_calibrate(&sm[0], ds, cal, alpha, &search, &config.step_candidates)
                .map_err(|e| e.at_stage("calibrate", seed))?;
            (vec![Ok(rec)], Some(report))
        }
        Method::FeatureCqr => match fcqr_calibrate(&sm[0], &sm[1], ds, cal, alpha, &search) {
            Ok((lo, hi)) => (vec![Ok(lo), Ok(hi)], None),
            Err(e) => (vec![Err(e)], None),
        },
    };
    let records = records.into_iter().collect::<Result<Vec<_>>>().map_err(|e| e.at_stage("calibrate", seed))?;
    Ok(Calibration {
        method: config.method,
        alpha,
        split_index,
        records,
        m_selection,
    })
}

/// Evaluates calibrated models on the test fold.
pub fn evaluate_calibrated(
    config: &ExperimentConfig,
    data: &SeedData,
    models: &FittedModels,
    calib: &Calibration,
) -> Result<SeedResult> {
    let seed = data.seed;
    let st = |stage: &'static str| move |e: Error| e.at_stage(stage, seed);
    let expected = if config.method == Method::FeatureCqr { 2 } else { 1 };
    if calib.method != config.method || calib.records.len() != expected {
        return Err(Error::InvalidConfig(format!(
            "calibration for {} with {} records does not match method {}",
            calib.method.label(),
            calib.records.len(),
            config.method.label()
        ))
        .at_stage("evaluate", seed));
    }
    let sm = split_models(models, calib.split_index, seed)?;
    let ds = &data.ds;
    let test = &data.folds.test;
    let y_test = ds.y.select_rows(test);
    let cfg = calib.search(config);
    let rec = &calib.records[0];
    let mut cubic = None;
    let mut tightness_ratio = None;

    let eval = match config.method {
        Method::VanillaCp => {
            let bands = test
                .iter()
                .map(|&i| vanilla_cp_band(rec, &sm[0], ds.x.row(i)))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let hits: Vec<bool> = bands.iter().enumerate().map(|(k, b)| b.contains(y_test.row(k))).collect();
            EvalReport::new(&hits, &bands, &y_test).map_err(st("evaluate"))?
        }
        Method::FeatureCp => {
            let m = &sm[0];
            let bands = test
                .iter()
                .map(|&i| fcp_estimate(m, rec, ds.x.row(i), &cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let hits = test
                .iter()
                .map(|&i| fcp_detect(m, rec, ds.x.row(i), ds.y.row(i), &cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let eval = EvalReport::new(&hits, &bands, &y_test).map_err(st("evaluate"))?;
            let (c, t) = feature_diagnostics(config, data, m, calib)?;
            cubic = Some(c);
            tightness_ratio = t;
            eval
        }
        Method::Cqr => {
            let bands = test
                .iter()
                .map(|&i| cqr_band(rec, &sm[0], &sm[1], ds.x.row(i)))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let hits: Vec<bool> = bands.iter().enumerate().map(|(k, b)| b.contains(y_test.row(k))).collect();
            EvalReport::new(&hits, &bands, &y_test).map_err(st("evaluate"))?
        }
        Method::FeatureCqr => {
            let rec_hi = &calib.records[1];
            let bands = test
                .iter()
                .map(|&i| fcqr_band(rec, rec_hi, &sm[0], &sm[1], ds.x.row(i), &cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let hits: Vec<bool> = bands.iter().enumerate().map(|(k, b)| b.contains(y_test.row(k))).collect();
            EvalReport::new(&hits, &bands, &y_test).map_err(st("evaluate"))?
        }
        Method::FeatureCpClassify => {
            let m = &sm[0];
            let sets = test
                .iter()
                .map(|&i| fcp_classify_set(m, rec, ds.x.row(i), config.classify_samples, seed ^ i as u64, &cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(st("evaluate"))?;
            let hits: Vec<bool> = sets.iter().enumerate().map(|(k, s)| s.contains(&argmax(y_test.row(k)))).collect();
            let sizes: Vec<f64> = sets.iter().map(|s| s.len() as f64).collect();
            let cov = crate::metrics::coverage(&hits).map_err(st("evaluate"))?;
            EvalReport {
                coverage: cov,
                band_coverage: cov,
                avg_length: sizes.iter().sum::<f64>() / sizes.len() as f64,
                weighted_length: None,
                group_coverage: None,
                per_sample_lengths: sizes.into_iter().map(Some).collect(),
                unbounded_count: 0,
            }
        }
    };
    Ok(SeedResult {
        seed,
        alpha: calib.alpha,
        split_index: calib.split_index,
        quantiles: calib.records.iter().map(|r| r.q).collect(),
        eval,
        cubic,
        m_selection: calib.m_selection.clone(),
        tightness_ratio,
        train_loss: models.train_loss,
    })
}

/// Spread diagnostics and the inner/outer tightness ratio of a Feature CP
/// calibration.
pub fn feature_diagnostics(
    config: &ExperimentConfig,
    data: &SeedData,
    model: &SplitModel,
    calib: &Calibration,
) -> Result<(CubicReport, Option<f64>)> {
    let seed = data.seed;
    let (Some(report), Some(rec)) = (&calib.m_selection, calib.records.first()) else {
        return Err(Error::InvalidConfig("diagnostics need a Feature CP calibration".into()).at_stage("diagnostics", seed));
    };
    let cfg = calib.search(config);
    let scoring = &data.folds.cal[..report.scoring_size];
    let cubic = cubic_diagnostics(rec, model, &data.ds, scoring, calib.alpha, &cfg).map_err(|e| e.at_stage("diagnostics", seed))?;
    let t = tightness(model, rec, &data.ds, &data.folds.test, &cfg, config.tightness_probes)
        .map_err(|e| e.at_stage("diagnostics", seed))?;
    Ok((cubic, t))
}

/// Calibrates and evaluates one seed at level `alpha` with the given split.
pub fn evaluate_seed(
    config: &ExperimentConfig,
    data: &SeedData,
    models: &FittedModels,
    alpha: f64,
    split_index: usize,
) -> Result<SeedResult> {
    let calib = calibrate_seed(config, data, models, alpha, split_index)?;
    evaluate_calibrated(config, data, models, &calib)
}

/// Mean inner/outer width ratio over the first `probes` test points.
fn tightness(
    m: &SplitModel,
    rec: &CalibrationRecord,
    ds: &Dataset,
    test: &[usize],
    cfg: &SurrogateSearchConfig,
    probes: usize,
) -> Result<Option<f64>> {
    if !rec.q.is_finite() || rec.q == 0.0 || probes == 0 {
        return Ok(None);
    }
    let mut ratios = Vec::new();
    for (k, &i) in test.iter().take(probes).enumerate() {
        let band = FeatureBand::new(m.feature_forward(ds.x.row(i))?, rec.q, cfg.feature_norm)?;
        let outer = estimate_box(m, &band, cfg.estimator)?;
        let inner = sample_inner_box(m, &band, 256, k as u64)?;
        ratios.push(tightness_ratio(&inner, &outer));
    }
    Ok(MeanStd::of(&ratios).map(|s| s.mean))
}

fn load_raw(config: &ExperimentConfig) -> Result<Dataset> {
    config.dataset.load(config.data_seed).map_err(|e| e.at_stage("data", config.data_seed))
}

/// Runs every seed of `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let raw = load_raw(config)?;
    let seeds = config
        .seeds
        .iter()
        .map(|&seed| {
            let data = prepare_seed(config, &raw, seed)?;
            let models = fit_models(config, &data, config.alpha)?;
            evaluate_seed(config, &data, &models, config.alpha, config.model.split_index)
        })
        .collect::<Result<Vec<_>>>()?;
    RunResult::new(config, config.name.clone(), config.alpha, seeds)
}

/// One result per level. Point-prediction methods train once per seed and
/// reuse the model; the quantile methods retrain because their losses depend
/// on the level.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<RunResult>> {
    config.validate()?;
    if let Some(&a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidAlpha(a));
    }
    let raw = load_raw(config)?;
    let mut per_alpha: Vec<Vec<SeedResult>> = vec![Vec::new(); alphas.len()];
    for &seed in &config.seeds {
        let data = prepare_seed(config, &raw, seed)?;
        let shared = if config.method.is_quantile() {
            None
        } else {
            Some(fit_models(config, &data, config.alpha)?)
        };
        for (k, &alpha) in alphas.iter().enumerate() {
            let owned;
            let models = match &shared {
                Some(m) => m,
                None => {
                    owned = fit_models(config, &data, alpha)?;
                    &owned
                }
            };
            per_alpha[k].push(evaluate_seed(config, &data, models, alpha, config.model.split_index)?);
        }
    }
    alphas
        .iter()
        .zip(per_alpha)
        .map(|(&alpha, seeds)| RunResult::new(config, format!("{}-alpha-{alpha}", config.name), alpha, seeds))
        .collect()
}

/// One result per splitting point, all from the same trained networks.
pub fn sweep_split_index(config: &ExperimentConfig, indices: &[usize]) -> Result<Vec<RunResult>> {
    config.validate()?;
    let layers = config.model.hidden_widths.len() + 1;
    if let Some(&bad) = indices.iter().find(|&&s| s == 0 || s >= layers) {
        return Err(Error::InvalidConfig(format!("split_index {bad} outside [1, {}]", layers - 1)));
    }
    let raw = load_raw(config)?;
    let mut per_split: Vec<Vec<SeedResult>> = vec![Vec::new(); indices.len()];
    for &seed in &config.seeds {
        let data = prepare_seed(config, &raw, seed)?;
        let models = fit_models(config, &data, config.alpha)?;
        for (k, &s) in indices.iter().enumerate() {
            per_split[k].push(evaluate_seed(config, &data, &models, config.alpha, s)?);
        }
    }
    indices
        .iter()
        .zip(per_split)
        .map(|(&s, seeds)| {
            let mut cfg = config.clone();
            cfg.model.split_index = s;
            RunResult::new(&cfg, format!("{}-split-{s}", config.name), config.alpha, seeds)
        })
        .collect()
}

/// One `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub alpha: f64,
    pub coverage: f64,
    pub avg_length: f64,
    pub weighted_length: Option<f64>,
    pub group_coverage: Option<f64>,
    pub feature_spread: Option<f64>,
    pub output_spread: Option<f64>,
    #[serde(rename = "chosen_M")]
    pub chosen_m: Option<usize>,
    pub tightness_ratio: Option<f64>,
}

impl RunResult {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.seeds
            .iter()
            .map(|s| SummaryRow {
                method: self.method.label().into(),
                dataset: self.dataset.clone(),
                seed: s.seed,
                alpha: s.alpha,
                coverage: s.eval.coverage,
                avg_length: s.eval.avg_length,
                weighted_length: s.eval.weighted_length,
                group_coverage: s.eval.group_coverage,
                feature_spread: s.cubic.map(|c| c.feature_spread),
                output_spread: s.cubic.map(|c| c.output_spread),
                chosen_m: s.m_selection.as_ref().map(|r| r.chosen_m),
                tightness_ratio: s.tightness_ratio,
            })
            .collect()
    }

    /// Writes `<out>/<name>/<seed>/result.json`, `<out>/<name>/result.json`
    /// (the whole run) and `<out>/<name>/summary.csv`. Returns the run
    /// directory.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = out.as_ref().join(&self.name);
        for s in &self.seeds {
            let seed_dir = dir.join(s.seed.to_string());
            fs::create_dir_all(&seed_dir)?;
            fs::write(seed_dir.join("result.json"), serde_json::to_string_pretty(s)?)?;
        }
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(self)?)?;
        let path = dir.join("summary.csv");
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        for row in self.summary_rows() {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DatasetSpec::Synthetic1dHetero { n: 300 }, method);
        cfg.seeds = vec![7];
        cfg.model.hidden_widths = vec![8, 8];
        cfg.model.split_index = 1;
        cfg.train.epochs = 3;
        cfg.step_candidates = vec![10, 30];
        cfg.search.max_steps = 30;
        cfg.tightness_probes = 3;
        cfg
    }

    #[test]
    fn mean_std_matches_recomputation() {
        let m = MeanStd::of(&[1.0, 2.0, 4.0]).unwrap();
        assert!((m.mean - 7.0 / 3.0).abs() < 1e-12);
        let var = ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0;
        assert!((m.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[3.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn every_method_runs_end_to_end() {
        for method in [Method::VanillaCp, Method::FeatureCp, Method::Cqr, Method::FeatureCqr] {
            let r = run_experiment(&tiny(method)).unwrap();
            assert_eq!(r.seeds.len(), 1);
            let s = &r.seeds[0];
            assert!((0.0..=1.0).contains(&s.eval.coverage), "{method:?}");
            assert_eq!(r.aggregate.coverage.mean, s.eval.coverage);
            assert_eq!(s.eval.per_sample_lengths.len(), 60);
        }
    }

    #[test]
    fn classification_runs_on_multidim_labels() {
        let mut cfg = tiny(Method::FeatureCpClassify);
        cfg.dataset = DatasetSpec::SyntheticMultidim { n: 200 };
        cfg.classify_samples = 50;
        let r = run_experiment(&cfg).unwrap();
        let s = &r.seeds[0];
        assert!(s.eval.avg_length >= 1.0 && s.eval.avg_length <= 10.0);
        assert!(matches!(
            run_experiment(&tiny(Method::FeatureCpClassify)),
            Err(Error::Stage { stage: "labels", seed: 7, .. })
        ));
    }

    #[test]
    fn errors_carry_stage_and_seed() {
        let mut cfg = tiny(Method::VanillaCp);
        cfg.dataset = DatasetSpec::Synthetic1dHetero { n: 2 };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "split", seed: 7, .. }), "{err}");
        assert!(err.to_string().starts_with("[split] seed 7"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(Method::VanillaCp);
        cfg.alpha = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidAlpha(_))));
        let mut cfg = tiny(Method::VanillaCp);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(Method::VanillaCp);
        cfg.model.split_index = 3;
        assert!(cfg.validate().is_err());
        assert!(sweep_split_index(&tiny(Method::VanillaCp), &[0]).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"dataset": {"kind": "synthetic_multidim", "n": 100}, "method": "feature_cp", "alpha": 0.1, "seeds": [1]}"#,
        )
        .unwrap();
        assert_eq!(cfg.split_ratios, [2.0, 2.0, 1.0]);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.step_candidates, DEFAULT_STEP_CANDIDATES.to_vec());
        let back = ExperimentConfig::from_json_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn alpha_sweep_of_one_matches_single_run() {
        let cfg = tiny(Method::VanillaCp);
        let single = run_experiment(&cfg).unwrap();
        let swept = sweep_alpha(&cfg, &[cfg.alpha]).unwrap();
        assert_eq!(swept[0].seeds, single.seeds);
    }

    #[test]
    fn written_outputs_are_reproducible() {
        let cfg = tiny(Method::FeatureCp);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&cfg).unwrap().write(a.path()).unwrap();
        run_experiment(&cfg).unwrap().write(b.path()).unwrap();
        for rel in ["experiment/7/result.json", "experiment/summary.csv", "experiment/result.json"] {
            let x = fs::read(a.path().join(rel)).unwrap();
            let y = fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "{rel}");
        }
        let csv = fs::read_to_string(a.path().join("experiment/summary.csv")).unwrap();
        assert!(csv.starts_with(
            "method,dataset,seed,alpha,coverage,avg_length,weighted_length,group_coverage,feature_spread,output_spread,chosen_M,tightness_ratio\n"
        ));
    }
}
