//! Dense ReLU networks split into a feature extractor and a prediction head.
//!
//! A network with widths `[d, h1, ..., k]` has `widths.len() - 1` affine layers.
//! Every layer but the last is followed by a ReLU. A [`SplitModel`] cuts the
//! layer stack at `split_index`: layers `0..split_index` form the feature map
//! and the remaining layers form the head.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. All arithmetic
//! is `f64`.

use std::ops::Range;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{check_dim, Error, Result};

const MODEL_FORMAT: &str = "feature-cp-model";
const MODEL_VERSION: u32 = 1;

/// RNG stream used for weight initialization.
const INIT_STREAM: u64 = 0;
/// RNG stream used for mini-batch shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
}

/// Architecture of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    /// ReLU hidden layers, identity output.
    pub fn relu(layer_widths: impl Into<Vec<usize>>) -> Result<Self> {
        let spec = Self {
            layer_widths: layer_widths.into(),
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least two widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }
}

/// One affine layer, `z = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, shape `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim("dense weights", in_dim * out_dim, weights.len())?;
        check_dim("dense bias", out_dim, bias.len())?;
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("non-finite layer parameter".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// Writes `W x + b` into `out`.
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x) + self.bias[i];
        }
    }

    /// Writes `W^T g` into `out`.
    #[inline]
    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * gi;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-layer weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// A full network: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        check_dim("layer count", spec.num_layers(), params.layers.len())?;
        for (i, layer) in params.layers.iter().enumerate() {
            check_dim("layer input width", spec.layer_widths[i], layer.in_dim)?;
            check_dim("layer output width", spec.layer_widths[i + 1], layer.out_dim)?;
            check_dim("dense weights", layer.in_dim * layer.out_dim, layer.weights.len())?;
            check_dim("dense bias", layer.out_dim, layer.bias.len())?;
        }
        if params
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .any(|w| !w.is_finite())
        {
            return Err(Error::InvalidConfig("non-finite network parameter".into()));
        }
        Ok(Self { spec, params })
    }

    /// Uniform He initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Dense {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights: (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: MlpParams { layers },
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn layers(&self) -> &[Dense] {
        &self.params.layers
    }

    pub fn num_layers(&self) -> usize {
        self.params.layers.len()
    }

    /// Whether layer `i` is followed by a ReLU.
    #[inline]
    pub fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.num_layers()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.spec.input_dim(), x.len())?;
        Ok(self.run_layers(x, 0..self.num_layers()))
    }

    /// Runs `layers` on `x` without checking its width.
    pub(crate) fn run_layers(&self, x: &[f64], layers: Range<usize>) -> Vec<f64> {
        let mut cur = x.to_vec();
        for i in layers {
            let layer = &self.params.layers[i];
            let mut next = vec![0.0; layer.out_dim];
            layer.apply(&cur, &mut next);
            if self.has_relu(i) {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            cur = next;
        }
        cur
    }
}

/// Loss used for training or inside the surrogate-feature search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Sum of squared errors over output coordinates.
    Mse,
    /// Quantile (pinball) loss at level `tau`.
    Pinball { tau: f64 },
    /// Softmax cross-entropy against a one-hot (or probability) target.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn pinball(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self::Pinball { tau })
        } else {
            Err(Error::InvalidConfig(format!("pinball level {tau} must lie in (0, 1)")))
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Pinball { tau } => Self::pinball(tau).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Loss value and its gradient with respect to the network output.
    pub fn value_and_grad(&self, out: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        match *self {
            Self::Mse => {
                let mut loss = 0.0;
                for ((g, &o), &t) in grad.iter_mut().zip(out).zip(target) {
                    let r = o - t;
                    loss += r * r;
                    *g = 2.0 * r;
                }
                loss
            }
            Self::Pinball { tau } => {
                let mut loss = 0.0;
                for ((g, &o), &t) in grad.iter_mut().zip(out).zip(target) {
                    let u = t - o;
                    if u > 0.0 {
                        loss += tau * u;
                        *g = -tau;
                    } else {
                        loss += (tau - 1.0) * u;
                        *g = 1.0 - tau;
                    }
                }
                loss
            }
            Self::SoftmaxCrossEntropy => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = out.iter().map(|o| (o - max).exp()).sum();
                let log_z = z.ln() + max;
                let mass: f64 = target.iter().sum();
                let mut loss = 0.0;
                for ((g, &o), &t) in grad.iter_mut().zip(out).zip(target) {
                    let p = (o - log_z).exp();
                    loss -= t * (o - log_z);
                    *g = p * mass - t;
                }
                loss
            }
        }
    }
}

/// A network cut into feature map `f` (layers `< split_index`) and head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    mlp: Mlp,
    split_index: usize,
}

impl SplitModel {
    pub fn new(mlp: Mlp, split_index: usize) -> Result<Self> {
        let layers = mlp.num_layers();
        if split_index == 0 || split_index >= layers {
            return Err(Error::InvalidConfig(format!(
                "split index {split_index} must lie in [1, {}] for a {layers}-layer network",
                layers.saturating_sub(1)
            )));
        }
        Ok(Self { mlp, split_index })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn into_mlp(self) -> Mlp {
        self.mlp
    }

    pub fn spec(&self) -> &MlpSpec {
        self.mlp.spec()
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.spec().input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.spec().layer_widths[self.split_index]
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.spec().output_dim()
    }

    /// Layers of the prediction head, in order.
    pub fn head_layers(&self) -> &[Dense] {
        &self.mlp.layers()[self.split_index..]
    }

    /// Whether head layer `j` (counted from the start of the head) has a ReLU.
    #[inline]
    pub fn head_has_relu(&self, j: usize) -> bool {
        self.mlp.has_relu(self.split_index + j)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }

    pub fn feature_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        Ok(self.mlp.run_layers(x, 0..self.split_index))
    }

    pub fn head_forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("feature vector", self.feature_dim(), v.len())?;
        Ok(self.mlp.run_layers(v, self.split_index..self.mlp.num_layers()))
    }

    /// Gradient of `loss(g(v), y)` with respect to the feature vector `v`.
    ///
    /// For [`LossKind::Mse`] the loss is `||g(v) - y||^2`.
    pub fn head_input_gradient(&self, v: &[f64], y: &[f64], loss: LossKind) -> Result<Vec<f64>> {
        check_dim("feature vector", self.feature_dim(), v.len())?;
        check_dim("target", self.output_dim(), y.len())?;
        if matches!(loss, LossKind::Pinball { .. }) {
            return Err(Error::UnsupportedLoss("pinball (head input gradient)"));
        }
        let mut ws = HeadWorkspace::new(self);
        let mut grad = vec![0.0; v.len()];
        ws.value_and_grad(self, v, y, loss, &mut grad);
        Ok(grad)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ModelFile::from(self))?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let raw: ModelFile = serde_json::from_reader(file)?;
        raw.try_into()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: ModelFile = serde_json::from_str(s)?;
        raw.try_into()
    }
}

/// Reusable buffers for repeated head forward/backward passes.
#[derive(Debug, Clone)]
pub(crate) struct HeadWorkspace {
    /// `acts[0]` is the head input; `acts[j + 1]` is the output of head layer `j`.
    acts: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl HeadWorkspace {
    pub(crate) fn new(model: &SplitModel) -> Self {
        let widths = &model.spec().layer_widths[model.split_index()..];
        Self {
            acts: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    pub(crate) fn forward<'a>(&'a mut self, model: &SplitModel, v: &[f64]) -> &'a [f64] {
        self.acts[0].copy_from_slice(v);
        for (j, layer) in model.head_layers().iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(j + 1);
            let out = &mut after[0];
            layer.apply(&before[j], out);
            if model.head_has_relu(j) {
                out.iter_mut().for_each(|z| *z = z.max(0.0));
            }
        }
        self.acts.last().expect("head has layers")
    }

    /// Head output from the latest pass.
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("head has layers")
    }

    /// Forward then reverse-mode pass; writes the input gradient into `grad`.
    pub(crate) fn value_and_grad(
        &mut self,
        model: &SplitModel,
        v: &[f64],
        y: &[f64],
        loss: LossKind,
        grad: &mut [f64],
    ) -> f64 {
        self.forward(model, v);
        let n = model.head_layers().len();
        let value = loss.value_and_grad(&self.acts[n], y, &mut self.delta[n]);
        self.backward(model, grad);
        value
    }

    /// Gradient of output coordinate `k` with respect to the head input.
    pub(crate) fn output_grad(&mut self, model: &SplitModel, v: &[f64], k: usize, grad: &mut [f64]) -> f64 {
        self.forward(model, v);
        let n = model.head_layers().len();
        self.delta[n].iter_mut().enumerate().for_each(|(j, d)| *d = if j == k { 1.0 } else { 0.0 });
        let value = self.acts[n][k];
        self.backward(model, grad);
        value
    }

    /// Pulls `delta[n]` back to the head input through the cached activations.
    fn backward(&mut self, model: &SplitModel, grad: &mut [f64]) {
        let n = model.head_layers().len();
        for j in (0..n).rev() {
            // delta[j + 1] is dL/d(output of layer j), post-activation.
            if model.head_has_relu(j) {
                let (acts, delta) = (&self.acts[j + 1], &mut self.delta[j + 1]);
                for (d, &a) in delta.iter_mut().zip(acts) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (lo, hi) = self.delta.split_at_mut(j + 1);
            model.head_layers()[j].apply_transpose(&hi[0], &mut lo[j]);
        }
        grad.copy_from_slice(&self.delta[0]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Result of [`train`]: the fitted network and the mean training loss before
/// the first epoch (`losses[0]`) and after every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mlp: Mlp,
    pub losses: Vec<f64>,
}

/// Mini-batch SGD on mean per-sample loss.
///
/// Initialization and shuffling use separate streams of a generator seeded by
/// `cfg.seed`, so the result is a pure function of the inputs.
pub fn train(spec: &MlpSpec, x: &Matrix, y: &Matrix, loss: LossKind, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mlp = Mlp::init(spec.clone(), cfg.seed)?;
    train_from(mlp, x, y, loss, cfg)
}

/// Like [`train`] but starting from existing parameters.
pub fn train_from(mut mlp: Mlp, x: &Matrix, y: &Matrix, loss: LossKind, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    check_dim("training rows", x.rows(), y.rows())?;
    check_dim("training input width", mlp.spec().input_dim(), x.cols())?;
    check_dim("training output width", mlp.spec().output_dim(), y.cols())?;
    if x.rows() == 0 {
        return Err(Error::Empty("training set"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut tape = Tape::new(&mlp);
    let mut grads = mlp.params.clone();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(mean_loss(&mlp, x, y, loss, 0)?);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            zero_params(&mut grads);
            let mut batch_loss = 0.0;
            for &row in batch {
                batch_loss += tape.accumulate(&mlp, x.row(row), y.row(row), loss, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch_start: batch[0],
                });
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
            for (layer, g) in mlp.params.layers.iter_mut().zip(&grads.layers) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w = *w * decay - scale * gw;
                }
                for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                    *b -= scale * gb;
                }
            }
        }
        losses.push(mean_loss(&mlp, x, y, loss, epoch)?);
    }
    Ok(TrainOutcome { mlp, losses })
}

fn zero_params(p: &mut MlpParams) {
    for layer in &mut p.layers {
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Mean per-sample loss of `mlp` on `(x, y)`.
pub fn mean_loss(mlp: &Mlp, x: &Matrix, y: &Matrix, loss: LossKind, epoch: usize) -> Result<f64> {
    let mut grad = vec![0.0; mlp.spec().output_dim()];
    let total: f64 = (0..x.rows())
        .map(|i| {
            let out = mlp.run_layers(x.row(i), 0..mlp.num_layers());
            loss.value_and_grad(&out, y.row(i), &mut grad)
        })
        .sum();
    let mean = total / x.rows() as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFiniteLoss { epoch, batch_start: 0 })
    }
}

/// Activation record for parameter backprop through the whole network.
struct Tape {
    acts: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Tape {
    fn new(mlp: &Mlp) -> Self {
        let widths = &mlp.spec().layer_widths;
        Self {
            acts: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Adds this sample's parameter gradient into `grads`; returns its loss.
    fn accumulate(&mut self, mlp: &Mlp, x: &[f64], y: &[f64], loss: LossKind, grads: &mut MlpParams) -> f64 {
        let n = mlp.num_layers();
        self.acts[0].copy_from_slice(x);
        for (i, layer) in mlp.layers().iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(i + 1);
            layer.apply(&before[i], &mut after[0]);
            if mlp.has_relu(i) {
                after[0].iter_mut().for_each(|z| *z = z.max(0.0));
            }
        }
        let value = loss.value_and_grad(&self.acts[n], y, &mut self.delta[n]);
        for i in (0..n).rev() {
            if mlp.has_relu(i) {
                for (d, &a) in self.delta[i + 1].iter_mut().zip(&self.acts[i + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let layer = &mlp.layers()[i];
            let g = &mut grads.layers[i];
            let input = &self.acts[i];
            for (r, &d) in self.delta[i + 1].iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let row = &mut g.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if i > 0 {
                let (lo, hi) = self.delta.split_at_mut(i + 1);
                layer.apply_transpose(&hi[0], &mut lo[i]);
            }
        }
        value
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    spec: MlpSpec,
    split_index: usize,
    layers: Vec<Dense>,
}

impl From<&SplitModel> for ModelFile {
    fn from(m: &SplitModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_owned(),
            version: MODEL_VERSION,
            spec: m.spec().clone(),
            split_index: m.split_index(),
            layers: m.mlp().layers().to_vec(),
        }
    }
}

impl TryFrom<ModelFile> for SplitModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::ModelFormat {
                format: f.format,
                version: f.version,
            });
        }
        let mlp = Mlp::new(f.spec, MlpParams { layers: f.layers })?;
        SplitModel::new(mlp, f.split_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(in_dim: usize, out_dim: usize, w: &[f64], b: &[f64]) -> Dense {
        Dense::new(in_dim, out_dim, w.to_vec(), b.to_vec()).unwrap()
    }

    fn mlp(widths: &[usize], layers: Vec<Dense>) -> Mlp {
        Mlp::new(MlpSpec::relu(widths.to_vec()).unwrap(), MlpParams { layers }).unwrap()
    }

    /// Straight-line reference: explicit loops, no shared helpers.
    fn reference_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let n = m.layers().len();
        for (i, l) in m.layers().iter().enumerate() {
            let mut next = Vec::with_capacity(l.out_dim);
            for r in 0..l.out_dim {
                let mut s = l.bias[r];
                for c in 0..l.in_dim {
                    s += l.weights[r * l.in_dim + c] * cur[c];
                }
                next.push(if i + 1 < n && s < 0.0 { 0.0 } else { s });
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn single_affine_layer() {
        let m = mlp(&[2, 2], vec![dense(2, 2, &[2.0, 0.0, 0.0, 3.0], &[1.0, 1.0])]);
        assert_eq!(m.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn relu_kills_negative_preactivation() {
        let m = mlp(&[2, 1, 1], vec![dense(2, 1, &[1.0, -1.0], &[0.0]), dense(1, 1, &[2.0], &[0.0])]);
        assert_eq!(m.forward(&[0.0, 1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_matches_reference_chain() {
        let m = Mlp::init(MlpSpec::relu(vec![4, 7, 5, 3]).unwrap(), 11).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let got = m.forward(&x).unwrap();
        let want = reference_forward(&m, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![3, 4, 2]).unwrap(), 0).unwrap(), 1).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.head_forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn feature_map_is_first_layer_on_two_layer_net() {
        let m = mlp(&[2, 2, 1], vec![dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]), dense(2, 1, &[1.0, 1.0], &[0.0])]);
        let s = SplitModel::new(m, 1).unwrap();
        assert_eq!(s.feature_forward(&[0.5, 2.0]).unwrap(), vec![0.5, 2.0]);
        assert_eq!(s.feature_forward(&[-0.5, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn split_index_bounds() {
        let m = Mlp::init(MlpSpec::relu(vec![3, 4, 4, 2]).unwrap(), 0).unwrap();
        assert!(SplitModel::new(m.clone(), 0).is_err());
        assert!(SplitModel::new(m.clone(), 3).is_err());
        assert!(SplitModel::new(m, 2).is_ok());
        assert!(MlpSpec::relu(vec![3]).is_err());
        assert!(MlpSpec::relu(vec![3, 0, 1]).is_err());
    }

    #[test]
    fn identity_head_gradient() {
        let m = mlp(&[2, 2, 2], vec![dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]), dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0])]);
        let s = SplitModel::new(m, 1).unwrap();
        let g = s.head_input_gradient(&[1.0, 2.0], &[0.0, 0.0], LossKind::Mse).unwrap();
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn scalar_chain_rule_gradient() {
        let m = mlp(&[1, 1, 1], vec![dense(1, 1, &[1.0], &[0.0]), dense(1, 1, &[3.0], &[0.0])]);
        let s = SplitModel::new(m, 1).unwrap();
        let g = s.head_input_gradient(&[1.0], &[0.0], LossKind::Mse).unwrap();
        assert_eq!(g, vec![18.0]);
    }

    #[test]
    fn pinball_gradient_is_rejected() {
        let s = SplitModel::new(Mlp::init(MlpSpec::relu(vec![1, 2, 1]).unwrap(), 0).unwrap(), 1).unwrap();
        let err = s.head_input_gradient(&[0.0, 0.0], &[0.0], LossKind::Pinball { tau: 0.5 });
        assert!(matches!(err, Err(Error::UnsupportedLoss(_))));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = MlpSpec::relu(vec![1, 3, 1]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let cfg = TrainConfig { epochs: 0, seed: 5, ..Default::default() };
        let out = train(&spec, &x, &y, LossKind::Mse, &cfg).unwrap();
        assert_eq!(out.mlp, Mlp::init(spec, 5).unwrap());
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn diverging_training_reports_non_finite_loss() {
        let spec = MlpSpec::relu(vec![1, 1]).unwrap();
        let x = Matrix::from_rows(&[vec![1e150], vec![-1e150]]).unwrap();
        let y = Matrix::from_rows(&[vec![1e150], vec![0.0]]).unwrap();
        let cfg = TrainConfig { epochs: 5, learning_rate: 1.0, ..Default::default() };
        assert!(matches!(
            train(&spec, &x, &y, LossKind::Mse, &cfg),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn pinball_level_must_be_interior() {
        assert!(LossKind::pinball(0.0).is_err());
        assert!(LossKind::pinball(1.0).is_err());
        assert!(LossKind::pinball(0.9).is_ok());
    }

    #[test]
    fn model_json_roundtrip_is_bitwise() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![5, 8, 8, 3]).unwrap(), 99).unwrap(), 2).unwrap();
        let s = m.to_json_string().unwrap();
        let back = SplitModel::from_json_str(&s).unwrap();
        for (a, b) in m.mlp().layers().iter().zip(back.mlp().layers()) {
            assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.split_index(), 2);
    }

    #[test]
    fn model_json_rejects_unknown_version() {
        let m = SplitModel::new(Mlp::init(MlpSpec::relu(vec![1, 2, 1]).unwrap(), 0).unwrap(), 1).unwrap();
        let s = m.to_json_string().unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(SplitModel::from_json_str(&s), Err(Error::ModelFormat { .. })));
    }
}
