//! Weighted maximum-likelihood training of a softmax classifier.
//!
//! The model is either linear (`L x (d+1)` including a bias column) or has one
//! hidden ReLU layer. Parameters live in one flat row-major vector so that
//! SGD updates and finite-difference checks can treat them uniformly.
//!
//! Training is single-threaded plain mini-batch SGD with a seeded shuffle per
//! epoch; identical inputs give bit-identical parameters.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{DbaError, Result};
use crate::weights::weighted_loglik;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    #[serde(rename = "L")]
    n_classes: usize,
    #[serde(rename = "d")]
    dim: usize,
    /// Hidden width; 0 means linear.
    hidden: usize,
    /// Linear: `W` (`L x (d+1)`). Hidden: `W1` (`h x (d+1)`) then `W2` (`L x (h+1)`).
    params: Vec<f64>,
}

impl SoftmaxModel {
    /// Linear models start at zero; hidden-layer models get a seeded
    /// uniform initialization scaled by fan-in.
    pub fn new(n_classes: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut model = SoftmaxModel {
            n_classes,
            dim,
            hidden,
            params: vec![0.0; 0],
        };
        model.params = vec![0.0; model.param_count()];
        if hidden > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x1417);
            let first = hidden * (dim + 1);
            let a1 = (6.0 / (dim + 1) as f64).sqrt();
            let a2 = (6.0 / (hidden + 1 + n_classes) as f64).sqrt();
            let u1 = Uniform::new_inclusive(-a1, a1).expect("finite bounds");
            let u2 = Uniform::new_inclusive(-a2, a2).expect("finite bounds");
            for (i, p) in model.params.iter_mut().enumerate() {
                *p = if i < first {
                    u1.sample(&mut rng)
                } else {
                    u2.sample(&mut rng)
                };
            }
        }
        model
    }

    pub fn from_params(
        n_classes: usize,
        dim: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let model = SoftmaxModel {
            n_classes,
            dim,
            hidden,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(DbaError::InvalidData(
                "model needs at least 2 classes".into(),
            ));
        }
        if self.params.len() != self.param_count() {
            return Err(DbaError::LengthMismatch {
                expected: self.param_count(),
                got: self.params.len(),
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(DbaError::InvalidData(
                "model has non-finite parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        if self.hidden == 0 {
            self.n_classes * (self.dim + 1)
        } else {
            self.hidden * (self.dim + 1) + self.n_classes * (self.hidden + 1)
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(DbaError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Affine map `rows x (cols+1)` (bias last) applied to `input`.
    fn affine(weights: &[f64], rows: usize, input: &[f64], out: &mut [f64]) {
        let cols = input.len();
        for (r, o) in out.iter_mut().enumerate().take(rows) {
            let row = &weights[r * (cols + 1)..(r + 1) * (cols + 1)];
            let mut acc = row[cols];
            for (w, v) in row[..cols].iter().zip(input) {
                acc += w * v;
            }
            *o = acc;
        }
    }

    /// Logits; `hidden_out` receives the post-activation hidden layer.
    fn forward(&self, x: &[f64], hidden_out: &mut Vec<f64>, logits: &mut [f64]) {
        if self.hidden == 0 {
            Self::affine(&self.params, self.n_classes, x, logits);
        } else {
            let split = self.hidden * (self.dim + 1);
            hidden_out.resize(self.hidden, 0.0);
            Self::affine(&self.params[..split], self.hidden, x, hidden_out);
            for h in hidden_out.iter_mut() {
                *h = h.max(0.0);
            }
            Self::affine(&self.params[split..], self.n_classes, hidden_out, logits);
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut logits = vec![0.0; self.n_classes];
        self.forward(x, &mut Vec::new(), &mut logits);
        Ok(logits)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// `log q(y | x)`.
    pub fn log_prob(&self, x: &[f64], y: usize) -> Result<f64> {
        let z = self.logits(x)?;
        Ok(log_softmax_at(&z, y))
    }

    /// Argmax class; ties go to the smallest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        let mut best = 0;
        for (c, &v) in z.iter().enumerate().skip(1) {
            if v > z[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean of `-w_i * log q(y_i | x_i)` over `samples` and its gradient.
    /// A weight decay term `0.5 * decay * |W|^2` over non-bias entries is
    /// added when `decay > 0`.
    pub fn loss_and_grad(
        &self,
        samples: &[Sample],
        weights: &[f64],
        decay: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if samples.is_empty() {
            return Err(DbaError::EmptyInput);
        }
        if weights.len() != samples.len() {
            return Err(DbaError::LengthMismatch {
                expected: samples.len(),
                got: weights.len(),
            });
        }
        for s in samples {
            self.check_dim(&s.x)?;
            if s.y >= self.n_classes {
                return Err(DbaError::InvalidData(format!("label {} out of range", s.y)));
            }
        }
        let mut grad = vec![0.0; self.param_count()];
        let mut scratch = Scratch::new(self);
        let refs: Vec<&Sample> = samples.iter().collect();
        let loss = self.accumulate(&refs, Some(weights), decay, &mut grad, &mut scratch);
        Ok((loss, grad))
    }

    /// Core batch pass shared by the weighted and unweighted paths. `None`
    /// weights skip the multiplication entirely.
    fn accumulate(
        &self,
        batch: &[&Sample],
        weights: Option<&[f64]>,
        decay: f64,
        grad: &mut [f64],
        sc: &mut Scratch,
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv_b = 1.0 / batch.len() as f64;
        let l = self.n_classes;
        let d = self.dim;
        let mut loss = 0.0;
        for (i, sample) in batch.iter().enumerate() {
            self.forward(&sample.x, &mut sc.hidden, &mut sc.logits);
            let lse = log_sum_exp(&sc.logits);
            let logp = sc.logits[sample.y] - lse;
            for c in 0..l {
                let p = (sc.logits[c] - lse).exp();
                let target = if c == sample.y { 1.0 } else { 0.0 };
                sc.delta[c] = match weights {
                    Some(w) => w[i] * (p - target) * inv_b,
                    None => (p - target) * inv_b,
                };
            }
            loss -= match weights {
                Some(w) => w[i] * logp,
                None => logp,
            };

            if self.hidden == 0 {
                for c in 0..l {
                    let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    let dc = sc.delta[c];
                    for (g, v) in row[..d].iter_mut().zip(&sample.x) {
                        *g += dc * v;
                    }
                    row[d] += dc;
                }
            } else {
                let h = self.hidden;
                let split = h * (d + 1);
                let (g1, g2) = grad.split_at_mut(split);
                let w2 = &self.params[split..];
                sc.dhidden.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..l {
                    let dc = sc.delta[c];
                    let row = &mut g2[c * (h + 1)..(c + 1) * (h + 1)];
                    let wrow = &w2[c * (h + 1)..(c + 1) * (h + 1)];
                    for j in 0..h {
                        row[j] += dc * sc.hidden[j];
                        sc.dhidden[j] += wrow[j] * dc;
                    }
                    row[h] += dc;
                }
                for j in 0..h {
                    if sc.hidden[j] <= 0.0 {
                        continue;
                    }
                    let dj = sc.dhidden[j];
                    let row = &mut g1[j * (d + 1)..(j + 1) * (d + 1)];
                    for (g, v) in row[..d].iter_mut().zip(&sample.x) {
                        *g += dj * v;
                    }
                    row[d] += dj;
                }
            }
        }
        loss *= inv_b;
        if decay > 0.0 {
            for (idx, (g, p)) in grad.iter_mut().zip(&self.params).enumerate() {
                if !self.is_bias(idx) {
                    *g += decay * p;
                    loss += 0.5 * decay * p * p;
                }
            }
        }
        loss
    }

    fn is_bias(&self, idx: usize) -> bool {
        if self.hidden == 0 {
            idx % (self.dim + 1) == self.dim
        } else {
            let split = self.hidden * (self.dim + 1);
            if idx < split {
                idx % (self.dim + 1) == self.dim
            } else {
                (idx - split) % (self.hidden + 1) == self.hidden
            }
        }
    }
}

struct Scratch {
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
    logits: Vec<f64>,
    delta: Vec<f64>,
}

impl Scratch {
    fn new(model: &SoftmaxModel) -> Self {
        Scratch {
            hidden: vec![0.0; model.hidden],
            dhidden: vec![0.0; model.hidden],
            logits: vec![0.0; model.n_classes],
            delta: vec![0.0; model.n_classes],
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

fn log_softmax_at(z: &[f64], c: usize) -> f64 {
    z[c] - log_sum_exp(z)
}

fn softmax_in_place(z: &mut [f64]) {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - top).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

fn default_lr() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 = linear model.
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            hidden: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate for a hidden-layer model.
    pub fn hidden(width: usize) -> Self {
        TrainConfig {
            hidden: width,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DbaError::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(DbaError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DbaError::Config("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DbaError::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Epoch-by-epoch SGD driver.
struct Sgd<'a> {
    model: SoftmaxModel,
    data: &'a Dataset,
    weights: Option<&'a [f64]>,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    grad: Vec<f64>,
    scratch: Scratch,
    batch: Vec<&'a Sample>,
    batch_w: Vec<f64>,
}

impl<'a> Sgd<'a> {
    fn new(data: &'a Dataset, weights: Option<&'a [f64]>, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(DbaError::EmptyDataset);
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(DbaError::LengthMismatch {
                    expected: data.len(),
                    got: w.len(),
                });
            }
        }
        let model = SoftmaxModel::new(data.n_classes(), data.dim(), cfg.hidden, cfg.seed);
        let grad = vec![0.0; model.param_count()];
        let scratch = Scratch::new(&model);
        Ok(Sgd {
            model,
            data,
            weights,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..data.len()).collect(),
            grad,
            scratch,
            batch: Vec::with_capacity(cfg.batch_size),
            batch_w: Vec::with_capacity(cfg.batch_size),
        })
    }

    fn epoch(&mut self) {
        self.order.shuffle(&mut self.rng);
        let samples = self.data.samples();
        for chunk in self.order.chunks(self.cfg.batch_size) {
            self.batch.clear();
            self.batch.extend(chunk.iter().map(|&i| &samples[i]));
            let w = self.weights.map(|w| {
                self.batch_w.clear();
                self.batch_w.extend(chunk.iter().map(|&i| w[i]));
                self.batch_w.as_slice()
            });
            self.model.accumulate(
                &self.batch,
                w,
                self.cfg.weight_decay,
                &mut self.grad,
                &mut self.scratch,
            );
            for (p, g) in self.model.params.iter_mut().zip(&self.grad) {
                *p -= self.cfg.learning_rate * g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: SoftmaxModel,
    /// Model after each epoch; the last entry equals `model`.
    pub checkpoints: Vec<SoftmaxModel>,
}

fn run_fit(data: &Dataset, weights: Option<&[f64]>, cfg: &TrainConfig) -> Result<FitResult> {
    let mut sgd = Sgd::new(data, weights, cfg)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        sgd.epoch();
        checkpoints.push(sgd.model.clone());
    }
    if sgd.model.params.iter().any(|p| !p.is_finite()) {
        return Err(DbaError::Domain(
            "training diverged (non-finite parameters)".into(),
        ));
    }
    Ok(FitResult {
        model: sgd.model,
        checkpoints,
    })
}

/// Minimizes the weighted negative log-likelihood over `train`.
pub fn fit_weighted(train: &Dataset, weights: &[f64], cfg: &TrainConfig) -> Result<FitResult> {
    run_fit(train, Some(weights), cfg)
}

/// Plain ERM; identical to `fit_weighted` with unit weights.
pub fn fit_unweighted(train: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    run_fit(train, None, cfg)
}

fn default_target() -> f64 {
    0.99
}
fn default_cap() -> usize {
    500
}
fn default_min() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    /// Optimizer settings; `epochs` is ignored in favor of `max_epochs`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default = "default_cap")]
    pub max_epochs: usize,
    /// Epochs run before the accuracy target is checked.
    #[serde(default = "default_min")]
    pub min_epochs: usize,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            train: TrainConfig::default(),
            target_accuracy: default_target(),
            max_epochs: default_cap(),
            min_epochs: default_min(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitResult {
    pub model: SoftmaxModel,
    pub train_accuracy: f64,
    pub epochs: usize,
    /// False when the epoch cap was reached below the target accuracy.
    pub converged: bool,
}

/// Unit-weight training until the training accuracy reaches the target or
/// the epoch cap is hit.
pub fn fit_overfit(data: &Dataset, cfg: &OverfitConfig) -> Result<OverfitResult> {
    if cfg.max_epochs == 0 {
        return Err(DbaError::Config("max_epochs must be at least 1".into()));
    }
    let mut sgd = Sgd::new(data, None, &cfg.train)?;
    let mut accuracy = 0.0;
    for epoch in 1..=cfg.max_epochs {
        sgd.epoch();
        if epoch < cfg.min_epochs && epoch < cfg.max_epochs {
            continue;
        }
        accuracy = train_accuracy(&sgd.model, data);
        if accuracy >= cfg.target_accuracy {
            return Ok(OverfitResult {
                model: sgd.model,
                train_accuracy: accuracy,
                epochs: epoch,
                converged: true,
            });
        }
    }
    Ok(OverfitResult {
        model: sgd.model,
        train_accuracy: accuracy,
        epochs: cfg.max_epochs,
        converged: false,
    })
}

fn train_accuracy(model: &SoftmaxModel, data: &Dataset) -> f64 {
    let correct = data
        .samples()
        .iter()
        .filter(|s| model.predict(&s.x).map(|p| p == s.y).unwrap_or(false))
        .count();
    correct as f64 / data.len() as f64
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &SoftmaxModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DbaError::EmptyDataset);
    }
    if data.dim() != model.dim() {
        return Err(DbaError::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    Ok(train_accuracy(model, data))
}

/// Bootstrap of `train` with draw probabilities proportional to `weights`.
pub fn resample_dataset(train: &Dataset, weights: &[f64], seed: u64) -> Result<Dataset> {
    Ok(train.select(&resample_indices(train.len(), weights, seed)?))
}

pub fn resample_indices(n: usize, weights: &[f64], seed: u64) -> Result<Vec<usize>> {
    if weights.len() != n {
        return Err(DbaError::LengthMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(DbaError::Domain(
            "resampling weights must be positive".into(),
        ));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| DbaError::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// Weighted mean log-likelihood `(1/n) * sum z_i * log q(y_i | x_i)`;
/// `None` means unit weights.
pub fn mean_loglik(model: &SoftmaxModel, data: &Dataset, weights: Option<&[f64]>) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(DbaError::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let ll = data
        .samples()
        .iter()
        .map(|s| model.log_prob(&s.x, s.y))
        .collect::<Result<Vec<_>>>()?;
    match weights {
        Some(w) => weighted_loglik(&ll, w),
        None => weighted_loglik(&ll, &vec![1.0; ll.len()]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    /// Weighted validation log-likelihood.
    #[default]
    Loglik,
    /// Weighted validation accuracy.
    Accuracy,
    /// Last epoch, no selection.
    Final,
}

/// Index of the checkpoint maximizing the (optionally `z`-weighted)
/// validation criterion; ties go to the earliest epoch.
pub fn select_model(
    checkpoints: &[SoftmaxModel],
    val: &Dataset,
    z: Option<&[f64]>,
    criterion: SelectionCriterion,
) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(DbaError::EmptyCheckpoints);
    }
    if let Some(z) = z {
        if z.len() != val.len() {
            return Err(DbaError::LengthMismatch {
                expected: val.len(),
                got: z.len(),
            });
        }
    }
    if criterion == SelectionCriterion::Final {
        return Ok(checkpoints.len() - 1);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, model) in checkpoints.iter().enumerate() {
        let score = match criterion {
            SelectionCriterion::Loglik => mean_loglik(model, val, z)?,
            SelectionCriterion::Accuracy => {
                let hits = val
                    .samples()
                    .iter()
                    .map(|s| {
                        model
                            .predict(&s.x)
                            .map(|p| if p == s.y { 1.0 } else { 0.0 })
                    })
                    .collect::<Result<Vec<_>>>()?;
                match z {
                    Some(z) => weighted_loglik(&hits, z)?,
                    None => hits.iter().sum::<f64>() / hits.len().max(1) as f64,
                }
            }
            SelectionCriterion::Final => unreachable!(),
        };
        if score > best.1 || i == 0 {
            best = (i, score);
        }
    }
    Ok(best.0)
}
