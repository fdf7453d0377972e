//! Estimators of the spurious posterior `rho = p(s = y | y, x)` on training data.
//!
//! Three regimes:
//! * attributes known: per-class attribute classifiers,
//! * validation drawn from the training law: disagreement between a model
//!   overfit on train and one overfit on validation,
//! * validation law unknown or shifted: confidence of a model overfit on train.
//!
//! Each estimator is fit once and can then score any dataset with matching
//! shape, which is how validation-side selection weights are produced.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{DbaError, Result};
use crate::trainer::{fit_overfit, OverfitConfig, OverfitResult, SoftmaxModel, TrainConfig};
use crate::weights::SpuriousPosteriorVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    #[serde(alias = "known-s")]
    Known,
    Same,
    Diff,
}

impl std::str::FromStr for Regime {
    type Err = DbaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" | "known-s" => Ok(Regime::Known),
            "same" => Ok(Regime::Same),
            "diff" => Ok(Regime::Diff),
            other => Err(DbaError::Config(format!(
                "unknown regime `{other}` (known|same|diff)"
            ))),
        }
    }
}

fn default_tau() -> f64 {
    1.0
}
fn default_max_epochs() -> usize {
    500
}
fn default_batch() -> usize {
    64
}
fn default_target() -> f64 {
    0.99
}
fn default_min_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub regime: Regime,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Epoch cap for each overfitting run.
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_min_epochs")]
    pub min_epochs: usize,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    /// Defaults to 0.1 for linear models and 0.01 with a hidden layer.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub hidden: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            regime: Regime::Known,
            tau: default_tau(),
            max_epochs: default_max_epochs(),
            min_epochs: default_min_epochs(),
            target_accuracy: default_target(),
            learning_rate: None,
            hidden: 0,
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DbaError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.max_epochs == 0 {
            return Err(DbaError::Config("max_epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(DbaError::Config(
                "target_accuracy must lie in [0, 1]".into(),
            ));
        }
        self.overfit_config(0).train.validate()
    }

    pub fn overfit_config(&self, seed: u64) -> OverfitConfig {
        let learning_rate = self
            .learning_rate
            .unwrap_or(if self.hidden > 0 { 0.01 } else { 0.1 });
        OverfitConfig {
            train: TrainConfig {
                learning_rate,
                epochs: self.max_epochs,
                batch_size: self.batch_size,
                seed,
                hidden: self.hidden,
                weight_decay: 0.0,
            },
            target_accuracy: self.target_accuracy,
            max_epochs: self.max_epochs,
            min_epochs: self.min_epochs,
        }
    }
}

/// Outcome of one overfitting run, without the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitSummary {
    pub train_accuracy: f64,
    pub epochs: usize,
    pub converged: bool,
}

impl From<&OverfitResult> for OverfitSummary {
    fn from(r: &OverfitResult) -> Self {
        OverfitSummary {
            train_accuracy: r.train_accuracy,
            epochs: r.epochs,
            converged: r.converged,
        }
    }
}

/// `exp(-delta / tau)`.
pub fn same_dist_rho(delta: f64, tau: f64) -> f64 {
    (-delta / tau).exp()
}

/// `p^(1/tau)`, computed from `log p`.
pub fn diff_dist_rho(log_p: f64, tau: f64) -> f64 {
    (log_p / tau).exp()
}

fn check_shape(reference: &SoftmaxModel, data: &Dataset) -> Result<()> {
    if data.dim() != reference.dim() {
        return Err(DbaError::DimensionMismatch {
            expected: reference.dim(),
            got: data.dim(),
        });
    }
    if data.n_classes() != reference.n_classes() {
        return Err(DbaError::DimensionMismatch {
            expected: reference.n_classes(),
            got: data.n_classes(),
        });
    }
    Ok(())
}

/// One attribute classifier per class stratum.
#[derive(Debug, Clone)]
pub struct KnownSEstimator {
    models: Vec<SoftmaxModel>,
    summaries: Vec<OverfitSummary>,
}

impl KnownSEstimator {
    pub fn fit(train: &Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        if !train.attributes_known() {
            return Err(DbaError::UnknownAttributes);
        }
        let l = train.n_classes();
        let mut models = Vec::with_capacity(l);
        let mut summaries = Vec::with_capacity(l);
        for c in 0..l {
            let stratum: Vec<Sample> = train
                .samples()
                .iter()
                .filter(|s| s.y == c)
                .map(|s| Sample::new(s.x.clone(), s.s.expect("attributes known"), s.s, s.m))
                .collect();
            if stratum.len() < l {
                return Err(DbaError::StratumTooSmall {
                    class: c,
                    count: stratum.len(),
                    needed: l,
                });
            }
            let data = train.with_samples(stratum)?;
            let fit = fit_overfit(&data, &cfg.overfit_config(cfg.seed.wrapping_add(c as u64)))?;
            summaries.push(OverfitSummary::from(&fit));
            models.push(fit.model);
        }
        Ok(KnownSEstimator { models, summaries })
    }

    pub fn summaries(&self) -> &[OverfitSummary] {
        &self.summaries
    }

    pub fn models(&self) -> &[SoftmaxModel] {
        &self.models
    }

    /// Predicted probability that `s = y` for every sample of `data`.
    pub fn rho(&self, data: &Dataset) -> Result<SpuriousPosteriorVector> {
        check_shape(&self.models[0], data)?;
        let values = data
            .samples()
            .iter()
            .map(|s| self.models[s.y].log_prob(&s.x, s.y).map(f64::exp))
            .collect::<Result<Vec<_>>>()?;
        SpuriousPosteriorVector::clamped(values)
    }
}

pub fn estimate_known_s(train: &Dataset, cfg: &EstimatorConfig) -> Result<SpuriousPosteriorVector> {
    KnownSEstimator::fit(train, cfg)?.rho(train)
}

/// Two models overfit independently on train (`a`) and validation (`b`).
#[derive(Debug, Clone)]
pub struct SameDistEstimator {
    model_a: SoftmaxModel,
    model_b: SoftmaxModel,
    tau: f64,
    summaries: [OverfitSummary; 2],
}

impl SameDistEstimator {
    pub fn fit(train: &Dataset, val: &Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        if val.is_empty() {
            return Err(DbaError::EmptyDataset);
        }
        if train.dim() != val.dim() {
            return Err(DbaError::DimensionMismatch {
                expected: train.dim(),
                got: val.dim(),
            });
        }
        if train.n_classes() != val.n_classes() {
            return Err(DbaError::DimensionMismatch {
                expected: train.n_classes(),
                got: val.n_classes(),
            });
        }
        let (a, b) = rayon::join(
            || fit_overfit(train, &cfg.overfit_config(cfg.seed)),
            || fit_overfit(val, &cfg.overfit_config(cfg.seed ^ 0x0005_eedb)),
        );
        let (a, b) = (a?, b?);
        let summaries = [OverfitSummary::from(&a), OverfitSummary::from(&b)];
        Ok(SameDistEstimator {
            model_a: a.model,
            model_b: b.model,
            tau: cfg.tau,
            summaries,
        })
    }

    pub fn summaries(&self) -> &[OverfitSummary; 2] {
        &self.summaries
    }

    /// `|log p_a(y|x) - log p_b(y|x)|` per sample.
    pub fn deltas(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_shape(&self.model_a, data)?;
        data.samples()
            .iter()
            .map(|s| {
                Ok((self.model_a.log_prob(&s.x, s.y)? - self.model_b.log_prob(&s.x, s.y)?).abs())
            })
            .collect()
    }

    pub fn rho(&self, data: &Dataset) -> Result<SpuriousPosteriorVector> {
        let values = self
            .deltas(data)?
            .into_iter()
            .map(|d| same_dist_rho(d, self.tau))
            .collect();
        SpuriousPosteriorVector::clamped(values)
    }

    /// Same estimator with the roles of the two models swapped, for scoring
    /// the validation split against the training-side model.
    pub fn swapped(&self) -> Self {
        SameDistEstimator {
            model_a: self.model_b.clone(),
            model_b: self.model_a.clone(),
            tau: self.tau,
            summaries: [self.summaries[1], self.summaries[0]],
        }
    }
}

pub fn estimate_same_dist(
    train: &Dataset,
    val: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<SpuriousPosteriorVector> {
    SameDistEstimator::fit(train, val, cfg)?.rho(train)
}

/// One model overfit on the data it later scores.
#[derive(Debug, Clone)]
pub struct DiffDistEstimator {
    model: SoftmaxModel,
    tau: f64,
    summary: OverfitSummary,
}

impl DiffDistEstimator {
    pub fn fit(train: &Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let fit = fit_overfit(train, &cfg.overfit_config(cfg.seed))?;
        let summary = OverfitSummary::from(&fit);
        Ok(DiffDistEstimator {
            model: fit.model,
            tau: cfg.tau,
            summary,
        })
    }

    pub fn summary(&self) -> OverfitSummary {
        self.summary
    }

    pub fn rho(&self, data: &Dataset) -> Result<SpuriousPosteriorVector> {
        check_shape(&self.model, data)?;
        let values = data
            .samples()
            .iter()
            .map(|s| Ok(diff_dist_rho(self.model.log_prob(&s.x, s.y)?, self.tau)))
            .collect::<Result<Vec<_>>>()?;
        SpuriousPosteriorVector::clamped(values)
    }
}

pub fn estimate_diff_dist(
    train: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<SpuriousPosteriorVector> {
    DiffDistEstimator::fit(train, cfg)?.rho(train)
}
