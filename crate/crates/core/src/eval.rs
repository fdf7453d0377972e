//! Accuracy metrics, the per-method training pipeline and multi-seed experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_label_stats, Dataset, DatasetRole, RunRecord, DEFAULT_P_M0};
use crate::error::{DbaError, Result};
use crate::estimators::{DiffDistEstimator, EstimatorConfig, KnownSEstimator, SameDistEstimator};
use crate::io::{fmt_f64, write_json};
use crate::synthgen::GenSpec;
use crate::trainer::{
    fit_unweighted, fit_weighted, resample_dataset, select_model, SelectionCriterion, SoftmaxModel,
    TrainConfig,
};
use crate::weights::{
    class_balance_weight, logit_adjust_weight, theorem1_weight, SpuriousPosteriorVector,
    WeightVector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    /// `None` when attributes are unknown and groups are classes.
    pub s: Option<usize>,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub average_accuracy: f64,
    pub worst_group: f64,
    /// Occupied cells only, ordered by `(y, s)`.
    pub per_group: Vec<GroupAccuracy>,
    /// Set when the dataset had no attributes and groups fell back to classes.
    pub class_only: bool,
}

impl Metrics {
    pub fn group(&self, y: usize, s: Option<usize>) -> Option<&GroupAccuracy> {
        self.per_group.iter().find(|g| g.y == y && g.s == s)
    }
}

/// Metrics for precomputed predictions aligned with `data`.
pub fn metrics_from_predictions(predictions: &[usize], data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(DbaError::EmptyDataset);
    }
    if predictions.len() != data.len() {
        return Err(DbaError::LengthMismatch {
            expected: data.len(),
            got: predictions.len(),
        });
    }
    let class_only = !data.attributes_known();
    let mut cells: BTreeMap<(usize, Option<usize>), (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0;
    for (p, s) in predictions.iter().zip(data.samples()) {
        let hit = *p == s.y;
        let cell = cells.entry((s.y, s.s)).or_default();
        cell.0 += 1;
        if hit {
            cell.1 += 1;
            correct_total += 1;
        }
    }
    let per_group: Vec<GroupAccuracy> = cells
        .into_iter()
        .map(|((y, s), (count, correct))| GroupAccuracy {
            y,
            s,
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect();
    let worst_group = per_group
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(Metrics {
        average_accuracy: correct_total as f64 / data.len() as f64,
        worst_group,
        per_group,
        class_only,
    })
}

pub fn accuracy_metrics(model: &SoftmaxModel, data: &Dataset) -> Result<Metrics> {
    let predictions = data
        .samples()
        .iter()
        .map(|s| model.predict(&s.x))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_predictions(&predictions, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    DbcmKnown,
    DbcmSame,
    DbcmDiff,
    Reweight,
    Resample,
    LogitAdjust,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::DbcmKnown,
        Method::DbcmSame,
        Method::DbcmDiff,
        Method::Reweight,
        Method::Resample,
        Method::LogitAdjust,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::DbcmKnown => "dbcm-known",
            Method::DbcmSame => "dbcm-same",
            Method::DbcmDiff => "dbcm-diff",
            Method::Reweight => "reweight",
            Method::Resample => "resample",
            Method::LogitAdjust => "logit-adjust",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = DbaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DbaError::Config(format!("unknown method `{s}`")))
    }
}

fn default_tau() -> f64 {
    1.0
}

/// Everything a single training method needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSettings {
    /// Assumed minority share of the training set.
    #[serde(default)]
    pub p_m0: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub selection: SelectionCriterion,
    /// Weight validation scores by the method's own weight function.
    #[serde(default = "default_true")]
    pub weighted_selection: bool,
    /// Rescale training weights to mean 1.
    #[serde(default)]
    pub self_normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            p_m0: None,
            tau: default_tau(),
            train: TrainConfig::default(),
            estimator: EstimatorConfig::default(),
            selection: SelectionCriterion::default(),
            weighted_selection: true,
            self_normalize: false,
        }
    }
}

impl MethodSettings {
    pub fn p_m0(&self) -> f64 {
        self.p_m0.unwrap_or(DEFAULT_P_M0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_m0()) {
            return Err(DbaError::Config(format!(
                "p_m0 must lie in [0, 1], got {}",
                self.p_m0()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DbaError::Config("tau must be positive".into()));
        }
        self.train.validate()?;
        self.estimator.validate()
    }

    fn estimator_config(&self, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            tau: self.tau,
            seed: self.estimator.seed ^ seed,
            ..self.estimator.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: SoftmaxModel,
    /// Training weights, absent for unweighted methods.
    pub weights: Option<WeightVector>,
    pub selected_epoch: usize,
}

fn theorem1_on(
    rho: &SpuriousPosteriorVector,
    data: &Dataset,
    settings: &MethodSettings,
) -> Result<WeightVector> {
    let stats = compute_label_stats(data, settings.p_m0(), settings.tau)?;
    theorem1_weight(rho, &data.labels(), &stats)
}

fn logit_adjust_on(est: &DiffDistEstimator, data: &Dataset) -> Result<WeightVector> {
    // with tau = 1 the diff-dist estimate is the fitted p(y|x)
    let p = est.rho(data)?;
    Ok(logit_adjust_weight(p.values(), data.n_classes())?.weights)
}

/// Training weights and validation selection weights for one method.
fn method_weights(
    method: Method,
    train: &Dataset,
    val: Option<&Dataset>,
    settings: &MethodSettings,
    seed: u64,
) -> Result<(Option<WeightVector>, Option<WeightVector>)> {
    let est_cfg = settings.estimator_config(seed);
    let want_z = settings.weighted_selection;
    match method {
        Method::Erm => Ok((None, None)),
        Method::Reweight | Method::Resample => {
            let z = match val {
                Some(v) if want_z => Some(class_balance_weight(v)?),
                _ => None,
            };
            Ok((Some(class_balance_weight(train)?), z))
        }
        Method::DbcmKnown => {
            let est = KnownSEstimator::fit(train, &est_cfg)?;
            let w = theorem1_on(&est.rho(train)?, train, settings)?;
            let z = match val {
                Some(v) if want_z && v.attributes_known() => {
                    Some(theorem1_on(&est.rho(v)?, v, settings)?)
                }
                _ => None,
            };
            Ok((Some(w), z))
        }
        Method::DbcmSame => {
            let v =
                val.ok_or_else(|| DbaError::Config("dbcm-same needs a validation set".into()))?;
            let est = SameDistEstimator::fit(train, v, &est_cfg)?;
            let w = theorem1_on(&est.rho(train)?, train, settings)?;
            let z = if want_z {
                Some(theorem1_on(&est.swapped().rho(v)?, v, settings)?)
            } else {
                None
            };
            Ok((Some(w), z))
        }
        Method::DbcmDiff => {
            let est = DiffDistEstimator::fit(train, &est_cfg)?;
            let w = theorem1_on(&est.rho(train)?, train, settings)?;
            let z = match val {
                Some(v) if want_z => {
                    let val_est = DiffDistEstimator::fit(v, &est_cfg)?;
                    Some(theorem1_on(&val_est.rho(v)?, v, settings)?)
                }
                _ => None,
            };
            Ok((Some(w), z))
        }
        Method::LogitAdjust => {
            let cfg = EstimatorConfig {
                tau: 1.0,
                ..est_cfg
            };
            let est = DiffDistEstimator::fit(train, &cfg)?;
            let w = logit_adjust_on(&est, train)?;
            let z = match val {
                Some(v) if want_z => Some(logit_adjust_on(&DiffDistEstimator::fit(v, &cfg)?, v)?),
                _ => None,
            };
            Ok((Some(w), z))
        }
    }
}

/// Builds weights for `method`, trains, and selects a checkpoint on `val`
/// (the last epoch when no validation set is given).
pub fn train_method(
    method: Method,
    train: &Dataset,
    val: Option<&Dataset>,
    settings: &MethodSettings,
    seed: u64,
) -> Result<TrainedModel> {
    settings.validate()?;
    let (weights, z) = method_weights(method, train, val, settings, seed)?;
    let weights = match weights {
        Some(w) if settings.self_normalize => Some(w.self_normalized()),
        w => w,
    };
    let z = match z {
        Some(z) if settings.self_normalize => Some(z.self_normalized()),
        z => z,
    };
    let cfg = TrainConfig {
        seed: settings.train.seed ^ seed,
        ..settings.train.clone()
    };
    let fit = match (method, &weights) {
        (Method::Resample, Some(w)) => {
            fit_unweighted(&resample_dataset(train, w.values(), cfg.seed)?, &cfg)?
        }
        (_, Some(w)) => fit_weighted(train, w.values(), &cfg)?,
        (_, None) => fit_unweighted(train, &cfg)?,
    };
    let selected_epoch = match val {
        Some(v) => select_model(
            &fit.checkpoints,
            v,
            z.as_ref().map(|z| z.values()),
            settings.selection,
        )?,
        None => fit.checkpoints.len() - 1,
    };
    let model = fit.checkpoints[selected_epoch].clone();
    Ok(TrainedModel {
        model,
        weights,
        selected_epoch,
    })
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: GenSpec,
    /// Law of the validation split; defaults to `spec`.
    #[serde(default)]
    pub val_spec: Option<GenSpec>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub settings: MethodSettings,
    /// Expressions such as `dbcm-known.worst_mean - erm.worst_mean >= 0.20`.
    #[serde(default, rename = "assert")]
    pub asserts: Vec<String>,
    /// Record wall time; when false every `seconds` field is 0.
    #[serde(default = "default_true")]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if let Some(v) = &self.val_spec {
            v.validate()?;
            if v.n_classes() != self.spec.n_classes() {
                return Err(DbaError::Config(
                    "val_spec must have the same class count".into(),
                ));
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DbaError::Config("dataset sizes must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(DbaError::Config("no methods given".into()));
        }
        if self.seeds.is_empty() {
            return Err(DbaError::Config("no seeds given".into()));
        }
        self.settings.validate()?;
        for a in &self.asserts {
            AssertExpr::parse(a)?;
        }
        Ok(())
    }

    /// Train, validation and test splits for one seed.
    pub fn datasets(&self, seed: u64) -> Result<[Dataset; 3]> {
        let val_spec = self.val_spec.as_ref().unwrap_or(&self.spec);
        Ok([
            self.spec
                .with_seed(seed)
                .generate(self.n_train, DatasetRole::Train)?,
            val_spec
                .with_seed(seed.wrapping_add(1))
                .generate(self.n_val, DatasetRole::Val)?,
            self.spec
                .with_seed(seed.wrapping_add(2))
                .generate(self.n_test, DatasetRole::Test)?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub worst_mean: f64,
    pub worst_std: f64,
    pub seconds: f64,
}

impl SummaryRow {
    pub fn stat(&self, name: &str) -> Option<f64> {
        match name {
            "avg_mean" => Some(self.avg_mean),
            "avg_std" => Some(self.avg_std),
            "worst_mean" => Some(self.worst_mean),
            "worst_std" => Some(self.worst_std),
            "seconds" => Some(self.seconds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method)
    }
}

/// Mean and sample standard deviation; the deviation is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    data: &[Dataset; 3],
) -> Result<RunRecord> {
    let start = Instant::now();
    let [train, val, test] = data;
    let trained = train_method(method, train, Some(val), &cfg.settings, seed)?;
    let mut metrics = BTreeMap::new();
    metrics.insert(
        DatasetRole::Val.as_str().to_string(),
        accuracy_metrics(&trained.model, val)?,
    );
    metrics.insert(
        DatasetRole::Test.as_str().to_string(),
        accuracy_metrics(&trained.model, test)?,
    );
    let seconds = if cfg.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    Ok(RunRecord {
        method: method.to_string(),
        config: serde_json::json!({
            "settings": cfg.settings,
            "selected_epoch": trained.selected_epoch,
            "spec_digest": train.spec_digest(),
        }),
        metrics,
        seconds,
        seed,
    })
}

/// Runs every (method, seed) cell and aggregates test metrics per method.
/// Rows follow the config's method order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = cfg
        .seeds
        .par_iter()
        .map(|&s| cfg.datasets(s))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |i| (m, i)))
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(m, i)| run_cell(cfg, m, cfg.seeds[i], &data[i]))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&cfg.methods, &runs);
    Ok(ExperimentReport { runs, summary })
}

pub fn summarize(methods: &[Method], runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut seen = Vec::new();
    for m in methods {
        if !seen.contains(m) {
            seen.push(*m);
        }
    }
    let test = DatasetRole::Test.as_str();
    seen.into_iter()
        .map(|m| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m.as_str()).collect();
            let avg: Vec<f64> = mine
                .iter()
                .map(|r| r.metrics[test].average_accuracy)
                .collect();
            let worst: Vec<f64> = mine.iter().map(|r| r.metrics[test].worst_group).collect();
            let secs: Vec<f64> = mine.iter().map(|r| r.seconds).collect();
            let (avg_mean, avg_std) = mean_std(&avg);
            let (worst_mean, worst_std) = mean_std(&worst);
            SummaryRow {
                method: m.to_string(),
                avg_mean,
                avg_std,
                worst_mean,
                worst_std,
                seconds: mean_std(&secs).0,
            }
        })
        .collect()
}

/// Writes `summary.csv`, `runs.json` and `plotdata.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("summary.csv"))?);
    writeln!(w, "method,avg_mean,avg_std,worst_mean,worst_std,seconds")?;
    for r in &report.summary {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method,
            fmt_f64(r.avg_mean),
            fmt_f64(r.avg_std),
            fmt_f64(r.worst_mean),
            fmt_f64(r.worst_std),
            fmt_f64(r.seconds)
        )?;
    }
    w.flush()?;

    write_json(&report.runs, &dir.join("runs.json"))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("plotdata.csv"))?);
    writeln!(w, "method,seed,role,metric,value")?;
    for run in &report.runs {
        for (role, m) in &run.metrics {
            writeln!(
                w,
                "{},{},{role},average,{}",
                run.method,
                run.seed,
                fmt_f64(m.average_accuracy)
            )?;
            writeln!(
                w,
                "{},{},{role},worst_group,{}",
                run.method,
                run.seed,
                fmt_f64(m.worst_group)
            )?;
            for g in &m.per_group {
                let s = g.s.map_or("-1".to_string(), |s| s.to_string());
                writeln!(
                    w,
                    "{},{},{role},group_{}_{s},{}",
                    run.method,
                    run.seed,
                    g.y,
                    fmt_f64(g.accuracy)
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Class-imbalanced study comparing ERM, class reweighting and DBCM with
/// known attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecificationReport {
    pub erm: SummaryRow,
    pub reweight: SummaryRow,
    pub dbcm: SummaryRow,
    /// `reweight.avg_mean <= erm.avg_mean - margin`.
    pub reweight_below_erm: bool,
    /// `dbcm.avg_mean >= erm.avg_mean`.
    pub dbcm_at_least_erm: bool,
    pub runs: Vec<RunRecord>,
}

impl MisspecificationReport {
    pub fn pass(&self) -> bool {
        self.reweight_below_erm && self.dbcm_at_least_erm
    }
}

pub fn misspecification_study(
    cfg: &ExperimentConfig,
    margin: f64,
) -> Result<MisspecificationReport> {
    let p_y = cfg.spec.p_y();
    let uniform = 1.0 / p_y.len() as f64;
    if p_y.iter().all(|&p| (p - uniform).abs() <= 1e-12) {
        return Err(DbaError::PreconditionViolation(
            "class prior is uniform; the study needs imbalance".into(),
        ));
    }
    let cfg = ExperimentConfig {
        methods: vec![Method::Erm, Method::Reweight, Method::DbcmKnown],
        asserts: Vec::new(),
        ..cfg.clone()
    };
    let report = run_experiment(&cfg)?;
    let row = |m: Method| report.row(m.as_str()).cloned().expect("method was run");
    let (erm, reweight, dbcm) = (
        row(Method::Erm),
        row(Method::Reweight),
        row(Method::DbcmKnown),
    );
    Ok(MisspecificationReport {
        reweight_below_erm: reweight.avg_mean <= erm.avg_mean - margin,
        dbcm_at_least_erm: dbcm.avg_mean >= erm.avg_mean,
        erm,
        reweight,
        dbcm,
        runs: report.runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Ge,
    Gt,
    Le,
    Lt,
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Stat { method: String, stat: String },
    Const(f64),
}

/// `term ((+|-) term)* cmp term ((+|-) term)*` where a term is a number or
/// `method.stat`; tokens are separated by whitespace.
#[derive(Debug, Clone, PartialEq)]
pub struct AssertExpr {
    source: String,
    lhs: Vec<(f64, Term)>,
    cmp: Comparison,
    rhs: Vec<(f64, Term)>,
}

const STATS: [&str; 5] = ["avg_mean", "avg_std", "worst_mean", "worst_std", "seconds"];

impl AssertExpr {
    pub fn parse(source: &str) -> Result<Self> {
        let bad = |why: &str| DbaError::Config(format!("malformed assert `{source}`: {why}"));
        let tokens: Vec<&str> = source.split_whitespace().collect();
        let pos = tokens
            .iter()
            .position(|t| matches!(*t, ">=" | ">" | "<=" | "<"))
            .ok_or_else(|| bad("missing comparison"))?;
        let cmp = match tokens[pos] {
            ">=" => Comparison::Ge,
            ">" => Comparison::Gt,
            "<=" => Comparison::Le,
            _ => Comparison::Lt,
        };
        let side = |toks: &[&str]| -> Result<Vec<(f64, Term)>> {
            if toks.is_empty() || toks.len().is_multiple_of(2) {
                return Err(bad("expected `term (+|- term)*`"));
            }
            let mut out = Vec::new();
            let mut sign = 1.0;
            for (i, t) in toks.iter().enumerate() {
                if i % 2 == 1 {
                    sign = match *t {
                        "+" => 1.0,
                        "-" => -1.0,
                        _ => return Err(bad(&format!("expected + or -, found `{t}`"))),
                    };
                    continue;
                }
                let term = if let Ok(v) = t.parse::<f64>() {
                    Term::Const(v)
                } else {
                    let (m, s) = t
                        .rsplit_once('.')
                        .ok_or_else(|| bad(&format!("bad term `{t}`")))?;
                    m.parse::<Method>()
                        .map_err(|_| bad(&format!("unknown method `{m}`")))?;
                    if !STATS.contains(&s) {
                        return Err(bad(&format!("unknown statistic `{s}`")));
                    }
                    Term::Stat {
                        method: m.to_string(),
                        stat: s.to_string(),
                    }
                };
                out.push((sign, term));
            }
            Ok(out)
        };
        Ok(AssertExpr {
            source: source.to_string(),
            lhs: side(&tokens[..pos])?,
            cmp,
            rhs: side(&tokens[pos + 1..])?,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates against summary rows; a method absent from the rows is a
    /// configuration error.
    pub fn evaluate(&self, rows: &[SummaryRow]) -> Result<bool> {
        let eval = |side: &[(f64, Term)]| -> Result<f64> {
            let mut total = 0.0;
            for (sign, term) in side {
                total += sign
                    * match term {
                        Term::Const(v) => *v,
                        Term::Stat { method, stat } => rows
                            .iter()
                            .find(|r| &r.method == method)
                            .and_then(|r| r.stat(stat))
                            .ok_or_else(|| {
                                DbaError::Config(format!(
                                    "assert `{}` names method `{method}` that was not run",
                                    self.source
                                ))
                            })?,
                    };
            }
            Ok(total)
        };
        let (l, r) = (eval(&self.lhs)?, eval(&self.rhs)?);
        Ok(match self.cmp {
            Comparison::Ge => l >= r,
            Comparison::Gt => l > r,
            Comparison::Le => l <= r,
            Comparison::Lt => l < r,
        })
    }
}
