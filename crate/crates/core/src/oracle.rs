//! Exact enumeration over discrete generative models.
//!
//! Everything here is computed by summing the generative law cell by cell in
//! float64; no closed form from [`crate::weights`] is used to build the
//! reference side of a check. The `check_*` functions then compare those
//! references against the closed forms and report the largest discrepancy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetRole, TrainStats};
use crate::error::{DbaError, Result};
use crate::synthgen::DiscreteGenSpec;
use crate::weights::{
    self, augmentation_weight, decomposed_objective, theorem1_inverse_weight, BracketForm,
};

/// `p(x, y)` over a finite alphabet for one dataset role, indexed `[x][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    values: Vec<Vec<f64>>,
    role: DatasetRole,
}

impl JointTable {
    pub fn new(values: Vec<Vec<f64>>, role: DatasetRole) -> Result<Self> {
        let width = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != width) {
            return Err(DbaError::InvalidData("ragged joint table".into()));
        }
        if values.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(DbaError::InvalidData(
                "joint table has a negative entry".into(),
            ));
        }
        let total: f64 = values.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DbaError::InvalidData(format!(
                "joint table sums to {total}"
            )));
        }
        Ok(JointTable { values, role })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x][y]
    }

    /// `(K, L)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.values.len(), self.values.first().map_or(0, Vec::len))
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// `rho(x, y) = p(s = y | y, x)` under the training law, indexed `[x][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    values: Vec<Vec<f64>>,
}

impl PosteriorTable {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x][y]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Training-law attribute prior `p(y, s)`.
fn train_prior(spec: &DiscreteGenSpec, y: usize, s: usize) -> f64 {
    let p = spec.p_y[y];
    let minority = spec.p_m0 * p / spec.n_classes as f64;
    if s == y {
        minority + (1.0 - spec.p_m0) * p
    } else {
        minority
    }
}

/// `p(x, y, s)` under the training law.
pub fn train_joint3(spec: &DiscreteGenSpec, x: usize, y: usize, s: usize) -> f64 {
    spec.cond(x, y, s) * train_prior(spec, y, s)
}

/// Exact `p(x, y)` for `role`. Train and val follow the two-group law with
/// the spec's `p_m0`; test draws the attribute uniformly.
pub fn exact_joint(spec: &DiscreteGenSpec, role: DatasetRole) -> Result<JointTable> {
    spec.validate()?;
    let (k, l) = (spec.alphabet, spec.n_classes);
    let mut values = vec![vec![0.0; l]; k];
    for (x, row) in values.iter_mut().enumerate() {
        for (y, cell) in row.iter_mut().enumerate() {
            *cell = match role {
                DatasetRole::Train | DatasetRole::Val => {
                    (0..l).map(|s| train_joint3(spec, x, y, s)).sum()
                }
                DatasetRole::Test => {
                    spec.p_y[y] / l as f64 * (0..l).map(|s| spec.cond(x, y, s)).sum::<f64>()
                }
            };
        }
    }
    JointTable::new(values, role)
}

fn posterior_cell(spec: &DiscreteGenSpec, x: usize, y: usize) -> Option<f64> {
    let total: f64 = (0..spec.n_classes)
        .map(|s| train_joint3(spec, x, y, s))
        .sum();
    (total > 0.0).then(|| train_joint3(spec, x, y, y) / total)
}

pub fn exact_spurious_posterior(spec: &DiscreteGenSpec) -> Result<PosteriorTable> {
    spec.validate()?;
    let mut values = vec![vec![0.0; spec.n_classes]; spec.alphabet];
    for (x, row) in values.iter_mut().enumerate() {
        for (y, cell) in row.iter_mut().enumerate() {
            *cell = posterior_cell(spec, x, y).ok_or(DbaError::ZeroDenominator { x, y })?;
        }
    }
    Ok(PosteriorTable { values })
}

/// Exact `p_te(x, y) / p_tr(x, y)`, zero outside the test support.
pub fn exact_weight(spec: &DiscreteGenSpec) -> Result<Vec<Vec<f64>>> {
    let train = exact_joint(spec, DatasetRole::Train)?;
    let test = exact_joint(spec, DatasetRole::Test)?;
    weights::density_ratio(&test, &train)
}

/// Statistics the closed form needs, read straight off the spec.
pub fn spec_stats(spec: &DiscreteGenSpec) -> Result<TrainStats> {
    TrainStats::new(spec.p_m0, spec.p_y.clone(), 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub trials: usize,
    pub max_rel_err: f64,
    /// `(x, y)` of the largest discrepancy in the worst trial.
    pub worst_cell: Option<(usize, usize)>,
    pub pass: bool,
    /// Secondary quantity, when the check has one (objective identity error,
    /// largest `|lambda0 + lambda1 - 1|`, ...).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl CheckReport {
    fn single(check: &str, tol: f64, max_rel_err: f64, worst_cell: Option<(usize, usize)>) -> Self {
        CheckReport {
            check: check.to_string(),
            trials: 1,
            max_rel_err,
            worst_cell,
            pass: max_rel_err <= tol,
            aux: None,
            notes: Vec::new(),
        }
    }

    fn failed(check: &str, note: String) -> Self {
        CheckReport {
            check: check.to_string(),
            trials: 1,
            max_rel_err: f64::INFINITY,
            worst_cell: None,
            pass: false,
            aux: None,
            notes: vec![note],
        }
    }
}

fn rel_err(approx: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        approx.abs()
    } else {
        (approx - exact).abs() / exact.abs()
    }
}

/// Closed-form weight at the exact posterior against the exact density ratio.
pub fn check_theorem1(spec: &DiscreteGenSpec, tol: f64, form: BracketForm) -> Result<CheckReport> {
    let name = match form {
        BracketForm::Corrected => "theorem1",
        BracketForm::MainText => "theorem1-maintext",
    };
    let exact = match exact_weight(spec) {
        Ok(g) => g,
        Err(DbaError::SupportViolation { x, y }) => {
            return Ok(CheckReport::failed(
                name,
                format!("support violation at ({x}, {y})"),
            ))
        }
        Err(e) => return Err(e),
    };
    let stats = spec_stats(spec)?;
    let test = exact_joint(spec, DatasetRole::Test)?;
    let mut worst = (0.0, None);
    for x in 0..spec.alphabet {
        for y in 0..spec.n_classes {
            if test.get(x, y) == 0.0 {
                continue;
            }
            let rho = posterior_cell(spec, x, y).ok_or(DbaError::ZeroDenominator { x, y })?;
            let closed = 1.0 / theorem1_inverse_weight(rho, y, &stats, form);
            let err = rel_err(closed, exact[x][y]);
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((x, y)));
            }
        }
    }
    Ok(CheckReport::single(name, tol, worst.0, worst.1))
}

/// Default model table for the objective identity: a fixed, non-uniform `q(y | x)`.
fn default_q(k: usize, l: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|x| {
            let raw: Vec<f64> = (0..l)
                .map(|y| (((x + 1) * (y + 2)) % 7 + 1) as f64)
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        })
        .collect()
}

fn theorem2_preconditions(spec: &DiscreteGenSpec) -> Result<()> {
    spec.validate()?;
    let l = spec.n_classes;
    let uniform = 1.0 / l as f64;
    if spec.p_y.iter().any(|&p| (p - uniform).abs() > 1e-12) {
        return Err(DbaError::PreconditionViolation(
            "labels must be uniform".into(),
        ));
    }
    if spec.p_m0 != 0.0 {
        return Err(DbaError::PreconditionViolation(
            "training set must be majority-only (p_m0 = 0)".into(),
        ));
    }
    for x in 0..spec.alphabet {
        for s in 0..l {
            let first = spec.cond(x, 0, s);
            if (1..l).any(|y| (spec.cond(x, y, s) - first).abs() > 1e-12) {
                return Err(DbaError::PreconditionViolation(
                    "p(x | y, s) must not depend on y".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Majority-only, uniform-label weight `1 / (L * p(y, s = y | x))` against
/// the exact ratio, plus the three-term objective identity per cell.
pub fn check_theorem2(spec: &DiscreteGenSpec, tol: f64) -> Result<CheckReport> {
    check_theorem2_with_q(spec, tol, &default_q(spec.alphabet, spec.n_classes))
}

pub fn check_theorem2_with_q(
    spec: &DiscreteGenSpec,
    tol: f64,
    q: &[Vec<f64>],
) -> Result<CheckReport> {
    theorem2_preconditions(spec)?;
    let (k, l) = (spec.alphabet, spec.n_classes);
    let exact = match exact_weight(spec) {
        Ok(g) => g,
        Err(DbaError::SupportViolation { x, y }) => {
            return Ok(CheckReport::failed(
                "theorem2",
                format!("support violation at ({x}, {y})"),
            ))
        }
        Err(e) => return Err(e),
    };
    let test = exact_joint(spec, DatasetRole::Test)?;
    let mut worst = (0.0, None);
    let mut identity_err: f64 = 0.0;
    for x in 0..k {
        let p_x: f64 = (0..l)
            .flat_map(|y| (0..l).map(move |s| (y, s)))
            .map(|(y, s)| train_joint3(spec, x, y, s))
            .sum();
        for y in 0..l {
            if test.get(x, y) == 0.0 {
                continue;
            }
            let joint_post = train_joint3(spec, x, y, y) / p_x;
            let closed = 1.0 / (l as f64 * joint_post);
            let err = rel_err(closed, exact[x][y]);
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((x, y)));
            }
            let log_q = q[x][y].ln();
            let three_term = decomposed_objective(&[log_q], &[joint_post], l)?[0];
            identity_err = identity_err.max((three_term - closed * log_q).abs());
        }
    }
    let mut report = CheckReport::single("theorem2", tol, worst.0, worst.1);
    report.aux = Some(identity_err);
    report.pass = report.pass && identity_err <= tol;
    Ok(report)
}

/// Two-group model for the augmentation-class weight. Rows are indexed by
/// `x`; conditional tables are `[x][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub p_m0: f64,
    pub p_x_m0: Vec<f64>,
    pub p_x_m1: Vec<f64>,
    pub p_y_x_m0: Vec<Vec<f64>>,
    pub p_y_x_m1: Vec<Vec<f64>>,
    pub p_x_test: Vec<f64>,
    pub p_y_x_test: Vec<Vec<f64>>,
}

impl AugmentationSpec {
    /// Spec satisfying both preconditions by construction.
    pub fn conforming(
        p_m0: f64,
        p_x_train: Vec<f64>,
        p_x_test: Vec<f64>,
        p_y_x_test: Vec<Vec<f64>>,
        p_y_x_m1: Vec<Vec<f64>>,
    ) -> Self {
        AugmentationSpec {
            p_m0,
            p_x_m0: p_x_train.clone(),
            p_x_m1: p_x_train,
            p_y_x_m0: p_y_x_test.clone(),
            p_y_x_m1,
            p_x_test,
            p_y_x_test,
        }
    }

    fn shape(&self) -> (usize, usize) {
        (
            self.p_x_test.len(),
            self.p_y_x_test.first().map_or(0, Vec::len),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (k, l) = self.shape();
        if !(0.0..=1.0).contains(&self.p_m0) {
            return Err(DbaError::InvalidData(format!(
                "p_m0 = {} not in [0, 1]",
                self.p_m0
            )));
        }
        for v in [&self.p_x_m0, &self.p_x_m1, &self.p_x_test] {
            if v.len() != k
                || (v.iter().sum::<f64>() - 1.0).abs() > 1e-12
                || v.iter().any(|&p| p < 0.0)
            {
                return Err(DbaError::InvalidData(
                    "marginal over x must be a length-K simplex".into(),
                ));
            }
        }
        for t in [&self.p_y_x_m0, &self.p_y_x_m1, &self.p_y_x_test] {
            if t.len() != k
                || t.iter().any(|r| {
                    r.len() != l
                        || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12
                        || r.iter().any(|&p| p < 0.0)
                })
            {
                return Err(DbaError::InvalidData(
                    "conditional p(y | x) rows must be length-L simplices".into(),
                ));
            }
        }
        Ok(())
    }

    fn preconditions(&self) -> Result<()> {
        self.validate()?;
        if self
            .p_x_m0
            .iter()
            .zip(&self.p_x_m1)
            .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(DbaError::PreconditionViolation(
                "p(x | m0) must equal p(x | m1)".into(),
            ));
        }
        let same = self
            .p_y_x_m0
            .iter()
            .flatten()
            .zip(self.p_y_x_test.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= 1e-12);
        if !same {
            return Err(DbaError::PreconditionViolation(
                "p(y | x, m0, train) must equal p(y | x, test)".into(),
            ));
        }
        Ok(())
    }

    pub fn p_x_train(&self, x: usize) -> f64 {
        self.p_m0 * self.p_x_m0[x] + (1.0 - self.p_m0) * self.p_x_m1[x]
    }

    pub fn train_joint(&self, x: usize, y: usize) -> f64 {
        self.p_m0 * self.p_x_m0[x] * self.p_y_x_m0[x][y]
            + (1.0 - self.p_m0) * self.p_x_m1[x] * self.p_y_x_m1[x][y]
    }

    pub fn test_joint(&self, x: usize, y: usize) -> f64 {
        self.p_x_test[x] * self.p_y_x_test[x][y]
    }

    /// `(lambda0, lambda1)` at cell `(x, y)`; requires `p_te(x, y) > 0`.
    pub fn lambdas(&self, x: usize, y: usize) -> (f64, f64) {
        let lam0 = self.p_m0 / self.p_x_test[x];
        let lam1 =
            (1.0 - self.p_m0) * self.p_y_x_m1[x][y] / (self.p_y_x_test[x][y] * self.p_x_test[x]);
        (lam0, lam1)
    }
}

/// Augmentation-class closed form against the exact ratio. `aux` carries the
/// largest `|lambda0 + lambda1 - 1|` over the support.
pub fn check_theorem3(spec: &AugmentationSpec, tol: f64) -> Result<CheckReport> {
    spec.preconditions()?;
    let (k, l) = spec.shape();
    let mut worst = (0.0, None);
    let mut lambda_gap: f64 = 0.0;
    for x in 0..k {
        for y in 0..l {
            let te = spec.test_joint(x, y);
            if te == 0.0 {
                continue;
            }
            let tr = spec.train_joint(x, y);
            if tr == 0.0 {
                return Ok(CheckReport::failed(
                    "theorem3",
                    format!("support violation at ({x}, {y})"),
                ));
            }
            let (lam0, lam1) = spec.lambdas(x, y);
            lambda_gap = lambda_gap.max((lam0 + lam1 - 1.0).abs());
            let closed = augmentation_weight(lam0, lam1, spec.p_x_train(x))?;
            let err = rel_err(closed, te / tr);
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((x, y)));
            }
        }
    }
    let mut report = CheckReport::single("theorem3", tol, worst.0, worst.1);
    report.aux = Some(lambda_gap);
    Ok(report)
}

/// Importance-sampling identities on a discrete spec:
/// `sum p_tr * g * f = sum p_te * f` and, with a validation law taken from
/// `val_spec`, `sum p_va * z * f = sum p_te * f`, for `n_functions` random
/// `f` with values in `[-1, 1]`. The reported error is absolute.
pub fn check_is_identity(
    spec: &DiscreteGenSpec,
    val_spec: &DiscreteGenSpec,
    n_functions: usize,
    seed: u64,
    tol: f64,
) -> Result<CheckReport> {
    let train = exact_joint(spec, DatasetRole::Train)?;
    let val = exact_joint(val_spec, DatasetRole::Val)?;
    let test = exact_joint(spec, DatasetRole::Test)?;
    let g = match weights::density_ratio(&test, &train) {
        Ok(g) => g,
        Err(DbaError::SupportViolation { x, y }) => {
            return Ok(CheckReport::failed(
                "is-identity",
                format!("support violation at ({x}, {y})"),
            ))
        }
        Err(e) => return Err(e),
    };
    let z = match weights::z_ratio(&val, &test) {
        Ok(z) => z,
        Err(DbaError::SupportViolation { x, y }) => {
            return Ok(CheckReport::failed(
                "is-identity",
                format!("validation support violation at ({x}, {y})"),
            ))
        }
        Err(e) => return Err(e),
    };
    let (k, l) = train.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n_functions {
        let f: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let mut lhs_train = 0.0;
        let mut lhs_val = 0.0;
        let mut rhs = 0.0;
        for x in 0..k {
            for y in 0..l {
                lhs_train += train.get(x, y) * g[x][y] * f[x][y];
                lhs_val += val.get(x, y) * z[x][y] * f[x][y];
                rhs += test.get(x, y) * f[x][y];
            }
        }
        max_err = max_err
            .max((lhs_train - rhs).abs())
            .max((lhs_val - rhs).abs());
    }
    let mut report = CheckReport::single("is-identity", tol, max_err, None);
    report.trials = n_functions;
    Ok(report)
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random conforming spec: `L` in `2..=5`, `K` in `2..=64`, Dirichlet(1)-style
/// columns, `p_m0` in `[0.001, 0.999]`.
pub fn random_discrete_spec(rng: &mut ChaCha8Rng) -> DiscreteGenSpec {
    let l = rng.random_range(2..=5);
    let k = rng.random_range(2..=64);
    let p_m0 = rng.random_range(0.001..=0.999);
    let p_y = random_simplex(rng, l);
    let columns: Vec<Vec<Vec<f64>>> = (0..l)
        .map(|_| (0..l).map(|_| random_simplex(rng, k)).collect())
        .collect();
    DiscreteGenSpec::from_columns(p_m0, p_y, &columns, rng.random()).expect("random spec is valid")
}

/// Random spec meeting the logit-adjustment preconditions: uniform labels,
/// majority-only training, and `p(x | y, s) = p(x | s)`.
pub fn random_attribute_only_spec(rng: &mut ChaCha8Rng) -> DiscreteGenSpec {
    let l = rng.random_range(2..=5);
    let k = rng.random_range(2..=64);
    let per_s: Vec<Vec<f64>> = (0..l).map(|_| random_simplex(rng, k)).collect();
    let columns: Vec<Vec<Vec<f64>>> = (0..l).map(|_| per_s.clone()).collect();
    DiscreteGenSpec::from_columns(0.0, vec![1.0 / l as f64; l], &columns, rng.random())
        .expect("random spec is valid")
}

pub fn random_augmentation_spec(rng: &mut ChaCha8Rng) -> AugmentationSpec {
    let l = rng.random_range(2..=5);
    let k = rng.random_range(2..=64);
    let p_m0 = rng.random_range(0.001..=0.999);
    let p_x_train = random_simplex(rng, k);
    let p_x_test = random_simplex(rng, k);
    let p_y_x_test = (0..k).map(|_| random_simplex(rng, l)).collect();
    let p_y_x_m1 = (0..k).map(|_| random_simplex(rng, l)).collect();
    AugmentationSpec::conforming(p_m0, p_x_train, p_x_test, p_y_x_test, p_y_x_m1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Theorem1,
    Theorem2,
    Theorem3,
    IsIdentity,
}

impl std::str::FromStr for CheckKind {
    type Err = DbaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem1" => Ok(CheckKind::Theorem1),
            "theorem2" => Ok(CheckKind::Theorem2),
            "theorem3" => Ok(CheckKind::Theorem3),
            "is-identity" => Ok(CheckKind::IsIdentity),
            other => Err(DbaError::Config(format!("unknown check `{other}`"))),
        }
    }
}

/// Runs `check` on `trials` random specs; trial `i` draws its spec from
/// ChaCha stream `i` of `seed`. Reports the worst trial.
pub fn check_randomized(
    check: CheckKind,
    trials: usize,
    seed: u64,
    tol: f64,
    form: BracketForm,
) -> Result<CheckReport> {
    if trials == 0 {
        return Err(DbaError::Config("need at least one trial".into()));
    }
    let reports = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match check {
                CheckKind::Theorem1 => check_theorem1(&random_discrete_spec(&mut rng), tol, form),
                CheckKind::Theorem2 => check_theorem2(&random_attribute_only_spec(&mut rng), tol),
                CheckKind::Theorem3 => check_theorem3(&random_augmentation_spec(&mut rng), tol),
                CheckKind::IsIdentity => {
                    let spec = random_discrete_spec(&mut rng);
                    let val = spec.with_p_m0(rng.random_range(0.001..=0.999));
                    check_is_identity(&spec, &val, 100, rng.random(), tol)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_reports(reports))
}

/// Fold per-trial reports: worst error, all-pass, largest aux, in trial order.
pub fn merge_reports(reports: Vec<CheckReport>) -> CheckReport {
    let mut out = reports[0].clone();
    out.trials = 0;
    out.max_rel_err = 0.0;
    out.worst_cell = None;
    out.pass = true;
    out.aux = None;
    out.notes.clear();
    for r in reports {
        out.trials += r.trials;
        if r.max_rel_err > out.max_rel_err
            || (out.worst_cell.is_none()
                && r.worst_cell.is_some()
                && r.max_rel_err >= out.max_rel_err)
        {
            out.max_rel_err = r.max_rel_err;
            out.worst_cell = r.worst_cell;
        }
        out.pass &= r.pass;
        out.aux = match (out.aux, r.aux) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        out.notes.extend(r.notes);
    }
    out
}
