//! Closed-form importance weights.
//!
//! The central one is the train-to-test weight under the two-group model,
//!
//! ```text
//! 1/g = p_m0 + p_m1 * (L / p_y) * a / (1 + B * (1 - rho) / rho)
//! a   = (p_y - p_m0 * p_y) / p_m1          (class prior of the majority group)
//! c   = p_m0 * p_y / L
//! B   = (c + p_m1 * a) / c
//! ```
//!
//! where `rho = p(s = y | y, x)` under the training law. The `p_m1` factor
//! inside `B` is required for `g` to equal the true density ratio; the
//! variant without it is kept as [`BracketForm::MainText`] so the
//! discrepancy stays testable.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrainStats};
use crate::error::{DbaError, Result};
use crate::oracle::JointTable;

/// Lower clamp applied to every spurious-posterior estimate.
pub const RHO_FLOOR: f64 = 1e-6;

/// Stand-in for `p_m0 = 0`, where `B` diverges.
const P_M0_LIMIT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Theorem1,
    Ones,
    ClassBalance,
    GroupBalance,
    LogitAdjust,
    ExactRatio,
}

/// Per-sample importance weights; every entry finite and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    provenance: Provenance,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DbaError::Domain(format!(
                "weight {i} = {} is not finite and positive",
                values[i]
            )));
        }
        Ok(WeightVector { values, provenance })
    }

    pub fn ones(n: usize) -> Self {
        WeightVector {
            values: vec![1.0; n],
            provenance: Provenance::Ones,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rescaled to mean 1. Off by default everywhere; the importance-sampling
    /// objective is unnormalized.
    pub fn self_normalized(&self) -> Self {
        let mean = self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        WeightVector {
            values: self.values.iter().map(|v| v / mean).collect(),
            provenance: self.provenance,
        }
    }

    /// Same weights, reordered/duplicated by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        WeightVector {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            provenance: self.provenance,
        }
    }
}

/// Per-sample estimates of `p(s = y | y, x)` under the training law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousPosteriorVector {
    values: Vec<f64>,
}

impl SpuriousPosteriorVector {
    /// Clamps into `[RHO_FLOOR, 1]`. NaN is rejected.
    pub fn clamped(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(DbaError::Domain("spurious posterior contains NaN".into()));
        }
        Ok(SpuriousPosteriorVector {
            values: values
                .into_iter()
                .map(|v| v.clamp(RHO_FLOOR, 1.0))
                .collect(),
        })
    }

    /// No clamping; every entry must already lie in `(0, 1]`.
    pub fn exact(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(DbaError::Domain(format!(
                "rho[{i}] = {} outside (0, 1]",
                values[i]
            )));
        }
        Ok(SpuriousPosteriorVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which bracket to use in the closed-form weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BracketForm {
    /// `B = (c + p_m1 * a) / c`; equals the true density ratio.
    #[default]
    Corrected,
    /// `B = (c + a) / c`; the form without the majority-fraction factor.
    MainText,
}

/// `1/g` for a single sample of class `y` with spurious posterior `rho`.
pub fn theorem1_inverse_weight(rho: f64, y: usize, stats: &TrainStats, form: BracketForm) -> f64 {
    if stats.p_m0() == 1.0 {
        return 1.0;
    }
    let l = stats.n_classes() as f64;
    let p = stats.p_y()[y];
    let p_m0 = if stats.p_m0() == 0.0 {
        P_M0_LIMIT
    } else {
        stats.p_m0()
    };
    let p_m1 = 1.0 - p_m0;
    let a = (p - p_m0 * p) / p_m1;
    let c = p_m0 * p / l;
    let b = match form {
        BracketForm::Corrected => (c + p_m1 * a) / c,
        BracketForm::MainText => (c + a) / c,
    };
    p_m0 + (p_m1 * (l / p) * a) / (1.0 + b * (1.0 - rho) / rho)
}

/// Closed-form train-to-test weights from per-sample spurious posteriors.
pub fn theorem1_weight(
    rho: &SpuriousPosteriorVector,
    y: &[usize],
    stats: &TrainStats,
) -> Result<WeightVector> {
    theorem1_weight_with(rho, y, stats, BracketForm::Corrected)
}

pub fn theorem1_weight_with(
    rho: &SpuriousPosteriorVector,
    y: &[usize],
    stats: &TrainStats,
    form: BracketForm,
) -> Result<WeightVector> {
    if rho.len() != y.len() {
        return Err(DbaError::LengthMismatch {
            expected: y.len(),
            got: rho.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= stats.n_classes()) {
        return Err(DbaError::Domain(format!("label {bad} out of range")));
    }
    let values = rho
        .values()
        .iter()
        .zip(y)
        .map(|(&r, &c)| 1.0 / theorem1_inverse_weight(r, c, stats, form))
        .collect();
    WeightVector::new(values, Provenance::Theorem1)
}

/// Validation-to-test ratio `p_te / p_va`, zero outside the test support.
pub fn z_ratio(p_va: &JointTable, p_te: &JointTable) -> Result<Vec<Vec<f64>>> {
    density_ratio(p_te, p_va)
}

/// Entrywise `num / den` with zero where `num` is zero.
pub(crate) fn density_ratio(num: &JointTable, den: &JointTable) -> Result<Vec<Vec<f64>>> {
    let (k, l) = num.shape();
    if den.shape() != (k, l) {
        return Err(DbaError::DimensionMismatch {
            expected: k * l,
            got: den.shape().0 * den.shape().1,
        });
    }
    let mut out = vec![vec![0.0; l]; k];
    for x in 0..k {
        for y in 0..l {
            let (n, d) = (num.get(x, y), den.get(x, y));
            if n > 0.0 {
                if d <= 0.0 {
                    return Err(DbaError::SupportViolation { x, y });
                }
                out[x][y] = n / d;
            }
        }
    }
    Ok(out)
}

/// ReWeight baseline: `1 / (L * p_hat(y))`.
pub fn class_balance_weight(dataset: &Dataset) -> Result<WeightVector> {
    if dataset.is_empty() {
        return Err(DbaError::EmptyDataset);
    }
    let counts = dataset.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(DbaError::ZeroCountClass { class });
    }
    let n = dataset.len() as f64;
    let l = dataset.n_classes() as f64;
    let values = dataset
        .samples()
        .iter()
        .map(|s| n / (l * counts[s.y] as f64))
        .collect();
    WeightVector::new(values, Provenance::ClassBalance)
}

/// Group-balanced weights `1 / (L^2 * p_hat(y, s))`.
pub fn group_balance_weight(dataset: &Dataset) -> Result<WeightVector> {
    if dataset.is_empty() {
        return Err(DbaError::EmptyDataset);
    }
    if !dataset.attributes_known() {
        return Err(DbaError::UnknownAttributes);
    }
    let l = dataset.n_classes();
    let mut counts = vec![vec![0usize; l]; l];
    for s in dataset.samples() {
        counts[s.y][s.s.expect("attributes known")] += 1;
    }
    for (y, row) in counts.iter().enumerate() {
        if let Some(s) = row.iter().position(|&c| c == 0) {
            return Err(DbaError::ZeroCountGroup { y, s });
        }
    }
    let n = dataset.len() as f64;
    let cells = (l * l) as f64;
    let values = dataset
        .samples()
        .iter()
        .map(|s| n / (cells * counts[s.y][s.s.expect("attributes known")] as f64))
        .collect();
    WeightVector::new(values, Provenance::GroupBalance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitAdjustWeights {
    pub weights: WeightVector,
    /// Number of entries raised to [`RHO_FLOOR`] before inversion.
    pub clamped: usize,
}

/// Majority-only, uniform-label weight `1 / (L * p(y, s = y | x))`.
pub fn logit_adjust_weight(
    joint_posterior: &[f64],
    n_classes: usize,
) -> Result<LogitAdjustWeights> {
    let l = n_classes as f64;
    let mut clamped = 0;
    let mut values = Vec::with_capacity(joint_posterior.len());
    for (i, &p) in joint_posterior.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DbaError::Domain(format!(
                "joint posterior[{i}] = {p} outside (0, 1]"
            )));
        }
        let p = if p < RHO_FLOOR {
            clamped += 1;
            RHO_FLOOR
        } else {
            p
        };
        values.push(1.0 / (l * p));
    }
    Ok(LogitAdjustWeights {
        weights: WeightVector::new(values, Provenance::LogitAdjust)?,
        clamped,
    })
}

/// Per-sample three-term objective `g * (log q + log p) + g * log(L * g)`,
/// which equals `g * log q` identically.
pub fn decomposed_objective(
    q_loglik: &[f64],
    joint_posterior: &[f64],
    n_classes: usize,
) -> Result<Vec<f64>> {
    if q_loglik.len() != joint_posterior.len() {
        return Err(DbaError::LengthMismatch {
            expected: joint_posterior.len(),
            got: q_loglik.len(),
        });
    }
    let g = logit_adjust_weight(joint_posterior, n_classes)?;
    let l = n_classes as f64;
    Ok(q_loglik
        .iter()
        .zip(joint_posterior)
        .zip(g.weights.values())
        .map(|((&lq, &p), &g)| g * (lq + p.max(RHO_FLOOR).ln()) + g * (l * g).ln())
        .collect())
}

/// Augmentation-class weight `1 / ((lambda0 + lambda1) * p(x | train))`.
pub fn augmentation_weight(lam0: f64, lam1: f64, p_x_tr: f64) -> Result<f64> {
    if !(lam0 >= 0.0 && lam1 >= 0.0) || !(lam0.is_finite() && lam1.is_finite()) {
        return Err(DbaError::Domain(format!(
            "lambdas must be nonnegative, got ({lam0}, {lam1})"
        )));
    }
    if lam0 + lam1 == 0.0 {
        return Err(DbaError::Domain("lambda0 and lambda1 are both zero".into()));
    }
    if !(p_x_tr > 0.0) {
        return Err(DbaError::Domain(format!(
            "p(x | train) = {p_x_tr} must be positive"
        )));
    }
    Ok(1.0 / ((lam0 + lam1) * p_x_tr))
}

/// `(1/n) * sum_i w_i * loglik_i`, summed left to right.
pub fn weighted_loglik(loglik: &[f64], weights: &[f64]) -> Result<f64> {
    if loglik.is_empty() {
        return Err(DbaError::EmptyInput);
    }
    if loglik.len() != weights.len() {
        return Err(DbaError::LengthMismatch {
            expected: loglik.len(),
            got: weights.len(),
        });
    }
    let total: f64 = loglik.iter().zip(weights).map(|(l, w)| w * l).sum();
    Ok(total / loglik.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetRole, Sample};
    use approx::assert_relative_eq;

    fn stats(p_m0: f64, p_y: Vec<f64>) -> TrainStats {
        TrainStats::new(p_m0, p_y, 1.0).unwrap()
    }

    #[test]
    fn theorem1_majority_heavy_at_rho_one() {
        let s = stats(0.005, vec![0.1; 10]);
        let inv = theorem1_inverse_weight(1.0, 3, &s, BracketForm::Corrected);
        assert_relative_eq!(inv, 9.955, max_relative = 1e-12);
        let g = theorem1_weight(
            &SpuriousPosteriorVector::exact(vec![1.0]).unwrap(),
            &[3],
            &s,
        )
        .unwrap();
        assert_relative_eq!(g.values()[0], 1.0 / 9.955, max_relative = 1e-12);
    }

    #[test]
    fn theorem1_minority_only_is_one() {
        let s = stats(1.0, vec![0.3, 0.7]);
        for rho in [RHO_FLOOR, 0.2, 0.9, 1.0] {
            let g = theorem1_weight(
                &SpuriousPosteriorVector::exact(vec![rho]).unwrap(),
                &[1],
                &s,
            )
            .unwrap();
            assert_eq!(g.values()[0], 1.0);
        }
    }

    #[test]
    fn theorem1_worked_cell() {
        let s = stats(0.2, vec![0.5, 0.5]);
        let rho = 0.405 / 0.41;
        assert_relative_eq!(
            theorem1_inverse_weight(rho, 0, &s, BracketForm::Corrected),
            1.64,
            max_relative = 1e-12
        );
        let g = 1.0 / theorem1_inverse_weight(0.987805, 0, &s, BracketForm::Corrected);
        assert_relative_eq!(g, 0.609756, max_relative = 1e-5);
        let g_main = 1.0 / theorem1_inverse_weight(rho, 0, &s, BracketForm::MainText);
        assert_relative_eq!(g_main, 0.62162, max_relative = 1e-5);
    }

    #[test]
    fn theorem1_rejects_length_mismatch() {
        let s = stats(0.2, vec![0.5, 0.5]);
        let rho = SpuriousPosteriorVector::exact(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            theorem1_weight(&rho, &[0], &s),
            Err(DbaError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn posterior_clamp_and_exact() {
        let r = SpuriousPosteriorVector::clamped(vec![0.0, 1e-9, 0.5, 1.2]).unwrap();
        assert_eq!(r.values(), &[RHO_FLOOR, RHO_FLOOR, 0.5, 1.0]);
        assert!(SpuriousPosteriorVector::exact(vec![0.0]).is_err());
        assert!(SpuriousPosteriorVector::clamped(vec![f64::NAN]).is_err());
    }

    fn dataset(cells: &[(usize, usize, usize)]) -> Dataset {
        let mut samples = Vec::new();
        for &(y, s, count) in cells {
            for _ in 0..count {
                samples.push(Sample::new(vec![0.0], y, Some(s), None));
            }
        }
        Dataset::new(samples, DatasetRole::Train, 2, 1, 0, None).unwrap()
    }

    #[test]
    fn class_balance() {
        let uniform = dataset(&[(0, 0, 5), (1, 1, 5)]);
        assert!(class_balance_weight(&uniform)
            .unwrap()
            .values()
            .iter()
            .all(|&w| w == 1.0));
        let skewed = dataset(&[(0, 0, 75), (1, 1, 25)]);
        let w = class_balance_weight(&skewed).unwrap();
        assert_relative_eq!(w.values()[0], 1.0 / 1.5, max_relative = 1e-12);
        assert_relative_eq!(w.values()[99], 2.0, max_relative = 1e-12);
        let single = dataset(&[(0, 0, 4)]);
        assert!(matches!(
            class_balance_weight(&single),
            Err(DbaError::ZeroCountClass { class: 1 })
        ));
    }

    #[test]
    fn group_balance() {
        let uniform = dataset(&[(0, 0, 3), (0, 1, 3), (1, 0, 3), (1, 1, 3)]);
        assert!(group_balance_weight(&uniform)
            .unwrap()
            .values()
            .iter()
            .all(|&w| (w - 1.0).abs() < 1e-15));
        let skewed = dataset(&[(0, 0, 45), (0, 1, 5), (1, 0, 5), (1, 1, 45)]);
        let w = group_balance_weight(&skewed).unwrap();
        assert_relative_eq!(w.values()[0], 100.0 / 180.0, max_relative = 1e-12);
        assert_relative_eq!(w.values()[45], 5.0, max_relative = 1e-12);
        assert_relative_eq!(w.values()[50], 5.0, max_relative = 1e-12);
        let missing = dataset(&[(0, 0, 3), (0, 1, 3), (1, 1, 3)]);
        assert!(matches!(
            group_balance_weight(&missing),
            Err(DbaError::ZeroCountGroup { y: 1, s: 0 })
        ));
        let unknown = Dataset::new(
            vec![Sample::new(vec![0.0], 0, None, None)],
            DatasetRole::Train,
            2,
            1,
            0,
            None,
        )
        .unwrap();
        assert!(matches!(
            group_balance_weight(&unknown),
            Err(DbaError::UnknownAttributes)
        ));
    }

    #[test]
    fn logit_adjust() {
        let w = logit_adjust_weight(&[0.1], 10).unwrap();
        assert_relative_eq!(w.weights.values()[0], 1.0, max_relative = 1e-12);
        let w = logit_adjust_weight(&[0.9], 2).unwrap();
        assert_relative_eq!(w.weights.values()[0], 1.0 / 1.8, max_relative = 1e-12);
        let w = logit_adjust_weight(&[1e-9], 2).unwrap();
        assert_relative_eq!(w.weights.values()[0], 5e5, max_relative = 1e-12);
        assert_eq!(w.clamped, 1);
        assert!(logit_adjust_weight(&[0.0], 2).is_err());
        assert!(logit_adjust_weight(&[-0.1], 2).is_err());
    }

    #[test]
    fn decomposed_objective_cases() {
        let v = decomposed_objective(&[-1.0], &[0.25], 4).unwrap();
        assert_relative_eq!(v[0], -1.0, max_relative = 1e-12);
        let v = decomposed_objective(&[-0.5], &[0.9], 2).unwrap();
        let g = 1.0 / 1.8;
        assert!((v[0] - g * -0.5).abs() < 1e-12);
        assert_relative_eq!(v[0], -0.277_777_777_777_777_8, max_relative = 1e-12);
        assert!(decomposed_objective(&[-0.5, -1.0], &[0.9], 2).is_err());
    }

    #[test]
    fn augmentation() {
        assert_relative_eq!(
            augmentation_weight(0.4, 1.2, 0.4).unwrap(),
            1.5625,
            max_relative = 1e-12
        );
        assert_eq!(augmentation_weight(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert!(augmentation_weight(0.0, 0.0, 1.0).is_err());
        assert!(augmentation_weight(-1.0, 2.0, 1.0).is_err());
        assert!(augmentation_weight(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn weighted_loglik_cases() {
        assert_eq!(weighted_loglik(&[-1.0, -3.0], &[1.0, 1.0]).unwrap(), -2.0);
        assert_eq!(weighted_loglik(&[-1.0, -2.0], &[2.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            weighted_loglik(&[], &[]),
            Err(DbaError::EmptyInput)
        ));
        assert!(matches!(
            weighted_loglik(&[-1.0], &[1.0, 2.0]),
            Err(DbaError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weight_vector_rejects_nonpositive() {
        assert!(WeightVector::new(vec![1.0, 0.0], Provenance::Ones).is_err());
        assert!(WeightVector::new(vec![f64::INFINITY], Provenance::Ones).is_err());
        let w = WeightVector::new(vec![1.0, 3.0], Provenance::ClassBalance)
            .unwrap()
            .self_normalized();
        assert_eq!(w.values(), &[0.5, 1.5]);
    }
}
