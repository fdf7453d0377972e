//! Samples, datasets and the statistics derived from them.
//!
//! Every type here is immutable once built. Constructors validate the
//! invariants (labels in range, finite features, homogeneous attribute
//! availability) so downstream code can rely on them without re-checking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DbaError, Result};
use crate::eval::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Train,
    Val,
    Test,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::Train => "train",
            DatasetRole::Val => "val",
            DatasetRole::Test => "test",
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetRole {
    type Err = DbaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetRole::Train),
            "val" => Ok(DatasetRole::Val),
            "test" => Ok(DatasetRole::Test),
            other => Err(DbaError::Config(format!("unknown dataset role `{other}`"))),
        }
    }
}

/// Training-set subpopulation tag. `Minority` (m0) shares the test-set law,
/// `Majority` (m1) has its attribute pinned to the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Minority,
    Majority,
}

impl Group {
    pub fn code(self) -> i64 {
        match self {
            Group::Minority => 0,
            Group::Majority => 1,
        }
    }

    pub fn from_code(code: i64) -> Result<Option<Self>> {
        match code {
            -1 => Ok(None),
            0 => Ok(Some(Group::Minority)),
            1 => Ok(Some(Group::Majority)),
            other => Err(DbaError::InvalidData(format!(
                "group code {other} not in {{-1, 0, 1}}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Spurious attribute; `None` when unobserved.
    pub s: Option<usize>,
    pub m: Option<Group>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize, s: Option<usize>, m: Option<Group>) -> Self {
        Sample { x, y, s, m }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    role: DatasetRole,
    n_classes: usize,
    dim: usize,
    seed: u64,
    spec_digest: Option<String>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        role: DatasetRole,
        n_classes: usize,
        dim: usize,
        seed: u64,
        spec_digest: Option<String>,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(DbaError::InvalidData(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let attrs_known = samples.first().map(|s| s.s.is_some());
        for (i, sample) in samples.iter().enumerate() {
            if sample.x.len() != dim {
                return Err(DbaError::DimensionMismatch {
                    expected: dim,
                    got: sample.x.len(),
                });
            }
            if sample.y >= n_classes {
                return Err(DbaError::InvalidData(format!(
                    "sample {i}: label {} out of range [0, {n_classes})",
                    sample.y
                )));
            }
            match sample.s {
                Some(s) if s >= n_classes => {
                    return Err(DbaError::InvalidData(format!(
                        "sample {i}: attribute {s} out of range [0, {n_classes})"
                    )))
                }
                _ => {}
            }
            if Some(sample.s.is_some()) != attrs_known {
                return Err(DbaError::InvalidData(
                    "attribute availability must be homogeneous across samples".into(),
                ));
            }
            if sample.x.iter().any(|v| !v.is_finite()) {
                return Err(DbaError::InvalidData(format!(
                    "sample {i}: non-finite feature"
                )));
            }
        }
        Ok(Dataset {
            samples,
            role,
            n_classes,
            dim,
            seed,
            spec_digest,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec_digest(&self) -> Option<&str> {
        self.spec_digest.as_deref()
    }

    /// True when every sample carries its attribute (the dataset is never mixed).
    pub fn attributes_known(&self) -> bool {
        self.samples.first().is_some_and(|s| s.s.is_some())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    /// Copy with a different role tag; the samples are unchanged.
    pub fn with_role(&self, role: DatasetRole) -> Dataset {
        Dataset {
            role,
            ..self.clone()
        }
    }

    /// New dataset made of the samples at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.shallow()
        }
    }

    /// Same metadata, new samples. Samples are validated.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Dataset> {
        Dataset::new(
            samples,
            self.role,
            self.n_classes,
            self.dim,
            self.seed,
            self.spec_digest.clone(),
        )
    }

    fn shallow(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            role: self.role,
            n_classes: self.n_classes,
            dim: self.dim,
            seed: self.seed,
            spec_digest: self.spec_digest.clone(),
        }
    }
}

/// Inputs of the closed-form train-to-test weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    p_m0: f64,
    p_y: Vec<f64>,
    n_classes: usize,
    tau: f64,
}

impl TrainStats {
    pub fn new(p_m0: f64, p_y: Vec<f64>, tau: f64) -> Result<Self> {
        let n_classes = p_y.len();
        if n_classes < 2 {
            return Err(DbaError::Domain(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if !(0.0..=1.0).contains(&p_m0) {
            return Err(DbaError::Domain(format!("p_m0 = {p_m0} not in [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DbaError::Domain(format!("tau = {tau} must be positive")));
        }
        if p_y.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(DbaError::Domain(
                "every class prior must be positive".into(),
            ));
        }
        let total: f64 = p_y.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DbaError::Domain(format!(
                "class prior sums to {total}, not 1"
            )));
        }
        Ok(TrainStats {
            p_m0,
            p_y,
            n_classes,
            tau,
        })
    }

    pub fn p_m0(&self) -> f64 {
        self.p_m0
    }

    pub fn p_m1(&self) -> f64 {
        1.0 - self.p_m0
    }

    pub fn p_y(&self) -> &[f64] {
        &self.p_y
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Default minority fraction used when the training composition is unknown.
pub const DEFAULT_P_M0: f64 = 0.85;

/// Empirical class frequencies of `dataset` (no smoothing) together with the
/// caller-supplied minority fraction and temperature.
pub fn compute_label_stats(dataset: &Dataset, p_m0: f64, tau: f64) -> Result<TrainStats> {
    if dataset.is_empty() {
        return Err(DbaError::EmptyDataset);
    }
    let counts = dataset.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(DbaError::ZeroCountClass { class });
    }
    let n = dataset.len() as f64;
    let p_y: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    TrainStats::new(p_m0, p_y, tau)
}

/// Partition `dataset` by a seeded permutation into pieces whose sizes follow
/// `fractions` (largest-remainder rounding, so each size is within 1 of
/// `n * fraction`).
pub fn split_dataset(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(DbaError::BadFractions("no fractions given".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(DbaError::BadFractions("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DbaError::BadFractions(format!(
            "fractions sum to {total}, not 1"
        )));
    }

    let n = dataset.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // stable sort keeps the earlier piece first on equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        out.push(dataset.select(&perm[start..start + size]));
        start += size;
    }
    Ok(out)
}

/// One (method, seed) cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub config: serde_json::Value,
    /// Keyed by dataset role name.
    pub metrics: BTreeMap<String, Metrics>,
    pub seconds: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(ys: &[usize], n_classes: usize) -> Dataset {
        let samples = ys
            .iter()
            .map(|&y| Sample::new(vec![y as f64], y, None, None))
            .collect();
        Dataset::new(samples, DatasetRole::Train, n_classes, 1, 0, None).unwrap()
    }

    #[test]
    fn label_stats_symmetric() {
        let stats = compute_label_stats(&labelled(&[0, 0, 1, 1], 2), 0.5, 1.0).unwrap();
        assert_eq!(stats.p_y(), &[0.5, 0.5]);
        assert_eq!(stats.p_m1(), 0.5);
    }

    #[test]
    fn label_stats_frequency() {
        let mut ys = vec![0; 9];
        ys.push(1);
        let stats = compute_label_stats(&labelled(&ys, 2), 0.5, 1.0).unwrap();
        assert_eq!(stats.p_y(), &[0.9, 0.1]);
    }

    #[test]
    fn label_stats_rejects_missing_class() {
        let err = compute_label_stats(&labelled(&[0, 0, 0], 2), 0.5, 1.0).unwrap_err();
        assert!(matches!(err, DbaError::ZeroCountClass { class: 1 }));
    }

    #[test]
    fn label_stats_rejects_empty_and_bad_params() {
        assert!(matches!(
            compute_label_stats(&labelled(&[], 2), 0.5, 1.0),
            Err(DbaError::EmptyDataset)
        ));
        assert!(compute_label_stats(&labelled(&[0, 1], 2), 1.5, 1.0).is_err());
        assert!(compute_label_stats(&labelled(&[0, 1], 2), 0.5, 0.0).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_attributes() {
        let samples = vec![
            Sample::new(vec![0.0], 0, Some(0), None),
            Sample::new(vec![0.0], 1, None, None),
        ];
        assert!(Dataset::new(samples, DatasetRole::Train, 2, 1, 0, None).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_and_nan() {
        let bad_y = vec![Sample::new(vec![0.0], 2, None, None)];
        assert!(Dataset::new(bad_y, DatasetRole::Train, 2, 1, 0, None).is_err());
        let nan = vec![Sample::new(vec![f64::NAN], 0, None, None)];
        assert!(Dataset::new(nan, DatasetRole::Train, 2, 1, 0, None).is_err());
        let wrong_dim = vec![Sample::new(vec![0.0, 1.0], 0, None, None)];
        assert!(Dataset::new(wrong_dim, DatasetRole::Train, 2, 1, 0, None).is_err());
    }

    #[test]
    fn split_even_and_uneven() {
        let ds = labelled(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2);
        let halves = split_dataset(&ds, &[0.5, 0.5], 1).unwrap();
        assert_eq!(
            halves.iter().map(Dataset::len).collect::<Vec<_>>(),
            vec![5, 5]
        );
        let parts = split_dataset(&ds, &[0.7, 0.3], 1).unwrap();
        assert_eq!(
            parts.iter().map(Dataset::len).collect::<Vec<_>>(),
            vec![7, 3]
        );
        assert_eq!(parts, split_dataset(&ds, &[0.7, 0.3], 1).unwrap());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = labelled(&[0, 1], 2);
        assert!(matches!(
            split_dataset(&ds, &[0.5, 0.4], 0),
            Err(DbaError::BadFractions(_))
        ));
        assert!(matches!(
            split_dataset(&ds, &[1.5, -0.5], 0),
            Err(DbaError::BadFractions(_))
        ));
        assert!(matches!(
            split_dataset(&ds, &[], 0),
            Err(DbaError::BadFractions(_))
        ));
    }
}
