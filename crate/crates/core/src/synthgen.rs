//! Synthetic subpopulation-shift generators.
//!
//! Both families share one law for `(m, y, s)`:
//!
//! * train / val: `m = m0` with probability `p_m0`, `y ~ p_y`, `s = y` in the
//!   majority group and `s ~ Uniform(L)` in the minority group;
//! * test: `y ~ p_y`, `s ~ Uniform(L)`, every sample tagged `m0`.
//!
//! The discrete family draws `x` from a finite alphabet through a shared
//! `p(x | y, s)` table and emits it one-hot; the Gaussian family concatenates
//! a label-driven block and an attribute-driven block.
//!
//! Each sample uses its own ChaCha stream keyed by `(seed, role, index)`, so
//! parallel and serial generation produce the same bytes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetRole, Group, Sample};
use crate::error::{DbaError, Result};

const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(DbaError::InvalidData(format!(
            "{what}: entries must be finite and nonnegative"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(DbaError::InvalidData(format!(
            "{what}: sums to {total}, not 1"
        )));
    }
    Ok(())
}

fn check_common(n_classes: usize, p_m0: f64, p_y: &[f64]) -> Result<()> {
    if n_classes < 2 {
        return Err(DbaError::InvalidData(format!(
            "L = {n_classes}, need at least 2"
        )));
    }
    if !(0.0..=1.0).contains(&p_m0) {
        return Err(DbaError::InvalidData(format!(
            "p_m0 = {p_m0} not in [0, 1]"
        )));
    }
    if p_y.len() != n_classes {
        return Err(DbaError::InvalidData(format!(
            "p_y has {} entries, L = {n_classes}",
            p_y.len()
        )));
    }
    check_simplex(p_y, "p_y")
}

fn digest_of<T: Serialize>(spec: &T) -> String {
    let bytes = serde_json::to_vec(spec).expect("specs serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn role_salt(role: DatasetRole) -> u64 {
    match role {
        DatasetRole::Train => 0x7472_6169_6e00_0001,
        DatasetRole::Val => 0x7661_6c00_0000_0002,
        DatasetRole::Test => 0x7465_7374_0000_0003,
    }
}

fn sample_rng(seed: u64, role: DatasetRole, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ role_salt(role));
    rng.set_stream(index as u64);
    rng
}

/// Draws `(m, y, s)` following the shared law.
fn draw_labels(
    rng: &mut ChaCha8Rng,
    role: DatasetRole,
    p_m0: f64,
    label_dist: &WeightedIndex<f64>,
    n_classes: usize,
) -> (Group, usize, usize) {
    match role {
        DatasetRole::Train | DatasetRole::Val => {
            let u: f64 = rng.random();
            let y = label_dist.sample(rng);
            if u < p_m0 {
                (Group::Minority, y, rng.random_range(0..n_classes))
            } else {
                (Group::Majority, y, y)
            }
        }
        DatasetRole::Test => {
            let y = label_dist.sample(rng);
            (Group::Minority, y, rng.random_range(0..n_classes))
        }
    }
}

/// Fully enumerable generative model over a finite `x` alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGenSpec {
    #[serde(rename = "L")]
    pub n_classes: usize,
    #[serde(rename = "K")]
    pub alphabet: usize,
    pub p_m0: f64,
    pub p_y: Vec<f64>,
    /// `cond_table[x][y][s] = p(x | y, s)`, shared by every role.
    pub cond_table: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

impl DiscreteGenSpec {
    pub fn validate(&self) -> Result<()> {
        check_common(self.n_classes, self.p_m0, &self.p_y)?;
        let (k, l) = (self.alphabet, self.n_classes);
        if k == 0 {
            return Err(DbaError::InvalidData("K must be at least 1".into()));
        }
        if self.cond_table.len() != k
            || self
                .cond_table
                .iter()
                .any(|row| row.len() != l || row.iter().any(|c| c.len() != l))
        {
            return Err(DbaError::InvalidData(format!(
                "cond_table must be {k}x{l}x{l}"
            )));
        }
        for y in 0..l {
            for s in 0..l {
                check_simplex(&self.column(y, s), &format!("p(x | y={y}, s={s})"))?;
            }
        }
        Ok(())
    }

    #[inline]
    pub fn cond(&self, x: usize, y: usize, s: usize) -> f64 {
        self.cond_table[x][y][s]
    }

    /// `p(. | y, s)` as a length-K vector.
    pub fn column(&self, y: usize, s: usize) -> Vec<f64> {
        (0..self.alphabet)
            .map(|x| self.cond_table[x][y][s])
            .collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DiscreteGenSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn with_p_m0(&self, p_m0: f64) -> Self {
        DiscreteGenSpec {
            p_m0,
            ..self.clone()
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Alphabet of size `L` where `x` is a noisy copy of the attribute:
    /// `p(x | y, s) = fidelity` when `x == s`, the rest spread evenly. The
    /// table does not depend on `y`.
    pub fn attribute_channel(
        n_classes: usize,
        fidelity: f64,
        p_m0: f64,
        p_y: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let off = (1.0 - fidelity) / (n_classes as f64 - 1.0);
        let column = |s: usize| {
            (0..n_classes)
                .map(|x| if x == s { fidelity } else { off })
                .collect::<Vec<_>>()
        };
        let columns: Vec<Vec<Vec<f64>>> = (0..n_classes)
            .map(|_| (0..n_classes).map(column).collect())
            .collect();
        Self::from_columns(p_m0, p_y, &columns, seed)
    }

    /// Build from per-`(y, s)` columns: `columns[y][s]` is `p(. | y, s)`.
    pub fn from_columns(
        p_m0: f64,
        p_y: Vec<f64>,
        columns: &[Vec<Vec<f64>>],
        seed: u64,
    ) -> Result<Self> {
        let l = p_y.len();
        let k = columns.first().and_then(|c| c.first()).map_or(0, Vec::len);
        let cond_table = (0..k)
            .map(|x| {
                (0..l)
                    .map(|y| (0..l).map(|s| columns[y][s][x]).collect())
                    .collect()
            })
            .collect();
        let spec = DiscreteGenSpec {
            n_classes: l,
            alphabet: k,
            p_m0,
            p_y,
            cond_table,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn gen_discrete(spec: &DiscreteGenSpec, n: usize, role: DatasetRole) -> Result<Dataset> {
    if n == 0 {
        return Err(DbaError::PreconditionViolation(
            "n must be at least 1".into(),
        ));
    }
    spec.validate()?;
    let l = spec.n_classes;
    let label_dist =
        WeightedIndex::new(&spec.p_y).map_err(|e| DbaError::InvalidData(e.to_string()))?;
    let x_dists = (0..l)
        .map(|y| {
            (0..l)
                .map(|s| {
                    WeightedIndex::new(spec.column(y, s))
                        .map_err(|e| DbaError::InvalidData(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(spec.seed, role, i);
            let (m, y, s) = draw_labels(&mut rng, role, spec.p_m0, &label_dist, l);
            let x_index = x_dists[y][s].sample(&mut rng);
            let mut x = vec![0.0; spec.alphabet];
            x[x_index] = 1.0;
            Sample::new(x, y, Some(s), Some(m))
        })
        .collect();
    Dataset::new(
        samples,
        role,
        l,
        spec.alphabet,
        spec.seed,
        Some(spec.digest()),
    )
}

/// Index of the hot coordinate of a one-hot discrete sample.
pub fn one_hot_index(x: &[f64]) -> Option<usize> {
    x.iter().position(|&v| v == 1.0)
}

/// Continuous analogue of a colored-digit benchmark: a label-driven block
/// followed by a (usually sharper) attribute-driven block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianGenSpec {
    #[serde(rename = "L")]
    pub n_classes: usize,
    pub d_core: usize,
    pub d_spur: usize,
    pub core_means: Vec<Vec<f64>>,
    pub spur_means: Vec<Vec<f64>>,
    pub sigma_core: f64,
    pub sigma_spur: f64,
    pub p_m0: f64,
    pub p_y: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl GaussianGenSpec {
    /// Means on scaled coordinate axes (`core_means[c] = core_scale * e_{c mod d_core}`,
    /// likewise for the attribute block).
    #[allow(clippy::too_many_arguments)]
    pub fn axis_aligned(
        n_classes: usize,
        d_core: usize,
        d_spur: usize,
        core_scale: f64,
        spur_scale: f64,
        sigma_core: f64,
        sigma_spur: f64,
        p_m0: f64,
        p_y: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let axis = |d: usize, c: usize, scale: f64| {
            let mut v = vec![0.0; d];
            if d > 0 {
                v[c % d] = scale;
            }
            v
        };
        let spec = GaussianGenSpec {
            n_classes,
            d_core,
            d_spur,
            core_means: (0..n_classes)
                .map(|c| axis(d_core, c, core_scale))
                .collect(),
            spur_means: (0..n_classes)
                .map(|c| axis(d_spur, c, spur_scale))
                .collect(),
            sigma_core,
            sigma_spur,
            p_m0,
            p_y,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.n_classes, self.p_m0, &self.p_y)?;
        if self.core_means.len() != self.n_classes || self.spur_means.len() != self.n_classes {
            return Err(DbaError::InvalidData(
                "need one core and one attribute mean per class".into(),
            ));
        }
        if self.core_means.iter().any(|m| m.len() != self.d_core)
            || self.spur_means.iter().any(|m| m.len() != self.d_spur)
        {
            return Err(DbaError::InvalidData(
                "mean vector has the wrong dimension".into(),
            ));
        }
        if self
            .core_means
            .iter()
            .chain(&self.spur_means)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(DbaError::InvalidData("means must be finite".into()));
        }
        if !(self.sigma_core > 0.0 && self.sigma_spur > 0.0) {
            return Err(DbaError::InvalidData(
                "noise scales must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_core + self.d_spur
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        GaussianGenSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn with_p_m0(&self, p_m0: f64) -> Self {
        GaussianGenSpec {
            p_m0,
            ..self.clone()
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Log-density (up to a shared constant) of the attribute block under
    /// each attribute value.
    fn spur_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let block = &x[self.d_core..];
        let two_var = 2.0 * self.sigma_spur * self.sigma_spur;
        self.spur_means
            .iter()
            .map(|mu| {
                -block
                    .iter()
                    .zip(mu)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / two_var
            })
            .collect()
    }

    /// Training-law attribute prior given `y`, without the `p_y` factor:
    /// `p_m0 / L + (1 - p_m0) * 1{s = y}`.
    fn attr_prior(&self, y: usize, s: usize) -> f64 {
        let minority = self.p_m0 / self.n_classes as f64;
        if s == y {
            minority + (1.0 - self.p_m0)
        } else {
            minority
        }
    }

    /// Exact `p(s = y | y, x)` under the training law.
    pub fn spurious_posterior(&self, x: &[f64], y: usize) -> f64 {
        let logs = self.spur_log_densities(x);
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut hit = 0.0;
        for (s, &lp) in logs.iter().enumerate() {
            let v = self.attr_prior(y, s) * (lp - top).exp();
            total += v;
            if s == y {
                hit = v;
            }
        }
        hit / total
    }

    /// Exact `p_te(x, y) / p_tr(x, y)`; the label block and class prior cancel.
    pub fn importance_weight(&self, x: &[f64], y: usize) -> f64 {
        let logs = self.spur_log_densities(x);
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = self.n_classes as f64;
        let mut test = 0.0;
        let mut train = 0.0;
        for (s, &lp) in logs.iter().enumerate() {
            let phi = (lp - top).exp();
            test += phi / l;
            train += self.attr_prior(y, s) * phi;
        }
        test / train
    }
}

pub fn gen_gaussian(spec: &GaussianGenSpec, n: usize, role: DatasetRole) -> Result<Dataset> {
    if n == 0 {
        return Err(DbaError::PreconditionViolation(
            "n must be at least 1".into(),
        ));
    }
    spec.validate()?;
    let l = spec.n_classes;
    let label_dist =
        WeightedIndex::new(&spec.p_y).map_err(|e| DbaError::InvalidData(e.to_string()))?;
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(spec.seed, role, i);
            let (m, y, s) = draw_labels(&mut rng, role, spec.p_m0, &label_dist, l);
            let mut x = Vec::with_capacity(spec.dim());
            for &mu in &spec.core_means[y] {
                let z: f64 = rng.sample(StandardNormal);
                x.push(mu + spec.sigma_core * z);
            }
            for &mu in &spec.spur_means[s] {
                let z: f64 = rng.sample(StandardNormal);
                x.push(mu + spec.sigma_spur * z);
            }
            Sample::new(x, y, Some(s), Some(m))
        })
        .collect();
    Dataset::new(samples, role, l, spec.dim(), spec.seed, Some(spec.digest()))
}

/// Either generator family, as read from a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GenSpec {
    Discrete(DiscreteGenSpec),
    Gaussian(GaussianGenSpec),
}

impl GenSpec {
    pub fn generate(&self, n: usize, role: DatasetRole) -> Result<Dataset> {
        match self {
            GenSpec::Discrete(s) => gen_discrete(s, n, role),
            GenSpec::Gaussian(s) => gen_gaussian(s, n, role),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            GenSpec::Discrete(s) => s.seed,
            GenSpec::Gaussian(s) => s.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            GenSpec::Discrete(s) => GenSpec::Discrete(s.with_seed(seed)),
            GenSpec::Gaussian(s) => GenSpec::Gaussian(s.with_seed(seed)),
        }
    }

    pub fn p_m0(&self) -> f64 {
        match self {
            GenSpec::Discrete(s) => s.p_m0,
            GenSpec::Gaussian(s) => s.p_m0,
        }
    }

    pub fn p_y(&self) -> &[f64] {
        match self {
            GenSpec::Discrete(s) => &s.p_y,
            GenSpec::Gaussian(s) => &s.p_y,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.p_y().len()
    }

    pub fn with_p_m0(&self, p_m0: f64) -> Self {
        match self {
            GenSpec::Discrete(s) => GenSpec::Discrete(s.with_p_m0(p_m0)),
            GenSpec::Gaussian(s) => GenSpec::Gaussian(s.with_p_m0(p_m0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GenSpec::Discrete(s) => s.validate(),
            GenSpec::Gaussian(s) => s.validate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_spec(p_m0: f64) -> DiscreteGenSpec {
        DiscreteGenSpec::attribute_channel(2, 0.9, p_m0, vec![0.5, 0.5], 3).unwrap()
    }

    #[test]
    fn majority_only_pins_attribute() {
        let ds = gen_discrete(&worked_spec(0.0), 2000, DatasetRole::Train).unwrap();
        assert!(ds
            .samples()
            .iter()
            .all(|s| s.s == Some(s.y) && s.m == Some(Group::Majority)));
    }

    #[test]
    fn group_tags_consistent() {
        let ds = gen_discrete(&worked_spec(0.3), 5000, DatasetRole::Train).unwrap();
        assert!(ds
            .samples()
            .iter()
            .filter(|s| s.m == Some(Group::Majority))
            .all(|s| s.s == Some(s.y)));
        let test = gen_discrete(&worked_spec(0.3), 100, DatasetRole::Test).unwrap();
        assert!(test.samples().iter().all(|s| s.m == Some(Group::Minority)));
    }

    #[test]
    fn discrete_is_one_hot_and_deterministic() {
        let spec = worked_spec(0.2);
        let a = gen_discrete(&spec, 300, DatasetRole::Val).unwrap();
        let b = gen_discrete(&spec, 300, DatasetRole::Val).unwrap();
        assert_eq!(a, b);
        assert!(a
            .samples()
            .iter()
            .all(|s| s.x.iter().sum::<f64>() == 1.0 && one_hot_index(&s.x).is_some()));
        let c = gen_discrete(&spec.with_seed(4), 300, DatasetRole::Val).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = worked_spec(0.2);
        spec.cond_table[0][0][0] = 0.8;
        assert!(spec.validate().is_err());
        assert!(gen_discrete(&worked_spec(0.2), 0, DatasetRole::Train).is_err());
        let mut spec = worked_spec(0.2);
        spec.p_m0 = 1.2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn gaussian_majority_only_centers_on_label_mean() {
        let spec =
            GaussianGenSpec::axis_aligned(3, 3, 3, 2.0, 5.0, 1.0, 0.01, 0.0, vec![1.0 / 3.0; 3], 9)
                .unwrap();
        let ds = gen_gaussian(&spec, 500, DatasetRole::Train).unwrap();
        for s in ds.samples() {
            assert_eq!(s.s, Some(s.y));
            for (v, mu) in s.x[3..].iter().zip(&spec.spur_means[s.y]) {
                assert!((v - mu).abs() < 0.1);
            }
        }
    }

    #[test]
    fn gaussian_noise_free_core_is_nearest_mean_separable() {
        let spec =
            GaussianGenSpec::axis_aligned(4, 4, 4, 1.0, 1.0, 1e-9, 1e-9, 0.5, vec![0.25; 4], 2)
                .unwrap();
        for role in [DatasetRole::Train, DatasetRole::Val, DatasetRole::Test] {
            let ds = gen_gaussian(&spec, 400, role).unwrap();
            let correct = ds
                .samples()
                .iter()
                .filter(|s| {
                    let nearest = (0..4)
                        .min_by(|&a, &b| {
                            let da: f64 = s.x[..4]
                                .iter()
                                .zip(&spec.core_means[a])
                                .map(|(u, v)| (u - v).powi(2))
                                .sum();
                            let db: f64 = s.x[..4]
                                .iter()
                                .zip(&spec.core_means[b])
                                .map(|(u, v)| (u - v).powi(2))
                                .sum();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    nearest == s.y
                })
                .count();
            assert_eq!(correct, 400);
        }
    }

    #[test]
    fn gaussian_exact_weight_matches_posterior_form() {
        let spec =
            GaussianGenSpec::axis_aligned(3, 2, 3, 1.0, 1.0, 1.0, 0.7, 0.1, vec![0.5, 0.3, 0.2], 1)
                .unwrap();
        let ds = gen_gaussian(&spec, 50, DatasetRole::Train).unwrap();
        for s in ds.samples() {
            let rho = spec.spurious_posterior(&s.x, s.y);
            assert!((0.0..=1.0).contains(&rho));
            assert!(spec.importance_weight(&s.x, s.y) > 0.0);
        }
    }
}
