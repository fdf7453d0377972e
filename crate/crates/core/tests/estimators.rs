use dba_core::data::DatasetRole;
use dba_core::estimators::{EstimatorConfig, KnownSEstimator, SameDistEstimator};
use dba_core::oracle::exact_spurious_posterior;
use dba_core::synthgen::{one_hot_index, DiscreteGenSpec, GenSpec};

/// Ranks with ties sharing their average position.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Three classes over eight symbols; each `(y, s)` column is a different
/// peaked distribution so the posterior varies across cells.
fn spec() -> DiscreteGenSpec {
    let columns: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|y| {
            (0..3)
                .map(|s| {
                    let raw: Vec<f64> = (0..8)
                        .map(|x| 1.0 + ((x * 3 + y * 5 + s * 7) % 8) as f64)
                        .collect();
                    let peak: Vec<f64> = raw
                        .iter()
                        .enumerate()
                        .map(|(x, v)| if x == 2 * s + y % 2 { v * 4.0 } else { *v })
                        .collect();
                    let total: f64 = peak.iter().sum();
                    peak.iter().map(|v| v / total).collect()
                })
                .collect()
        })
        .collect();
    DiscreteGenSpec::from_columns(0.3, vec![0.4, 0.35, 0.25], &columns, 17).unwrap()
}

#[test]
fn known_attribute_posterior_ranks_like_the_exact_posterior() {
    let spec = spec();
    let train = GenSpec::Discrete(spec.clone())
        .generate(20_000, DatasetRole::Train)
        .unwrap();
    let cfg = EstimatorConfig {
        max_epochs: 30,
        min_epochs: 30,
        target_accuracy: 1.0,
        ..EstimatorConfig::default()
    };
    let rho = KnownSEstimator::fit(&train, &cfg)
        .unwrap()
        .rho(&train)
        .unwrap();
    let table = exact_spurious_posterior(&spec).unwrap();
    let exact: Vec<f64> = train
        .samples()
        .iter()
        .map(|s| table.get(one_hot_index(&s.x).unwrap(), s.y))
        .collect();
    let r = spearman(rho.values(), &exact);
    assert!(r >= 0.9, "spearman {r}");
}

#[test]
fn same_law_estimator_is_reproducible_and_in_range() {
    let spec = spec();
    let train = GenSpec::Discrete(spec.clone())
        .generate(2_000, DatasetRole::Train)
        .unwrap();
    let val = GenSpec::Discrete(spec.with_seed(18))
        .generate(2_000, DatasetRole::Val)
        .unwrap();
    let cfg = EstimatorConfig {
        max_epochs: 10,
        ..EstimatorConfig::default()
    };
    let a = SameDistEstimator::fit(&train, &val, &cfg)
        .unwrap()
        .rho(&train)
        .unwrap();
    let b = SameDistEstimator::fit(&train, &val, &cfg)
        .unwrap()
        .rho(&train)
        .unwrap();
    assert_eq!(a, b);
    assert!(a.values().iter().all(|r| (1e-6..=1.0).contains(r)));
}

#[test]
fn spearman_helper_handles_ties() {
    assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
}
