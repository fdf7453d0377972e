use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dba_core::data::DatasetRole;
use dba_core::oracle::{exact_joint, random_discrete_spec};
use dba_core::synthgen::{one_hot_index, GaussianGenSpec, GenSpec};
use dba_core::trainer::{
    fit_unweighted, fit_weighted, resample_dataset, select_model, SelectionCriterion, SoftmaxModel,
    TrainConfig,
};
use dba_core::weights::{group_balance_weight, z_ratio};
use dba_core::Dataset;

fn gaussian_data(n: usize, seed: u64) -> Dataset {
    let spec = GaussianGenSpec::axis_aligned(
        3,
        3,
        3,
        2.0,
        2.5,
        1.0,
        0.6,
        0.1,
        vec![0.4, 0.35, 0.25],
        seed,
    )
    .unwrap();
    GenSpec::Gaussian(spec)
        .generate(n, DatasetRole::Train)
        .unwrap()
}

#[test]
fn scaling_weights_and_step_size_cancels() {
    let data = gaussian_data(500, 1);
    let w: Vec<f64> = (0..data.len())
        .map(|i| 0.5 + (i % 7) as f64 / 3.0)
        .collect();
    for hidden in [0, 6] {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 32,
            seed: 2,
            hidden,
            weight_decay: 0.0,
        };
        let base = fit_weighted(&data, &w, &cfg).unwrap().model;
        let k = 8.0;
        let scaled_w: Vec<f64> = w.iter().map(|v| v * k).collect();
        let scaled_cfg = TrainConfig {
            learning_rate: cfg.learning_rate / k,
            ..cfg.clone()
        };
        let scaled = fit_weighted(&data, &scaled_w, &scaled_cfg).unwrap().model;
        for (a, b) in base.params().iter().zip(scaled.params()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn unit_weights_reproduce_erm_bit_for_bit() {
    let data = gaussian_data(400, 3);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 5,
        ..TrainConfig::hidden(5)
    };
    let ones = vec![1.0; data.len()];
    assert_eq!(
        fit_weighted(&data, &ones, &cfg).unwrap(),
        fit_unweighted(&data, &cfg).unwrap()
    );
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = gaussian_data(400, 4);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = fit_unweighted(&data, &cfg).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| fit_unweighted(&data, &cfg).unwrap());
    assert_eq!(a, b);
    let other = fit_unweighted(&data, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.model.params(), other.model.params());
}

#[test]
fn unit_selection_weights_match_unweighted_choice() {
    let data = gaussian_data(600, 6);
    let val = gaussian_data(300, 7);
    let fit = fit_unweighted(
        &data,
        &TrainConfig {
            epochs: 12,
            learning_rate: 0.5,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let ones = vec![1.0; val.len()];
    for criterion in [
        SelectionCriterion::Loglik,
        SelectionCriterion::Accuracy,
        SelectionCriterion::Final,
    ] {
        assert_eq!(
            select_model(&fit.checkpoints, &val, Some(&ones), criterion).unwrap(),
            select_model(&fit.checkpoints, &val, None, criterion).unwrap()
        );
    }
}

#[test]
fn group_balanced_resampling_is_uniform_over_groups() {
    let data = gaussian_data(40_000, 8);
    let w = group_balance_weight(&data).unwrap();
    let resampled = resample_dataset(&data, w.values(), 11).unwrap();
    let n = resampled.len() as f64;
    let mut counts = [[0.0f64; 3]; 3];
    for s in resampled.samples() {
        counts[s.y][s.s.unwrap()] += 1.0;
    }
    let p = 1.0 / 9.0;
    let se = (n * p * (1.0 - p)).sqrt();
    for c in counts.iter().flatten() {
        assert!(
            (c - n * p).abs() <= 4.0 * se,
            "group count {c}, expected {}",
            n * p
        );
    }
}

/// Expected test log-likelihood of a model on a one-hot discrete law.
fn exact_test_loglik(model: &SoftmaxModel, joint: &[Vec<f64>]) -> f64 {
    let k = joint.len();
    let mut total = 0.0;
    for (x, row) in joint.iter().enumerate() {
        let mut onehot = vec![0.0; k];
        onehot[x] = 1.0;
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                total += p * model.log_prob(&onehot, y).unwrap();
            }
        }
    }
    total
}

#[test]
fn shift_corrected_selection_tracks_the_test_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut wins = 0;
    let trials = 6;
    for _ in 0..trials {
        let spec = random_discrete_spec(&mut rng).with_p_m0(0.02);
        let train = GenSpec::Discrete(spec.clone())
            .generate(4_000, DatasetRole::Train)
            .unwrap();
        let val_spec = spec.with_p_m0(0.1).with_seed(spec.seed.wrapping_add(1));
        let val = GenSpec::Discrete(val_spec.clone())
            .generate(50_000, DatasetRole::Val)
            .unwrap();
        let test = exact_joint(&spec, DatasetRole::Test).unwrap();
        let z_table = z_ratio(&exact_joint(&val_spec, DatasetRole::Val).unwrap(), &test).unwrap();
        let z: Vec<f64> = val
            .samples()
            .iter()
            .map(|s| z_table[one_hot_index(&s.x).unwrap()][s.y])
            .collect();

        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 25,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let fit = fit_unweighted(&train, &cfg).unwrap();
        let scores: Vec<f64> = fit
            .checkpoints
            .iter()
            .map(|m| exact_test_loglik(m, test.values()))
            .collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weighted =
            select_model(&fit.checkpoints, &val, Some(&z), SelectionCriterion::Loglik).unwrap();
        let plain = select_model(&fit.checkpoints, &val, None, SelectionCriterion::Loglik).unwrap();
        assert!(
            scores[weighted] >= scores[plain] - 1e-3,
            "weighted {} vs plain {}",
            scores[weighted],
            scores[plain]
        );
        assert!(
            scores[weighted] >= best - 1e-2,
            "weighted {} vs best {best}",
            scores[weighted]
        );
        if scores[weighted] >= scores[plain] {
            wins += 1;
        }
    }
    assert!(wins >= trials - 1);
}
