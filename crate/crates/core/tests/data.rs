use ibflow::data::{gen_sparse_regression, population_error, Dataset};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Empirical E[(y − wᵀx)²] on fresh draws from the generator's model.
fn monte_carlo_error(w: &DVector<f64>, ds: &Dataset, samples: usize, seed: u64) -> f64 {
    let beta = ds.beta_star.as_ref().unwrap();
    let sd = ds.noise_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diff = beta - w;
    let mut total = 0.0;
    for _ in 0..samples {
        let mut pred = 0.0;
        for i in 0..diff.len() {
            pred += diff[i] * rng.sample::<f64, _>(StandardNormal);
        }
        let e = pred + sd * rng.sample::<f64, _>(StandardNormal);
        total += e * e;
    }
    total / samples as f64
}

#[test]
fn population_error_matches_monte_carlo() {
    let ds = gen_sparse_regression(10, 8, 3, 0.1, 4).unwrap();
    let zero = DVector::zeros(8);
    let mc = monte_carlo_error(&zero, &ds, 1_000_000, 1);
    let exact = population_error(&zero, &ds).unwrap();
    assert!((exact - 1.01).abs() < 1e-12);
    assert!((mc - exact).abs() <= 1e-2 * exact, "mc {mc} exact {exact}");

    let clean = gen_sparse_regression(10, 8, 3, 0.0, 4).unwrap();
    let mut w = clean.beta_star.clone().unwrap();
    w[0] += 1.0;
    let mc = monte_carlo_error(&w, &clean, 1_000_000, 2);
    assert!((population_error(&w, &clean).unwrap() - 1.0).abs() < 1e-12);
    assert!((mc - 1.0).abs() <= 1e-2, "mc {mc}");
}

#[test]
fn noiseless_labels_interpolate_truth() {
    let ds = gen_sparse_regression(30, 50, 5, 0.0, 9).unwrap();
    let beta = ds.beta_star.as_ref().unwrap();
    let fit = ds.x.tr_mul(beta);
    assert!((fit - &ds.y).norm() <= 1e-12 * ds.y.norm());
}

#[test]
fn seeds_change_samples() {
    let a = gen_sparse_regression(5, 5, 2, 0.1, 0).unwrap();
    let b = gen_sparse_regression(5, 5, 2, 0.1, 1).unwrap();
    assert_ne!(a.x, b.x);
    assert_eq!(a, gen_sparse_regression(5, 5, 2, 0.1, 0).unwrap());
}

#[test]
fn csv_export_round_trips() {
    let ds = gen_sparse_regression(4, 3, 2, 0.1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_csv(dir.path()).unwrap();
    let rows = |name: &str| -> Vec<Vec<f64>> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let xs = rows("X.csv");
    let ys = rows("y.csv");
    assert_eq!(xs.len(), 3);
    for (i, row) in xs.iter().enumerate() {
        assert_eq!(
            row.as_slice(),
            ds.x.row(i).iter().copied().collect::<Vec<_>>()
        );
    }
    for (n, row) in ys.iter().enumerate() {
        assert_eq!(row[0], ds.y[n]);
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("dataset.json")).unwrap())
            .unwrap();
    assert_eq!(meta["seed"], 5);
}

proptest! {
    #[test]
    fn excess_error_is_squared_distance(seed in 0u64..500, scale in 0.0f64..3.0) {
        let ds = gen_sparse_regression(6, 7, 3, 0.2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let w = DVector::from_fn(7, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let beta = ds.beta_star.as_ref().unwrap();
        let excess = population_error(&w, &ds).unwrap() - ds.noise_var;
        let dist = (&w - beta).norm_squared();
        prop_assert!((excess - dist).abs() <= 1e-12 * (1.0 + dist));
    }
}
