use infominima::experiments::{run_scenario, ScenarioConfig, ScenarioKind, SyntheticSpec};
use infominima::fisher::SamplerConfig;
use infominima::regularizer::TrainSchedule;

fn config() -> ScenarioConfig {
    ScenarioConfig {
        scenario: ScenarioKind::Confusion,
        levels: vec![0.0, 0.05, 0.1],
        repeats: 3,
        data: SyntheticSpec { n_train: 100, n_test: 200, d: 10, k: 2, noise_std: 1.0, ..SyntheticSpec::default() },
        hidden: vec![32],
        schedule: TrainSchedule { epochs: 80, batch_size: 16, ..TrainSchedule::default() },
        sampler: SamplerConfig { n_prime: 20, trials: 4, seed: 0 },
        seed: 5,
        ..ScenarioConfig::default()
    }
}

/// Spearman ρ as the Pearson correlation of average ranks, written independently
/// of the library's statistics helpers.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn rank(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&u| u < v).count() as f64;
                let equal = x.iter().filter(|&&u| u == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (ra, rb) = (rank(a), rank(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn emitted_csv_reproduces_statistics_and_bytes() {
    let cfg = config();
    let res = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    res.write(dir.path()).unwrap();
    let csv_path = dir.path().join("confusion.csv");
    let bytes = std::fs::read(&csv_path).unwrap();

    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "scenario", "level", "repeat", "seed", "final_train_loss", "final_train_acc", "test_err", "gamma_hat",
            "robustness", "frobenius", "spectral_radius", "converged"
        ]
    );
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    let kept: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[col("converged")] == "true").collect();
    let num = |r: &csv::StringRecord, name: &str| r[col(name)].parse::<f64>().unwrap();

    let gamma: Vec<f64> = kept.iter().map(|r| num(r, "gamma_hat")).collect();
    let err: Vec<f64> = kept.iter().map(|r| num(r, "test_err")).collect();
    let rho = res.rank_correlations["gamma_hat"].unwrap();
    assert!((rho - spearman(&gamma, &err)).abs() < 1e-12);

    for agg in &res.aggregates {
        let xs: Vec<f64> = kept.iter().filter(|r| num(r, "level") == agg.level).map(|r| num(r, "gamma_hat")).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        assert!((agg.gamma_hat.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((agg.gamma_hat.std - std).abs() <= 1e-12 * std.max(1.0));
    }

    let again = tempfile::tempdir().unwrap();
    run_scenario(&cfg).unwrap().write(again.path()).unwrap();
    for name in ["confusion.csv", "confusion.json"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn paired_runs_share_seeds_across_levels() {
    let res = run_scenario(&config()).unwrap();
    for repeat in 0..3 {
        let seeds: Vec<u64> = res.rows.iter().filter(|r| r.repeat == repeat).map(|r| r.seed).collect();
        assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    }
}
