use lmmsdp::simulation::{
    basket_delta, basket_price, run_hedging_experiment, simulate_paths, HedgingExperiment, LognormalMarket, Method,
};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[test]
fn zero_covariance_paths_are_constant() {
    let market = LognormalMarket::new(vec![0.1, 0.2], vec![vec![0.0; 2]; 2]).unwrap();
    let paths = simulate_paths(&market, 1.0, 10, 3, 1).unwrap();
    for p in &paths {
        assert_eq!(p.len(), 11);
        assert!(p.iter().all(|x| x == &vec![0.1, 0.2]));
    }
}

#[test]
fn prices_are_martingales_with_the_stated_log_covariance() {
    let market = LognormalMarket::paper();
    let n_paths = 20_000;
    let paths = simulate_paths(&market, 1.0, 4, n_paths, 99).unwrap();
    let n = market.n();
    for i in 0..n {
        let terminal: Vec<f64> = paths.iter().map(|p| p[4][i]).collect();
        let (m, sd) = mean_sd(&terminal);
        assert!((m - 0.1).abs() < 4.0 * sd / (n_paths as f64).sqrt(), "asset {i}: mean {m}");
    }
    let logs: Vec<Vec<f64>> = paths.iter().map(|p| (0..n).map(|i| (p[4][i] / p[0][i]).ln()).collect()).collect();
    let means: Vec<f64> = (0..n).map(|i| logs.iter().map(|l| l[i]).sum::<f64>() / n_paths as f64).collect();
    for i in 0..n {
        // Drift −½σᵢᵀσᵢ per unit time.
        assert!((means[i] + 0.5 * market.cov[i][i]).abs() < 4.0 * (market.cov[i][i] / n_paths as f64).sqrt());
        for j in 0..n {
            let c = logs.iter().map(|l| (l[i] - means[i]) * (l[j] - means[j])).sum::<f64>() / (n_paths as f64 - 1.0);
            let se = ((market.cov[i][i] * market.cov[j][j] + market.cov[i][j].powi(2)) / n_paths as f64).sqrt();
            assert!((c - market.cov[i][j]).abs() < 4.0 * se, "({i},{j}): {c} vs {}", market.cov[i][j]);
        }
    }
}

#[test]
fn paths_depend_only_on_seed_and_index() {
    let market = LognormalMarket::paper();
    let a = simulate_paths(&market, 1.0, 5, 6, 42).unwrap();
    let b = simulate_paths(&market, 1.0, 5, 3, 42).unwrap();
    assert_eq!(&a[..3], &b[..]);
    let c = simulate_paths(&market, 1.0, 5, 3, 43).unwrap();
    assert_ne!(&a[..3], &c[..]);
}

#[test]
fn delta_matches_finite_differences() {
    let w = [0.0, 0.0, 0.4, 0.1, 0.5];
    let x = [0.1, 0.11, 0.095, 0.102, 0.098];
    let (k, v) = (0.1, 0.006);
    let d = basket_delta(&w, &x, k, v).unwrap();
    for i in 0..5 {
        let h = 1e-6;
        let (mut up, mut dn) = (x, x);
        up[i] += h;
        dn[i] -= h;
        let fd = (basket_price(&w, &up, k, v).unwrap() - basket_price(&w, &dn, k, v).unwrap()) / (2.0 * h);
        assert!((fd - d[i]).abs() < 1e-7, "asset {i}: {fd} vs {}", d[i]);
    }
    // At expiry the delta is the exercise indicator.
    assert_eq!(basket_delta(&w, &x, 0.09, 0.0).unwrap(), w.to_vec());
    assert_eq!(basket_delta(&w, &x, 0.2, 0.0).unwrap(), vec![0.0; 5]);
    assert!(basket_delta(&w, &x[..4], k, v).is_err());
    assert!(basket_delta(&w, &x, k, -1.0).is_err());
}

fn small(paths: usize, seed: u64) -> HedgingExperiment {
    let mut e = HedgingExperiment::paper(paths, seed);
    e.threads = Some(1);
    e
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let one = run_hedging_experiment(&small(6, 8)).unwrap();
    let mut e = small(6, 8);
    e.threads = Some(4);
    let four = run_hedging_experiment(&e).unwrap();
    assert_eq!(one, four);
    let again = run_hedging_experiment(&small(6, 8)).unwrap();
    assert_eq!(one, again);
}

#[test]
fn report_has_one_row_per_method_and_path() {
    let r = run_hedging_experiment(&small(5, 2)).unwrap();
    assert_eq!(r.methods.len(), 4);
    assert_eq!(r.per_path.len(), 5);
    assert!(r.per_path.iter().all(|row| row.len() == 4 && row.iter().all(|v| v.is_finite())));
    let real = r.stats(Method::RealCovariance).unwrap();
    assert_eq!(real.mean_cov_change, 0.0);
    assert_eq!(real.fallbacks, 0);
    let hist = r.histogram(7);
    assert_eq!(hist.len(), 7);
    for m in 0..4 {
        assert_eq!(hist.iter().map(|(_, _, c)| c[m]).sum::<usize>(), 5);
    }
    assert!(r.premium > 0.0);
}

fn real_only(rebalances: usize, noise: f64) -> HedgingExperiment {
    let mut e = small(400, 17);
    e.methods = vec![Method::RealCovariance];
    e.rebalances = rebalances;
    e.noise_amplitude = noise;
    e
}

#[test]
fn hedging_error_shrinks_with_rebalancing_frequency() {
    let mut sds = Vec::new();
    for n in [33, 100, 333] {
        let r = run_hedging_experiment(&real_only(n, 0.0)).unwrap();
        let s = r.stats(Method::RealCovariance).unwrap();
        // Hedging gains have zero mean, so the book is unbiased at the true premium.
        assert!(s.mean_pnl.abs() < 4.0 * s.stdev_pnl / 20.0, "{n}: mean {}", s.mean_pnl);
        sds.push(s.stdev_pnl);
    }
    assert!(sds[0] > sds[1] && sds[1] > sds[2], "{sds:?}");
    // Discrete hedging error scales like 1/√N.
    let ratio = sds[0] / sds[2];
    assert!((2.0..4.5).contains(&ratio), "{ratio}");
}

#[test]
fn noise_does_not_affect_the_true_covariance_hedge() {
    let a = run_hedging_experiment(&real_only(33, 0.0)).unwrap();
    let b = run_hedging_experiment(&real_only(33, 0.1)).unwrap();
    assert_eq!(a.per_path, b.per_path);
}

#[test]
fn without_noise_calibrated_hedges_track_the_market() {
    let mut e = small(4, 5);
    e.noise_amplitude = 0.0;
    e.methods = vec![Method::RealCovariance, Method::SuperHedging];
    let r = run_hedging_experiment(&e).unwrap();
    let sh = r.stats(Method::SuperHedging).unwrap();
    assert_eq!(sh.fallbacks, 0);
    assert!(sh.mean_pnl >= r.stats(Method::RealCovariance).unwrap().mean_pnl - 0.05);
}

#[test]
fn invalid_experiments_are_rejected() {
    let mut e = small(3, 1);
    e.target_weights = vec![1.0; 4];
    assert!(run_hedging_experiment(&e).is_err());
    let mut e = small(3, 1);
    e.noise_amplitude = 1.5;
    assert!(run_hedging_experiment(&e).is_err());
    assert!(LognormalMarket::new(vec![0.1, 0.1], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    assert!(LognormalMarket::new(vec![-0.1], vec![vec![0.01]]).is_err());
}
