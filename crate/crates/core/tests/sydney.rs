mod common;

use lmmsdp_core::calibration::{calibrate, CalibrationProblem, CalibrationSpec, Mode, Objective, VariableForm};
use lmmsdp_core::hedging::{instrument_omega, price_bounds, static_hedge_portfolio, BoundSetup, Direction};
use lmmsdp_core::linalg::{eigh, BlockDiagMatrix, SymMatrix};
use lmmsdp_core::market::{stationary_variance_direct, SwaptionInstrument, SwaptionQuote};
use lmmsdp_core::sensitivity::{calibration_operator, objective_sensitivity, scenario_sweep, PerturbationScenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem() -> CalibrationProblem {
    CalibrationProblem::from_instruments(&common::sydney_instruments(), VariableForm::Stationary, 20).unwrap()
}

fn prior() -> BlockDiagMatrix {
    BlockDiagMatrix::single(SymMatrix::from_fn(20, |i, j| (-0.1 * (i as f64 - j as f64).abs()).exp()))
}

fn unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.into_iter().map(|v| v / n).collect()
}

#[test]
fn full_set_calibrates_exactly() {
    let insts = common::sydney_instruments();
    assert_eq!(insts.len(), 28);
    let p = problem();
    let r = calibrate(&CalibrationSpec::new(p.clone(), Objective::MinTrace(None), Mode::Equality)).unwrap();
    for (inst, t) in insts.iter().zip(&p.targets) {
        let v = stationary_variance_direct(inst, r.x.block(0));
        assert!((v - t).abs() <= 1e-6 * t, "{v} vs {t}");
    }
    assert!(r.x.min_eigenvalue() >= -1e-8);
}

#[test]
fn min_trace_is_order_invariant() {
    let mut insts = common::sydney_instruments();
    let a = calibrate(&CalibrationSpec::new(problem(), Objective::MinTrace(Some(prior())), Mode::Equality)).unwrap();
    insts.reverse();
    let q = CalibrationProblem::from_instruments(&insts, VariableForm::Stationary, 20).unwrap();
    let b = calibrate(&CalibrationSpec::new(q, Objective::MinTrace(Some(prior())), Mode::Equality)).unwrap();
    assert!((a.objective_value - b.objective_value).abs() <= 1e-8);
    assert!(a.x.sub(&b.x).frob_norm() <= 1e-6);
}

#[test]
fn nonstationary_form_admits_stationary_solution() {
    let insts = common::sydney_instruments();
    let st = calibrate(&CalibrationSpec::new(problem(), Objective::MinTrace(None), Mode::Equality)).unwrap();
    let x = st.x.block(0);
    // Block i of the non-stationary variable sees the stationary matrix's leading corner.
    let blocks: Vec<SymMatrix> = (0..20).map(|i| x.principal(0, 20 - i)).collect();
    let embedded = BlockDiagMatrix::new(blocks).unwrap();
    let ns = CalibrationProblem::from_instruments(&insts, VariableForm::NonStationary, 20).unwrap();
    for (v, t) in ns.variances(&embedded).iter().zip(&ns.targets) {
        assert!((v - t).abs() <= 1e-6 * t);
    }
    let r = calibrate(&CalibrationSpec::new(ns, Objective::MinTrace(None), Mode::Equality)).unwrap();
    assert!(r.x.min_eigenvalue() >= -1e-8);
}

#[test]
fn dual_sensitivity_matches_resolves() {
    let p = problem();
    let spec = CalibrationSpec::new(p.clone(), Objective::MinTrace(Some(prior())), Mode::Equality);
    let base = calibrate(&spec).unwrap();
    let g = objective_sensitivity(&base).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let u = unit(&mut rng, p.len());
        let lin: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let err = |eps: f64| {
            let mut q = p.clone();
            q.targets.iter_mut().zip(&u).for_each(|(t, v)| *t += eps * v);
            let r = calibrate(&CalibrationSpec::new(q, spec.objective.clone(), Mode::Equality)).unwrap();
            (r.objective_value - base.objective_value - eps * lin).abs()
        };
        let ratio = err(1e-3) / err(1e-4);
        assert!((50.0..=200.0).contains(&ratio), "{ratio}");
    }
}

#[test]
fn newton_step_is_exact_linear_and_quadratic() {
    let p = problem();
    let spec = CalibrationSpec::new(p.clone(), Objective::MinTrace(Some(prior())), Mode::Equality);
    let base = calibrate(&spec).unwrap();
    let op = calibration_operator(&base).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u1 = unit(&mut rng, p.len());
    let u2 = unit(&mut rng, p.len());
    let d1 = op.step(&u1).unwrap();
    for (o, v) in p.omegas.iter().zip(&u1) {
        assert!((o.dot(&d1) - v).abs() <= 1e-8);
    }
    let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
    let mut lin = d1.clone();
    lin.axpy(1.0, &op.step(&u2).unwrap());
    assert!(op.step(&sum).unwrap().sub(&lin).frob_norm() <= 1e-10 * lin.frob_norm().max(1.0));
    let xerr = |eps: f64| {
        let mut q = p.clone();
        q.targets.iter_mut().zip(&u1).for_each(|(t, v)| *t += eps * v);
        let r = calibrate(&CalibrationSpec::new(q, spec.objective.clone(), Mode::Equality)).unwrap();
        let mut pred = base.x.clone();
        pred.axpy(eps, &d1);
        r.x.sub(&pred).frob_norm()
    };
    let (e3, e4) = (xerr(1e-3), xerr(1e-4));
    assert!(e4 <= 1e-2 * e3 * 10.0, "{e3} {e4}");
}

#[test]
fn scenario_sweep_matches_single_steps() {
    let base = calibrate(&CalibrationSpec::new(problem(), Objective::MinTrace(Some(prior())), Mode::Equality)).unwrap();
    let insts = common::sydney_instruments();
    let mut scenarios = Vec::new();
    for (k, inst) in insts.iter().enumerate() {
        // One vega point: a 1% absolute vol move, in cumulative variance.
        let up = (inst.quote.vol + 0.01).powi(2) * inst.expiry_time() - inst.target();
        let dn = (inst.quote.vol - 0.01).powi(2) * inst.expiry_time() - inst.target();
        for (tag, d) in [("up", up), ("down", dn)] {
            let mut u = vec![0.0; insts.len()];
            u[k] = d;
            scenarios.push(PerturbationScenario::new(format!("{k}-{tag}"), u).unwrap());
        }
    }
    scenarios.push(scenarios[0].clone());
    let reports = scenario_sweep(&base, &scenarios).unwrap();
    assert_eq!(reports.len(), 2 * insts.len() + 1);
    assert_eq!(reports[0], reports[2 * insts.len()]);
    let op = calibration_operator(&base).unwrap();
    for (s, r) in scenarios.iter().zip(&reports) {
        assert!(op.step(&s.u).unwrap().sub(&r.delta_x).frob_norm() <= 1e-12);
        if r.feasible_step {
            assert!(r.min_eigenvalue >= -1e-8);
        }
    }
}

#[test]
fn bounds_pin_calibration_instruments_and_give_replicating_hedge() {
    let insts = common::sydney_instruments();
    let setup = BoundSetup::new(insts.clone(), VariableForm::Stationary, 20, Mode::Equality).unwrap();
    for j in [4usize, 22, 26] {
        let up = price_bounds(&insts[j], &setup, Direction::Upper).unwrap();
        let lo = price_bounds(&insts[j], &setup, Direction::Lower).unwrap();
        let t = insts[j].target();
        assert!((up.bound_cumvar - t).abs() <= 1e-7 * (1.0 + t) && (lo.bound_cumvar - t).abs() <= 1e-7 * (1.0 + t));
        assert!((up.bound_vol - insts[j].quote.vol).abs() <= 1e-4);
        // Dual feasibility Σ y_k Ω_k − Ω₀ ⪰ 0 and strong duality.
        let omega0 = instrument_omega(&insts[j], VariableForm::Stationary, 20).unwrap();
        let mut s = omega0.scaled(-1.0);
        for (y, o) in up.y.iter().zip(&setup.problem.omegas) {
            s.axpy(*y, o);
        }
        assert!(s.min_eigenvalue() >= -1e-8);
        let dual: f64 = up.y.iter().zip(&setup.problem.targets).map(|(a, b)| a * b).sum();
        assert!((dual - up.bound_cumvar).abs() <= 1e-7);
        for (k, l) in up.lambda.iter().enumerate() {
            let e = if k == j { 1.0 } else { 0.0 };
            assert!((l - e).abs() <= 1e-8, "λ[{k}] = {l}");
        }
        assert!(up.hedge_cost <= up.bound_price + 1e-8);
        let twice = static_hedge_portfolio(&up, &insts[j], &insts, 2.0).unwrap();
        for (a, b) in twice.iter().zip(&up.lambda) {
            assert!((a - 2.0 * b).abs() <= 1e-12);
        }
    }
}

#[test]
fn bounds_are_ordered_and_monotone_in_the_calibration_set() {
    let insts = common::sydney_instruments();
    let curve = common::sydney_market().curve;
    let target = SwaptionInstrument::new(&curve, SwaptionQuote::new(4, 3, 0.13)).unwrap();
    let setup = BoundSetup::new(insts.clone(), VariableForm::Stationary, 20, Mode::Equality).unwrap();
    let up = price_bounds(&target, &setup, Direction::Upper).unwrap();
    let lo = price_bounds(&target, &setup, Direction::Lower).unwrap();
    assert!(lo.bound_cumvar <= up.bound_cumvar + 1e-9);
    // Nested caplet chains: the upper bound cannot grow as quotes are added.
    let caplets: Vec<SwaptionInstrument> = insts[..20].to_vec();
    let target = SwaptionInstrument::new(&curve, SwaptionQuote::new(1, 3, 0.13)).unwrap();
    let mut last = f64::INFINITY;
    for extra in [vec![], vec![20usize + 7], vec![20 + 7, 20 + 0]] {
        let mut set = caplets.clone();
        set.extend(extra.iter().map(|&k| insts[k].clone()));
        let setup = BoundSetup::new(set, VariableForm::Stationary, 20, Mode::Equality).unwrap();
        let ub = price_bounds(&target, &setup, Direction::Upper).unwrap().bound_cumvar;
        assert!(ub <= last + 1e-8, "{ub} > {last}");
        last = ub;
    }
}

#[test]
fn spread_slack_has_zero_sensitivity() {
    let insts: Vec<SwaptionInstrument> = common::sydney_instruments()
        .into_iter()
        .map(|mut i| {
            let v = i.quote.vol;
            i.quote = i.quote.clone().with_spread(v - 0.005, v + 0.005);
            i
        })
        .collect();
    let p = CalibrationProblem::from_instruments(&insts, VariableForm::Stationary, 20).unwrap();
    let r = calibrate(&CalibrationSpec::new(p.clone(), Objective::MinTrace(None), Mode::BidAsk)).unwrap();
    let g = objective_sensitivity(&r).unwrap();
    let v = p.variances(&r.x);
    let (bids, asks) = (p.bids.as_ref().unwrap(), p.asks.as_ref().unwrap());
    let mut slack_seen = false;
    for k in 0..p.len() {
        if v[k] - bids[k] > 1e-5 && asks[k] - v[k] > 1e-5 {
            slack_seen = true;
            assert!(g[k].abs() <= 1e-6, "instrument {k}: {}", g[k]);
        }
    }
    assert!(slack_seen);
}

#[test]
fn parametric_fit_recovers_rank_two_truth_and_not_rank_five() {
    let cov = [
        [0.0144, 0.0133, 0.0074, 0.0029, 0.0013],
        [0.0133, 0.0225, 0.0151, 0.0063, 0.0032],
        [0.0074, 0.0151, 0.0144, 0.0065, 0.0032],
        [0.0029, 0.0063, 0.0065, 0.0081, 0.0027],
        [0.0013, 0.0032, 0.0032, 0.0027, 0.0036],
    ];
    let mut weights: Vec<[f64; 5]> = (0..5).map(|i| { let mut w = [0.0; 5]; w[i] = 1.0; w }).collect();
    weights.push([1.0, 1.0, 0.0, 0.0, 0.0]);
    let omegas = |ws: &[[f64; 5]]| ws.iter().map(|w| BlockDiagMatrix::single(SymMatrix::outer(w))).collect::<Vec<_>>();

    let b = [[0.1, 0.02], [0.12, -0.05], [0.08, 0.07], [0.05, 0.01], [0.03, 0.04]];
    let x2 = SymMatrix::from_fn(5, |i, j| b[i][0] * b[j][0] + b[i][1] * b[j][1]);
    let os = omegas(&weights);
    let targets = os.iter().map(|o| o.block(0).dot(&x2)).collect();
    let p = CalibrationProblem::new(vec![5], os, targets).unwrap();
    let r = calibrate(&CalibrationSpec::new(p, Objective::ParametricTwoFactor { seed: 1 }, Mode::Equality)).unwrap();
    assert!(r.fit_residual.unwrap() <= 1e-6, "{}", r.fit_residual.unwrap());
    assert!(eigh(r.x.block(0)).values[2].abs() <= 1e-12);

    // Singles plus every pair basket pin X completely, so a rank-two fit
    // cannot match the rank-five covariance.
    for i in 0..5 {
        for j in i + 1..5 {
            let mut w = [0.0; 5];
            w[i] = 1.0;
            w[j] = 1.0;
            weights.push(w);
        }
    }
    let x5 = SymMatrix::from_fn(5, |i, j| cov[i][j]);
    let os = omegas(&weights);
    let targets = os.iter().map(|o| o.block(0).dot(&x5)).collect();
    let p = CalibrationProblem::new(vec![5], os, targets).unwrap();
    let r = calibrate(&CalibrationSpec::new(p, Objective::ParametricTwoFactor { seed: 1 }, Mode::Equality)).unwrap();
    assert!(r.fit_residual.unwrap() > 1e-6, "{}", r.fit_residual.unwrap());
    assert!(objective_sensitivity(&r).is_err());
}
