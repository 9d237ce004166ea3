//! Monte-Carlo experiments: delta hedging a basket option under a
//! multivariate lognormal market with noisy recalibration, and the
//! price-bounds sweep over a maturity/underlying grid.

use lmmsdp_core::calibration::{
    calibrate_linear, calibrate_minnorm, CalibrationProblem, Mode, ParametricFit, VariableForm,
};
use lmmsdp_core::cone::{Sense, SolverOptions};
use lmmsdp_core::hedging::{price_bounds, BoundSetup, Direction};
use lmmsdp_core::linalg::{cholesky, eigh, BlockDiagMatrix, Matrix, SymMatrix};
use lmmsdp_core::market::{black_price, implied_cumvariance, DiscountCurve, SwaptionInstrument, SwaptionQuote};
use lmmsdp_core::math::norm_cdf;
use lmmsdp_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LognormalMarket {
    pub x0: Vec<f64>,
    /// Annualized covariance `σᵀσ`, row by row.
    pub cov: Vec<Vec<f64>>,
}

impl LognormalMarket {
    pub fn new(x0: Vec<f64>, cov: Vec<Vec<f64>>) -> AppResult<Self> {
        let m = Self { x0, cov };
        m.validate()?;
        Ok(m)
    }

    /// Five assets at 0.1 with the experiment's covariance.
    pub fn paper() -> Self {
        Self {
            x0: vec![0.1; 5],
            cov: vec![
                vec![0.0144, 0.0133, 0.0074, 0.0029, 0.0013],
                vec![0.0133, 0.0225, 0.0151, 0.0063, 0.0032],
                vec![0.0074, 0.0151, 0.0144, 0.0065, 0.0032],
                vec![0.0029, 0.0063, 0.0065, 0.0081, 0.0027],
                vec![0.0013, 0.0032, 0.0032, 0.0027, 0.0036],
            ],
        }
    }

    pub fn n(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.x0.is_empty() || self.x0.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(AppError::Validation("initial prices must be positive".into()));
        }
        let c = self.cov_matrix()?;
        if eigh(&c).min() < -1e-12 * c.max_abs().max(1e-300) {
            return Err(AppError::Validation("covariance must be positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn cov_matrix(&self) -> AppResult<SymMatrix> {
        let n = self.x0.len();
        if self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return Err(AppError::Validation("covariance must be n × n".into()));
        }
        Ok(SymMatrix::new(n, self.cov.iter().flatten().copied().collect())?)
    }

    /// `L` with `L Lᵀ = cov`: Cholesky when definite, scaled eigenvectors
    /// otherwise.
    fn factor(&self) -> AppResult<Matrix> {
        let c = self.cov_matrix()?;
        if let Ok(ch) = cholesky(&c) {
            return Ok(ch.l().clone());
        }
        let e = eigh(&c);
        let n = c.dim();
        Ok(Matrix::from_fn(n, n, |i, j| e.vectors[(i, j)] * e.values[j].max(0.0).sqrt()))
    }
}

/// Driftless lognormal paths `paths × (steps + 1) × n`, stepped exactly:
/// `x ← x·exp(L z √Δ − ½ diag(cov) Δ)`.
pub fn simulate_paths(market: &LognormalMarket, maturity: f64, steps: usize, paths: usize, seed: u64) -> AppResult<Vec<Vec<Vec<f64>>>> {
    let sim = PathSimulator::new(market, maturity, steps)?;
    Ok((0..paths).map(|p| sim.path(&mut path_rng(seed, p as u64, Stream::Path))).collect())
}

struct PathSimulator {
    x0: Vec<f64>,
    l: Matrix,
    drift: Vec<f64>,
    sqrt_dt: f64,
    steps: usize,
}

impl PathSimulator {
    fn new(market: &LognormalMarket, maturity: f64, steps: usize) -> AppResult<Self> {
        if !(maturity > 0.0) || !maturity.is_finite() {
            return Err(AppError::Validation("maturity must be positive".into()));
        }
        if steps == 0 {
            return Err(AppError::Validation("at least one time step is required".into()));
        }
        market.validate()?;
        let dt = maturity / steps as f64;
        let drift = (0..market.n()).map(|i| -0.5 * market.cov[i][i] * dt).collect();
        Ok(Self { x0: market.x0.clone(), l: market.factor()?, drift, sqrt_dt: dt.sqrt(), steps })
    }

    fn path(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.x0.len();
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut x = self.x0.clone();
        out.push(x.clone());
        let mut z = vec![0.0; n];
        for _ in 0..self.steps {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for i in 0..n {
                let shock: f64 = (0..=i).map(|j| self.l[(i, j)] * z[j]).sum::<f64>()
                    + (i + 1..n).map(|j| self.l[(i, j)] * z[j]).sum::<f64>();
                x[i] *= (shock * self.sqrt_dt + self.drift[i]).exp();
            }
            out.push(x.clone());
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Path = 0,
    Noise = 1,
}

/// Counter-based stream per (path, purpose): results do not depend on the
/// order in which paths are evaluated.
fn path_rng(seed: u64, path: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * path + stream as u64);
    rng
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn basket_value(weights: &[f64], x: &[f64]) -> f64 {
    weights.iter().zip(x).map(|(w, v)| w * v).sum()
}

/// Basket weights re-expressed on returns: `ŵ_i = w_i x_i / Σ w_j x_j`.
fn hat_weights(weights: &[f64], x: &[f64]) -> Vec<f64> {
    let b = basket_value(weights, x);
    weights.iter().zip(x).map(|(w, v)| w * v / b).collect()
}

/// Delta of the frozen-weight lognormal basket call `Δ_i = w_i N(h)`,
/// `h = (ln(B/κ) + V/2)/√V`; at `V = 0`, `Δ_i = w_i 1{B > κ}`.
pub fn basket_delta(weights: &[f64], x: &[f64], strike: f64, v_remaining: f64) -> AppResult<Vec<f64>> {
    if weights.len() != x.len() {
        return Err(AppError::Validation("weights and prices differ in length".into()));
    }
    if !(v_remaining >= 0.0) || !(strike > 0.0) {
        return Err(AppError::Validation("variance must be nonnegative and strike positive".into()));
    }
    let b = basket_value(weights, x);
    if !(b > 0.0) {
        return Err(AppError::Validation("basket value must be positive".into()));
    }
    let n = if v_remaining == 0.0 {
        if b > strike {
            1.0
        } else {
            0.0
        }
    } else {
        let s = v_remaining.sqrt();
        norm_cdf(((b / strike).ln() + 0.5 * v_remaining) / s)
    };
    Ok(weights.iter().map(|w| w * n).collect())
}

/// Frozen-weight basket call price with unit level.
pub fn basket_price(weights: &[f64], x: &[f64], strike: f64, v: f64) -> AppResult<f64> {
    Ok(black_price(basket_value(weights, x), strike, v, 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RealCovariance,
    Robust,
    SuperHedging,
    Parametrized,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RealCovariance, Method::Robust, Method::SuperHedging, Method::Parametrized];

    pub fn name(self) -> &'static str {
        match self {
            Method::RealCovariance => "real-covariance",
            Method::Robust => "robust",
            Method::SuperHedging => "super-hedging",
            Method::Parametrized => "parametrized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgingExperiment {
    pub market: LognormalMarket,
    pub target_weights: Vec<f64>,
    pub calibration_weights: Vec<Vec<f64>>,
    /// Years.
    pub maturity: f64,
    /// Hedge trades over the option's life (the first at inception).
    pub rebalances: usize,
    /// Price noise amplitude, a fraction of each calibration price.
    pub noise_amplitude: f64,
    pub paths: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl HedgingExperiment {
    pub fn paper(paths: usize, seed: u64) -> Self {
        let mut calibration_weights: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut w = vec![0.0; 5];
                w[i] = 1.0;
                w
            })
            .collect();
        calibration_weights.push(vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        Self {
            market: LognormalMarket::paper(),
            target_weights: vec![0.0, 0.0, 0.4, 0.1, 0.5],
            calibration_weights,
            maturity: 1.0,
            rebalances: 33,
            noise_amplitude: 0.1,
            paths,
            methods: Method::ALL.to_vec(),
            seed,
            threads: None,
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        self.market.validate()?;
        let n = self.market.n();
        let bad = |w: &Vec<f64>| w.len() != n || w.iter().any(|v| *v < 0.0) || !w.iter().any(|v| *v > 0.0);
        if bad(&self.target_weights) || self.calibration_weights.iter().any(bad) {
            return Err(AppError::Validation("basket weights must be nonnegative, nonzero, one per asset".into()));
        }
        if self.calibration_weights.is_empty() {
            return Err(AppError::Validation("at least one calibration basket is required".into()));
        }
        if self.rebalances == 0 || self.paths == 0 || !(self.maturity > 0.0) {
            return Err(AppError::Validation("rebalances, paths and maturity must be positive".into()));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude < 1.0) {
            return Err(AppError::Validation("noise amplitude must lie in [0, 1)".into()));
        }
        if self.methods.is_empty() {
            return Err(AppError::Validation("no calibration method selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    pub mean_pnl: f64,
    pub stdev_pnl: f64,
    pub fraction_positive: f64,
    /// Mean Frobenius norm of the change in calibrated covariance between
    /// successive rebalances.
    pub mean_cov_change: f64,
    /// Rebalances where the equality calibration failed and a fallback
    /// was used.
    pub fallbacks: usize,
    /// Paths with at least one fallback.
    pub flagged_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnLReport {
    /// Option premium under the true covariance, the P&L denominator.
    pub premium: f64,
    pub methods: Vec<MethodStats>,
    /// `per_path[p][k]`: P&L ratio of path `p` under `methods[k]`.
    pub per_path: Vec<Vec<f64>>,
}

impl PnLReport {
    pub fn stats(&self, method: Method) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Histogram of P&L ratios: `(lower edge, upper edge, count per method)`.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, Vec<usize>)> {
        let all = self.per_path.iter().flatten().copied().filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() || bins == 0 {
            return Vec::new();
        }
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let mut counts = vec![vec![0usize; self.methods.len()]; bins];
        for row in &self.per_path {
            for (k, v) in row.iter().enumerate() {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b][k] += 1;
            }
        }
        counts.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c)).collect()
    }
}

/// Search budget of the per-rebalance parametric refit. Quotes are noisy
/// at the 10% level, so a relative residual of 1e-7 already counts as exact.
/// After inception the previous fit seeds a single descent.
const PARAM_REL_TOL: f64 = 1e-14;
const PARAM_RESTARTS: usize = 3;
const PARAM_MAX_EVALS: usize = 800;

struct PathOutcome {
    ratio: f64,
    change_sum: f64,
    changes: usize,
    fallbacks: usize,
}

/// Everything a path needs that does not depend on the path.
struct Setup<'a> {
    exp: &'a HedgingExperiment,
    cov: SymMatrix,
    sim: PathSimulator,
    strikes: Vec<f64>,
    target_strike: f64,
    premium: f64,
    dt: f64,
    options: SolverOptions,
}

impl<'a> Setup<'a> {
    fn new(exp: &'a HedgingExperiment) -> AppResult<Self> {
        exp.validate()?;
        let cov = exp.market.cov_matrix()?;
        let x0 = &exp.market.x0;
        let strikes = exp.calibration_weights.iter().map(|w| basket_value(w, x0)).collect();
        let target_strike = basket_value(&exp.target_weights, x0);
        let w0 = hat_weights(&exp.target_weights, x0);
        let premium = basket_price(&exp.target_weights, x0, target_strike, exp.maturity * cov.quad_form(&w0))?;
        Ok(Self {
            exp,
            sim: PathSimulator::new(&exp.market, exp.maturity, exp.rebalances)?,
            cov,
            strikes,
            target_strike,
            premium,
            dt: exp.maturity / exp.rebalances as f64,
            options: SolverOptions::default(),
        })
    }

    /// Calibration problem at one rebalance: `Ω_k = τ ŵ_kŵ_kᵀ` against the
    /// noisy implied variances, plus the variance bounds implied by the
    /// noise band.
    fn problem(&self, x: &[f64], tau: f64, noise: &[f64]) -> AppResult<(CalibrationProblem, Vec<f64>, Vec<f64>)> {
        let a = self.exp.noise_amplitude;
        let n = x.len();
        let mut omegas = Vec::new();
        let mut targets = Vec::new();
        let mut bids = Vec::new();
        let mut asks = Vec::new();
        for (k, w) in self.exp.calibration_weights.iter().enumerate() {
            let wh = hat_weights(w, x);
            let b = basket_value(w, x);
            let v_true = tau * self.cov.quad_form(&wh);
            let invert = |scale: f64| -> AppResult<f64> {
                if scale == 1.0 {
                    return Ok(v_true);
                }
                let p = black_price(b, self.strikes[k], v_true, 1.0)? * scale;
                let intrinsic = (b - self.strikes[k]).max(0.0);
                let p = p.clamp(intrinsic, b * (1.0 - 1e-12));
                if p <= intrinsic * (1.0 + 1e-14) {
                    return Ok(0.0);
                }
                Ok(implied_cumvariance(p, b, self.strikes[k], 1.0).unwrap_or(0.0))
            };
            targets.push(invert(1.0 + a * noise[k])?);
            bids.push(invert(1.0 - a)?);
            asks.push(invert(1.0 + a)?);
            omegas.push(BlockDiagMatrix::single(SymMatrix::outer(&wh).scaled(tau)));
        }
        let p = CalibrationProblem::new(vec![n], omegas, targets)?;
        Ok((p, bids, asks))
    }

    fn path(&self, index: usize) -> AppResult<Vec<PathOutcome>> {
        let exp = self.exp;
        let xs = self.sim.path(&mut path_rng(exp.seed, index as u64, Stream::Path));
        let mut noise_rng = path_rng(exp.seed, index as u64, Stream::Noise);
        let m = exp.calibration_weights.len();
        let noise: Vec<Vec<f64>> = (0..exp.rebalances).map(|_| (0..m).map(|_| noise_rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut problems = Vec::with_capacity(exp.rebalances);
        for j in 0..exp.rebalances {
            let tau = exp.maturity - j as f64 * self.dt;
            problems.push(self.problem(&xs[j], tau, &noise[j])?);
        }
        exp.methods.iter().map(|&method| self.hedge(index, method, &xs, &problems)).collect()
    }

    fn hedge(&self, index: usize, method: Method, xs: &[Vec<f64>], problems: &[(CalibrationProblem, Vec<f64>, Vec<f64>)]) -> AppResult<PathOutcome> {
        let exp = self.exp;
        let w0 = &exp.target_weights;
        let mut cash = 0.0;
        let mut delta = vec![0.0; w0.len()];
        let mut prev_x: Option<SymMatrix> = None;
        let mut prev_params: Option<Vec<f64>> = None;
        let mut out = PathOutcome { ratio: 0.0, change_sum: 0.0, changes: 0, fallbacks: 0 };
        for (j, (problem, bids, asks)) in problems.iter().enumerate() {
            let x = &xs[j];
            let tau = exp.maturity - j as f64 * self.dt;
            let wh0 = hat_weights(w0, x);
            let omega0 = SymMatrix::outer(&wh0).scaled(tau);
            let cal = match method {
                Method::RealCovariance => self.cov.clone(),
                Method::Parametrized => {
                    let restarts = if prev_params.is_some() { 1 } else { PARAM_RESTARTS };
                    let fit = ParametricFit::new(problem)?.with_budget(PARAM_REL_TOL, restarts, PARAM_MAX_EVALS);
                    let (params, _) = fit.fit(mix(exp.seed, index as u64, j as u64), prev_params.as_deref());
                    let cov = fit.covariance(&params);
                    prev_params = Some(params);
                    cov
                }
                Method::Robust | Method::SuperHedging => {
                    match self.sdp(method, problem, &omega0, bids, asks) {
                        Some((cov, fallback)) => {
                            out.fallbacks += fallback as usize;
                            cov
                        }
                        None => {
                            out.fallbacks += 1;
                            prev_x.clone().unwrap_or_else(|| self.diagonal_guess(problem))
                        }
                    }
                }
            };
            if let Some(p) = &prev_x {
                out.change_sum += cal.sub(p).frob_norm();
                out.changes += 1;
            }
            let v0 = tau * cal.quad_form(&wh0).max(0.0);
            let new_delta = basket_delta(w0, x, self.target_strike, v0)?;
            if j == 0 {
                // The option is sold at the method's own model price.
                cash = basket_price(w0, x, self.target_strike, v0)?;
            }
            cash -= new_delta.iter().zip(&delta).zip(x).map(|((a, b), s)| (a - b) * s).sum::<f64>();
            delta = new_delta;
            prev_x = Some(cal);
        }
        let xt = &xs[exp.rebalances];
        let payoff = (basket_value(w0, xt) - self.target_strike).max(0.0);
        let value = cash + delta.iter().zip(xt).map(|(d, s)| d * s).sum::<f64>() - payoff;
        out.ratio = value / self.premium;
        Ok(out)
    }

    /// Equality calibration, then the noise band as a bid/ask range.
    fn sdp(&self, method: Method, problem: &CalibrationProblem, omega0: &SymMatrix, bids: &[f64], asks: &[f64]) -> Option<(SymMatrix, bool)> {
        let run = |p: &CalibrationProblem, mode: Mode| match method {
            Method::Robust => calibrate_minnorm(p, mode, &self.options),
            _ => calibrate_linear(p, mode, &BlockDiagMatrix::single(omega0.clone()), Sense::Maximize, &self.options),
        };
        match run(problem, Mode::Equality) {
            Ok(r) => return Some((r.x.block(0).clone(), false)),
            Err(Error::InfeasibleCalibration { .. }) | Err(Error::Solver(_)) => {}
            Err(_) => return None,
        }
        let widened = problem.clone().with_spread(bids.to_vec(), asks.to_vec()).ok()?;
        run(&widened, Mode::BidAsk).ok().map(|r| (r.x.block(0).clone(), true))
    }

    /// Diagonal covariance matching single-asset targets, used only when
    /// no calibration succeeds at inception.
    fn diagonal_guess(&self, problem: &CalibrationProblem) -> SymMatrix {
        let n = problem.dims[0];
        let mut d = vec![0.0; n];
        for (o, t) in problem.omegas.iter().zip(&problem.targets) {
            let b = o.block(0);
            let nz: Vec<usize> = (0..n).filter(|&i| b.get(i, i) != 0.0).collect();
            if nz.len() == 1 {
                d[nz[0]] = t / b.get(nz[0], nz[0]);
            }
        }
        SymMatrix::from_diag(&d)
    }
}

/// Runs every path and method; bit-identical for a given configuration
/// regardless of `threads`.
pub fn run_hedging_experiment(exp: &HedgingExperiment) -> AppResult<PnLReport> {
    let setup = Setup::new(exp)?;
    let threads = exp
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .clamp(1, exp.paths);
    let outcomes: Vec<Vec<PathOutcome>> = if threads == 1 {
        (0..exp.paths).map(|p| setup.path(p)).collect::<AppResult<_>>()?
    } else {
        let chunk = exp.paths.div_ceil(threads);
        let setup = &setup;
        let parts: Vec<AppResult<Vec<Vec<PathOutcome>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = t * chunk..((t + 1) * chunk).min(exp.paths);
                    s.spawn(move || range.map(|p| setup.path(p)).collect::<AppResult<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(exp.paths);
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let methods = exp
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let ratios: Vec<f64> = outcomes.iter().map(|o| o[k].ratio).collect();
            let n = ratios.len() as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let var = if ratios.len() > 1 { ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let (cs, cn) = outcomes.iter().fold((0.0, 0usize), |(s, c), o| (s + o[k].change_sum, c + o[k].changes));
            MethodStats {
                method,
                mean_pnl: mean,
                stdev_pnl: var.sqrt(),
                fraction_positive: ratios.iter().filter(|r| **r > 0.0).count() as f64 / n,
                mean_cov_change: if cn > 0 { cs / cn as f64 } else { 0.0 },
                fallbacks: outcomes.iter().map(|o| o[k].fallbacks).sum(),
                flagged_paths: outcomes.iter().filter(|o| o[k].fallbacks > 0).count(),
            }
        })
        .collect();
    let per_path = outcomes.iter().map(|o| o.iter().map(|v| v.ratio).collect()).collect();
    Ok(PnLReport { premium: setup.premium, methods, per_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub expiry: usize,
    pub tenor: usize,
    pub lower_vol: Option<f64>,
    pub upper_vol: Option<f64>,
    pub market_vol: Option<f64>,
    /// Whether the quote is one of the calibration instruments.
    pub calibrated: bool,
    pub error: Option<String>,
}

/// Upper and lower vol bounds for every (expiry, tenor) pair that fits in
/// the horizon. Per-cell failures are recorded and the sweep continues.
pub fn run_bounds_sweep(curve: &DiscountCurve, setup: &BoundSetup, market_vols: &[(usize, usize, f64)]) -> Vec<BoundsRow> {
    let m = setup.horizon;
    let mut rows = Vec::new();
    for expiry in 1..=m {
        for tenor in 1..=m + 1 - expiry {
            let quoted = market_vols.iter().find(|(s, l, _)| *s == expiry && *l == tenor).map(|q| q.2);
            let calibrated = setup.instruments.iter().any(|i| i.quote.expiry == expiry && i.quote.tenor() == tenor);
            let mut row = BoundsRow { expiry, tenor, lower_vol: None, upper_vol: None, market_vol: quoted, calibrated, error: None };
            let target = match SwaptionInstrument::new(curve, SwaptionQuote::new(expiry, tenor, quoted.unwrap_or(0.1))) {
                Ok(t) => t,
                Err(e) => {
                    row.error = Some(e.to_string());
                    rows.push(row);
                    continue;
                }
            };
            for dir in [Direction::Lower, Direction::Upper] {
                match price_bounds(&target, setup, dir) {
                    Ok(r) => match dir {
                        Direction::Lower => row.lower_vol = Some(r.bound_vol),
                        Direction::Upper => row.upper_vol = Some(r.bound_vol),
                    },
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Stationary bound setup over a market's instruments.
pub fn bound_setup(instruments: Vec<SwaptionInstrument>, horizon: usize, options: SolverOptions) -> AppResult<BoundSetup> {
    let mut s = BoundSetup::new(instruments, VariableForm::Stationary, horizon, Mode::Equality)?;
    s.options = options;
    Ok(s)
}
