//! Calibration programs over the forward covariance `X`.
//!
//! Each quote contributes a linear form `Tr(Ω_k X)` matched to its
//! cumulative variance, either exactly or inside its bid/ask range. Bid/ask
//! inequalities become equalities with 1×1 nonnegative slack blocks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cone::{solve, Certificate, ConeProgram, ConeSolution, Constraint, Sense, SolverOptions, Status};
use crate::error::{invalid, Error, Result};
use crate::linalg::{eigh, inv_sqrt, BlockDiagMatrix, SymMatrix};
use crate::market::{build_omega_nonstationary, build_omega_stationary, nonstationary_dims, SwaptionInstrument};
use crate::math;
use crate::simplex::nelder_mead;

/// Weight of the `Tr(X)` tie-break added to programs whose optimal face
/// is otherwise unbounded or flat in `X`.
const TIE_BREAK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableForm {
    /// One `M × M` block.
    Stationary,
    /// Blocks `X_1..X_M` of dimensions `M, M−1, …, 1`.
    NonStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Equality,
    BidAsk,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Minimize `Tr(C X)`; `None` means `C = I`.
    MinTrace(Option<BlockDiagMatrix>),
    MinSpectralNorm,
    MaxLinfMargin,
    MaxL1Margin,
    /// Covariance `V` of the quoted variances.
    MaxConfidence(SymMatrix),
    MaximizeTarget(BlockDiagMatrix),
    MinimizeTarget(BlockDiagMatrix),
    /// Rank-two parametric least-squares fit (stationary form only).
    ParametricTwoFactor { seed: u64 },
}

/// Coefficient matrices and targets, independent of how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem {
    pub dims: Vec<usize>,
    pub omegas: Vec<BlockDiagMatrix>,
    pub targets: Vec<f64>,
    pub bids: Option<Vec<f64>>,
    pub asks: Option<Vec<f64>>,
}

impl CalibrationProblem {
    pub fn new(dims: Vec<usize>, omegas: Vec<BlockDiagMatrix>, targets: Vec<f64>) -> Result<Self> {
        if omegas.len() != targets.len() {
            return Err(invalid("one target per coefficient matrix is required"));
        }
        if omegas.iter().any(|o| o.dims() != dims) {
            return Err(invalid("coefficient matrices do not match the variable blocks"));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(invalid("targets must be finite"));
        }
        Ok(Self { dims, omegas, targets, bids: None, asks: None })
    }

    /// Adds cumulative-variance bid/ask bounds.
    pub fn with_spread(mut self, bids: Vec<f64>, asks: Vec<f64>) -> Result<Self> {
        if bids.len() != self.targets.len() || asks.len() != self.targets.len() {
            return Err(invalid("one bid and one ask per instrument are required"));
        }
        if bids.iter().zip(&asks).any(|(b, a)| !(b <= a) || !b.is_finite() || !a.is_finite()) {
            return Err(invalid("every bid must be finite and not above its ask"));
        }
        self.bids = Some(bids);
        self.asks = Some(asks);
        Ok(self)
    }

    pub fn from_instruments(instruments: &[SwaptionInstrument], form: VariableForm, horizon: usize) -> Result<Self> {
        let (dims, omegas) = match form {
            VariableForm::Stationary => (
                vec![horizon],
                instruments
                    .iter()
                    .map(|i| build_omega_stationary(i, horizon).map(BlockDiagMatrix::single))
                    .collect::<Result<Vec<_>>>()?,
            ),
            VariableForm::NonStationary => (
                nonstationary_dims(horizon),
                instruments.iter().map(|i| build_omega_nonstationary(i, horizon)).collect::<Result<Vec<_>>>()?,
            ),
        };
        let targets = instruments.iter().map(SwaptionInstrument::target).collect();
        let mut p = Self::new(dims, omegas, targets)?;
        if instruments.iter().all(|i| i.quote.bid.is_some()) && !instruments.is_empty() {
            let bids = instruments.iter().map(|i| i.bid_target().unwrap()).collect();
            let asks = instruments.iter().map(|i| i.ask_target().unwrap()).collect();
            p = p.with_spread(bids, asks)?;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `Tr(Ω_k X)` for every instrument.
    pub fn variances(&self, x: &BlockDiagMatrix) -> Vec<f64> {
        self.omegas.iter().map(|o| o.dot(x)).collect()
    }

    fn spread(&self) -> Result<(&[f64], &[f64])> {
        match (&self.bids, &self.asks) {
            (Some(b), Some(a)) => Ok((b, a)),
            _ => Err(invalid("bid/ask mode needs bid and ask quotes on every instrument")),
        }
    }

    fn scale(&self) -> f64 {
        let t = self.targets.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let a = self.asks.as_ref().map_or(0.0, |a| a.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        t.max(a).max(1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub problem: CalibrationProblem,
    pub objective: Objective,
    pub mode: Mode,
    pub options: SolverOptions,
}

impl CalibrationSpec {
    pub fn new(problem: CalibrationProblem, objective: Objective, mode: Mode) -> Self {
        Self { problem, objective, mode, options: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Calibrated covariance blocks.
    pub x: BlockDiagMatrix,
    /// Total multiplier on each instrument's `Tr(Ω_k X)` (empty when the
    /// method has no duals).
    pub y: Vec<f64>,
    /// Dual slack restricted to the covariance blocks.
    pub z: BlockDiagMatrix,
    pub gap: f64,
    pub objective_value: f64,
    /// ℓ∞ centering margin, or the optimal `t` of the confidence program.
    pub margin: Option<f64>,
    pub margins: Option<Vec<f64>>,
    /// `Φ(t)` of the confidence program.
    pub confidence: Option<f64>,
    /// `‖A(X) − b‖₂` of the parametric fit.
    pub fit_residual: Option<f64>,
    /// Program constraint rows carrying each instrument's `Tr(Ω_k X)`;
    /// empty when instruments do not map to rows one-to-one.
    pub instrument_rows: Vec<Vec<usize>>,
    /// Cone program that was solved and its raw solution.
    pub program: Option<ConeProgram>,
    pub solution: Option<ConeSolution>,
}

impl CalibrationResult {
    pub fn has_duals(&self) -> bool {
        self.solution.is_some()
    }
}

/// Dispatches on the objective and mode.
pub fn calibrate(spec: &CalibrationSpec) -> Result<CalibrationResult> {
    match &spec.objective {
        Objective::MinTrace(c) => {
            let c = match c {
                Some(c) => c.clone(),
                None => BlockDiagMatrix::identity(&spec.problem.dims),
            };
            calibrate_linear(&spec.problem, spec.mode, &c, Sense::Minimize, &spec.options)
        }
        Objective::MaximizeTarget(o) => calibrate_linear(&spec.problem, spec.mode, o, Sense::Maximize, &spec.options),
        Objective::MinimizeTarget(o) => calibrate_linear(&spec.problem, spec.mode, o, Sense::Minimize, &spec.options),
        Objective::MinSpectralNorm => calibrate_minnorm(&spec.problem, spec.mode, &spec.options),
        Objective::MaxLinfMargin => calibrate_robust_linf(&spec.problem, &spec.options),
        Objective::MaxL1Margin => calibrate_robust_l1(&spec.problem, &spec.options),
        Objective::MaxConfidence(v) => calibrate_confidence(&spec.problem, v, &spec.options),
        Objective::ParametricTwoFactor { seed } => calibrate_parametric_twofactor(&spec.problem, *seed),
    }
}

/// Assembles block programs whose first blocks are the covariance variable.
struct Builder {
    nvar: usize,
    dims: Vec<usize>,
    c: Vec<SymMatrix>,
    constraints: Vec<Constraint>,
}

impl Builder {
    fn new(var_dims: &[usize]) -> Self {
        Self {
            nvar: var_dims.len(),
            dims: var_dims.to_vec(),
            c: var_dims.iter().map(|&d| SymMatrix::zeros(d)).collect(),
            constraints: Vec::new(),
        }
    }

    fn scalar(&mut self, cost: f64) -> usize {
        self.dims.push(1);
        self.c.push(SymMatrix::scalar(cost));
        self.dims.len() - 1
    }

    fn block(&mut self, n: usize) -> usize {
        self.dims.push(n);
        self.c.push(SymMatrix::zeros(n));
        self.dims.len() - 1
    }

    fn set_var_cost(&mut self, c: &BlockDiagMatrix, scale: f64) {
        for i in 0..self.nvar {
            self.c[i].axpy(scale, c.block(i));
        }
    }

    fn add_var_trace_cost(&mut self, w: f64) {
        for i in 0..self.nvar {
            self.c[i].shift_diag(w);
        }
    }

    /// `Σ_k coef_k Tr(Ω_k X) + Σ scalars = rhs`.
    fn push(&mut self, omega_terms: &[(f64, &BlockDiagMatrix)], scalars: &[(usize, f64)], rhs: f64) {
        let mut terms: Vec<(usize, SymMatrix)> = Vec::new();
        for b in 0..self.nvar {
            let mut acc: Option<SymMatrix> = None;
            for (coef, om) in omega_terms {
                let blk = om.block(b);
                if *coef == 0.0 || blk.is_zero() {
                    continue;
                }
                match &mut acc {
                    Some(a) => a.axpy(*coef, blk),
                    None => acc = Some(blk.scaled(*coef)),
                }
            }
            if let Some(a) = acc {
                terms.push((b, a));
            }
        }
        for &(blk, coef) in scalars {
            terms.push((blk, SymMatrix::scalar(coef)));
        }
        self.constraints.push(Constraint::new(terms, rhs));
    }

    fn build(self, sense: Sense) -> Result<ConeProgram> {
        let c = BlockDiagMatrix::new(self.c)?;
        ConeProgram::new(self.dims, c, self.constraints, sense)
    }
}

/// Adds instrument constraints: equalities, or bid/ask pairs with slacks.
/// Returns, per instrument, the constraint indices carrying `Tr(Ω_k X)`.
fn add_quotes(b: &mut Builder, p: &CalibrationProblem, mode: Mode) -> Result<Vec<Vec<usize>>> {
    let mut rows = Vec::with_capacity(p.len());
    match mode {
        Mode::Equality => {
            for (om, &t) in p.omegas.iter().zip(&p.targets) {
                rows.push(vec![b.constraints.len()]);
                b.push(&[(1.0, om)], &[], t);
            }
        }
        Mode::BidAsk => {
            let (bids, asks) = p.spread()?;
            let scale = p.scale();
            for (k, om) in p.omegas.iter().enumerate() {
                if asks[k] - bids[k] <= 1e-14 * scale {
                    rows.push(vec![b.constraints.len()]);
                    b.push(&[(1.0, om)], &[], 0.5 * (bids[k] + asks[k]));
                    continue;
                }
                let lo = b.scalar(0.0);
                let hi = b.scalar(0.0);
                rows.push(vec![b.constraints.len(), b.constraints.len() + 1]);
                b.push(&[(1.0, om)], &[(lo, -1.0)], bids[k]);
                b.push(&[(1.0, om)], &[(hi, 1.0)], asks[k]);
            }
        }
    }
    Ok(rows)
}

fn run(program: ConeProgram, opts: &SolverOptions) -> Result<(ConeProgram, ConeSolution)> {
    let sol = solve(&program, opts);
    match sol.status {
        Status::Optimal => Ok((program, sol)),
        Status::PrimalInfeasible => {
            let certificate = match &sol.certificate {
                Some(Certificate::Farkas(y)) => y.clone(),
                _ => Vec::new(),
            };
            Err(Error::InfeasibleCalibration { certificate })
        }
        Status::DualInfeasible => Err(Error::Unbounded),
        Status::MaxIterations | Status::NumericalFailure => Err(Error::Solver(format!(
            "{:?} after {} iterations (gap {:.3e}, residuals {:.3e}/{:.3e}): {}",
            sol.status, sol.iterations, sol.gap, sol.primal_residual, sol.dual_residual, sol.message
        ))),
    }
}

fn finish(p: &CalibrationProblem, rows: &[Vec<usize>], program: ConeProgram, sol: ConeSolution) -> CalibrationResult {
    let nvar = p.dims.len();
    let x = BlockDiagMatrix::new(sol.x.blocks()[..nvar].to_vec()).expect("non-empty");
    let z = BlockDiagMatrix::new(sol.z.blocks()[..nvar].to_vec()).expect("non-empty");
    let y = rows.iter().map(|r| r.iter().map(|&i| sol.y[i]).sum()).collect();
    CalibrationResult {
        x,
        y,
        z,
        gap: sol.gap,
        objective_value: sol.primal_objective,
        margin: None,
        margins: None,
        confidence: None,
        fit_residual: None,
        instrument_rows: rows.to_vec(),
        program: Some(program),
        solution: Some(sol),
    }
}

/// Linear objective `Tr(C X)` over the equality or bid/ask calibration set.
pub fn calibrate_linear(
    p: &CalibrationProblem,
    mode: Mode,
    c: &BlockDiagMatrix,
    sense: Sense,
    opts: &SolverOptions,
) -> Result<CalibrationResult> {
    if c.dims() != p.dims {
        return Err(invalid("objective matrix does not match the variable blocks"));
    }
    let mut b = Builder::new(&p.dims);
    b.set_var_cost(c, 1.0);
    let rows = add_quotes(&mut b, p, mode)?;
    let (program, sol) = run(b.build(sense)?, opts)?;
    Ok(finish(p, &rows, program, sol))
}

/// Maximizes a common margin `t` inside every bid/ask range.
///
/// `t` is free in sign; it is shifted by the largest ask so the program's
/// scalar stays nonnegative. A negative optimum means no calibration fits
/// the spreads.
pub fn calibrate_robust_linf(p: &CalibrationProblem, opts: &SolverOptions) -> Result<CalibrationResult> {
    let (bids, asks) = p.spread()?;
    let shift = asks.iter().fold(0.0f64, |m, a| m.max(a.abs())) + p.scale();
    let mut b = Builder::new(&p.dims);
    let t = b.scalar(1.0);
    b.add_var_trace_cost(-TIE_BREAK);
    let mut rows = Vec::new();
    for (k, om) in p.omegas.iter().enumerate() {
        let lo = b.scalar(0.0);
        let hi = b.scalar(0.0);
        rows.push(vec![b.constraints.len(), b.constraints.len() + 1]);
        b.push(&[(1.0, om)], &[(t, -1.0), (lo, -1.0)], bids[k] - shift);
        b.push(&[(1.0, om)], &[(t, 1.0), (hi, 1.0)], asks[k] + shift);
    }
    let (program, sol) = run(b.build(Sense::Maximize)?, opts)?;
    let margin = sol.x.block(p.dims.len()).get(0, 0) - shift;
    // The shifted scalar is accurate to the solver tolerance relative to the shift.
    if margin < -opts.tol_gap.max(opts.tol_feas) * (1.0 + shift) {
        return Err(Error::InfeasibleCalibration { certificate: bidask_certificate(p, opts) });
    }
    let mut res = finish(p, &rows, program, sol);
    res.margin = Some(margin.max(0.0));
    Ok(res)
}

/// Farkas certificate of the plain bid/ask feasibility problem, if the
/// solver produces one.
fn bidask_certificate(p: &CalibrationProblem, opts: &SolverOptions) -> Vec<f64> {
    match calibrate_linear(p, Mode::BidAsk, &BlockDiagMatrix::identity(&p.dims), Sense::Minimize, opts) {
        Err(Error::InfeasibleCalibration { certificate }) => certificate,
        _ => Vec::new(),
    }
}

/// Maximizes `Σ t_k` with per-instrument margins `t_k ≥ 0`.
pub fn calibrate_robust_l1(p: &CalibrationProblem, opts: &SolverOptions) -> Result<CalibrationResult> {
    let (bids, asks) = p.spread()?;
    let mut b = Builder::new(&p.dims);
    b.add_var_trace_cost(-TIE_BREAK);
    let mut rows = Vec::new();
    let mut tblocks = Vec::new();
    for (k, om) in p.omegas.iter().enumerate() {
        let t = b.scalar(1.0);
        let lo = b.scalar(0.0);
        let hi = b.scalar(0.0);
        tblocks.push(t);
        rows.push(vec![b.constraints.len(), b.constraints.len() + 1]);
        b.push(&[(1.0, om)], &[(t, -1.0), (lo, -1.0)], bids[k]);
        b.push(&[(1.0, om)], &[(t, 1.0), (hi, 1.0)], asks[k]);
    }
    let (program, sol) = run(b.build(Sense::Maximize)?, opts)?;
    let margins: Vec<f64> = tblocks.iter().map(|&t| sol.x.block(t).get(0, 0)).collect();
    let mut res = finish(p, &rows, program, sol);
    res.objective_value = margins.iter().sum();
    res.margins = Some(margins);
    Ok(res)
}

/// Minimizes `t = ‖V^{-1/2}(A(X) − b)‖∞` and reports `η = Φ(t)`, with
/// `Φ(x) = 1 − P(|N(0,1)| ≤ x)`.
pub fn calibrate_confidence(p: &CalibrationProblem, v: &SymMatrix, opts: &SolverOptions) -> Result<CalibrationResult> {
    let m = p.len();
    if v.dim() != m {
        return Err(invalid("confidence covariance must be m × m"));
    }
    let w = inv_sqrt(v).map_err(|_| invalid("confidence covariance must be positive definite"))?;
    let mut b = Builder::new(&p.dims);
    let t = b.scalar(1.0);
    b.add_var_trace_cost(TIE_BREAK * p.scale());
    for i in 0..m {
        let coefs: Vec<(f64, &BlockDiagMatrix)> = (0..m).map(|k| (w.get(i, k), &p.omegas[k])).collect();
        let wb: f64 = (0..m).map(|k| w.get(i, k) * p.targets[k]).sum();
        let neg: Vec<(f64, &BlockDiagMatrix)> = coefs.iter().map(|(c, o)| (-c, *o)).collect();
        let sp = b.scalar(0.0);
        let sm = b.scalar(0.0);
        // t − w_iᵀ(AX − b) − s⁺ = 0 and t + w_iᵀ(AX − b) − s⁻ = 0
        b.push(&neg, &[(t, 1.0), (sp, -1.0)], -wb);
        b.push(&coefs, &[(t, 1.0), (sm, -1.0)], wb);
    }
    let (program, sol) = run(b.build(Sense::Minimize)?, opts)?;
    let tval = sol.x.block(p.dims.len()).get(0, 0).max(0.0);
    let nvar = p.dims.len();
    let x = BlockDiagMatrix::new(sol.x.blocks()[..nvar].to_vec())?;
    let z = BlockDiagMatrix::new(sol.z.blocks()[..nvar].to_vec())?;
    // Multipliers on Tr(Ω_k X) aggregate through the whitening rows.
    let mut y = vec![0.0; m];
    for i in 0..m {
        let (yp, ym) = (sol.y[2 * i], sol.y[2 * i + 1]);
        for (k, yk) in y.iter_mut().enumerate() {
            *yk += w.get(i, k) * (ym - yp);
        }
    }
    Ok(CalibrationResult {
        x,
        y,
        z,
        gap: sol.gap,
        objective_value: tval,
        margin: Some(tval),
        margins: None,
        confidence: Some(math::two_sided_tail(tval)),
        fit_residual: None,
        instrument_rows: Vec::new(),
        program: Some(program),
        solution: Some(sol),
    })
}

/// Minimizes the spectral norm `λmax(X)` through `X + W = sI`, `W ⪰ 0`.
pub fn calibrate_minnorm(p: &CalibrationProblem, mode: Mode, opts: &SolverOptions) -> Result<CalibrationResult> {
    let nvar = p.dims.len();
    let mut b = Builder::new(&p.dims);
    b.add_var_trace_cost(TIE_BREAK);
    let s = b.scalar(1.0);
    let rows = add_quotes(&mut b, p, mode)?;
    for (blk, &n) in p.dims.iter().enumerate() {
        let wblk = b.block(n);
        for i in 0..n {
            for j in 0..=i {
                let mut e = SymMatrix::zeros(n);
                e.set(i, j, if i == j { 1.0 } else { 0.5 });
                let mut terms = vec![(blk, e.clone()), (wblk, e)];
                if i == j {
                    terms.push((s, SymMatrix::scalar(-1.0)));
                }
                b.constraints.push(Constraint::new(terms, 0.0));
            }
        }
    }
    let (program, sol) = run(b.build(Sense::Minimize)?, opts)?;
    let norm = sol.x.block(nvar).get(0, 0);
    let mut res = finish(p, &rows, program, sol);
    res.objective_value = norm;
    Ok(res)
}

const PARAM_RESTARTS: usize = 5;
const PARAM_MAX_EVALS: usize = 2000;

/// Rank-two fit `X = BBᵀ`, row `i` of `B` being `v_i (cos θ_i, sin θ_i)`,
/// minimizing `Σ_k (Tr(Ω_k BBᵀ) − b_k)²` by multi-start simplex descent.
pub fn calibrate_parametric_twofactor(p: &CalibrationProblem, seed: u64) -> Result<CalibrationResult> {
    let fit = ParametricFit::new(p)?;
    let (params, value) = fit.fit(seed, None);
    Ok(fit.result(&params, value))
}

/// Objective data for the rank-two parametric fit on a single block.
pub struct ParametricFit {
    n: usize,
    /// Eigen-factors `(λ_r, v_r)` of each `Ω_k`, so that
    /// `Tr(Ω_k BBᵀ) = Σ_r λ_r ‖Bᵀv_r‖²`.
    factors: Vec<Vec<(f64, Vec<f64>)>>,
    targets: Vec<f64>,
    scale: f64,
    /// Objective value treated as an exact fit.
    exact: f64,
    restarts: usize,
    max_evals: usize,
}

impl ParametricFit {
    pub fn new(p: &CalibrationProblem) -> Result<Self> {
        if p.dims.len() != 1 {
            return Err(invalid("the parametric fit needs the stationary (single block) form"));
        }
        let n = p.dims[0];
        let factors = p
            .omegas
            .iter()
            .map(|o| {
                let e = eigh(o.block(0));
                let top = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (0..n)
                    .filter(|&r| e.values[r].abs() > 1e-14 * top)
                    .map(|r| (e.values[r], e.vectors.column(r)))
                    .collect()
            })
            .collect();
        let mass: f64 = p.omegas.iter().map(|o| o.block(0).as_slice().iter().sum::<f64>()).sum();
        let total: f64 = p.targets.iter().sum();
        let scale = if mass > 0.0 && total > 0.0 { math::sqrt(total / mass) } else { 1.0 };
        let tnorm: f64 = p.targets.iter().map(|t| t * t).sum();
        Ok(Self {
            n,
            factors,
            targets: p.targets.clone(),
            scale,
            exact: 1e-24 * tnorm.max(1e-300),
            restarts: PARAM_RESTARTS,
            max_evals: PARAM_MAX_EVALS,
        })
    }

    /// Overrides the search budget: a fit counts as exact once the squared
    /// residual is at most `rel_tol · ‖b‖²`.
    pub fn with_budget(mut self, rel_tol: f64, restarts: usize, max_evals: usize) -> Self {
        let tnorm: f64 = self.targets.iter().map(|t| t * t).sum();
        self.exact = rel_tol * tnorm.max(1e-300);
        self.restarts = restarts.max(1);
        self.max_evals = max_evals.max(1);
        self
    }

    fn factor_into(&self, params: &[f64], b: &mut [[f64; 2]]) {
        for (i, row) in b.iter_mut().enumerate() {
            let (s, c) = libm::sincos(params[self.n + i]);
            *row = [params[i] * c, params[i] * s];
        }
    }

    fn factor(&self, params: &[f64]) -> Vec<[f64; 2]> {
        let mut b = vec![[0.0; 2]; self.n];
        self.factor_into(params, &mut b);
        b
    }

    pub fn objective(&self, params: &[f64]) -> f64 {
        let mut stack = [[0.0; 2]; 16];
        let mut heap = Vec::new();
        let b: &mut [[f64; 2]] = if self.n <= stack.len() {
            &mut stack[..self.n]
        } else {
            heap.resize(self.n, [0.0; 2]);
            &mut heap
        };
        self.factor_into(params, b);
        let mut total = 0.0;
        for (fs, t) in self.factors.iter().zip(&self.targets) {
            let mut v = 0.0;
            for (lam, vec) in fs {
                let (mut s0, mut s1) = (0.0, 0.0);
                for (bi, w) in b.iter().zip(vec) {
                    s0 += w * bi[0];
                    s1 += w * bi[1];
                }
                v += lam * (s0 * s0 + s1 * s1);
            }
            total += (v - t) * (v - t);
        }
        total
    }

    pub fn is_exact(&self, value: f64) -> bool {
        value <= self.exact
    }

    /// Multi-start descent: an optional warm start followed by random
    /// starts, at most `restarts` descents in all, stopping at an exact fit.
    pub fn fit(&self, seed: u64, warm: Option<&[f64]>) -> (Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(Vec<f64>, f64)> = None;
        for i in 0..self.restarts {
            let x0 = match warm {
                Some(w) if i == 0 && w.len() == 2 * self.n => w.to_vec(),
                _ => self.random_start(&mut rng),
            };
            let r = self.minimize(&x0, self.max_evals);
            if best.as_ref().map_or(true, |(_, v)| r.1 < *v) {
                best = Some(r);
            }
            if self.is_exact(best.as_ref().unwrap().1) {
                break;
            }
        }
        best.expect("at least one restart")
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.n);
        for _ in 0..self.n {
            x.push(self.scale * rng.gen_range(0.5..1.5));
        }
        for _ in 0..self.n {
            x.push(rng.gen_range(0.0..core::f64::consts::PI));
        }
        x
    }

    /// Local simplex descent from `x0`; returns `(params, objective)`.
    pub fn minimize(&self, x0: &[f64], max_evals: usize) -> (Vec<f64>, f64) {
        let mut step = vec![0.2 * self.scale; self.n];
        step.extend(core::iter::repeat(0.3).take(self.n));
        let r = nelder_mead(|x| self.objective(x), x0, &step, max_evals, self.exact);
        (r.x, r.value)
    }

    pub fn covariance(&self, params: &[f64]) -> SymMatrix {
        let b = self.factor(params);
        SymMatrix::from_fn(self.n, |i, j| b[i][0] * b[j][0] + b[i][1] * b[j][1])
    }

    pub fn result(&self, params: &[f64], value: f64) -> CalibrationResult {
        let x = BlockDiagMatrix::single(self.covariance(params));
        CalibrationResult {
            objective_value: value,
            z: BlockDiagMatrix::zeros(&[self.n]),
            x,
            y: Vec::new(),
            gap: f64::NAN,
            margin: None,
            margins: None,
            confidence: None,
            fit_residual: Some(math::sqrt(value)),
            instrument_rows: Vec::new(),
            program: None,
            solution: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(targets: &[f64], omega: f64) -> CalibrationProblem {
        let omegas = targets.iter().map(|_| BlockDiagMatrix::single(SymMatrix::scalar(omega))).collect();
        CalibrationProblem::new(vec![1], omegas, targets.to_vec()).unwrap()
    }

    #[test]
    fn single_caplet_is_exact() {
        let p = scalar_problem(&[0.0225], 1.0);
        let r = calibrate(&CalibrationSpec::new(p, Objective::MinTrace(None), Mode::Equality)).unwrap();
        assert!((r.x.block(0).get(0, 0) - 0.0225).abs() < 1e-10);
    }

    #[test]
    fn inconsistent_duplicates_are_infeasible() {
        let p = scalar_problem(&[0.02, 0.03], 1.0);
        let r = calibrate(&CalibrationSpec::new(p, Objective::MinTrace(None), Mode::Equality));
        assert!(matches!(r, Err(Error::InfeasibleCalibration { .. })));
    }

    #[test]
    fn linf_margin_centres_single_spread() {
        let p = scalar_problem(&[0.03], 1.0).with_spread(vec![0.02], vec![0.04]).unwrap();
        let r = calibrate_robust_linf(&p, &SolverOptions::default()).unwrap();
        assert!((r.margin.unwrap() - 0.01).abs() < 1e-8);
        assert!((r.x.block(0).get(0, 0) - 0.03).abs() < 1e-8);
        let flat = scalar_problem(&[0.03], 1.0).with_spread(vec![0.03], vec![0.03]).unwrap();
        let r = calibrate_robust_linf(&flat, &SolverOptions::default()).unwrap();
        assert!(r.margin.unwrap().abs() < 1e-8);
        let disjoint = scalar_problem(&[0.02, 0.05], 1.0).with_spread(vec![0.01, 0.04], vec![0.02, 0.06]).unwrap();
        assert!(matches!(
            calibrate_robust_linf(&disjoint, &SolverOptions::default()),
            Err(Error::InfeasibleCalibration { .. })
        ));
    }

    #[test]
    fn l1_margins_split_independent_spreads() {
        let omegas = vec![
            BlockDiagMatrix::single(SymMatrix::from_diag(&[1.0, 0.0])),
            BlockDiagMatrix::single(SymMatrix::from_diag(&[0.0, 2.0])),
        ];
        let p = CalibrationProblem::new(vec![2], omegas, vec![0.03, 0.05]).unwrap().with_spread(vec![0.02, 0.04], vec![0.04, 0.08]).unwrap();
        let r = calibrate_robust_l1(&p, &SolverOptions::default()).unwrap();
        let t = r.margins.unwrap();
        assert!((t[0] - 0.01).abs() < 1e-8 && (t[1] - 0.02).abs() < 1e-8, "{t:?}");
        let linf = calibrate_robust_linf(&p, &SolverOptions::default()).unwrap();
        assert!(r.objective_value >= 2.0 * linf.margin.unwrap() - 1e-9);
    }

    #[test]
    fn confidence_program() {
        let p = scalar_problem(&[0.03, 0.05], 1.0);
        let r = calibrate_confidence(&p, &SymMatrix::identity(2), &SolverOptions::default()).unwrap();
        assert!((r.margin.unwrap() - 0.01).abs() < 1e-8);
        assert!((r.confidence.unwrap() - math::two_sided_tail(0.01)).abs() < 1e-8);
        let exact = scalar_problem(&[0.03], 1.0);
        let r = calibrate_confidence(&exact, &SymMatrix::identity(1), &SolverOptions::default()).unwrap();
        assert!(r.margin.unwrap() < 1e-8);
        assert!((r.confidence.unwrap() - 1.0).abs() < 1e-8);
        assert!(calibrate_confidence(&exact, &SymMatrix::scalar(0.0), &SolverOptions::default()).is_err());
    }

    #[test]
    fn minnorm_examples() {
        let mut om = SymMatrix::zeros(2);
        om.set(0, 0, 0.5);
        let p = CalibrationProblem::new(vec![2], vec![BlockDiagMatrix::single(om)], vec![0.02]).unwrap();
        let r = calibrate_minnorm(&p, Mode::Equality, &SolverOptions::default()).unwrap();
        assert!((r.objective_value - 0.04).abs() < 1e-8, "{}", r.objective_value);
        assert!(r.x.block(0).max_eigenvalue() <= 0.04 + 1e-8);

        let empty = CalibrationProblem::new(vec![3], vec![], vec![]).unwrap();
        let r = calibrate_minnorm(&empty, Mode::Equality, &SolverOptions::default()).unwrap();
        assert!(r.x.frob_norm() < 1e-8);

        let mut om2 = SymMatrix::zeros(2);
        om2.set(0, 0, 0.5);
        let p2 = CalibrationProblem::new(vec![2], vec![BlockDiagMatrix::single(om2)], vec![0.04]).unwrap();
        let r2 = calibrate_minnorm(&p2, Mode::Equality, &SolverOptions::default()).unwrap();
        assert!((r2.objective_value - 2.0 * 0.04).abs() < 1e-8);
    }

    #[test]
    fn parametric_single_target_is_exact() {
        let mut om = SymMatrix::zeros(3);
        om.set(1, 1, 1.0);
        let p = CalibrationProblem::new(vec![3], vec![BlockDiagMatrix::single(om)], vec![0.02]).unwrap();
        let r = calibrate_parametric_twofactor(&p, 7).unwrap();
        assert!(r.fit_residual.unwrap() <= 1e-10);
        assert!(!r.has_duals());
    }
}
