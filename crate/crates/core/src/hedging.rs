//! Superreplication bounds, static hedges from bound duals, and the Gamma
//! hedging eigenvalue program.

use alloc::vec;
use alloc::vec::Vec;

use crate::calibration::{calibrate_linear, CalibrationProblem, Mode, VariableForm};
use crate::cone::{solve, ConeProgram, Constraint, Sense, SolverOptions, Status};
use crate::error::{invalid, Error, Result};
use crate::linalg::{eigh, sqrt_psd, BlockDiagMatrix, SymMatrix};
use crate::market::{build_omega_nonstationary, build_omega_stationary, SwaptionInstrument};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HedgeReport {
    pub direction: Direction,
    /// Extremal `Tr(Ω₀X)` over the calibrated set.
    pub bound_cumvar: f64,
    /// Black price of the target at `bound_cumvar`.
    pub bound_price: f64,
    pub bound_vol: f64,
    /// Static hedge notionals, one per calibration instrument.
    pub lambda: Vec<f64>,
    /// Bound duals, one per calibration instrument.
    pub y: Vec<f64>,
    pub residual_gap: f64,
    /// `Σ λ_k C_k` at the calibration instruments' quoted variances.
    pub hedge_cost: f64,
    /// Model variances `Tr(Ω_k X)` at the bound solution.
    pub variances: Vec<f64>,
    pub x: BlockDiagMatrix,
}

/// Coefficient matrix of an instrument in the requested variable form.
pub fn instrument_omega(inst: &SwaptionInstrument, form: VariableForm, horizon: usize) -> Result<BlockDiagMatrix> {
    match form {
        VariableForm::Stationary => build_omega_stationary(inst, horizon).map(BlockDiagMatrix::single),
        VariableForm::NonStationary => build_omega_nonstationary(inst, horizon),
    }
}

/// Calibration set shared by bound solves.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSetup {
    pub instruments: Vec<SwaptionInstrument>,
    pub problem: CalibrationProblem,
    pub form: VariableForm,
    pub horizon: usize,
    pub mode: Mode,
    pub options: SolverOptions,
}

impl BoundSetup {
    pub fn new(instruments: Vec<SwaptionInstrument>, form: VariableForm, horizon: usize, mode: Mode) -> Result<Self> {
        let problem = CalibrationProblem::from_instruments(&instruments, form, horizon)?;
        Ok(Self { instruments, problem, form, horizon, mode, options: SolverOptions::default() })
    }
}

/// Extremizes the target's cumulative variance over the calibrated set and
/// reads the static hedge off the duals.
pub fn price_bounds(target: &SwaptionInstrument, setup: &BoundSetup, direction: Direction) -> Result<HedgeReport> {
    let omega0 = instrument_omega(target, setup.form, setup.horizon)?;
    let sense = match direction {
        Direction::Upper => Sense::Maximize,
        Direction::Lower => Sense::Minimize,
    };
    let res = match calibrate_linear(&setup.problem, setup.mode, &omega0, sense, &polished(&setup.options)) {
        Err(Error::Solver(_)) => calibrate_linear(&setup.problem, setup.mode, &omega0, sense, &setup.options)?,
        other => other?,
    };
    let bound_cumvar = res.objective_value.max(0.0);
    let variances = setup.problem.variances(&res.x);
    let mut report = HedgeReport {
        direction,
        bound_cumvar,
        bound_price: target.price(bound_cumvar)?,
        bound_vol: target.vol_from_variance(bound_cumvar),
        lambda: Vec::new(),
        y: res.y,
        residual_gap: res.gap,
        hedge_cost: 0.0,
        variances,
        x: res.x,
    };
    report.lambda = static_hedge_portfolio(&report, target, &setup.instruments, 1.0)?;
    report.hedge_cost = report
        .lambda
        .iter()
        .zip(&setup.instruments)
        .map(|(l, inst)| inst.price(inst.target()).map(|c| l * c))
        .sum::<Result<f64>>()?;
    Ok(report)
}

/// Tighter tolerances tried first so that the duals, and hence the hedge
/// notionals, are accurate well beyond the price tolerance.
fn polished(opts: &SolverOptions) -> SolverOptions {
    SolverOptions { tol_gap: opts.tol_gap.min(POLISH_GAP), tol_feas: opts.tol_feas.min(POLISH_FEAS), ..*opts }
}

const POLISH_GAP: f64 = 1e-12;
const POLISH_FEAS: f64 = 1e-10;

/// `λ_k = notional · y_k · vega₀(V₀) / vega_k(V_k)` with variance vegas at
/// the bound solution.
pub fn static_hedge_portfolio(
    report: &HedgeReport,
    target: &SwaptionInstrument,
    instruments: &[SwaptionInstrument],
    notional: f64,
) -> Result<Vec<f64>> {
    if report.y.len() != instruments.len() || report.variances.len() != instruments.len() {
        return Err(invalid("report does not match the calibration instruments"));
    }
    let vega0 = vega_or_degenerate(target, report.bound_cumvar, usize::MAX)?;
    instruments
        .iter()
        .enumerate()
        .map(|(k, inst)| {
            let vk = vega_or_degenerate(inst, report.variances[k], k)?;
            Ok(notional * report.y[k] * vega0 / vk)
        })
        .collect()
}

fn vega_or_degenerate(inst: &SwaptionInstrument, v: f64, index: usize) -> Result<f64> {
    match inst.variance_vega(v) {
        Ok(vega) if vega > 0.0 && vega.is_finite() => Ok(vega),
        _ => Err(Error::DegenerateVega { index }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaHedgeSpec {
    /// Portfolio gamma matrix `Γ`.
    pub gamma_matrix: SymMatrix,
    /// Per-asset vanilla gammas `γ_i`.
    pub gammas: Vec<f64>,
    /// Asset covariance `Σ`.
    pub sigma: SymMatrix,
}

impl GammaHedgeSpec {
    pub fn new(gamma_matrix: SymMatrix, gammas: Vec<f64>, sigma: SymMatrix) -> Result<Self> {
        let n = gamma_matrix.dim();
        if gammas.len() != n || sigma.dim() != n {
            return Err(invalid("Γ, γ and Σ dimensions differ"));
        }
        if gammas.iter().any(|g| *g == 0.0 || !g.is_finite()) {
            return Err(invalid("every vanilla gamma must be finite and nonzero"));
        }
        let top = eigh(&sigma);
        if !(top.min() > 1e-12 * top.max().abs()) {
            return Err(invalid("Σ must be positive definite"));
        }
        Ok(Self { gamma_matrix, gammas, sigma })
    }

    pub fn dim(&self) -> usize {
        self.gammas.len()
    }

    /// `Σ^{1/2} Γ(y) Σ^{1/2}` with `Γ(y) = Γ + diag(γ ∘ y)`.
    pub fn whitened(&self, y: &[f64]) -> SymMatrix {
        let s = sqrt_psd(&self.sigma);
        let mut g = self.gamma_matrix.clone();
        for (i, (gi, yi)) in self.gammas.iter().zip(y).enumerate() {
            g.add_at(i, i, gi * yi);
        }
        let q = s.to_matrix();
        g.congruence(&q)
    }

    /// Worst-case quadratic exposure `max|eig(ΣΓ(y))|`.
    pub fn exposure(&self, y: &[f64]) -> f64 {
        let e = eigh(&self.whitened(y));
        e.max().abs().max(e.min().abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaHedge {
    pub y: Vec<f64>,
    pub t: f64,
    pub gap: f64,
}

/// Minimizes `t` subject to `−tI ⪯ Σ^{1/2}Γ(y)Σ^{1/2} ⪯ tI`.
///
/// Posed as the dual of a two-block program whose multipliers are
/// `(t, y_1..y_n)`.
pub fn gamma_hedge(spec: &GammaHedgeSpec, opts: &SolverOptions) -> Result<GammaHedge> {
    let n = spec.dim();
    let s = sqrt_psd(&spec.sigma);
    let sg = spec.gamma_matrix.congruence(&s.to_matrix());
    let c = BlockDiagMatrix::new(vec![sg.scaled(-1.0), sg])?;
    let neg_id = SymMatrix::identity(n).scaled(-1.0);
    let mut constraints = vec![Constraint::new(vec![(0, neg_id.clone()), (1, neg_id)], -1.0)];
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|r| s.get(r, i)).collect();
        let a = SymMatrix::outer(&col).scaled(spec.gammas[i]);
        constraints.push(Constraint::new(vec![(0, a.clone()), (1, a.scaled(-1.0))], 0.0));
    }
    let program = ConeProgram::new(vec![n, n], c, constraints, Sense::Minimize)?;
    let sol = solve(&program, opts);
    match sol.status {
        Status::Optimal => Ok(GammaHedge { t: sol.y[0], y: sol.y[1..].to_vec(), gap: sol.gap }),
        status => Err(Error::Solver(alloc::format!("gamma hedge ended with {status:?}: {}", sol.message))),
    }
}
