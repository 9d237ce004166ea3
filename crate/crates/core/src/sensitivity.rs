//! Dual sensitivities and first-order covariance updates under quote moves.
//!
//! A perturbation `u` of the calibration targets moves the optimum along
//! the linearized optimality system (AHO scaling, `M = I`):
//! `ΔX = E⁻¹F A*[(A E⁻¹F A*)⁻¹ u]` with `E = Z ⊛ I` and `F = X ⊛ I`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::calibration::CalibrationResult;
use crate::cone::Constraint;
use crate::error::{invalid, Error, Result};
use crate::linalg::{
    cholesky_with_floor, eigh, inv_sqrt, smat, spectral_norm, svec, svec_len, sym_kron_matrix, BlockDiagMatrix, Lu,
    Matrix, SVec, SymMatrix,
};

/// Relative size of the diagonal shift added to `E` before factoring.
pub const E_REGULARIZATION: f64 = 1e-12;
const REFINEMENT_STEPS: usize = 3;
/// Rounding allowance on the unit bound of the positivity ratio.
const RATIO_SLACK: f64 = 1e-12;

/// Named perturbation of the instrument targets, in cumulative variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationScenario {
    pub name: String,
    pub u: Vec<f64>,
}

impl PerturbationScenario {
    pub fn new(name: impl Into<String>, u: Vec<f64>) -> Result<Self> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scenario entries must be finite"));
        }
        Ok(Self { name: name.into(), u })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub name: String,
    /// Derivative of the optimal value with respect to each target.
    pub objective_gradient: Vec<f64>,
    /// First-order change of the optimal value, `gradientᵀu`.
    pub objective_change: f64,
    /// Covariance update restricted to the variable blocks.
    pub delta_x: BlockDiagMatrix,
    pub feasible_step: bool,
    /// `‖X^{-1/2} ΔX X^{-1/2}‖₂`, infinite when `X` is singular.
    pub positivity_ratio: f64,
    /// Smallest eigenvalue of `X + ΔX`.
    pub min_eigenvalue: f64,
}

/// Derivative of the optimal value with respect to each instrument target.
///
/// Under the reported dual conventions this is `+y` for both senses.
pub fn objective_sensitivity(result: &CalibrationResult) -> Result<Vec<f64>> {
    if !result.has_duals() {
        return Err(Error::NotAvailable("the parametric fit has no dual variables"));
    }
    Ok(result.y.clone())
}

/// Factored linearization at an optimal pair, reusable across scenarios.
///
/// The step solves the unreduced system `E ΔX − F A*Δy = 0`, `A(ΔX) = u`
/// rather than the `m × m` reduction: near a strictly complementary optimum
/// `E⁻¹F` spans many orders of magnitude and recombining `Σ Δy_k E⁻¹F A_k`
/// cancels badly, while the unreduced Jacobian stays well conditioned.
#[derive(Debug, Clone)]
pub struct NewtonOperator {
    dims: Vec<usize>,
    m: usize,
    /// Offset of each block's `svec` coordinates in the unknown vector.
    offsets: Vec<usize>,
    /// `(row, svec(A_row))` per block.
    rows: Vec<Vec<(usize, Vec<f64>)>>,
    system: Matrix,
    row_scale: Vec<f64>,
    lu: Lu,
    regularization: f64,
}

impl NewtonOperator {
    pub fn new(x: &BlockDiagMatrix, z: &BlockDiagMatrix, constraints: &[Constraint]) -> Result<Self> {
        let dims = x.dims();
        if z.dims() != dims {
            return Err(invalid("X and Z block structures differ"));
        }
        let m = constraints.len();
        let znorm = z.blocks().iter().map(spectral_norm).fold(0.0, f64::max);
        let regularization = E_REGULARIZATION * znorm;
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &n in &dims {
            offsets.push(total);
            total += svec_len(n);
        }
        let size = total + m;
        let mut system = Matrix::zeros(size, size);
        let mut rows = Vec::with_capacity(dims.len());
        for (bi, &n) in dims.iter().enumerate() {
            let touching: Vec<(usize, Vec<f64>)> = constraints
                .iter()
                .enumerate()
                .flat_map(|(k, c)| c.terms().iter().filter(|(b, _)| *b == bi).map(move |(_, a)| (k, a)))
                .map(|(k, a)| {
                    if a.dim() != n {
                        return Err(invalid("constraint does not match the block structure"));
                    }
                    Ok((k, svec(a).values().to_vec()))
                })
                .collect::<Result<_>>()?;
            let id = SymMatrix::identity(n);
            let mut e = SymMatrix::symmetric_part(&sym_kron_matrix(z.block(bi), &id)?);
            let min_diag = e.diag().iter().copied().fold(f64::INFINITY, f64::min);
            e.shift_diag(regularization);
            cholesky_with_floor(&e, 0.5 * regularization)
                .map_err(|_| Error::SingularOperator { min_diag, regularization })?;
            let f = sym_kron_matrix(x.block(bi), &id)?;
            let off = offsets[bi];
            let len = svec_len(n);
            for i in 0..len {
                for j in 0..len {
                    system[(off + i, off + j)] = e.get(i, j);
                }
            }
            for (k, av) in &touching {
                let fa = f.mul_vec(av).expect("conformant");
                for i in 0..len {
                    system[(off + i, total + k)] = -fa[i];
                    system[(total + k, off + i)] = av[i];
                }
            }
            rows.push(touching);
        }
        let row_scale: Vec<f64> = (0..size)
            .map(|i| {
                let mx = (0..size).fold(0.0f64, |a, j| a.max(system[(i, j)].abs()));
                if mx > 0.0 {
                    1.0 / mx
                } else {
                    1.0
                }
            })
            .collect();
        let mut scaled = system.clone();
        for i in 0..size {
            for j in 0..size {
                scaled[(i, j)] *= row_scale[i];
            }
        }
        let lu = Lu::new(scaled).map_err(|e| match e {
            Error::Singular { index } => Error::RankDeficientScenario { index: index.saturating_sub(total) },
            other => other,
        })?;
        Ok(Self { dims, m, offsets, rows, system, row_scale, lu, regularization })
    }

    /// Diagonal shift applied to `E`.
    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    /// `ΔX` for a perturbation `u` of the program right-hand sides.
    pub fn step(&self, u: &[f64]) -> Result<BlockDiagMatrix> {
        if u.len() != self.m {
            return Err(invalid("perturbation length does not match the constraints"));
        }
        if u.iter().all(|v| *v == 0.0) {
            return Ok(BlockDiagMatrix::zeros(&self.dims));
        }
        let size = self.system.rows();
        let total = size - self.m;
        let mut rhs = vec![0.0; size];
        rhs[total..].copy_from_slice(u);
        let solve_scaled = |r: &[f64]| -> Vec<f64> {
            let scaled: Vec<f64> = r.iter().zip(&self.row_scale).map(|(a, s)| a * s).collect();
            self.lu.solve(&scaled)
        };
        let mut sol = solve_scaled(&rhs);
        for _ in 0..REFINEMENT_STEPS {
            let ax = self.system.mul_vec(&sol).expect("square");
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(a, b)| a - b).collect();
            let d = solve_scaled(&r);
            for (a, b) in sol.iter_mut().zip(&d) {
                *a += b;
            }
        }
        let blocks = self
            .dims
            .iter()
            .zip(&self.offsets)
            .map(|(&n, &off)| smat(&SVec::new(sol[off..off + svec_len(n)].to_vec()).expect("triangular length")))
            .collect();
        BlockDiagMatrix::new(blocks)
    }

    /// `A(ΔX)` for a step produced by this operator.
    pub fn apply(&self, dx: &BlockDiagMatrix) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (bi, touching) in self.rows.iter().enumerate() {
            let d = svec(dx.block(bi));
            for (k, a) in touching {
                out[*k] += crate::linalg::dot(a, d.values());
            }
        }
        out
    }
}

/// One Newton step of the optimality system for targets moved by `u`.
pub fn newton_update(
    x: &BlockDiagMatrix,
    z: &BlockDiagMatrix,
    constraints: &[Constraint],
    u: &[f64],
) -> Result<BlockDiagMatrix> {
    NewtonOperator::new(x, z, constraints)?.step(u)
}

/// `(‖X^{-1/2} ΔX X^{-1/2}‖₂, ratio ≤ 1)`; a ratio of at most one keeps
/// `X + ΔX ⪰ 0`.
pub fn positivity_check(x: &BlockDiagMatrix, dx: &BlockDiagMatrix) -> Result<(f64, bool)> {
    if x.dims() != dx.dims() {
        return Err(invalid("X and ΔX block structures differ"));
    }
    let mut ratio = 0.0f64;
    for (xb, db) in x.blocks().iter().zip(dx.blocks()) {
        let w = inv_sqrt(xb)?;
        let whitened = SymMatrix::symmetric_part(&w.to_matrix().matmul(&db.to_matrix())?.matmul(&w.to_matrix())?);
        ratio = ratio.max(spectral_norm(&whitened));
    }
    Ok((ratio, ratio <= 1.0 + RATIO_SLACK))
}

/// Newton operator of a calibration result, with the map from instrument
/// perturbations to program rows.
pub fn calibration_operator(result: &CalibrationResult) -> Result<CalibrationOperator> {
    let (program, sol) = match (&result.program, &result.solution) {
        (Some(p), Some(s)) => (p, s),
        _ => return Err(Error::NotAvailable("the parametric fit has no optimality system")),
    };
    if result.instrument_rows.is_empty() && !result.y.is_empty() {
        return Err(Error::NotAvailable("this program's rows are not per-instrument targets"));
    }
    let op = NewtonOperator::new(&sol.x, &sol.z, program.constraints())?;
    Ok(CalibrationOperator { op, rows: result.instrument_rows.clone(), nvar: result.x.num_blocks(), x: result.x.clone() })
}

#[derive(Debug, Clone)]
pub struct CalibrationOperator {
    op: NewtonOperator,
    rows: Vec<Vec<usize>>,
    nvar: usize,
    x: BlockDiagMatrix,
}

impl CalibrationOperator {
    pub fn regularization(&self) -> f64 {
        self.op.regularization()
    }

    /// Covariance update for instrument-level target moves `u`.
    pub fn step(&self, u: &[f64]) -> Result<BlockDiagMatrix> {
        if u.len() != self.rows.len() {
            return Err(invalid("scenario length does not match the instruments"));
        }
        let mut full = vec![0.0; self.op.num_rows()];
        for (rows, v) in self.rows.iter().zip(u) {
            for &r in rows {
                full[r] = *v;
            }
        }
        let dx = self.op.step(&full)?;
        BlockDiagMatrix::new(dx.into_blocks().into_iter().take(self.nvar).collect())
    }

    fn report(&self, name: &str, gradient: &[f64], u: &[f64]) -> Result<SensitivityReport> {
        let delta_x = self.step(u)?;
        let positivity_ratio = match positivity_check(&self.x, &delta_x) {
            Ok((r, _)) => r,
            Err(Error::NotPositiveDefinite { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let mut moved = self.x.clone();
        moved.axpy(1.0, &delta_x);
        let min_eigenvalue = moved.blocks().iter().map(|b| eigh(b).min()).fold(f64::INFINITY, f64::min);
        Ok(SensitivityReport {
            name: name.into(),
            objective_gradient: gradient.to_vec(),
            objective_change: gradient.iter().zip(u).map(|(g, v)| g * v).sum(),
            delta_x,
            feasible_step: positivity_ratio <= 1.0 + RATIO_SLACK,
            positivity_ratio,
            min_eigenvalue,
        })
    }
}

/// Factors the Newton map once and evaluates every scenario against it.
pub fn scenario_sweep(result: &CalibrationResult, scenarios: &[PerturbationScenario]) -> Result<Vec<SensitivityReport>> {
    let gradient = objective_sensitivity(result)?;
    let op = calibration_operator(result)?;
    scenarios.iter().map(|s| op.report(&s.name, &gradient, &s.u)).collect()
}
