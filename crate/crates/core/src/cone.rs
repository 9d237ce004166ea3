//! Primal-dual interior-point solver for block-diagonal semidefinite programs.
//!
//! Primal: optimize `Tr(C X)` subject to `Tr(A_k X) = b_k`, `X ⪰ 0`, where
//! `X` is block diagonal and 1×1 blocks act as nonnegative scalars.
//! For a minimization the dual is `max bᵀy` with `Z = C − Σ y_k A_k ⪰ 0`;
//! for a maximization it is `min bᵀy` with `Z = Σ y_k A_k − C ⪰ 0`.
//!
//! The iteration uses the AHO direction (linearizing `½(XZ + ZX) = μI`)
//! with a Mehrotra predictor-corrector, working in the eigenbasis of each
//! `Z` block so the Lyapunov solves reduce to entrywise divisions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::{dot, eigh, gemm, norm2, BlockDiagMatrix, Lu, Matrix, SymMatrix};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// One linear equality `Σ_b Tr(A_{kb} X_b) = rhs`, storing only the blocks
/// the constraint touches.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    terms: Vec<(usize, SymMatrix)>,
    rhs: f64,
}

impl Constraint {
    pub fn new(terms: Vec<(usize, SymMatrix)>, rhs: f64) -> Self {
        Self { terms, rhs }
    }

    pub fn single(block: usize, a: SymMatrix, rhs: f64) -> Self {
        Self { terms: vec![(block, a)], rhs }
    }

    /// Keeps only the nonzero blocks of `a`.
    pub fn from_block_diag(a: &BlockDiagMatrix, rhs: f64) -> Self {
        let terms = a
            .blocks()
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_zero())
            .map(|(i, b)| (i, b.clone()))
            .collect();
        Self { terms, rhs }
    }

    pub fn terms(&self) -> &[(usize, SymMatrix)] {
        &self.terms
    }

    pub fn rhs(&self) -> f64 {
        self.rhs
    }

    /// `Tr(A X)`.
    pub fn apply(&self, x: &BlockDiagMatrix) -> f64 {
        self.terms.iter().map(|(b, a)| a.dot(x.block(*b))).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        math::sqrt(self.terms.iter().map(|(_, a)| a.dot(a)).sum())
    }
}

/// Standard-form block SDP.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    dims: Vec<usize>,
    c: BlockDiagMatrix,
    constraints: Vec<Constraint>,
    sense: Sense,
}

impl ConeProgram {
    pub fn new(dims: Vec<usize>, c: BlockDiagMatrix, constraints: Vec<Constraint>, sense: Sense) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(invalid("cone program needs at least one block, all of positive size"));
        }
        if c.dims() != dims {
            return Err(invalid("objective does not conform to the block structure"));
        }
        for (k, con) in constraints.iter().enumerate() {
            if !con.rhs.is_finite() {
                return Err(invalid(format!("constraint {k} has a non-finite right-hand side")));
            }
            let mut seen = vec![false; dims.len()];
            for (b, a) in &con.terms {
                if *b >= dims.len() || a.dim() != dims[*b] {
                    return Err(invalid(format!("constraint {k} does not conform to the block structure")));
                }
                if seen[*b] {
                    return Err(invalid(format!("constraint {k} lists block {b} twice")));
                }
                seen[*b] = true;
            }
        }
        Ok(Self { dims, c, constraints, sense })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn objective_matrix(&self) -> &BlockDiagMatrix {
        &self.c
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn rhs(&self) -> Vec<f64> {
        self.constraints.iter().map(Constraint::rhs).collect()
    }

    /// `A(X) = (Tr(A_k X))_k`.
    pub fn apply(&self, x: &BlockDiagMatrix) -> Vec<f64> {
        self.constraints.iter().map(|c| c.apply(x)).collect()
    }

    /// `A*(y) = Σ y_k A_k`.
    pub fn adjoint(&self, y: &[f64]) -> BlockDiagMatrix {
        let mut out = BlockDiagMatrix::zeros(&self.dims);
        for (con, &yk) in self.constraints.iter().zip(y) {
            for (b, a) in &con.terms {
                out.block_mut(*b).axpy(yk, a);
            }
        }
        out
    }

    pub fn objective(&self, x: &BlockDiagMatrix) -> f64 {
        self.c.dot(x)
    }

    /// Dual slack for this program's sense.
    pub fn dual_slack(&self, y: &[f64]) -> BlockDiagMatrix {
        let ay = self.adjoint(y);
        match self.sense {
            Sense::Minimize => self.c.sub(&ay),
            Sense::Maximize => ay.sub(&self.c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    /// Record per-iteration diagnostics in [`ConeSolution::trace`].
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol_gap: 1e-8, tol_feas: 1e-8, max_iter: 100, verbose: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// `y` with `Σ y_k A_k ⪯ 0` and `bᵀy > 0` (scaled so `‖y‖∞ = 1`).
    Farkas(Vec<f64>),
    /// `R ⪰ 0` with `A(R) = 0` and an objective improving along `R`.
    ImprovingRay(BlockDiagMatrix),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub sigma: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution {
    pub status: Status,
    pub x: BlockDiagMatrix,
    pub y: Vec<f64>,
    pub z: BlockDiagMatrix,
    /// `Tr(X Z)`.
    pub gap: f64,
    /// `‖b − A(X)‖₂ / (1 + ‖b‖₂)`.
    pub primal_residual: f64,
    /// `‖Z − (dual slack of y)‖_F / (1 + ‖C‖_F)`.
    pub dual_residual: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub certificate: Option<Certificate>,
    /// Constraints found linearly dependent on the others (and consistent);
    /// their multipliers are fixed at zero.
    pub dropped: Vec<usize>,
    pub trace: Vec<IterationLog>,
    pub message: String,
}

/// Independent recomputation of optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub min_eig_x: f64,
    pub min_eig_z: f64,
}

pub fn check_kkt(p: &ConeProgram, s: &ConeSolution) -> KktReport {
    let b = p.rhs();
    let ax = p.apply(&s.x);
    let rp: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let dual = p.dual_slack(&s.y);
    KktReport {
        primal_residual: norm2(&rp) / (1.0 + norm2(&b)),
        dual_residual: dual.sub(&s.z).frob_norm() / (1.0 + p.c.frob_norm()),
        gap: s.x.dot(&s.z),
        min_eig_x: s.x.min_eigenvalue(),
        min_eig_z: s.z.min_eigenvalue(),
    }
}

const STEP_FRACTION: f64 = 0.98;
const INFEASIBILITY_TOL: f64 = 1e-8;
const DEPENDENCE_TOL: f64 = 1e-10;

pub fn solve(p: &ConeProgram, opts: &SolverOptions) -> ConeSolution {
    let m = p.constraints.len();
    let (kept, dropped, farkas) = presolve(p);
    if let Some(y) = farkas {
        return ConeSolution {
            status: Status::PrimalInfeasible,
            x: BlockDiagMatrix::zeros(&p.dims),
            y: y.clone(),
            z: BlockDiagMatrix::zeros(&p.dims),
            gap: 0.0,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            primal_objective: f64::NAN,
            dual_objective: f64::NAN,
            iterations: 0,
            certificate: Some(Certificate::Farkas(y)),
            dropped,
            trace: Vec::new(),
            message: "inconsistent linearly dependent constraints".into(),
        };
    }

    let sign = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let c: Vec<SymMatrix> = p.c.blocks().iter().map(|b| b.scaled(sign)).collect();
    let mut ipm = Ipm::new(p, &kept, c);
    let mut out = ipm.run(opts);

    // Map back to the full constraint list and the caller's sense.
    let mut y = vec![0.0; m];
    for (j, &k) in kept.iter().enumerate() {
        y[k] = sign * ipm.y[j];
    }
    let x = BlockDiagMatrix::new(ipm.x.clone()).expect("non-empty");
    let z = BlockDiagMatrix::new(ipm.z.clone()).expect("non-empty");
    if let Some(Certificate::Farkas(cy)) = &out.certificate {
        let mut full = vec![0.0; m];
        for (j, &k) in kept.iter().enumerate() {
            full[k] = cy[j];
        }
        out.certificate = Some(Certificate::Farkas(full));
    }
    let b = p.rhs();
    let primal_objective = p.c.dot(&x);
    let dual_objective = dot(&b, &y);
    ConeSolution {
        status: out.status,
        gap: x.dot(&z),
        primal_residual: out.primal_residual,
        dual_residual: out.dual_residual,
        primal_objective,
        dual_objective,
        x,
        y,
        z,
        iterations: out.iterations,
        certificate: out.certificate,
        dropped,
        trace: out.trace,
        message: out.message,
    }
}

/// Detects linearly dependent constraints with a pivoted Cholesky of the
/// Gram matrix `⟨A_k, A_l⟩`. Dependent rows with consistent right-hand sides
/// are dropped; an inconsistent one yields a Farkas certificate.
fn presolve(p: &ConeProgram) -> (Vec<usize>, Vec<usize>, Option<Vec<f64>>) {
    let m = p.constraints.len();
    if m == 0 {
        return (Vec::new(), Vec::new(), None);
    }
    let inner = |k: usize, l: usize| -> f64 {
        let mut s = 0.0;
        for (bk, ak) in &p.constraints[k].terms {
            for (bl, al) in &p.constraints[l].terms {
                if bk == bl {
                    s += ak.dot(al);
                }
            }
        }
        s
    };
    let mut g = vec![0.0; m * m];
    for k in 0..m {
        for l in 0..=k {
            let v = inner(k, l);
            g[k * m + l] = v;
            g[l * m + k] = v;
        }
    }
    let scale = (0..m).map(|k| g[k * m + k]).fold(0.0, f64::max);
    // Greedy Gram-Schmidt in constraint order keeps the earliest rows.
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    let mut l_rows: Vec<Vec<f64>> = Vec::new(); // rows of the Cholesky factor of G[kept, kept]
    for k in 0..m {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (j, &kj) in kept.iter().enumerate() {
            let s = g[k * m + kj] - dot(&row[..j], &l_rows[j][..j]);
            row.push(s / l_rows[j][j]);
        }
        let d = g[k * m + k] - dot(&row, &row);
        if d > DEPENDENCE_TOL * scale.max(g[k * m + k]) && g[k * m + k] > 0.0 {
            row.push(math::sqrt(d));
            l_rows.push(row);
            kept.push(k);
            continue;
        }
        // A_k ≈ Σ c_j A_{kept_j}: solve L Lᵀ c = G[kept, k] (row already holds L⁻¹ G[kept, k]).
        let r = kept.len();
        let mut cvec = row.clone();
        for i in (0..r).rev() {
            let mut s = cvec[i];
            for t in i + 1..r {
                s -= l_rows[t][i] * cvec[t];
            }
            cvec[i] = s / l_rows[i][i];
        }
        let combo: f64 = kept.iter().zip(&cvec).map(|(&kj, cj)| cj * p.constraints[kj].rhs).sum();
        let bk = p.constraints[k].rhs;
        let mag = 1.0 + bk.abs() + kept.iter().zip(&cvec).map(|(&kj, cj)| (cj * p.constraints[kj].rhs).abs()).sum::<f64>();
        let mismatch = bk - combo;
        if mismatch.abs() <= 1e-9 * mag {
            dropped.push(k);
            continue;
        }
        // y = s·(e_k − Σ c_j e_{kept_j}) gives A*y ≈ 0 and bᵀy = s·mismatch.
        let s = mismatch.signum();
        let mut y = vec![0.0; m];
        y[k] = s;
        for (&kj, cj) in kept.iter().zip(&cvec) {
            y[kj] = -s * cj;
        }
        let nrm = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        y.iter_mut().for_each(|v| *v /= nrm);
        return (kept, dropped, Some(y));
    }
    (kept, dropped, None)
}

struct RunOutcome {
    status: Status,
    primal_residual: f64,
    dual_residual: f64,
    iterations: usize,
    certificate: Option<Certificate>,
    trace: Vec<IterationLog>,
    message: String,
}

/// Per-block factorization data for one iteration, all in the eigenbasis
/// `Q` of the current `Z` block.
struct BlockFactor {
    n: usize,
    q: Vec<f64>,
    lam: Vec<f64>,
    /// `Qᵀ X Q`.
    xt: Vec<f64>,
    /// `Qᵀ A_k Q` per touching constraint, paired with `E⁻¹F` applied to it.
    terms: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

struct Ipm<'a> {
    dims: Vec<usize>,
    /// Constraint terms per block: (reduced constraint index, matrix).
    by_block: Vec<Vec<(usize, &'a SymMatrix)>>,
    b: Vec<f64>,
    c: Vec<SymMatrix>,
    x: Vec<SymMatrix>,
    y: Vec<f64>,
    z: Vec<SymMatrix>,
}

struct Direction {
    dxt: Vec<Vec<f64>>,
    dy: Vec<f64>,
    dzt: Vec<Vec<f64>>,
}

impl<'a> Ipm<'a> {
    fn new(p: &'a ConeProgram, kept: &[usize], c: Vec<SymMatrix>) -> Self {
        let dims = p.dims.clone();
        let mut by_block: Vec<Vec<(usize, &SymMatrix)>> = vec![Vec::new(); dims.len()];
        for (j, &k) in kept.iter().enumerate() {
            for (b, a) in &p.constraints[k].terms {
                by_block[*b].push((j, a));
            }
        }
        let b: Vec<f64> = kept.iter().map(|&k| p.constraints[k].rhs).collect();
        let a_max = kept.iter().map(|&k| p.constraints[k].frob_norm()).fold(0.0, f64::max);
        let c_norm = math::sqrt(c.iter().map(|s| s.dot(s)).sum());
        let b_inf = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let eta = 1.0f64.max(b_inf).max(a_max).max(c_norm);
        let x: Vec<SymMatrix> = dims.iter().map(|&d| SymMatrix::identity(d).scaled(eta)).collect();
        let z = x.clone();
        let y = vec![0.0; b.len()];
        Self { dims, by_block, b, c, x, y, z }
    }

    fn ntot(&self) -> f64 {
        self.dims.iter().sum::<usize>() as f64
    }

    fn apply(&self, x: &[SymMatrix]) -> Vec<f64> {
        let mut out = vec![0.0; self.b.len()];
        for (blk, terms) in self.by_block.iter().enumerate() {
            for (k, a) in terms {
                out[*k] += a.dot(&x[blk]);
            }
        }
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<SymMatrix> {
        let mut out: Vec<SymMatrix> = self.dims.iter().map(|&d| SymMatrix::zeros(d)).collect();
        for (blk, terms) in self.by_block.iter().enumerate() {
            for (k, a) in terms {
                out[blk].axpy(y[*k], a);
            }
        }
        out
    }

    fn run(&mut self, opts: &SolverOptions) -> RunOutcome {
        let b_norm = norm2(&self.b);
        let c_norm = math::sqrt(self.c.iter().map(|s| s.dot(s)).sum());
        let ntot = self.ntot();
        let mut trace = Vec::new();
        let mut last = (f64::INFINITY, f64::INFINITY);
        let mut stalls = 0;

        for iter in 0..=opts.max_iter {
            let ax = self.apply(&self.x);
            let rp: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let ay = self.adjoint(&self.y);
            let rd: Vec<SymMatrix> = (0..self.dims.len())
                .map(|i| {
                    let mut r = self.c[i].sub(&ay[i]);
                    r.axpy(-1.0, &self.z[i]);
                    r
                })
                .collect();
            let gap: f64 = self.x.iter().zip(&self.z).map(|(x, z)| x.dot(z)).sum();
            let pobj: f64 = self.c.iter().zip(&self.x).map(|(c, x)| c.dot(x)).sum();
            let dobj = dot(&self.b, &self.y);
            let pres = norm2(&rp) / (1.0 + b_norm);
            let dres = math::sqrt(rd.iter().map(|r| r.dot(r)).sum()) / (1.0 + c_norm);
            last = (pres, dres);

            if !(gap.is_finite() && pres.is_finite() && dres.is_finite()) {
                return self.outcome(Status::NumericalFailure, last, iter, None, trace, "non-finite iterate");
            }
            if gap <= opts.tol_gap * (1.0 + pobj.abs()) && pres <= opts.tol_feas && dres <= opts.tol_feas {
                return self.outcome(Status::Optimal, last, iter, None, trace, "");
            }
            if let Some(cert) = self.farkas_test(&ay, dobj, pres, opts) {
                return self.outcome(Status::PrimalInfeasible, last, iter, Some(cert), trace, "dual ray diverged");
            }
            if let Some(cert) = self.ray_test(&ax, pobj, dres, opts) {
                return self.outcome(Status::DualInfeasible, last, iter, Some(cert), trace, "primal ray diverged");
            }
            if iter == opts.max_iter {
                break;
            }

            let mu = gap / ntot;
            let factors: Vec<BlockFactor> = (0..self.dims.len()).map(|i| self.factor_block(i)).collect();
            let schur = self.schur(&factors);
            let lu = match Lu::with_floor(schur.clone(), 0.0).or_else(|_| {
                let reg = 1e-14 * schur.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let n = schur.rows();
                let mut s = schur.clone();
                for i in 0..n {
                    s[(i, i)] += reg;
                }
                Lu::with_floor(s, 0.0)
            }) {
                Ok(lu) => lu,
                Err(_) => {
                    return self.outcome(Status::NumericalFailure, last, iter, None, trace, "Schur complement is singular")
                }
            };
            let rdt: Vec<Vec<f64>> = factors.iter().zip(&rd).map(|(f, r)| to_basis(&f.q, r.as_slice(), f.n)).collect();

            // Predictor: Rc = −½(XZ + ZX), which in the Z eigenbasis is −X̃ ∘ (λ_i + λ_j)/2.
            let rc_aff: Vec<Vec<f64>> = factors
                .iter()
                .map(|f| {
                    let n = f.n;
                    let mut r = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            r[i * n + j] = -0.5 * f.xt[i * n + j] * (f.lam[i] + f.lam[j]);
                        }
                    }
                    r
                })
                .collect();
            let aff = self.direction(&factors, &lu, &rp, &rc_aff, &rdt);
            let ap_aff = self.primal_step(&factors, &aff.dxt, 1.0);
            let ad_aff = dual_step(&factors, &aff.dzt, 1.0);
            let mut mu_aff = 0.0;
            for (f, (dx, dz)) in factors.iter().zip(aff.dxt.iter().zip(&aff.dzt)) {
                let n = f.n;
                for i in 0..n {
                    for j in 0..n {
                        let xv = f.xt[i * n + j] + ap_aff * dx[i * n + j];
                        let zv = if i == j { f.lam[i] } else { 0.0 } + ad_aff * dz[i * n + j];
                        mu_aff += xv * zv;
                    }
                }
            }
            mu_aff /= ntot;
            let ratio = if mu > 0.0 { (mu_aff.max(0.0) / mu).min(1.0) } else { 0.0 };
            let sigma = ratio * ratio * ratio;

            // Corrector: Rc = σμI − ½(XZ+ZX) − ½(ΔXaΔZa + ΔZaΔXa).
            let rc: Vec<Vec<f64>> = factors
                .iter()
                .enumerate()
                .map(|(bi, f)| {
                    let n = f.n;
                    let mut prod = vec![0.0; n * n];
                    gemm(n, &aff.dxt[bi], &aff.dzt[bi], &mut prod);
                    let mut r = rc_aff[bi].clone();
                    for i in 0..n {
                        for j in 0..n {
                            r[i * n + j] -= 0.5 * (prod[i * n + j] + prod[j * n + i]);
                        }
                        r[i * n + i] += sigma * mu;
                    }
                    r
                })
                .collect();
            let dir = self.direction(&factors, &lu, &rp, &rc, &rdt);
            let ap = self.primal_step(&factors, &dir.dxt, STEP_FRACTION);
            let ad = dual_step(&factors, &dir.dzt, STEP_FRACTION);

            for (bi, f) in factors.iter().enumerate() {
                let n = f.n;
                let mut xt = f.xt.clone();
                for (v, d) in xt.iter_mut().zip(&dir.dxt[bi]) {
                    *v += ap * d;
                }
                let mut zt = vec![0.0; n * n];
                for i in 0..n {
                    zt[i * n + i] = f.lam[i];
                }
                for (v, d) in zt.iter_mut().zip(&dir.dzt[bi]) {
                    *v += ad * d;
                }
                self.x[bi] = from_basis(&f.q, &xt, n);
                self.z[bi] = from_basis(&f.q, &zt, n);
            }
            for (y, d) in self.y.iter_mut().zip(&dir.dy) {
                *y += ad * d;
            }

            if opts.verbose {
                trace.push(IterationLog {
                    iter,
                    primal_objective: pobj,
                    dual_objective: dobj,
                    gap,
                    primal_residual: pres,
                    dual_residual: dres,
                    sigma,
                    step_primal: ap,
                    step_dual: ad,
                });
            }
            if ap < 1e-10 && ad < 1e-10 {
                stalls += 1;
                if stalls >= 3 {
                    return self.outcome(Status::NumericalFailure, last, iter + 1, None, trace, "step lengths collapsed");
                }
            } else {
                stalls = 0;
            }
        }
        self.outcome(Status::MaxIterations, last, opts.max_iter, None, trace, "iteration cap reached")
    }

    fn outcome(
        &self,
        status: Status,
        (primal_residual, dual_residual): (f64, f64),
        iterations: usize,
        certificate: Option<Certificate>,
        trace: Vec<IterationLog>,
        message: &str,
    ) -> RunOutcome {
        RunOutcome { status, primal_residual, dual_residual, iterations, certificate, trace, message: message.into() }
    }

    /// Dual iterate as a Farkas ray: `bᵀy > 0` with `λmax(A*y)` negligible.
    fn farkas_test(&self, ay: &[SymMatrix], dobj: f64, pres: f64, opts: &SolverOptions) -> Option<Certificate> {
        if !(dobj > 0.0) || pres <= opts.tol_feas {
            return None;
        }
        let lmax = ay.iter().map(SymMatrix::max_eigenvalue).fold(f64::NEG_INFINITY, f64::max);
        if lmax > INFEASIBILITY_TOL * dobj {
            return None;
        }
        let nrm = self.y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Some(Certificate::Farkas(self.y.iter().map(|v| v / nrm).collect()))
    }

    /// Primal iterate as an improving ray: `Tr(CX) < 0` with `A(X)` negligible.
    fn ray_test(&self, ax: &[f64], pobj: f64, dres: f64, opts: &SolverOptions) -> Option<Certificate> {
        if !(pobj < 0.0) || dres <= opts.tol_feas {
            return None;
        }
        if norm2(ax) > INFEASIBILITY_TOL * pobj.abs() {
            return None;
        }
        let nrm = math::sqrt(self.x.iter().map(|x| x.dot(x)).sum());
        let ray = self.x.iter().map(|x| x.scaled(1.0 / nrm)).collect();
        Some(Certificate::ImprovingRay(BlockDiagMatrix::new(ray).expect("non-empty")))
    }

    fn factor_block(&self, bi: usize) -> BlockFactor {
        let n = self.dims[bi];
        let eig = eigh(&self.z[bi]);
        let q = eig.vectors.as_slice().to_vec();
        let top = eig.max().abs().max(f64::MIN_POSITIVE);
        let lam: Vec<f64> = eig.values.iter().map(|&l| l.max(1e-300).max(1e-17 * top)).collect();
        let xt = to_basis(&q, self.x[bi].as_slice(), n);
        let terms = self.by_block[bi]
            .iter()
            .map(|(k, a)| {
                let at = to_basis(&q, a.as_slice(), n);
                let kt = lyap_f(&xt, &lam, &at, n);
                (*k, at, kt)
            })
            .collect();
        BlockFactor { n, q, lam, xt, terms }
    }

    /// `M_lk = ⟨A_l, E⁻¹F A_k⟩`.
    fn schur(&self, factors: &[BlockFactor]) -> Matrix {
        let m = self.b.len();
        let mut s = Matrix::zeros(m, m);
        for f in factors {
            for (l, al, _) in &f.terms {
                for (k, _, kk) in &f.terms {
                    s[(*l, *k)] += dot(al, kk);
                }
            }
        }
        s
    }

    /// Solves the Newton system for the given complementarity and dual
    /// residuals (both in the Z eigenbasis).
    fn direction(&self, factors: &[BlockFactor], lu: &Lu, rp: &[f64], rc: &[Vec<f64>], rdt: &[Vec<f64>]) -> Direction {
        let m = self.b.len();
        // H = E⁻¹(Rc − F Rd)
        let h: Vec<Vec<f64>> = factors
            .iter()
            .enumerate()
            .map(|(bi, f)| {
                let n = f.n;
                let mut xr = vec![0.0; n * n];
                gemm(n, &f.xt, &rdt[bi], &mut xr);
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let fr = 0.5 * (xr[i * n + j] + xr[j * n + i]);
                        out[i * n + j] = 2.0 * (rc[bi][i * n + j] - fr) / (f.lam[i] + f.lam[j]);
                    }
                }
                out
            })
            .collect();
        let mut rhs = rp.to_vec();
        for (bi, f) in factors.iter().enumerate() {
            for (k, at, _) in &f.terms {
                rhs[*k] -= dot(at, &h[bi]);
            }
        }
        let dy = if m > 0 { lu.solve(&rhs) } else { Vec::new() };
        let mut dxt = h;
        let mut dzt: Vec<Vec<f64>> = rdt.to_vec();
        for (bi, f) in factors.iter().enumerate() {
            for (k, at, kk) in &f.terms {
                let d = dy[*k];
                for (v, w) in dxt[bi].iter_mut().zip(kk) {
                    *v += d * w;
                }
                for (v, w) in dzt[bi].iter_mut().zip(at) {
                    *v -= d * w;
                }
            }
        }
        // Keep the directions exactly symmetric.
        for (bi, f) in factors.iter().enumerate() {
            symmetrize(&mut dxt[bi], f.n);
            symmetrize(&mut dzt[bi], f.n);
        }
        Direction { dxt, dy, dzt }
    }

    /// Largest `α ≤ 1` keeping `X̃ + α ΔX̃` inside the cone, scaled by `frac`.
    fn primal_step(&self, factors: &[BlockFactor], dxt: &[Vec<f64>], frac: f64) -> f64 {
        let mut alpha = 1.0f64;
        for (f, dx) in factors.iter().zip(dxt) {
            let n = f.n;
            if n == 1 {
                if dx[0] < 0.0 {
                    alpha = alpha.min(-frac * f.xt[0] / dx[0]);
                }
                continue;
            }
            let ex = eigh(&SymMatrix::from_raw(n, f.xt.clone()));
            let top = ex.max().abs().max(f64::MIN_POSITIVE);
            let g: Vec<f64> = ex.values.iter().map(|&l| 1.0 / math::sqrt(l.max(1e-300).max(1e-17 * top))).collect();
            let p = ex.vectors.as_slice();
            let mut w = to_basis(p, dx, n);
            for i in 0..n {
                for j in 0..n {
                    w[i * n + j] *= g[i] * g[j];
                }
            }
            let lmin = eigh(&SymMatrix::from_raw(n, w)).min();
            if lmin < 0.0 {
                alpha = alpha.min(-frac / lmin);
            }
        }
        alpha
    }
}

/// Dual step: `Z̃ = Λ` is diagonal, so whitening is a diagonal scaling.
fn dual_step(factors: &[BlockFactor], dzt: &[Vec<f64>], frac: f64) -> f64 {
    let mut alpha = 1.0f64;
    for (f, dz) in factors.iter().zip(dzt) {
        let n = f.n;
        let lmin = if n == 1 {
            dz[0] / f.lam[0]
        } else {
            let mut w = dz.clone();
            for i in 0..n {
                for j in 0..n {
                    w[i * n + j] /= math::sqrt(f.lam[i] * f.lam[j]);
                }
            }
            eigh(&SymMatrix::from_raw(n, w)).min()
        };
        if lmin < 0.0 {
            alpha = alpha.min(-frac / lmin);
        }
    }
    alpha
}

/// `E⁻¹F(Ã)` in the eigenbasis: `½(X̃Ã + ÃX̃) ∘ 2/(λ_i + λ_j)`.
fn lyap_f(xt: &[f64], lam: &[f64], at: &[f64], n: usize) -> Vec<f64> {
    let mut xa = vec![0.0; n * n];
    gemm(n, xt, at, &mut xa);
    for i in 0..n {
        for j in 0..=i {
            let v = (xa[i * n + j] + xa[j * n + i]) / (lam[i] + lam[j]);
            xa[i * n + j] = v;
            xa[j * n + i] = v;
        }
    }
    xa
}

/// `Qᵀ A Q` with the eigenvectors in the columns of row-major `q`.
fn to_basis(q: &[f64], a: &[f64], n: usize) -> Vec<f64> {
    let nnz = a.iter().filter(|v| **v != 0.0).count();
    if nnz <= 2 * n {
        // Sparse `A`: accumulate `a_kl q_k q_lᵀ` over its nonzeros.
        let mut out = vec![0.0; n * n];
        for (kl, &akl) in a.iter().enumerate() {
            if akl == 0.0 {
                continue;
            }
            let (qk, ql) = (&q[(kl / n) * n..(kl / n + 1) * n], &q[(kl % n) * n..(kl % n + 1) * n]);
            for i in 0..n {
                let c = akl * qk[i];
                for (o, qlj) in out[i * n..(i + 1) * n].iter_mut().zip(ql) {
                    *o += c * qlj;
                }
            }
        }
        symmetrize(&mut out, n);
        return out;
    }
    let mut aq = vec![0.0; n * n];
    gemm(n, a, q, &mut aq);
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        for i in 0..n {
            let qki = q[k * n + i];
            if qki == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += qki * aq[k * n + j];
            }
        }
    }
    symmetrize(&mut out, n);
    out
}

/// `Q Ã Qᵀ`, returned as a symmetric matrix.
fn from_basis(q: &[f64], at: &[f64], n: usize) -> SymMatrix {
    let mut qa = vec![0.0; n * n];
    gemm(n, q, at, &mut qa);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&qa[i * n..(i + 1) * n], &q[j * n..(j + 1) * n]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    SymMatrix::from_raw(n, out)
}

fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_lp() -> ConeProgram {
        ConeProgram::new(
            vec![1],
            BlockDiagMatrix::single(SymMatrix::scalar(1.0)),
            vec![Constraint::single(0, SymMatrix::scalar(1.0), 1.0)],
            Sense::Minimize,
        )
        .unwrap()
    }

    #[test]
    fn scalar_lp_solves() {
        let p = scalar_lp();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::Optimal);
        assert!((s.x.block(0).get(0, 0) - 1.0).abs() < 1e-8);
        assert!((s.y[0] - 1.0).abs() < 1e-8);
        assert!((s.primal_objective - 1.0).abs() < 1e-8);
    }

    #[test]
    fn trace_objective_equals_constraint() {
        let p = ConeProgram::new(
            vec![3],
            BlockDiagMatrix::identity(&[3]),
            vec![Constraint::single(0, SymMatrix::identity(3), 1.0)],
            Sense::Minimize,
        )
        .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::Optimal);
        assert!((s.primal_objective - 1.0).abs() < 1e-8);
        assert!(s.gap <= 1e-8);
    }

    #[test]
    fn max_eigenvalue_lmi() {
        // minimize t s.t. tI − A ⪰ 0, written in primal form via the dual:
        // maximize Tr(A W) s.t. Tr(W) = 1, W ⪰ 0 has value λmax(A).
        let a = SymMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let p = ConeProgram::new(
            vec![2],
            BlockDiagMatrix::single(a),
            vec![Constraint::single(0, SymMatrix::identity(2), 1.0)],
            Sense::Maximize,
        )
        .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::Optimal);
        // t is the multiplier of Tr(W) = 1
        assert!((s.y[0] - 3.0).abs() < 1e-7, "{}", s.y[0]);
        assert!((s.primal_objective - 3.0).abs() < 1e-7);
    }

    #[test]
    fn duplicate_inconsistent_rows_are_infeasible() {
        let om = SymMatrix::new(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let p = ConeProgram::new(
            vec![2],
            BlockDiagMatrix::identity(&[2]),
            vec![Constraint::single(0, om.clone(), 1.0), Constraint::single(0, om, 2.0)],
            Sense::Minimize,
        )
        .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::PrimalInfeasible);
        let Some(Certificate::Farkas(y)) = &s.certificate else { panic!("no certificate") };
        assert!((y[0] + y[1]).abs() < 1e-12 && (y[0].abs() - 1.0).abs() < 1e-12, "{y:?}");
        assert!(dot(&p.rhs(), y) > 0.0);
        assert!(p.adjoint(y).max_eigenvalue() <= 1e-12);
    }

    #[test]
    fn duplicate_consistent_rows_are_dropped() {
        let om = SymMatrix::new(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let p = ConeProgram::new(
            vec![2],
            BlockDiagMatrix::identity(&[2]),
            vec![Constraint::single(0, om.clone(), 1.0), Constraint::single(0, om.scaled(2.0), 2.0)],
            Sense::Minimize,
        )
        .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::Optimal);
        assert_eq!(s.dropped, vec![1]);
        assert_eq!(s.y[1], 0.0);
    }

    #[test]
    fn check_kkt_on_hand_built_pair() {
        let p = scalar_lp();
        let sol = ConeSolution {
            status: Status::Optimal,
            x: BlockDiagMatrix::single(SymMatrix::scalar(1.0)),
            y: vec![1.0],
            z: BlockDiagMatrix::single(SymMatrix::scalar(0.0)),
            gap: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            primal_objective: 1.0,
            dual_objective: 1.0,
            iterations: 0,
            certificate: None,
            dropped: vec![],
            trace: vec![],
            message: String::new(),
        };
        let r = check_kkt(&p, &sol);
        assert!(r.primal_residual <= 1e-12 && r.dual_residual <= 1e-12 && r.gap.abs() <= 1e-12);
        let mut bad = sol.clone();
        bad.x = BlockDiagMatrix::single(SymMatrix::scalar(0.3));
        assert!(check_kkt(&p, &bad).primal_residual > 0.0);
        bad.y = vec![1.001];
        let r = check_kkt(&p, &bad);
        assert!((r.dual_residual - 1e-3 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_objective_is_detected() {
        // minimize −x₁₁ subject to x₂₂ = 1 over 2×2 PSD: unbounded.
        let mut c = SymMatrix::zeros(2);
        c.set(0, 0, -1.0);
        let mut a = SymMatrix::zeros(2);
        a.set(1, 1, 1.0);
        let p = ConeProgram::new(vec![2], BlockDiagMatrix::single(c), vec![Constraint::single(0, a, 1.0)], Sense::Minimize)
            .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::DualInfeasible, "{:?}", s.message);
    }

    #[test]
    fn infeasible_psd_system_is_detected() {
        // x₁₁ = −1 is impossible for X ⪰ 0.
        let mut a = SymMatrix::zeros(2);
        a.set(0, 0, 1.0);
        let p = ConeProgram::new(vec![2], BlockDiagMatrix::identity(&[2]), vec![Constraint::single(0, a, -1.0)], Sense::Minimize)
            .unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.status, Status::PrimalInfeasible, "{:?}", s.message);
        let Some(Certificate::Farkas(y)) = &s.certificate else { panic!() };
        assert!(dot(&p.rhs(), y) > 0.0);
        assert!(p.adjoint(y).max_eigenvalue() <= 1e-8 * dot(&p.rhs(), y));
    }
}
