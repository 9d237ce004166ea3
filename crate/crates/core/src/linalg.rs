//! Dense symmetric-matrix kernel.
//!
//! Everything here is sized for desk-scale problems (dimensions up to a few
//! hundred), so all storage is dense and row-major.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::SQRT_2;
use core::ops::{Index, IndexMut};

use crate::error::{invalid, Error, Result};
use crate::math;

/// Relative asymmetry accepted by [`SymMatrix::new`]; entries within it are
/// averaged.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Pivots or eigenvalues at or below `PD_TOL · ‖S‖` reject positive
/// definiteness.
pub const PD_TOL: f64 = 1e-12;

/// General dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid("matrix product dimension mismatch"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(invalid("matrix-vector dimension mismatch"));
        }
        Ok((0..self.rows)
            .map(|i| dot(&self.data[i * self.cols..(i + 1) * self.cols], v))
            .collect())
    }

    pub fn frob_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense symmetric matrix, stored in full.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from row-major entries. Entries that are symmetric within
    /// [`SYMMETRY_TOL`] are averaged; anything worse is rejected.
    pub fn new(n: usize, mut data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(invalid("symmetric matrix must have dimension >= 1"));
        }
        if data.len() != n * n {
            return Err(invalid(format!("expected {} entries, got {}", n * n, data.len())));
        }
        for i in 0..n {
            for j in 0..i {
                let a = data[i * n + j];
                let b = data[j * n + i];
                if !a.is_finite() || !b.is_finite() {
                    return Err(invalid("matrix entries must be finite"));
                }
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(invalid(format!("matrix is not symmetric at ({i},{j}): {a} vs {b}")));
                }
                let avg = 0.5 * (a + b);
                data[i * n + j] = avg;
                data[j * n + i] = avg;
            }
            if !data[i * n + i].is_finite() {
                return Err(invalid("matrix entries must be finite"));
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(invalid("symmetric matrix must be square"));
        }
        Self::new(m.rows, m.data.clone())
    }

    /// Symmetric part `½(M + Mᵀ)` of a square matrix.
    pub fn symmetric_part(m: &Matrix) -> Self {
        let n = m.rows;
        Self::from_fn(n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut s = Self::zeros(n);
        for i in 0..n {
            s.data[i * n + i] = 1.0;
        }
        s
    }

    pub fn scalar(v: f64) -> Self {
        Self { n: 1, data: vec![v] }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut s = Self::zeros(n);
        for (i, v) in d.iter().enumerate() {
            s.data[i * n + i] = *v;
        }
        s
    }

    /// Uses `f(i, j)` for `j <= i` and mirrors it.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut s = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                s.data[i * n + j] = v;
                s.data[j * n + i] = v;
            }
        }
        s
    }

    /// Rank-one `v vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        Self::from_fn(v.len(), |i, j| v[i] * v[j])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets entries `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Adds `v` to `(i, j)` and, off the diagonal, to `(j, i)`.
    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
        if i != j {
            self.data[j * self.n + i] += v;
        }
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Wraps row-major storage that is symmetric by construction.
    #[inline]
    pub(crate) fn from_raw(n: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.n, cols: self.n, data: self.data.clone() }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Trace inner product `Tr(A B)`.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        debug_assert_eq!(self.n, other.n);
        dot(&self.data, &other.data)
    }

    pub fn frob_norm(&self) -> f64 {
        math::sqrt(dot(&self.data, &self.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute row sum, an upper bound on the spectral norm.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == 0.0)
    }

    pub fn scaled(&self, s: f64) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|x| s * x).collect() }
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &SymMatrix) {
        debug_assert_eq!(self.n, other.n);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Adds `s` to every diagonal entry.
    pub fn shift_diag(&mut self, s: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += s;
        }
    }

    /// General product `A B` (not symmetric in general).
    pub fn mul(&self, other: &SymMatrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n, n);
        gemm(n, &self.data, &other.data, &mut out.data);
        out
    }

    /// Symmetrized product `½(A B + B A)`.
    pub fn jordan(&self, other: &SymMatrix) -> SymMatrix {
        let n = self.n;
        let mut ab = vec![0.0; n * n];
        gemm(n, &self.data, &other.data, &mut ab);
        SymMatrix::from_fn(n, |i, j| 0.5 * (ab[i * n + j] + ab[j * n + i]))
    }

    /// Congruence `Qᵀ S Q` for square `Q`.
    pub fn congruence(&self, q: &Matrix) -> SymMatrix {
        let n = self.n;
        debug_assert_eq!(q.rows, n);
        let mut sq = vec![0.0; n * q.cols];
        // S Q
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..q.cols {
                    sq[i * q.cols + j] += a * q.data[k * q.cols + j];
                }
            }
        }
        let m = q.cols;
        let mut out = SymMatrix::zeros(m);
        for i in 0..m {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..n {
                    s += q.data[k * m + i] * sq[k * m + j];
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Congruence `Q S Qᵀ` for square `Q`.
    pub fn congruence_t(&self, q: &Matrix) -> SymMatrix {
        self.congruence(&q.transpose())
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            s += v[i] * dot(&self.data[i * n..(i + 1) * n], v);
        }
        s
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n).map(|i| dot(&self.data[i * n..(i + 1) * n], v)).collect()
    }

    /// Principal submatrix on indices `start..start + len`.
    pub fn principal(&self, start: usize, len: usize) -> SymMatrix {
        SymMatrix::from_fn(len, |i, j| self.get(start + i, start + j))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigh(self).values[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *eigh(self).values.last().unwrap()
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

/// Ordered collection of symmetric blocks forming one block-diagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagMatrix {
    blocks: Vec<SymMatrix>,
}

impl BlockDiagMatrix {
    pub fn new(blocks: Vec<SymMatrix>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("block-diagonal matrix needs at least one block"));
        }
        Ok(Self { blocks })
    }

    pub fn single(block: SymMatrix) -> Self {
        Self { blocks: vec![block] }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self { blocks: dims.iter().map(|&d| SymMatrix::zeros(d)).collect() }
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self { blocks: dims.iter().map(|&d| SymMatrix::identity(d)).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(SymMatrix::dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(SymMatrix::dim).sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &SymMatrix {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut SymMatrix {
        &mut self.blocks[i]
    }

    pub fn blocks(&self) -> &[SymMatrix] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<SymMatrix> {
        self.blocks
    }

    pub fn dot(&self, other: &BlockDiagMatrix) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(SymMatrix::trace).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        math::sqrt(self.blocks.iter().map(|b| b.dot(b)).sum())
    }

    pub fn axpy(&mut self, a: f64, other: &BlockDiagMatrix) {
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            x.axpy(a, y);
        }
    }

    pub fn scaled(&self, s: f64) -> BlockDiagMatrix {
        Self { blocks: self.blocks.iter().map(|b| b.scaled(s)).collect() }
    }

    pub fn sub(&self, other: &BlockDiagMatrix) -> BlockDiagMatrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(SymMatrix::min_eigenvalue).fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(SymMatrix::max_eigenvalue).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Isometric vectorization of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SVec {
    n: usize,
    values: Vec<f64>,
}

impl SVec {
    /// Fails unless the length is a triangular number `n(n+1)/2`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        let n = (math::sqrt(8.0 * len as f64 + 1.0) as usize).saturating_sub(1) / 2;
        if n == 0 || n * (n + 1) / 2 != len {
            return Err(invalid(format!("svec length {len} is not a triangular number")));
        }
        Ok(Self { n, values })
    }

    pub fn source_dim(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &SVec) -> f64 {
        dot(&self.values, &other.values)
    }
}

#[inline]
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Column-major lower triangle with off-diagonals scaled by √2, so that
/// `svec(A)·svec(B) = Tr(AB)`.
pub fn svec(s: &SymMatrix) -> SVec {
    let n = s.dim();
    let mut values = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        values.push(s.get(j, j));
        for i in j + 1..n {
            values.push(SQRT_2 * s.get(i, j));
        }
    }
    SVec { n, values }
}

pub fn smat(v: &SVec) -> SymMatrix {
    let n = v.n;
    let mut s = SymMatrix::zeros(n);
    let mut idx = 0;
    for j in 0..n {
        s.set(j, j, v.values[idx]);
        idx += 1;
        for i in j + 1..n {
            s.set(i, j, v.values[idx] / SQRT_2);
            idx += 1;
        }
    }
    s
}

/// Symmetric Kronecker product applied to `K`: `½(P K Qᵀ + Q K Pᵀ)`.
pub fn sym_kron_apply(p: &SymMatrix, q: &SymMatrix, k: &SymMatrix) -> Result<SymMatrix> {
    let n = p.dim();
    if q.dim() != n || k.dim() != n {
        return Err(invalid("symmetric Kronecker product dimension mismatch"));
    }
    Ok(sym_kron_apply_unchecked(p, q, k))
}

fn sym_kron_apply_unchecked(p: &SymMatrix, q: &SymMatrix, k: &SymMatrix) -> SymMatrix {
    let n = p.dim();
    let mut pk = vec![0.0; n * n];
    gemm(n, &p.data, &k.data, &mut pk);
    let mut pkq = vec![0.0; n * n];
    gemm(n, &pk, &q.data, &mut pkq);
    // (P K Q)ᵀ = Q K P since all three are symmetric.
    SymMatrix::from_fn(n, |i, j| 0.5 * (pkq[i * n + j] + pkq[j * n + i]))
}

/// Matrix `G` of `P ⊛ Q` in `svec` coordinates: `G·svec(K) = svec((P ⊛ Q) K)`.
pub fn sym_kron_matrix(p: &SymMatrix, q: &SymMatrix) -> Result<Matrix> {
    let n = p.dim();
    if q.dim() != n {
        return Err(invalid("symmetric Kronecker product dimension mismatch"));
    }
    let dim = svec_len(n);
    let mut g = Matrix::zeros(dim, dim);
    let mut basis = vec![0.0; dim];
    for c in 0..dim {
        basis.iter_mut().for_each(|x| *x = 0.0);
        basis[c] = 1.0;
        let k = smat(&SVec { n, values: basis.clone() });
        let col = svec(&sym_kron_apply_unchecked(p, q, &k));
        for (r, v) in col.values.iter().enumerate() {
            g[(r, c)] = *v;
        }
    }
    Ok(g)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = S`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `S x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        self.forward_in_place(x);
        self.backward_in_place(x);
    }

    /// `x ← L⁻¹ x`.
    pub fn forward_in_place(&self, x: &mut [f64]) {
        let n = self.l.rows;
        let l = &self.l.data;
        for i in 0..n {
            let s = x[i] - dot(&l[i * n..i * n + i], &x[..i]);
            x[i] = s / l[i * n + i];
        }
    }

    /// `x ← L⁻ᵀ x`.
    pub fn backward_in_place(&self, x: &mut [f64]) {
        let n = self.l.rows;
        let l = &self.l.data;
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
    }

    /// `L⁻¹ S L⁻ᵀ` for a symmetric `S`.
    pub fn whiten(&self, s: &SymMatrix) -> SymMatrix {
        let n = self.l.rows;
        // columns of L⁻¹ S
        let mut a = s.to_matrix();
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| a[(i, j)]).collect();
            self.forward_in_place(&mut col);
            for i in 0..n {
                a[(i, j)] = col[i];
            }
        }
        // rows of (L⁻¹ S) L⁻ᵀ = (L⁻¹ (L⁻¹ S)ᵀ)ᵀ
        let mut out = SymMatrix::zeros(n);
        for i in 0..n {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            self.forward_in_place(&mut row);
            for j in 0..=i {
                out.data[i * n + j] = row[j];
            }
        }
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (out.data[i * n + j] + out.data[j * n + i]);
                out.set(i, j, v);
            }
        }
        // entries above the diagonal were never written; rebuild from lower
        for i in 0..n {
            for j in i + 1..n {
                out.data[i * n + j] = out.data[j * n + i];
            }
        }
        out
    }
}

/// Cholesky factorization; pivots at or below `PD_TOL · ‖S‖∞` fail.
pub fn cholesky(s: &SymMatrix) -> Result<Cholesky> {
    cholesky_with_floor(s, PD_TOL * s.norm_inf())
}

/// Cholesky factorization with an explicit absolute pivot floor.
pub fn cholesky_with_floor(s: &SymMatrix, floor: f64) -> Result<Cholesky> {
    let n = s.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s.get(j, j);
        for k in 0..j {
            d -= l.data[j * n + k] * l.data[j * n + k];
        }
        if !(d > floor) {
            return Err(Error::NotPositiveDefinite { index: j, value: d });
        }
        let dj = math::sqrt(d);
        l.data[j * n + j] = dj;
        for i in j + 1..n {
            let mut v = s.get(i, j);
            for k in 0..j {
                v -= l.data[i * n + k] * l.data[j * n + k];
            }
            l.data[i * n + j] = v / dj;
        }
    }
    Ok(Cholesky { l })
}

/// Symmetric eigendecomposition `S = V diag(λ) Vᵀ`, eigenvalues ascending,
/// eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl Eigen {
    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|x| x)
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        let v = &self.vectors;
        SymMatrix::from_fn(n, |i, j| (0..n).map(|k| v[(i, k)] * fl[k] * v[(j, k)]).sum())
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Cyclic Jacobi eigensolver.
pub fn eigh(s: &SymMatrix) -> Eigen {
    let n = s.dim();
    let mut a = s.data.clone();
    let mut v = Matrix::identity(n);
    let total: f64 = dot(&a, &a);
    if n > 1 && total > 0.0 {
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..i {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
            if off <= 1e-34 * total {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    if apq.abs() < 1e-18 * (app.abs() + aqq.abs()) {
                        a[p * n + q] = 0.0;
                        a[q * n + p] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / math::sqrt(t * t + 1.0);
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - sn * akq;
                        a[k * n + q] = sn * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - sn * aqk;
                        a[q * n + k] = sn * apk + c * aqk;
                    }
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for k in 0..n {
                        let vkp = v.data[k * n + p];
                        let vkq = v.data[k * n + q];
                        v.data[k * n + p] = c * vkp - sn * vkq;
                        v.data[k * n + q] = sn * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.data[i * n + order[j]]);
    Eigen { values, vectors }
}

/// `S^{-1/2}` through the eigendecomposition.
pub fn inv_sqrt(s: &SymMatrix) -> Result<SymMatrix> {
    let e = eigh(s);
    let scale = e.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for (i, &l) in e.values.iter().enumerate() {
        if !(l > PD_TOL * scale) {
            return Err(Error::NotPositiveDefinite { index: i, value: l });
        }
    }
    Ok(e.map(|l| 1.0 / math::sqrt(l)))
}

/// `S^{1/2}` for a positive semidefinite `S` (negative round-off clipped).
pub fn sqrt_psd(s: &SymMatrix) -> SymMatrix {
    eigh(s).map(|l| math::sqrt(l.max(0.0)))
}

/// Largest absolute eigenvalue.
pub fn spectral_norm(s: &SymMatrix) -> f64 {
    let e = eigh(s);
    e.min().abs().max(e.max().abs())
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: Matrix) -> Result<Self> {
        let scale = a.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Self::with_floor(a, 1e-14 * scale)
    }

    /// Pivots with magnitude at or below `floor` are reported as singular.
    pub fn with_floor(mut a: Matrix, floor: f64) -> Result<Self> {
        if a.rows != a.cols {
            return Err(invalid("LU needs a square matrix"));
        }
        let n = a.rows;
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, a.data[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmax > floor) {
                return Err(Error::Singular { index: k });
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = a.data[k * n + k];
            for i in k + 1..n {
                let f = a.data[i * n + k] / piv;
                a.data[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a.data[i * n + j] -= f * a.data[k * n + j];
                    }
                }
            }
        }
        Ok(Self { lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let lu = &self.lu.data;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&lu[i * n + i + 1..(i + 1) * n], &x[i + 1..]);
            x[i] = (x[i] - s) / lu[i * n + i];
        }
        x
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = A B` for square row-major `n × n` slices.
#[inline]
pub(crate) fn gemm(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..n {
        let dst = &mut out[i * n..(i + 1) * n];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let row = &b[k * n..(k + 1) * n];
            for (d, r) in dst.iter_mut().zip(row) {
                *d += aik * r;
            }
        }
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    math::sqrt(dot(v, v))
}
