//! Dense row-major matrices and a cyclic Jacobi eigensolver for symmetric
//! matrices.
//!
//! Covariance matrices built during training are symmetric positive
//! semi-definite, so their singular value decomposition coincides with the
//! eigendecomposition returned by [`sym_eigen`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};

/// Vectors are plain `Vec<f64>`; most routines take `&[f64]`.
pub type Vector = Vec<f64>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MieError::validation(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MieError::validation("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn diagonal(&self) -> Vector {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("axpy", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// `y = self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(MieError::validation(format!(
                "mul_vec: matrix has {} cols, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `‖A − Aᵀ‖_F`, or `None` for non-square input.
    pub fn asymmetry(&self) -> Option<f64> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self.get(i, j) - self.get(j, i);
                s += d * d;
            }
        }
        Some(s.sqrt())
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> MieError {
    MieError::validation(format!(
        "{op}: shape mismatch {}x{} vs {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Matrix product `A·B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `Aᵀ·B` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `A·Bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// Outer product `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            m.data[i * v.len() + j] = ui * vj;
        }
    }
    m
}

/// Column means of a `B×d` matrix.
pub fn mean_rows(z: &Matrix) -> Result<Vector> {
    if z.rows == 0 || z.cols == 0 {
        return Err(MieError::validation("mean_rows: empty matrix"));
    }
    let mut acc = vec![0.0; z.cols];
    for r in 0..z.rows {
        for (a, x) in acc.iter_mut().zip(z.row(r)) {
            *a += x;
        }
    }
    let b = z.rows as f64;
    acc.iter_mut().for_each(|a| *a /= b);
    Ok(acc)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Non-increasing.
    pub eigenvalues: Vector,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl SymEigen {
    /// `V·diag(f(λ))·Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for r in 0..n {
            for (c, &lam) in self.eigenvalues.iter().enumerate() {
                scaled.data[r * n + c] *= f(lam);
            }
        }
        matmul_nt(&scaled, v).expect("square eigenvector matrix")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|x| x)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;
const NEG_CLAMP_TOL: f64 = 1e-10;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Iterates full sweeps over the upper triangle until the off-diagonal
/// Frobenius norm drops below `1e-12·‖A‖_F`. Eigenvalues are returned in
/// non-increasing order, round-off negatives (|λ| ≤ 1e-10·‖A‖_F) are clamped
/// to zero, and each eigenvector is signed so that its first entry of
/// largest magnitude is non-negative.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let (n, m) = a.shape();
    if n != m {
        return Err(MieError::validation(format!(
            "sym_eigen: matrix is {n}x{m}, not square"
        )));
    }
    if n == 0 {
        return Err(MieError::validation("sym_eigen: empty matrix"));
    }
    if !a.is_finite() {
        return Err(MieError::validation("sym_eigen: non-finite entries"));
    }
    let norm = a.frobenius_norm();
    let asym = a.asymmetry().unwrap_or(f64::INFINITY);
    if asym > SYMMETRY_TOL * norm.max(1.0) {
        return Err(MieError::validation(format!(
            "sym_eigen: matrix is not symmetric (‖A−Aᵀ‖_F = {asym:e})"
        )));
    }

    // work on the exactly symmetric part
    let mut w = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (w.get(i, j) + w.get(j, i));
            w.set(i, j, s);
            w.set(j, i, s);
        }
    }
    let tol = JACOBI_TOL * norm;
    let mut a = w.data;
    // rows of `vt` are the eigenvector columns of V
    let mut vt = Matrix::identity(n).data;

    let mut converged = off_diagonal_norm(&a, n) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut vt, n, p, q);
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a, n) <= tol;
    }
    if !converged {
        return Err(MieError::numeric(format!(
            "sym_eigen: no convergence after {JACOBI_MAX_SWEEPS} sweeps, off-diagonal residual {:e}",
            off_diagonal_norm(&a, n)
        )));
    }

    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));

    let clamp = NEG_CLAMP_TOL * norm;
    let eigenvalues: Vector = order
        .iter()
        .map(|&i| {
            let l = diag[i];
            if l < 0.0 && -l <= clamp {
                0.0
            } else {
                l
            }
        })
        .collect();

    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = &mut vt[src * n..(src + 1) * n];
        let mut lead = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, &x) in col.iter().enumerate() {
            eigenvectors.data[r * n + dst] = x;
        }
    }

    Ok(SymEigen {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    s.sqrt()
}

/// Applies the plane rotation that annihilates `a[p][q]` to the symmetric
/// matrix `a` (both triangles kept in sync) and to the rows of `vt`.
fn rotate(a: &mut [f64], vt: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
        sign / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let (lo, hi) = a.split_at_mut(q * n);
    let row_p = &mut lo[p * n..(p + 1) * n];
    let row_q = &mut hi[..n];
    for k in 0..n {
        let apk = row_p[k];
        let aqk = row_q[k];
        row_p[k] = c * apk - s * aqk;
        row_q[k] = s * apk + c * aqk;
    }
    row_p[p] = app - t * apq;
    row_q[q] = aqq + t * apq;
    row_p[q] = 0.0;
    row_q[p] = 0.0;
    for k in 0..n {
        if k != p && k != q {
            a[k * n + p] = a[p * n + k];
            a[k * n + q] = a[q * n + k];
        }
    }

    let (lo, hi) = vt.split_at_mut(q * n);
    let v_p = &mut lo[p * n..(p + 1) * n];
    let v_q = &mut hi[..n];
    for k in 0..n {
        let x = v_p[k];
        let y = v_q[k];
        v_p[k] = c * x - s * y;
        v_q[k] = s * x + c * y;
    }
}
