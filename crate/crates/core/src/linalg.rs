//! Dense real linear algebra: a row-major [`Matrix`], sample moments, a cyclic
//! Jacobi eigensolver for symmetric matrices, Cholesky factorisation and the
//! multivariate Gaussian density used as a prior throughout the model.

use std::f64::consts::PI;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by the eigensolver.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Relative ridge added before every covariance factorisation: `δ = RIDGE_SCALE · tr(Σ)/d`.
pub const RIDGE_SCALE: f64 = 1e-4;

/// Absolute floor for the ridge so an all-zero covariance still factorises.
pub const RIDGE_FLOOR: f64 = 1e-10;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dims("Matrix::from_rows", cols, format!("{} in row {i}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Rows gathered by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims("matmul_t", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims("t_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bj) in o_row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_map(&self, other: &Matrix, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, context)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Multiplies column `j` by `s[j]`.
    pub fn scale_columns(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.cols {
            return Err(Error::dims("scale_columns", self.cols, s.len()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, f) in out.row_mut(i).iter_mut().zip(s) {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.rows {
            return Err(Error::dims("scale_rows", self.rows, s.len()));
        }
        let mut out = self.clone();
        for (i, f) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Subtracts `v` from every row.
    pub fn sub_row_vector(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::dims("sub_row_vector", self.cols, v.len()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (x, m) in out.row_mut(i).iter_mut().zip(v) {
                *x -= m;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Largest `|a_ij - a_ji|`, with its location.
    pub fn asymmetry(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > worst.2 {
                    worst = (i, j, gap);
                }
            }
        }
        worst
    }

    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::dims("vstack", cols, b.cols));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
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

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column means and population covariance (divisor `N`) of the rows of `x`.
pub fn mean_and_covariance(x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            required: 2,
            actual: n,
        });
    }
    let mean = x.column_means();
    let centered = x.sub_row_vector(&mean)?;
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale_in_place(1.0 / n as f64);
    symmetrize(&mut cov);
    Ok((mean, cov))
}

fn symmetrize(a: &mut Matrix) {
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Eigendecomposition `A = U diag(λ) Uᵀ` of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order; the columns of `basis` are the
/// matching unit eigenvectors, each signed so its largest-magnitude entry is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let scaled = self
            .basis
            .scale_columns(&self.eigenvalues)
            .expect("basis and eigenvalues share a dimension");
        scaled.matmul_t(&self.basis).expect("square basis")
    }
}

/// Cyclic Jacobi rotations on a symmetric matrix.
pub fn sym_eigendecompose(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("sym_eigendecompose", "square matrix", format!("{:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eigendecompose input".into()));
    }
    let (row, col, gap) = a.asymmetry();
    if gap > SYMMETRY_TOL * (1.0 + a.max_abs()) {
        return Err(Error::NotSymmetric { row, col, gap });
    }

    let mut m = a.clone();
    symmetrize(&mut m);
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(1.0);

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if max_off_diagonal(&m) < JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        let off = max_off_diagonal(&m);
        if off >= JACOBI_TOL * scale {
            return Err(Error::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
                off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));

    let mut basis = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        eigenvalues.push(m[(src, src)]);
        let mut col = v.column(src);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() + 1e-14 { (i, *x) } else { best });
        if pivot.1 < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            basis[(i, k)] = x;
        }
    }
    Ok(SymEigen { basis, eigenvalues })
}

fn max_off_diagonal(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut off: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            off = off.max(m[(i, j)].abs());
        }
    }
    off
}

// Applies the rotation J(p, q, θ) as m ← Jᵀ m J and accumulates v ← v J.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let apq = m[(p, q)];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    m[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    m[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Lower-triangular `L` with `L Lᵀ = A + ridge·I`.
pub fn cholesky(a: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("cholesky", "square matrix", format!("{:?}", a.shape())));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::invalid("ridge", format!("must be finite and non-negative, got {ridge}")));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)] + ridge;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Singular { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn solve_lower_in_place(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let mut s = b[i];
        let row = l.row(i);
        for k in 0..i {
            s -= row[k] * b[k];
        }
        b[i] = s / row[i];
    }
}

/// Solves `Lᵀ x = y` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place(l: &Matrix, y: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
}

/// Multivariate normal `N(μ, Σ)` evaluated through the factor of `Σ + δI`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    cov: Matrix,
    ridge: f64,
    chol: Matrix,
    logdet: f64,
}

impl GaussianPrior {
    /// Builds the prior with the default ridge `δ = RIDGE_SCALE · tr(Σ)/d`.
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        let ridge = default_ridge(&cov);
        Self::with_ridge(mean, cov, ridge)
    }

    pub fn with_ridge(mean: Vec<f64>, cov: Matrix, ridge: f64) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::dims("GaussianPrior", format!("({d}, {d})"), format!("{:?}", cov.shape())));
        }
        if mean.iter().any(|v| !v.is_finite()) || !cov.is_finite() {
            return Err(Error::NonFinite("Gaussian prior moments".into()));
        }
        let chol = cholesky(&cov, ridge)?;
        let logdet = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Ok(GaussianPrior {
            mean,
            cov,
            ridge,
            chol,
            logdet,
        })
    }

    /// Maximum-likelihood fit to the rows of `x`.
    pub fn fit(x: &Matrix) -> Result<Self> {
        let (mean, cov) = mean_and_covariance(x)?;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims("GaussianPrior", self.dim(), x.len()));
        }
        Ok(())
    }

    /// `(Σ + δI)⁻¹ v` by two triangular solves.
    pub fn precision_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        let mut y = v.to_vec();
        solve_lower_in_place(&self.chol, &mut y);
        solve_lower_transpose_in_place(&self.chol, &mut y);
        Ok(y)
    }

    /// Squared Mahalanobis distance `(x−μ)ᵀ(Σ+δI)⁻¹(x−μ)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut y: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        solve_lower_in_place(&self.chol, &mut y);
        Ok(y.iter().map(|v| v * v).sum())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let q = self.mahalanobis_sq(x)?;
        Ok(-0.5 * (q + self.logdet + self.dim() as f64 * (2.0 * PI).ln()))
    }

    /// `(Σ+δI)⁻¹(x−μ)`, the gradient of the negative log-density.
    pub fn mahalanobis_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.precision_apply(&diff)
    }

    /// Log-density of every row of `x`.
    pub fn log_density_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.log_density(x.row(i))).collect()
    }

    /// `(Σ+δI)⁻¹(x_i−μ)` for every row.
    pub fn mahalanobis_grad_rows(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let g = self.mahalanobis_grad(x.row(i))?;
            out.row_mut(i).copy_from_slice(&g);
        }
        Ok(out)
    }

    /// `(Σ+δI)⁻¹ v_i` for every row (no mean shift).
    pub fn precision_apply_rows(&self, v: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let g = self.precision_apply(v.row(i))?;
            out.row_mut(i).copy_from_slice(&g);
        }
        Ok(out)
    }
}

pub fn default_ridge(cov: &Matrix) -> f64 {
    let d = cov.rows().max(1) as f64;
    (RIDGE_SCALE * cov.trace() / d).max(RIDGE_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let g = random_matrix(rng, d + 2, d);
        g.t_matmul(&g).unwrap()
    }

    // Inverse through Gauss-Jordan elimination; independent of the Cholesky path.
    fn explicit_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs())).unwrap();
            for j in 0..2 * n {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn two_point_covariance() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let (mean, cov) = mean_and_covariance(&x).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(cov, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let x = Matrix::from_rows(&vec![vec![3.0, -2.0, 1.0]; 5]).unwrap();
        let (_, cov) = mean_and_covariance(&x).unwrap();
        assert!(cov.max_abs() < 1e-15);
    }

    #[test]
    fn covariance_needs_two_rows() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            mean_and_covariance(&x),
            Err(Error::InsufficientSamples { required: 2, actual: 1 })
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 50, 4);
        let (mean, cov) = mean_and_covariance(&x).unwrap();
        for a in 0..4 {
            let mut ma = 0.0;
            for i in 0..50 {
                ma += x[(i, a)];
            }
            ma /= 50.0;
            assert!((ma - mean[a]).abs() < 1e-12);
            for b in 0..4 {
                let mut mb = 0.0;
                for i in 0..50 {
                    mb += x[(i, b)];
                }
                mb /= 50.0;
                let mut s = 0.0;
                for i in 0..50 {
                    s += (x[(i, a)] - ma) * (x[(i, b)] - mb);
                }
                assert!((s / 50.0 - cov[(a, b)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigen_of_identity() {
        let e = sym_eigendecompose(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        let utu = e.basis.t_matmul(&e.basis).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn eigen_of_diagonal_sorted_descending() {
        let e = sym_eigendecompose(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        // largest-magnitude component positive → the permutation itself
        assert_eq!(e.basis, Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn eigen_rejects_asymmetric_input() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigendecompose(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn eigen_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_psd(&mut rng, 6);
        let e = sym_eigendecompose(&a).unwrap();
        let err = e.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(err < 1e-8, "reconstruction error {err}");
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(e.eigenvalues.iter().all(|&l| l >= -1e-8));
        for k in 0..6 {
            let col = e.basis.column(k);
            let big = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn cholesky_identity_and_hand_case() {
        assert_eq!(cholesky(&Matrix::identity(3), 0.0).unwrap(), Matrix::identity(3));
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a, 0.0).unwrap();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, -1.0]]).unwrap();
        match cholesky(&a, 0.0) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_psd(&mut rng, 8);
        let l = cholesky(&a, 0.0).unwrap();
        let err = l.matmul_t(&l).unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err < 1e-6);
        for i in 0..8 {
            assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..8 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let p = GaussianPrior::with_ridge(vec![0.0], Matrix::identity(1), 0.0).unwrap();
        let v = p.log_density(&[0.0]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn density_at_mean_is_normaliser() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_psd(&mut rng, 4);
        let mean = vec![0.3, -1.0, 2.0, 0.5];
        let p = GaussianPrior::new(mean.clone(), cov).unwrap();
        let expected = -0.5 * (p.logdet() + 4.0 * (2.0 * PI).ln());
        assert!((p.log_density(&mean).unwrap() - expected).abs() < 1e-12);
        assert!(p.mahalanobis_grad(&mean).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn density_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cov = random_psd(&mut rng, 4);
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = GaussianPrior::new(mean.clone(), cov.clone()).unwrap();
        let ridged = cov.add(&Matrix::identity(4).scale(p.ridge())).unwrap();
        let inv = explicit_inverse(&ridged);
        let diff: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                q += diff[i] * inv[(i, j)] * diff[j];
            }
        }
        let det = {
            let e = sym_eigendecompose(&ridged).unwrap();
            e.eigenvalues.iter().map(|l| l.ln()).sum::<f64>()
        };
        let oracle = -0.5 * (q + det + 4.0 * (2.0 * PI).ln());
        assert!((p.log_density(&x).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn grad_with_identity_covariance_is_difference() {
        let p = GaussianPrior::with_ridge(vec![1.0, 2.0], Matrix::identity(2), 0.0).unwrap();
        assert_eq!(p.mahalanobis_grad(&[3.0, 1.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = GaussianPrior::with_ridge(vec![0.0, 0.0], Matrix::identity(2), 0.0).unwrap();
        assert!(matches!(p.log_density(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(p.mahalanobis_grad(&[1.0, 2.0, 3.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cholesky_solves_match_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for d in [1usize, 3, 8, 16] {
            let cov = random_psd(&mut rng, d);
            let p = GaussianPrior::new(vec![0.0; d], cov.clone()).unwrap();
            let ridged = cov.add(&Matrix::identity(d).scale(p.ridge())).unwrap();
            let inv = explicit_inverse(&ridged);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = p.precision_apply(&v).unwrap();
            for i in 0..d {
                let slow: f64 = (0..d).map(|j| inv[(i, j)] * v[j]).sum();
                assert!((fast[i] - slow).abs() < 1e-6 * (1.0 + slow.abs()), "d={d}");
            }
        }
    }
}
