//! Dense kernels shared by every other module.
//!
//! Matrices are stored column-major so that `vec(W)` is simply the backing
//! slice. With that convention the two Kronecker identities used throughout
//! the crate hold literally:
//!
//! ```text
//! (A ⊗ B) vec(W)      = vec(B W Aᵀ)
//! (A ⊗ B)(C ⊗ D)ᵀ     = (A Cᵀ) ⊗ (B Dᵀ)
//! ```

use crate::error::{Error, Result};

/// Off-diagonal Frobenius threshold for the Jacobi eigensolver, relative to
/// the Frobenius norm of the input.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Maximum absolute asymmetry accepted by [`sym_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Condition estimate above which a factor is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major nested slices (convenient for literals).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Inverse of `vec`: interprets `data` as column-major storage.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("column-major data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        m.add_outer(1.0, u, v);
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major backing storage, i.e. `vec(self)`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let oc = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for k in 0..self.cols {
                let b = other[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let ac = &self.data[k * self.rows..(k + 1) * self.rows];
                for (o, &a) in oc.iter_mut().zip(ac) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            for (yi, &a) in y.iter_mut().zip(self.column(j)) {
                *yi += a * xj;
            }
        }
        y
    }

    /// `selfᵀ x`
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec shape mismatch");
        (0..self.cols)
            .map(|j| self.column(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for (j, &vj) in v.iter().enumerate() {
            let s = alpha * vj;
            let col = &mut self.data[j * self.rows..(j + 1) * self.rows];
            for (c, &ui) in col.iter_mut().zip(u) {
                *c += ui * s;
            }
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn add_identity(&mut self, alpha: f64) {
        assert!(self.is_square());
        for i in 0..self.rows {
            self[(i, i)] += alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let mut worst = 0.0f64;
        for j in 0..self.cols {
            for i in 0..j {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces `self` by `(self + selfᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for j in 0..self.cols {
            for i in 0..j {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    rel_l2(a.as_slice(), b.as_slice())
}

/// Relative L2 distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm2(b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Kronecker product, `(rA·rB) × (cA·cB)`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ra, ca, rb, cb) = (a.rows, a.cols, b.rows, b.cols);
    let mut out = DenseMatrix::zeros(ra * rb, ca * cb);
    for ja in 0..ca {
        for ia in 0..ra {
            let s = a[(ia, ja)];
            if s == 0.0 {
                continue;
            }
            for jb in 0..cb {
                for ib in 0..rb {
                    out[(ia * rb + ib, ja * cb + jb)] = s * b[(ib, jb)];
                }
            }
        }
    }
    out
}

/// Kronecker product of two vectors viewed as columns: `u ⊗ v`.
pub fn kron_vec(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        out.extend(v.iter().map(|&b| a * b));
    }
    out
}

/// Solves `(A ⊗ B) y = w` without forming the Kronecker product:
/// `y = vec(B⁻¹ unvec(w) A⁻ᵀ)`.
pub fn kron_solve_vec(a: &DenseMatrix, b: &DenseMatrix, w: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::dims("kron_solve_vec: A square", a.rows, a.cols));
    }
    if !b.is_square() {
        return Err(Error::dims("kron_solve_vec: B square", b.rows, b.cols));
    }
    let (na, nb) = (a.rows, b.rows);
    if w.len() != na * nb {
        return Err(Error::dims("kron_solve_vec: |w|", na * nb, w.len()));
    }
    for f in [a, b] {
        let cond = condition_estimate(f)?;
        if !(cond <= MAX_CONDITION) {
            return Err(Error::SingularMatrix { condition: cond });
        }
    }
    // W is nb × na; Y = B⁻¹ W.
    let w_mat = DenseMatrix::from_col_major(nb, na, w.to_vec())?;
    let lu_b = Lu::factor(b)?;
    let y = lu_b.solve_matrix(&w_mat);
    // Z = Y A⁻ᵀ  ⇔  A Zᵀ = Yᵀ.
    let lu_a = Lu::factor(a)?;
    let zt = lu_a.solve_matrix(&y.transpose());
    Ok(zt.transpose().into_vec())
}

/// Condition number estimate. Symmetric inputs use the eigenvalue magnitude
/// ratio; anything else falls back to the exact 1-norm condition number.
pub fn condition_estimate(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dims("condition_estimate: square", m.rows, m.cols));
    }
    if m.rows == 0 {
        return Ok(1.0);
    }
    if m.max_asymmetry() <= SYMMETRY_TOL * m.frobenius_norm().max(1.0) {
        let eig = sym_eigen(m)?;
        let max = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let min = eig.values.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        return Ok(if min == 0.0 { f64::INFINITY } else { max / min });
    }
    let lu = match Lu::factor(m) {
        Ok(lu) => lu,
        Err(_) => return Ok(f64::INFINITY),
    };
    let inv = lu.solve_matrix(&DenseMatrix::identity(m.rows));
    Ok(norm1(m) * norm1(&inv))
}

fn norm1(m: &DenseMatrix) -> f64 {
    (0..m.cols)
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims("lu: square", m.rows, m.cols));
        }
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularMatrix {
                    condition: f64::INFINITY,
                });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(p, j)];
                    lu[(p, j)] = lu[(k, j)];
                    lu[(k, j)] = tmp;
                }
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                lu[(i, k)] /= d;
            }
            for j in k + 1..n {
                let ukj = lu[(k, j)];
                if ukj == 0.0 {
                    continue;
                }
                for i in k + 1..n {
                    let lik = lu[(i, k)];
                    lu[(i, j)] -= lik * ukj;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        assert_eq!(rhs.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn solve_matrix(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(rhs.rows, rhs.cols);
        for j in 0..rhs.cols {
            let col = self.solve(rhs.column(j));
            out.data[j * rhs.rows..(j + 1) * rhs.rows].copy_from_slice(&col);
        }
        out
    }
}

/// Symmetric eigendecomposition `M = U diag(values) Uᵀ`, eigenvalues
/// sorted in descending order, eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let mut out = DenseMatrix::zeros(n, n);
        for (k, &lam) in self.values.iter().enumerate() {
            let u = self.vectors.column(k);
            out.add_outer(lam, u, u);
        }
        out
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eigen(m: &DenseMatrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::dims("sym_eigen: square", m.rows, m.cols));
    }
    let asym = m.max_asymmetry();
    if !(asym <= SYMMETRY_TOL) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = m.rows;
    let mut a = m.clone();
    a.symmetrize();
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_TOL * a.frobenius_norm();

    let off = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..j {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::SingularFactor { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.data[dst * n..(dst + 1) * n].copy_from_slice(v.column(src));
    }
    Ok(SymEigen { values, vectors })
}
