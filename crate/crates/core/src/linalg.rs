//! Small dense linear algebra.
//!
//! Everything here is sized for the matrices the engine actually builds
//! (consistency matrices of at most 64×64, covariances of at most 128×128),
//! so the decompositions are plain Jacobi iterations with a fixed sweep
//! order: slow asymptotically, but deterministic bit-for-bit and accurate
//! to working precision.
//!
//! Singular and eigen vectors carry an arbitrary sign. Downstream code
//! subtracts them ([`crate::cda`]) and sums them ([`crate::rfp`]), so every
//! decomposition returned from this module is normalized: each vector is
//! flipped so that its largest-magnitude entry is positive, ties going to the
//! lowest index.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{check_dim, invalid, Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-12;
/// Jacobi stops once the off-diagonal mass falls below this fraction of the
/// input norm.
pub const JACOBI_TOL: f64 = 1e-14;
pub const MAX_SWEEPS: usize = 60;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics if the rows are ragged; intended for literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
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

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Selects the first `k` columns.
    pub fn leading_cols(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k.min(self.cols), |i, j| self[(i, j)])
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        check_dim("row count", self.rows, other.rows)?;
        check_dim("column count", self.cols, other.cols)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Thin singular value decomposition `m = u · diag(sigma) · vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows × r` with orthonormal columns, `r = min(rows, cols)`.
    pub u: Matrix,
    /// Length `r`, descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `r × cols` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// Number of singular values above `RANK_TOL · sigma[0]`.
    pub fn rank(&self) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > RANK_TOL * top).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.vt.cols();
        Matrix::from_fn(m, n, |i, j| {
            (0..r)
                .map(|k| self.u[(i, k)] * self.sigma[k] * self.vt[(k, j)])
                .sum()
        })
    }
}

/// Symmetric eigendecomposition `c = vectors · diag(values) · vectorsᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    /// Descending.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns.
    pub vectors: Matrix,
}

/// Returns the multiplier (±1) that makes the largest-magnitude entry of `v`
/// positive. Exact ties resolve to the lowest index.
fn sign_of_dominant(v: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for x in v {
        if x.abs() > best {
            best = x.abs();
            sign = if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

/// Flips each column of `m` so its dominant entry is positive.
pub fn fix_column_signs(m: &mut Matrix) {
    for j in 0..m.cols() {
        let s = sign_of_dominant((0..m.rows()).map(|i| m[(i, j)]));
        if s < 0.0 {
            for i in 0..m.rows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// One-sided (Hestenes) Jacobi on the columns of a tall matrix given as a
/// list of columns. Returns the rotated columns and the accumulated right
/// rotation `v` (also as columns).
fn one_sided_jacobi(mut cols: Vec<Vec<f64>>, frob_sq: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let stop = JACOBI_TOL * frob_sq;

    for _ in 0..MAX_SWEEPS {
        let mut off_sq = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norm_sq(&cols[p]);
                let beta = norm_sq(&cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                off_sq += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated || off_sq.sqrt() <= stop {
            break;
        }
    }
    (cols, v)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Extends `basis` (orthonormal vectors of length `dim`) with one more unit
/// vector orthogonal to all of them, drawn from the standard basis by
/// twice-applied Gram–Schmidt.
fn orthonormal_complement(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut w = vec![0.0; dim];
        w[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= proj * bi;
                }
            }
        }
        let nrm = norm_sq(&w).sqrt();
        if best.as_ref().is_none_or(|(bn, _)| nrm > *bn + 1e-12) {
            best = Some((nrm, w));
        }
        if nrm > 0.5 {
            break;
        }
    }
    let (nrm, mut w) = best.expect("dim >= 1");
    for wi in &mut w {
        *wi /= nrm;
    }
    w
}

/// Thin SVD by one-sided Jacobi.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid("svd input has non-finite entries"));
    }

    // Work on the orientation with at least as many rows as columns.
    let tall = rows >= cols;
    let work = if tall { m.clone() } else { m.transpose() };
    let (wr, wc) = work.shape();
    let frob_sq = frobenius_norm_sq(&work);
    let columns: Vec<Vec<f64>> = (0..wc).map(|j| work.col(j)).collect();
    let (rotated, v_cols) = one_sided_jacobi(columns, frob_sq);

    let mut sigma: Vec<f64> = rotated.iter().map(|c| norm_sq(c).sqrt()).collect();
    let mut order: Vec<usize> = (0..wc).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let top = sigma[0];
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(wc);
    for (k, &j) in order.iter().enumerate() {
        if top > 0.0 && sigma[k] > RANK_TOL * top {
            left.push(rotated[j].iter().map(|x| x / sigma[k]).collect());
        } else {
            let extra = orthonormal_complement(&left, wr);
            left.push(extra);
        }
    }
    let right: Vec<&Vec<f64>> = order.iter().map(|&j| &v_cols[j]).collect();

    // Map back to (u, vt) of the original orientation.
    let r = wc;
    let (mut u, mut vt) = if tall {
        (
            Matrix::from_fn(rows, r, |i, k| left[k][i]),
            Matrix::from_fn(r, cols, |k, j| right[k][j]),
        )
    } else {
        (
            Matrix::from_fn(rows, r, |i, k| right[k][i]),
            Matrix::from_fn(r, cols, |k, j| left[k][j]),
        )
    };

    for k in 0..r {
        let s = sign_of_dominant(vt.row(k).iter().copied());
        if s < 0.0 {
            for x in vt.row_mut(k) {
                *x = -*x;
            }
            for i in 0..rows {
                u[(i, k)] = -u[(i, k)];
            }
        }
    }
    Ok(SvdResult { u, sigma, vt })
}

/// Eigendecomposition of a symmetric matrix by cyclic two-sided Jacobi.
///
/// The input is symmetrized as `(c + cᵀ) / 2` first, so `c` and `cᵀ` give
/// bit-identical output.
pub fn sym_eig(c: &Matrix) -> Result<EigResult> {
    let (n, nc) = c.shape();
    check_dim("sym_eig square input", n, nc)?;
    if n == 0 {
        return Err(Error::EmptyInput("sym_eig of an empty matrix"));
    }
    if !c.is_finite() {
        return Err(invalid("sym_eig input has non-finite entries"));
    }
    let scale = c.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 * scale {
                return Err(invalid(format!(
                    "sym_eig input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let mut v = Matrix::identity(n);
    let stop = JACOBI_TOL * frobenius_norm_sq(&a).sqrt();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| 2.0 * a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.is_finite() {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                // A ← Jᵀ A J with J the (p, q) Givens rotation.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.iter().map(|&j| a[(j, j)]).collect();
    let mut vectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    fix_column_signs(&mut vectors);
    Ok(EigResult { values, vectors })
}

/// Column means and population covariance (divide by `n`) of the rows of `x`.
pub fn covariance(x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::EmptyInput("covariance needs at least one sample"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, &[rows as u64, cols as u64]);
        Matrix::from_fn(rows, cols, |_, _| standard_normal(&mut rng))
    }

    fn max_orthonormality_error_cols(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(g.rows()))
    }

    #[test]
    fn svd_identity() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn svd_rank_one_one_hot_rows() {
        let p = Matrix::from_fn(8, 4, |_, j| if j == 1 { 1.0 } else { 0.0 });
        let r = svd(&p).unwrap();
        assert!((r.sigma[0] - 8f64.sqrt()).abs() < 1e-12);
        assert!(r.sigma[1..].iter().all(|&s| s.abs() < 1e-12));
        assert_eq!(r.rank(), 1);
        let v1 = r.vt.row(0);
        assert!((v1[1] - 1.0).abs() < 1e-12);
        assert!(v1[0].abs() < 1e-12 && v1[2].abs() < 1e-12 && v1[3].abs() < 1e-12);
        assert!(max_orthonormality_error_cols(&r.u) < 1e-10);
    }

    #[test]
    fn svd_reconstructs_random() {
        for (rows, cols, seed) in [(5, 3, 1), (3, 5, 2), (8, 8, 3), (1, 4, 4), (6, 1, 5)] {
            let m = random_matrix(rows, cols, seed);
            let r = svd(&m).unwrap();
            let err = frobenius_norm_sq(&r.reconstruct().sub(&m).unwrap()).sqrt();
            assert!(err < 1e-10, "{rows}x{cols}: {err}");
            assert!(max_orthonormality_error_cols(&r.u) < 1e-10);
            assert!(max_orthonormality_error_cols(&r.vt.transpose()) < 1e-10);
            assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_zero_matrix_has_orthonormal_factors() {
        let r = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(r.rank(), 0);
        assert!(max_orthonormality_error_cols(&r.u) < 1e-12);
        assert!(max_orthonormality_error_cols(&r.vt.transpose()) < 1e-12);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn svd_is_deterministic() {
        let m = random_matrix(7, 4, 9);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.vt, b.vt);
    }

    #[test]
    fn sym_eig_identity_and_diag() {
        let e = sym_eig(&Matrix::identity(5)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));

        let e = sym_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors, Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));

        let e = sym_eig(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.vectors, Matrix::identity(2));
    }

    #[test]
    fn sym_eig_reconstructs_random_psd() {
        let b = random_matrix(6, 6, 11);
        let c = b.transpose().matmul(&b).unwrap();
        let e = sym_eig(&c).unwrap();
        let rec = e
            .vectors
            .matmul(&Matrix::diag(&e.values))
            .unwrap()
            .matmul(&e.vectors.transpose())
            .unwrap();
        assert!(frobenius_norm_sq(&rec.sub(&c).unwrap()).sqrt() < 1e-10);
        assert!(max_orthonormality_error_cols(&e.vectors) < 1e-10);
        for k in 0..6 {
            let v = e.vectors.col(k);
            let cv = c.matmul(&Matrix::from_vec(6, 1, v.clone()).unwrap()).unwrap();
            for i in 0..6 {
                assert!((cv[(i, 0)] - e.values[k] * v[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn covariance_hand_cases() {
        let (mean, cov) = covariance(&Matrix::from_rows(&[vec![3.0, -1.0]])).unwrap();
        assert_eq!(mean, vec![3.0, -1.0]);
        assert_eq!(cov, Matrix::zeros(2, 2));

        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let (mean, cov) = covariance(&x).unwrap();
        assert_eq!(mean, vec![1.0, 0.0]);
        assert_eq!(cov, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));

        assert!(matches!(
            covariance(&Matrix::zeros(0, 3)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn covariance_matches_textbook_two_pass() {
        let x = random_matrix(50, 4, 21);
        let (mean, cov) = covariance(&x).unwrap();
        for a in 0..4 {
            let m: f64 = (0..50).map(|i| x[(i, a)]).sum::<f64>() / 50.0;
            assert!((m - mean[a]).abs() < 1e-12);
        }
        for a in 0..4 {
            for b in 0..4 {
                let ma = (0..50).map(|i| x[(i, a)]).sum::<f64>() / 50.0;
                let mb = (0..50).map(|i| x[(i, b)]).sum::<f64>() / 50.0;
                let s: f64 = (0..50)
                    .map(|i| (x[(i, a)] - ma) * (x[(i, b)] - mb))
                    .sum::<f64>()
                    / 50.0;
                assert!((s - cov[(a, b)]).abs() < 1e-12);
            }
        }
        let e = sym_eig(&cov).unwrap();
        assert!(e.values.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn frobenius_hand_cases() {
        assert_eq!(frobenius_norm_sq(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm_sq(&Matrix::identity(3)), 3.0);
        assert_eq!(
            frobenius_norm_sq(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])),
            30.0
        );
    }

    #[test]
    fn sign_convention_is_idempotent() {
        let mut m = random_matrix(5, 3, 4);
        fix_column_signs(&mut m);
        let once = m.clone();
        fix_column_signs(&mut m);
        assert_eq!(once, m);
        // Ties go to the lowest index.
        let mut t = Matrix::from_rows(&[vec![-0.5], vec![0.5]]);
        fix_column_signs(&mut t);
        assert_eq!(t.col(0), vec![0.5, -0.5]);
    }
}
