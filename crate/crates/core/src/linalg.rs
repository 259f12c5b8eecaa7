//! Small dense linear algebra used by the solvers: row-major matrices,
//! inner products, a Cholesky solver for regression normal equations, and a
//! pivoted LU for the tiny systems arising in Newton steps.
//!
//! Dimensions here are the state/noise/control dimensions of a game (a few)
//! or the regression basis size (tens), so everything is plain `Vec`-backed
//! with no blocking or SIMD.

use crate::error::MfgError;
use crate::num::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    /// Identity scaled by `v`, rectangular shapes allowed (ones on the main
    /// diagonal up to `min(rows, cols)`).
    pub fn scaled_identity(rows: usize, cols: usize, v: T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = v;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = self * v`.
    pub fn matvec(&self, v: &[T], out: &mut [T]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            out[i] = dot(self.row(i), v);
        }
    }

    /// `out = selfᵀ * v`.
    pub fn matvec_t(&self, v: &[T], out: &mut [T]) {
        assert_eq!(v.len(), self.rows);
        assert_eq!(out.len(), self.cols);
        for x in out.iter_mut() {
            *x = T::zero();
        }
        for i in 0..self.rows {
            let vi = v[i];
            for j in 0..self.cols {
                out[j] += self.at(i, j) * vi;
            }
        }
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *t.at_mut(j, i) = self.at(i, j);
            }
        }
        t
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Euclidean inner product; also the Frobenius product when slices hold
/// flattened matrices of equal shape.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm2_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub fn linf<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// `a - b` into a fresh vector.
pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// `y += c * x`.
pub fn axpy<T: Scalar>(c: T, x: &[T], y: &mut [T]) {
    for i in 0..x.len() {
        y[i] += c * x[i];
    }
}

/// Symmetric positive semi-definite solve with multiple right-hand sides via
/// Cholesky on the equilibrated system (rows/columns scaled by the inverse
/// root diagonal). Columns whose equilibrated pivot falls below `drop_tol`
/// are dropped (their solution entries are zeroed), which handles exactly
/// collinear regression features deterministically. Returns the retained
/// column count.
///
/// Errors with `SingularRegression` only when every pivot is degenerate.
pub fn cholesky_solve_multi<T: Scalar>(
    gram: &Mat<T>,
    rhs: &Mat<T>,
    drop_tol: T,
) -> Result<(Mat<T>, usize), MfgError> {
    let b = gram.rows;
    assert_eq!(gram.cols, b);
    assert_eq!(rhs.rows, b);

    // Equilibrate so pivot magnitudes are comparable across columns.
    let mut scale = vec![T::zero(); b];
    for (i, s) in scale.iter_mut().enumerate() {
        let dv = gram.at(i, i);
        *s = if dv > T::zero() { T::one() / dv.sqrt() } else { T::zero() };
    }
    let mut l = gram.clone();
    for i in 0..b {
        for j in 0..b {
            *l.at_mut(i, j) = l.at(i, j) * scale[i] * scale[j];
        }
    }
    let mut active = vec![true; b];
    let tol = drop_tol;

    for j in 0..b {
        if scale[j] == T::zero() {
            active[j] = false;
            continue;
        }
        let mut d = l.at(j, j);
        for k in 0..j {
            if active[k] {
                let ljk = l.at(j, k);
                d -= ljk * ljk;
            }
        }
        if d <= tol {
            active[j] = false;
            continue;
        }
        let d = d.sqrt();
        *l.at_mut(j, j) = d;
        for i in (j + 1)..b {
            let mut v = l.at(i, j);
            for k in 0..j {
                if active[k] {
                    v -= l.at(i, k) * l.at(j, k);
                }
            }
            *l.at_mut(i, j) = v / d;
        }
    }

    let retained = active.iter().filter(|&&a| a).count();
    if retained == 0 {
        return Err(MfgError::SingularRegression {
            detail: "all pivots degenerate in normal equations".into(),
        });
    }

    // Forward/back substitution restricted to active columns, on the
    // equilibrated system; unscale at the end.
    let m = rhs.cols;
    let mut out = Mat::zeros(b, m);
    for c in 0..m {
        let mut w = vec![T::zero(); b];
        for i in 0..b {
            if !active[i] {
                continue;
            }
            let mut v = rhs.at(i, c) * scale[i];
            for k in 0..i {
                if active[k] {
                    v -= l.at(i, k) * w[k];
                }
            }
            w[i] = v / l.at(i, i);
        }
        for i in (0..b).rev() {
            if !active[i] {
                continue;
            }
            let mut v = w[i];
            for k in (i + 1)..b {
                if active[k] {
                    v -= l.at(k, i) * w[k];
                }
            }
            w[i] = v / l.at(i, i);
            *out.at_mut(i, c) = w[i] * scale[i];
        }
    }
    Ok((out, retained))
}

/// Solve a small dense square system by partial-pivot LU. Used for Newton
/// steps in control-space (k is the control dimension).
pub fn lu_solve<T: Scalar>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>, MfgError> {
    let n = a.rows;
    assert_eq!(a.cols, n);
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x: Vec<T> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut piv = col;
        let mut best = m.at(perm[col], col).abs();
        for r in (col + 1)..n {
            let v = m.at(perm[r], col).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < T::of(1e-300) {
            return Err(MfgError::SingularRegression { detail: "singular Newton system".into() });
        }
        perm.swap(col, piv);
        let p = perm[col];
        let d = m.at(p, col);
        for r in (col + 1)..n {
            let q = perm[r];
            let factor = m.at(q, col) / d;
            *m.at_mut(q, col) = factor;
            for c in (col + 1)..n {
                let v = m.at(p, c);
                *m.at_mut(q, c) = m.at(q, c) - factor * v;
            }
            x[q] = x[q] - factor * x[p];
        }
    }
    let mut out = vec![T::zero(); n];
    for col in (0..n).rev() {
        let p = perm[col];
        let mut v = x[p];
        for c in (col + 1)..n {
            v -= m.at(p, c) * out[c];
        }
        out[col] = v / m.at(p, col);
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix;
/// a zero matrix factors to zero. Used for covariance square roots.
pub fn cholesky_factor<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>, MfgError> {
    let n = a.rows;
    assert_eq!(a.cols, n);
    if a.max_abs() == T::zero() {
        return Ok(Mat::zeros(n, n));
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            let v = l.at(j, k);
            d -= v * v;
        }
        if d < T::zero() {
            return Err(MfgError::InvalidParams {
                detail: "covariance matrix is not positive semi-definite".into(),
            });
        }
        let d = d.sqrt();
        *l.at_mut(j, j) = d;
        for i in (j + 1)..n {
            let mut v = a.at(i, j);
            for k in 0..j {
                v -= l.at(i, k) * l.at(j, k);
            }
            *l.at_mut(i, j) = if d > T::zero() { v / d } else { T::zero() };
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let m = Mat::<f64>::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 2];
        m.matvec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -2.0]);
        let t = m.transpose();
        assert_eq!(t.at(2, 1), 6.0);
        let mut out_t = vec![0.0; 3];
        m.matvec_t(&[1.0, 1.0], &mut out_t);
        assert_eq!(out_t, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = Lᵀ L with known solution.
        let a = Mat::<f64>::from_rows(2, 2, vec![4.0, 1.0, 1.0, 3.0]);
        let rhs = Mat::from_rows(2, 1, vec![1.0, 2.0]);
        let (sol, kept) = cholesky_solve_multi(&a, &rhs, 1e-12).unwrap();
        assert_eq!(kept, 2);
        // residual check
        let r0 = 4.0 * sol.at(0, 0) + 1.0 * sol.at(1, 0) - 1.0;
        let r1 = 1.0 * sol.at(0, 0) + 3.0 * sol.at(1, 0) - 2.0;
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
    }

    #[test]
    fn cholesky_drops_collinear_columns() {
        // Second column duplicates the first; solver keeps one of them.
        let a = Mat::<f64>::from_rows(2, 2, vec![2.0, 2.0, 2.0, 2.0]);
        let rhs = Mat::from_rows(2, 1, vec![2.0, 2.0]);
        let (sol, kept) = cholesky_solve_multi(&a, &rhs, 1e-10).unwrap();
        assert_eq!(kept, 1);
        assert!((sol.at(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(sol.at(1, 0), 0.0);
    }

    #[test]
    fn lu_solves_small_system() {
        let a = Mat::<f64>::from_rows(3, 3, vec![0.0, 2.0, 1.0, 1.0, 0.0, 0.0, 3.0, 1.0, 2.0]);
        let x = lu_solve(&a, &[5.0, 1.0, 10.0]).unwrap();
        // verify residual
        let mut r = vec![0.0; 3];
        a.matvec(&x, &mut r);
        assert!((r[0] - 5.0).abs() < 1e-12);
        assert!((r[1] - 1.0).abs() < 1e-12);
        assert!((r[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_factor_reconstructs() {
        let a = Mat::<f64>::from_rows(2, 2, vec![4.0, 2.0, 2.0, 5.0]);
        let l = cholesky_factor(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut v = 0.0f64;
                for k in 0..2 {
                    v += l.at(i, k) * l.at(j, k);
                }
                assert!((v - a.at(i, j)).abs() < 1e-12);
            }
        }
    }
}
