//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// `mᵀ diag(v) m`, exploiting symmetry.
pub fn weighted_crossprod(m: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    debug_assert_eq!(rows, v.len());
    let mut scaled = m.clone();
    for j in 0..cols {
        for (s, &vi) in scaled.column_mut(j).iter_mut().zip(v) {
            *s *= vi;
        }
    }
    let mut out = DMatrix::zeros(cols, cols);
    for j in 0..cols {
        let sj = scaled.column(j);
        for k in j..cols {
            let val = sj.dot(&m.column(k));
            out[(j, k)] = val;
            out[(k, j)] = val;
        }
    }
    out
}

/// `mᵀ v`.
pub fn weighted_colsum(m: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    m.tr_mul(&DVector::from_column_slice(v))
}

/// Rows of `m` at `idx`, in order.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx.iter())
}

/// `m v` as a plain vector.
pub fn mat_vec(m: &DMatrix<f64>, v: &DVector<f64>) -> Vec<f64> {
    (m * v).data.into()
}

/// Solves `a x = b` by LU with partial pivoting. Returns `None` when `a` is
/// numerically singular relative to its scale.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DVector::zeros(0));
    }
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !scale.is_finite() || scale == 0.0 {
        return None;
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > scale * 1e-14) {
        return None;
    }
    let x = lu.solve(b)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Inverse via LU, with the same singularity rule as [`solve`].
pub fn inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &solve(a, &e)?);
    }
    Some(out)
}

/// Max-norm of a vector.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| if x.is_nan() { f64::NAN } else { acc.max(x.abs()) })
}

/// Numerical rank from the singular values.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > smax * rel_tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossprod_matches_naive() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = [1.0, 0.5, 2.0];
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&v));
        let expected = m.transpose() * d * &m;
        assert!((weighted_crossprod(&m, &v) - expected).norm() < 1e-12);
    }

    #[test]
    fn solve_detects_singularity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve(&a, &DVector::from_vec(vec![1.0, 1.0])).is_none());
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve(&b, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_of_duplicate_columns() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 3.0, 3.0, 5.0]);
        assert_eq!(numerical_rank(&m, 1e-10), 2);
    }
}
