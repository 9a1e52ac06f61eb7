//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Solves `a * x = b` by partial-pivot LU followed by one step of iterative
/// refinement. Returns `None` when `a` is numerically singular.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b)?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    // LU happily returns huge garbage for nearly singular inputs.
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let pivot_min = (0..a.nrows())
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if pivot_min <= 1e-13 * scale * a.nrows() as f64 {
        return None;
    }
    Some(x)
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    solve(a, &bm).map(|x| x.column(0).into_owned())
}

/// Orthonormal basis (as columns) of the orthogonal complement of `v`.
pub fn orthonormal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    let u = v.normalize();
    let proj = DMatrix::<f64>::identity(d, d) - &u * u.transpose();
    let eig = proj.symmetric_eigen();
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &ev)| ev > 0.5)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Numerical rank via singular values relative to the largest one.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let b = orthonormal_complement(&v);
        assert_eq!(b.ncols(), 3);
        let gram = b.transpose() * &b;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((b.transpose() * &v).amax() < 1e-12);
    }

    #[test]
    fn singular_system_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(solve(&a, &b).is_none());
    }
}
