//! Small dense least-squares helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance for treating a column as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Thin QR factors of a full-column-rank matrix.
pub struct Qr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
}

impl Qr {
    /// Householder QR. Returns `None` when some |R_jj| falls below
    /// `RANK_TOL` times the largest column norm.
    pub fn new(x: &DMatrix<f64>) -> Option<Self> {
        let (n, p) = x.shape();
        if n < p || p == 0 {
            return None;
        }
        let max_norm = (0..p).map(|j| x.column(j).norm()).fold(0.0, f64::max);
        let qr = x.clone().qr();
        let r = qr.r();
        if (0..p).any(|j| r[(j, j)].abs() <= RANK_TOL * max_norm) || max_norm == 0.0 {
            return None;
        }
        let q = qr.q();
        let r_inv = r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("nonzero diagonal");
        Some(Self { q, r, r_inv })
    }

    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        self.r
            .solve_upper_triangular(&(self.q.transpose() * y))
            .expect("nonzero diagonal")
    }

    /// (X'X)^-1 = R^-1 R^-T
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        &self.r_inv * self.r_inv.transpose()
    }

    /// Diagonal of the projection X (X'X)^-1 X'.
    pub fn leverages(&self) -> Vec<f64> {
        self.q
            .row_iter()
            .map(|row| row.norm_squared().clamp(0.0, 1.0))
            .collect()
    }
}

/// Scans columns left to right and returns the first column that is (to
/// `RANK_TOL`) a linear combination of earlier ones, together with the
/// earlier columns taking part in the combination. `None` when `x` has full
/// column rank.
pub fn first_dependency(x: &DMatrix<f64>) -> Option<Vec<usize>> {
    let (n, p) = x.shape();
    let max_norm = (0..p).map(|j| x.column(j).norm()).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return if p > 0 { Some(vec![0]) } else { None };
    }
    // modified Gram-Schmidt with one reorthogonalization pass
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    let mut r = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut v: DVector<f64> = x.column(j).into_owned();
        let mut coef = vec![0.0; basis.len()];
        for _ in 0..2 {
            for (k, q) in basis.iter().enumerate() {
                let c = q.dot(&v);
                coef[k] += c;
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= RANK_TOL * max_norm {
            // coefficients on the accepted original columns: R_acc^-1 coef
            let m = accepted.len();
            let r_acc = r.view((0, 0), (m, m)).into_owned();
            let rhs = DVector::from_vec(coef);
            let beta = r_acc.solve_upper_triangular(&rhs).unwrap_or(rhs);
            let scale = beta.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let mut set: Vec<usize> = accepted
                .iter()
                .zip(beta.iter())
                .filter(|(_, b)| b.abs() > 1e-8 * scale.max(f64::MIN_POSITIVE))
                .map(|(&i, _)| i)
                .collect();
            set.push(j);
            return Some(set);
        }
        let k = basis.len();
        for (i, c) in coef.iter().enumerate() {
            r[(i, k)] = *c;
        }
        r[(k, k)] = norm;
        basis.push(v / norm);
        accepted.push(j);
        debug_assert!(basis.last().unwrap().len() == n);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_dependent_set() {
        // col2 = col0 + 2*col1, col3 independent
        let x = DMatrix::from_row_slice(
            5,
            4,
            &[
                1.0, 0.0, 1.0, 3.0, //
                1.0, 1.0, 3.0, 1.0, //
                1.0, 2.0, 5.0, 4.0, //
                1.0, 3.0, 7.0, 1.0, //
                1.0, 4.0, 9.0, 5.0,
            ],
        );
        assert_eq!(first_dependency(&x), Some(vec![0, 1, 2]));
        assert!(Qr::new(&x).is_none());
        let ok = x.clone().remove_column(2);
        assert_eq!(first_dependency(&ok), None);
        assert!(Qr::new(&ok).is_some());
    }

    #[test]
    fn qr_solve_recovers_exact_coefficients() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let qr = Qr::new(&x).unwrap();
        let b = qr.solve(&y);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
        let h: f64 = qr.leverages().iter().sum();
        assert!((h - 2.0).abs() < 1e-12);
    }
}
