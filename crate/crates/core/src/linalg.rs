//! Dense linear solves for policy evaluation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

/// Solves `m x = b` by LU with partial pivoting; `None` when singular.
pub fn solve(m: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    let a = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let rhs = DVector::from_iterator(n, b.iter().copied());
    let x = a.lu().solve(&rhs)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array1::from_iter(x.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_system() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let x = solve(&m, &array![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(solve(&array![[1.0, 1.0], [1.0, 1.0]], &array![1.0, 2.0]).is_none());
    }
}
