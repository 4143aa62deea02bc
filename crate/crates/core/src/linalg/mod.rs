//! Numerical kernels: sparse storage, Krylov and direct solvers, dense
//! symmetric-definite eigensolvers and the phi_1 function.

pub mod banded;
pub mod dense;
pub mod iterative;
pub mod phi;
pub mod sparse;
pub mod tridiag;

pub use banded::BandedLu;
pub use dense::{eig_sym_generalized, EigDecomposition, SymEigMethod};
pub use iterative::{IterativeOptions, Solution};
pub use phi::{phi1, phi1_apply};
pub use sparse::SparseMatrix;

use crate::error::{Error, Result};

/// Systems up to this size fall back to banded LU when BiCGStab fails.
pub const DIRECT_FALLBACK_MAX_DIM: usize = 20_000;

/// Solves an SPD system with diagonally preconditioned CG.
pub fn solve_spd(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let opts = IterativeOptions {
        rel_tol: tol,
        max_iter: 10 * a.n_rows().max(100),
    };
    Ok(iterative::conjugate_gradient(a, b, opts)?.x)
}

/// Solves a general nonsingular system with ILU(0)-BiCGStab, falling back to
/// a direct banded LU solve for systems of moderate size.
pub fn solve_general(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let opts = IterativeOptions {
        rel_tol: tol,
        max_iter: 2 * a.n_rows().max(500),
    };
    match iterative::bicgstab(a, b, opts) {
        Ok(sol) => Ok(sol.x),
        Err(err @ (Error::NotConverged { .. } | Error::Breakdown { .. } | Error::Singular(_))) => {
            if a.n_rows() > DIRECT_FALLBACK_MAX_DIM {
                return Err(err);
            }
            log::debug!("bicgstab failed ({err}); falling back to banded LU");
            Ok(BandedLu::factor(a)?.solve(b))
        }
        Err(err) => Err(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn small_hand_systems() {
        let i = SparseMatrix::identity(4);
        let b = [1.0, -2.0, 3.0, 0.5];
        let x = solve_spd(&i, &b, 1e-12).unwrap();
        assert_eq!(x, b);
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let x = solve_spd(&a, &[3.0, 3.0], 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        let y = solve_general(&a, &[3.0, 3.0], 1e-12).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-8 && (x[1] - y[1]).abs() < 1e-8);
    }

    #[test]
    fn upper_triangular() {
        let u = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, -1.0, 0.0, 3.0, 2.0, 0.0, 0.0, 4.0]);
        let a = SparseMatrix::from_dense(&u);
        // x = (1, 2, 3): b = (2+2-3, 6+6, 12)
        let x = solve_general(&a, &[1.0, 12.0, 12.0], 1e-13).unwrap();
        for (xi, ei) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((xi - ei).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rhs() {
        let a = SparseMatrix::identity(3);
        assert_eq!(solve_general(&a, &[0.0; 3], 1e-10).unwrap(), vec![0.0; 3]);
    }
}
