//! Krylov solvers: Jacobi-preconditioned CG and ILU(0)-preconditioned BiCGStab.

use super::sparse::{axpy, dot, norm2, SparseMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct IterativeOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

fn true_rel_residual(a: &SparseMatrix, x: &[f64], b: &[f64], b_norm: f64) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    norm2(&r) / b_norm
}

/// Preconditioned conjugate gradients with a diagonal preconditioner.
pub fn conjugate_gradient(
    a: &SparseMatrix,
    b: &[f64],
    opts: IterativeOptions,
) -> Result<Solution> {
    let n = a.n_rows();
    if a.n_cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);

    for it in 1..=opts.max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Breakdown {
                solver: "cg",
                iteration: it,
                residual: norm2(&r) / b_norm,
            });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        if norm2(&r) / b_norm <= opts.rel_tol {
            // The recursive residual drifts; confirm with the true one.
            let res = true_rel_residual(a, &x, b, b_norm);
            if res <= opts.rel_tol {
                return Ok(Solution {
                    x,
                    iterations: it,
                    rel_residual: res,
                });
            }
            r = b.iter().zip(a.mul_vec(&x)).map(|(bi, ai)| bi - ai).collect();
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        solver: "cg",
        iterations: opts.max_iter,
        residual: true_rel_residual(a, &x, b, b_norm),
    })
}

/// Incomplete LU factorization with zero fill on the sparsity pattern of `A`.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: SparseMatrix,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let n = a.n_rows();
        let row_ptr = a.row_ptr().to_vec();
        let cols = a.col_indices().to_vec();
        let mut vals = a.values().to_vec();
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                if cols[k] == i {
                    diag_pos[i] = k;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(Error::Singular(i));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                pos[cols[k]] = k;
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                let j = cols[k];
                if j >= i {
                    break;
                }
                let pivot = vals[diag_pos[j]];
                if pivot == 0.0 {
                    return Err(Error::Singular(j));
                }
                let l = vals[k] / pivot;
                vals[k] = l;
                for m in diag_pos[j] + 1..row_ptr[j + 1] {
                    let c = cols[m];
                    let p = pos[c];
                    if p != usize::MAX && p >= row_ptr[i] && p < row_ptr[i + 1] {
                        vals[p] -= l * vals[m];
                    }
                }
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                pos[cols[k]] = usize::MAX;
            }
            if vals[diag_pos[i]] == 0.0 {
                return Err(Error::Singular(i));
            }
        }
        let mut t = Vec::with_capacity(vals.len());
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                t.push((i, cols[k], vals[k]));
            }
        }
        let lu = SparseMatrix::from_triplets(n, n, &t);
        // Recompute diagonal positions: from_triplets may drop exact zeros.
        let mut diag_pos = vec![0; n];
        for i in 0..n {
            let (c, _) = lu.row(i);
            diag_pos[i] = lu.row_ptr()[i] + c.binary_search(&i).map_err(|_| Error::Singular(i))?;
        }
        Ok(Self { lu, diag_pos })
    }

    /// Solves `L U z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        let n = z.len();
        let rp = self.lu.row_ptr();
        let ci = self.lu.col_indices();
        let v = self.lu.values();
        for i in 0..n {
            let mut acc = z[i];
            for k in rp[i]..self.diag_pos[i] {
                acc -= v[k] * z[ci[k]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in self.diag_pos[i] + 1..rp[i + 1] {
                acc -= v[k] * z[ci[k]];
            }
            z[i] = acc / v[self.diag_pos[i]];
        }
    }
}

/// Right-preconditioned BiCGStab with ILU(0).
pub fn bicgstab(a: &SparseMatrix, b: &[f64], opts: IterativeOptions) -> Result<Solution> {
    let n = a.n_rows();
    if a.n_cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let ilu = Ilu0::new(a)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);

    for it in 1..=opts.max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::Breakdown {
                solver: "bicgstab",
                iteration: it,
                residual: norm2(&r) / b_norm,
            });
        }
        if it == 1 {
            p.copy_from_slice(&r);
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
        }
        rho = rho_new;
        p_hat.copy_from_slice(&p);
        ilu.apply(&mut p_hat);
        a.mul_vec_into(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv.abs() < 1e-300 {
            return Err(Error::Breakdown {
                solver: "bicgstab",
                iteration: it,
                residual: norm2(&r) / b_norm,
            });
        }
        alpha = rho / rv;
        // r becomes s
        axpy(-alpha, &v, &mut r);
        axpy(alpha, &p_hat, &mut x);
        if norm2(&r) / b_norm <= opts.rel_tol {
            let res = true_rel_residual(a, &x, b, b_norm);
            if res <= opts.rel_tol {
                return Ok(Solution {
                    x,
                    iterations: it,
                    rel_residual: res,
                });
            }
        }
        s_hat.copy_from_slice(&r);
        ilu.apply(&mut s_hat);
        a.mul_vec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(Error::Breakdown {
                solver: "bicgstab",
                iteration: it,
                residual: norm2(&r) / b_norm,
            });
        }
        omega = dot(&t, &r) / tt;
        axpy(omega, &s_hat, &mut x);
        axpy(-omega, &t, &mut r);
        if norm2(&r) / b_norm <= opts.rel_tol {
            let res = true_rel_residual(a, &x, b, b_norm);
            if res <= opts.rel_tol {
                return Ok(Solution {
                    x,
                    iterations: it,
                    rel_residual: res,
                });
            }
            r = b.iter().zip(a.mul_vec(&x)).map(|(bi, ai)| bi - ai).collect();
        }
        if omega == 0.0 {
            return Err(Error::Breakdown {
                solver: "bicgstab",
                iteration: it,
                residual: norm2(&r) / b_norm,
            });
        }
    }
    Err(Error::NotConverged {
        solver: "bicgstab",
        iterations: opts.max_iter,
        residual: true_rel_residual(a, &x, b, b_norm),
    })
}
