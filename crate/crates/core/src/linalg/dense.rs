//! Dense symmetric and symmetric-definite eigenproblems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this dimension the standard problem is solved by Householder
/// tridiagonalization and implicit QL instead of cyclic Jacobi.
pub const JACOBI_MAX_DIM: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymEigMethod {
    Jacobi,
    Tridiagonal,
    #[default]
    Auto,
}

/// Eigenpairs of `A q = lambda B q`, eigenvalues ascending, columns of
/// `vectors` B-orthonormal.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigDecomposition {
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Keeps the `k` smallest eigenpairs.
    pub fn truncate(&mut self, k: usize) {
        let k = k.min(self.eigenvalues.len());
        self.eigenvalues.truncate(k);
        self.vectors = self.vectors.columns(0, k).into_owned();
    }

    /// `max |A Q - B Q Lambda|`
    pub fn residual(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let aq = a * &self.vectors;
        let mut bq = b * &self.vectors;
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            bq.column_mut(j).scale_mut(l);
        }
        (aq - bq).amax()
    }

    /// `max |Q^T B Q - I|`
    pub fn orthonormality_defect(&self, b: &DMatrix<f64>) -> f64 {
        let g = self.vectors.transpose() * b * &self.vectors;
        let n = g.nrows();
        (g - DMatrix::identity(n, n)).amax()
    }
}

/// Lower Cholesky factor `B = L L^T`. Fails naming the first non-positive pivot.
pub fn cholesky(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    if b.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.ncols(),
        });
    }
    match b.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => Err(first_bad_pivot(b)),
    }
}

/// Left-looking Cholesky that stops at the first non-positive pivot.
fn first_bad_pivot(b: &DMatrix<f64>) -> Error {
    let n = b.nrows();
    let mut l = b.clone();
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Error::NotPositiveDefinite { index: j, value: d };
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    // Rounding differences between the two factorizations; report the end.
    Error::NotPositiveDefinite {
        index: n.saturating_sub(1),
        value: 0.0,
    }
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns unsorted
/// eigenvalues and the orthogonal eigenvector matrix.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    const MAX_SWEEPS: usize = 100;
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if n < 2 || scale == 0.0 {
        return ((0..n).map(|i| a[(i, i)]).collect(), v);
    }
    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for q in 1..n {
            for p in 0..q {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        // Rutishauser's threshold for the first sweeps.
        let thresh = if sweep < 3 {
            0.2 * off.sqrt() / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= thresh || apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut a, p, q, c, s);
                for k in 0..n {
                    if k != p && k != q {
                        a[(p, k)] = a[(k, p)];
                        a[(q, k)] = a[(k, q)];
                    }
                }
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = m.nrows();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * n);
    let col_p = &mut lo[p * n..p * n + n];
    let col_q = &mut hi[..n];
    for (xp, xq) in col_p.iter_mut().zip(col_q.iter_mut()) {
        let (a, b) = (*xp, *xq);
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// All eigenpairs of a symmetric matrix, ascending.
pub fn eig_sym(a: &DMatrix<f64>, method: SymEigMethod) -> EigDecomposition {
    let n = a.nrows();
    let use_jacobi = match method {
        SymEigMethod::Jacobi => true,
        SymEigMethod::Tridiagonal => false,
        SymEigMethod::Auto => n <= JACOBI_MAX_DIM,
    };
    let (values, vectors) = if use_jacobi {
        jacobi_eigen(a)
    } else {
        let e = nalgebra::SymmetricEigen::new(a.clone());
        (e.eigenvalues.as_slice().to_vec(), e.eigenvectors)
    };
    sorted(values, vectors)
}

fn sorted(values: Vec<f64>, vectors: DMatrix<f64>) -> EigDecomposition {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let n = vectors.nrows();
    let mut out = DMatrix::zeros(n, order.len());
    for (new, &old) in order.iter().enumerate() {
        out.set_column(new, &vectors.column(old));
    }
    EigDecomposition {
        eigenvalues: order.iter().map(|&i| values[i]).collect(),
        vectors: out,
    }
}

/// Solves `A q = lambda B q` for symmetric `A` and SPD `B` by Cholesky
/// reduction to a standard symmetric problem.
pub fn eig_sym_generalized(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<EigDecomposition> {
    eig_sym_generalized_with(a, b, SymEigMethod::Auto)
}

pub fn eig_sym_generalized_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    method: SymEigMethod,
) -> Result<EigDecomposition> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.nrows(),
        });
    }
    generalized_impl(a, b, method, n)
}

/// Like [`eig_sym_generalized`] but returns only the `k` smallest eigenpairs.
pub fn eig_sym_generalized_lowest(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<EigDecomposition> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.nrows(),
        });
    }
    generalized_impl(a, b, SymEigMethod::Auto, k.min(n))
}

fn generalized_impl(a: &DMatrix<f64>, b: &DMatrix<f64>, method: SymEigMethod, keep: usize) -> Result<EigDecomposition> {
    let l = cholesky(b)?;
    let linv = lower_triangular_inverse(&l);
    // C = L^-1 A L^-T
    let mut c = &linv * a * linv.transpose();
    symmetrize(&mut c);
    let n = c.nrows();
    let partial = method == SymEigMethod::Auto && n > JACOBI_MAX_DIM && 4 * keep <= n;
    let mut e = if partial {
        super::tridiag::eig_sym_lowest(&c, keep)
    } else {
        eig_sym(&c, method)
    };
    e.truncate(keep);
    // Q = L^-T V
    e.vectors = linv.transpose() * &e.vectors;
    Ok(e)
}

/// Inverse of a nonsingular lower-triangular matrix by recursive blocking:
/// `[L11 0; L21 L22]^-1 = [X11 0; -X22 L21 X11  X22]`.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    const BASE: usize = 64;
    let n = l.nrows();
    if n <= BASE {
        let mut x = DMatrix::zeros(n, n);
        for j in 0..n {
            x[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = -s / l[(i, i)];
            }
        }
        return x;
    }
    let h = n / 2;
    let x11 = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let x22 = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let x21 = -(&x22 * (l.view((h, 0), (n - h, h)) * &x11));
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (h, h)).copy_from(&x11);
    x.view_mut((h, h), (n - h, n - h)).copy_from(&x22);
    x.view_mut((h, 0), (n - h, h)).copy_from(&x21);
    x
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// max |M - M^T|
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
