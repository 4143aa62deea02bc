//! A few extreme eigenpairs of a symmetric matrix: Householder reduction to
//! tridiagonal form, Sturm-sequence bisection, inverse iteration.

use nalgebra::{DMatrix, DVector};

use super::dense::EigDecomposition;

/// Number of eigenvalues of the tridiagonal `(d, e)` strictly below `x`.
fn sturm_count(d: &[f64], e2: &[f64], x: f64, pivmin: f64) -> usize {
    let mut count = 0;
    let mut q = d[0] - x;
    if q.abs() < pivmin {
        q = -pivmin;
    }
    if q < 0.0 {
        count += 1;
    }
    for i in 1..d.len() {
        q = d[i] - x - e2[i - 1] / q;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// `k`-th smallest eigenvalue (0-based) by bisection on `[lo, hi]`.
fn bisect(d: &[f64], e2: &[f64], k: usize, mut lo: f64, mut hi: f64, pivmin: f64) -> f64 {
    let tol = 2.0 * f64::EPSILON * lo.abs().max(hi.abs()) + pivmin;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if sturm_count(d, e2, mid, pivmin) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// LU factors of a shifted tridiagonal with partial pivoting.
struct TridiagLu {
    dl: Vec<f64>,
    dd: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swap: Vec<bool>,
}

impl TridiagLu {
    fn new(d: &[f64], e: &[f64], shift: f64, tiny: f64) -> Self {
        let n = d.len();
        let mut dl = e.to_vec();
        let mut dd: Vec<f64> = d.iter().map(|v| v - shift).collect();
        let mut du = e.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if dd[i].abs() >= dl[i].abs() {
                if dd[i] == 0.0 {
                    dd[i] = tiny;
                }
                let fact = dl[i] / dd[i];
                dl[i] = fact;
                dd[i + 1] -= fact * du[i];
            } else {
                let fact = dd[i] / dl[i];
                dd[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = dd[i + 1];
                dd[i + 1] = temp - fact * dd[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swap[i] = true;
            }
        }
        for v in dd.iter_mut() {
            if v.abs() < tiny {
                *v = if *v < 0.0 { -tiny } else { tiny };
            }
        }
        Self { dl, dd, du, du2, swap }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n.saturating_sub(1) {
            if self.swap[i] {
                let t = b[i];
                b[i] = b[i + 1];
                b[i + 1] = t - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= self.du[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= self.du2[i] * b[i + 2];
            }
            b[i] = s / self.dd[i];
        }
    }
}

fn normalize(x: &mut [f64]) {
    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in x.iter_mut() {
        *v /= nrm;
    }
}

/// Eigenpairs of the tridiagonal `(d, e)` for its `k` smallest eigenvalues.
pub fn tridiagonal_lowest(d: &[f64], e: &[f64], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = d.len();
    let k = k.min(n);
    let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { e[i - 1].abs() } else { 0.0 } + if i + 1 < n { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    let tnorm = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    let pivmin = f64::MIN_POSITIVE.max(e2.iter().fold(0.0f64, |m, &v| m.max(v)) * f64::MIN_POSITIVE);
    let (lo, hi) = (lo - 2.0 * f64::EPSILON * tnorm, hi + 2.0 * f64::EPSILON * tnorm);
    let values: Vec<f64> = (0..k).map(|j| bisect(d, &e2, j, lo, hi, pivmin)).collect();

    // Eigenvalues closer than this are treated as a cluster and their
    // vectors re-orthogonalized.
    let cluster_tol = 1e-3 * tnorm;
    let tiny = f64::EPSILON * tnorm;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut cluster_start = 0;
    let mut seed: u64 = 0x9e37_79b9_7f4a_7c15;
    for j in 0..k {
        if j > 0 && values[j] - values[j - 1] > cluster_tol {
            cluster_start = j;
        }
        // Separate coincident shifts slightly so the factorizations differ.
        let shift = if j > cluster_start {
            values[j] + (j - cluster_start) as f64 * 10.0 * f64::EPSILON * tnorm
        } else {
            values[j]
        };
        let lu = TridiagLu::new(d, e, shift, tiny);
        let mut x: Vec<f64> = (0..n)
            .map(|_| {
                seed ^= seed << 13;
                seed ^= seed >> 7;
                seed ^= seed << 17;
                (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        normalize(&mut x);
        for _ in 0..5 {
            lu.solve(&mut x);
            for prev in &vectors[cluster_start..j] {
                let c: f64 = prev.iter().zip(&x).map(|(p, v)| p * v).sum();
                for (v, p) in x.iter_mut().zip(prev) {
                    *v -= c * p;
                }
            }
            normalize(&mut x);
        }
        vectors.push(x);
    }
    (values, vectors)
}

/// The `k` smallest eigenpairs of a symmetric matrix, ascending, with
/// orthonormal eigenvectors.
pub fn eig_sym_lowest(a: &DMatrix<f64>, k: usize) -> EigDecomposition {
    let n = a.nrows();
    let k = k.min(n);
    if n == 0 || k == 0 {
        return EigDecomposition {
            eigenvalues: Vec::new(),
            vectors: DMatrix::zeros(n, 0),
        };
    }
    if n == 1 {
        return EigDecomposition {
            eigenvalues: vec![a[(0, 0)]],
            vectors: DMatrix::from_element(1, 1, 1.0),
        };
    }
    let (q, diag, off) = nalgebra::linalg::SymmetricTridiagonal::new(a.clone()).unpack();
    let (values, vecs) = tridiagonal_lowest(diag.as_slice(), off.as_slice(), k);
    let mut v = DMatrix::zeros(n, k);
    for (j, x) in vecs.iter().enumerate() {
        v.set_column(j, &DVector::from_column_slice(x));
    }
    EigDecomposition {
        eigenvalues: values,
        vectors: q * v,
    }
}
