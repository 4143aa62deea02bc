//! Direct sparse solver: reverse Cuthill-McKee reordering followed by a banded
//! LU factorization with partial pivoting.

use std::collections::VecDeque;

use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

/// Reverse Cuthill-McKee ordering of the symmetrized pattern. `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparseMatrix) -> Vec<usize> {
    let n = a.n_rows();
    let at = a.transpose();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut nb: Vec<usize> = a.row(i).0.iter().chain(at.row(i).0).copied().filter(|&j| j != i).collect();
        nb.sort_unstable();
        nb.dedup();
        adj[i] = nb;
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    while order.len() < n {
        // Start each component from a pseudo-peripheral node: the minimum-degree
        // unvisited node, refined by one BFS sweep.
        let start = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).unwrap();
        let start = farthest_in_component(&adj, &degree, start, &visited);
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&j| !visited[j]).collect();
            nb.sort_by_key(|&j| (degree[j], j));
            for j in nb {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn farthest_in_component(adj: &[Vec<usize>], degree: &[usize], start: usize, visited: &[bool]) -> usize {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut best = (0, degree[start], start);
    while let Some(v) = queue.pop_front() {
        for &j in &adj[v] {
            if !visited[j] && dist[j] == usize::MAX {
                dist[j] = dist[v] + 1;
                let cand = (dist[j], degree[j], j);
                if cand.0 > best.0 || (cand.0 == best.0 && (cand.1, cand.2) < (best.1, best.2)) {
                    best = cand;
                }
                queue.push_back(j);
            }
        }
    }
    best.2
}

/// LU factors of a permuted banded matrix, reusable for many right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
    perm: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.n_cols(),
            });
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for (i, j, _) in a.triplets() {
            let (pi, pj) = (inv[i], inv[j]);
            if pi > pj {
                kl = kl.max(pi - pj);
            } else {
                ku = ku.max(pj - pi);
            }
        }
        let kv = kl + ku;
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![0.0; ldab * n];
        for (i, j, v) in a.triplets() {
            let (pi, pj) = (inv[i], inv[j]);
            ab[pj * ldab + kv + pi - pj] += v;
        }
        let idx = |i: usize, j: usize| j * ldab + kv + i - j;

        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for k in 0..n {
            let km = kl.min(n - 1 - k);
            let mut p = 0;
            let mut best = ab[idx(k, k)].abs();
            for r in 1..=km {
                let v = ab[idx(k + r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            ipiv[k] = k + p;
            if best == 0.0 {
                return Err(Error::Singular(k));
            }
            ju = ju.max((k + ku + p).min(n - 1));
            if p != 0 {
                for j in k..=ju {
                    ab.swap(idx(k, j), idx(k + p, j));
                }
            }
            if km > 0 {
                let inv_pivot = 1.0 / ab[idx(k, k)];
                let base = idx(k, k);
                for r in 1..=km {
                    ab[base + r] *= inv_pivot;
                }
                for j in k + 1..=ju {
                    let ukj = ab[idx(k, j)];
                    if ukj == 0.0 {
                        continue;
                    }
                    let col = idx(k, j);
                    for r in 1..=km {
                        ab[col + r] -= ab[base + r] * ukj;
                    }
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            ldab,
            ab,
            ipiv,
            perm,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_permuted(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solves `A X = B` in place for every column of `b`.
    pub fn solve_columns(&self, b: &mut nalgebra::DMatrix<f64>) {
        const BLOCK: usize = 16;
        assert_eq!(b.nrows(), self.n);
        let n = self.n;
        let ncols = b.ncols();
        let mut buf = vec![0.0; n * BLOCK];
        let mut c0 = 0;
        while c0 < ncols {
            let nb = BLOCK.min(ncols - c0);
            // Interleave the block row-major so each band entry is applied to
            // all right-hand sides at once.
            for (new, &old) in self.perm.iter().enumerate() {
                for r in 0..nb {
                    buf[new * nb + r] = b[(old, c0 + r)];
                }
            }
            self.solve_block(&mut buf[..n * nb], nb);
            for (new, &old) in self.perm.iter().enumerate() {
                for r in 0..nb {
                    b[(old, c0 + r)] = buf[new * nb + r];
                }
            }
            c0 += nb;
        }
    }

    fn solve_block(&self, y: &mut [f64], nb: usize) {
        let n = self.n;
        let kv = self.kl + self.ku;
        let ldab = self.ldab;
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                for r in 0..nb {
                    y.swap(k * nb + r, p * nb + r);
                }
            }
            let km = self.kl.min(n - 1 - k);
            let base = k * ldab + kv;
            let (head, tail) = y.split_at_mut((k + 1) * nb);
            let yk = &head[k * nb..];
            for r in 1..=km {
                let l = self.ab[base + r];
                if l == 0.0 {
                    continue;
                }
                let row = &mut tail[(r - 1) * nb..r * nb];
                for (t, s) in row.iter_mut().zip(yk) {
                    *t -= l * s;
                }
            }
        }
        for j in (0..n).rev() {
            let base = j * ldab + kv;
            let inv = 1.0 / self.ab[base];
            let (head, tail) = y.split_at_mut(j * nb);
            let yj = &mut tail[..nb];
            for v in yj.iter_mut() {
                *v *= inv;
            }
            let top = j.saturating_sub(kv);
            for i in top..j {
                let u = self.ab[base - (j - i)];
                if u == 0.0 {
                    continue;
                }
                let row = &mut head[i * nb..(i + 1) * nb];
                for (t, s) in row.iter_mut().zip(yj.iter()) {
                    *t -= u * s;
                }
            }
        }
    }

    fn solve_permuted(&self, y: &mut [f64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        let ldab = self.ldab;
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                y.swap(k, p);
            }
            let yk = y[k];
            if yk != 0.0 {
                let km = self.kl.min(n - 1 - k);
                let base = k * ldab + kv;
                for r in 1..=km {
                    y[k + r] -= self.ab[base + r] * yk;
                }
            }
        }
        // U is stored by columns: column j holds u(i, j) for i in [j - kv, j].
        for j in (0..n).rev() {
            let base = j * ldab + kv;
            y[j] /= self.ab[base];
            let yj = y[j];
            if yj != 0.0 {
                let top = j.saturating_sub(kv);
                for i in top..j {
                    y[i] -= self.ab[base - (j - i)] * yj;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn solves_with_pivoting() {
        // Zero leading diagonal forces a row swap.
        let d = DMatrix::from_row_slice(4, 4, &[
            0.0, 2.0, 0.0, 1.0,
            1.0, 1.0, 3.0, 0.0,
            0.0, 4.0, 1.0, 2.0,
            5.0, 0.0, 0.0, 1.0,
        ]);
        let a = SparseMatrix::from_dense(&d);
        let lu = BandedLu::factor(&a).unwrap();
        let b = [1.0, 2.0, 3.0, 4.0];
        let x = lu.solve(&b);
        let expect = d.lu().solve(&DVector::from_row_slice(&b)).unwrap();
        for i in 0..4 {
            assert!((x[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn block_solve_matches_single() {
        let n = 40;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + (i % 3) as f64));
            if i + 1 < n {
                t.push((i, i + 1, -1.5));
                t.push((i + 1, i, -0.5));
            }
            if i + 7 < n {
                t.push((i, i + 7, 0.3));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &t);
        let lu = BandedLu::factor(&a).unwrap();
        let mut b = DMatrix::from_fn(n, 21, |i, j| ((i * 3 + j * 5) % 11) as f64 - 5.0);
        let singles: Vec<Vec<f64>> = (0..21).map(|j| lu.solve(b.column(j).as_slice())).collect();
        lu.solve_columns(&mut b);
        for j in 0..21 {
            for i in 0..n {
                assert!((b[(i, j)] - singles[j][i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn singular_is_reported() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let a = SparseMatrix::from_dense(&d);
        assert!(matches!(BandedLu::factor(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let mut t = Vec::new();
        for i in 0..30usize {
            t.push((i, i, 4.0));
            t.push((i, (i * 7) % 30, -1.0));
            t.push(((i * 7) % 30, i, -1.0));
        }
        let a = SparseMatrix::from_triplets(30, 30, &t);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort();
        assert_eq!(p, (0..30).collect::<Vec<_>>());
    }
}
