use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
///
/// Column indices are sorted and unique within each row and no explicit
/// zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed in input order.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        // Bucket by row, keeping the input order within a row (stable).
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..n_rows {
            let (s, e) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(s..e);
            order.sort_by_key(|&k| (cols[k], k));
            let mut k = 0;
            while k < order.len() {
                let c = cols[order[k]];
                let mut sum = 0.0;
                while k < order.len() && cols[order[k]] == c {
                    sum += vals[order[k]];
                    k += 1;
                }
                if sum != 0.0 {
                    col_idx.push(c);
                    values.push(sum);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in s..e {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    /// `y = A^T x`
    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![0.0; self.n_cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                col_idx[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        if alpha == 0.0 {
            return Self::from_triplets(self.n_rows, self.n_cols, &[]);
        }
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, other: &SparseMatrix, alpha: f64) -> Self {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ca.len() || q < cb.len() {
                let (c, v) = if q >= cb.len() || (p < ca.len() && ca[p] < cb[q]) {
                    p += 1;
                    (ca[p - 1], va[p - 1])
                } else if p >= ca.len() || cb[q] < ca[p] {
                    q += 1;
                    (cb[q - 1], alpha * vb[q - 1])
                } else {
                    p += 1;
                    q += 1;
                    (ca[p - 1], va[p - 1] + alpha * vb[q - 1])
                };
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> Self {
        assert_eq!(self.n_cols, other.n_rows);
        let mut acc = vec![0.0; other.n_cols];
        let mut mark = vec![usize::MAX; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = vec![0usize];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n_rows {
            touched.clear();
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                for (&j, &b) in cb.iter().zip(vb) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                if acc[j] != 0.0 {
                    col_idx.push(j);
                    values.push(acc[j]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n_rows: self.n_rows,
            n_cols: other.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Extracts the submatrix with the given rows and columns (in the given order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut t = Vec::new();
        for (new_i, &i) in rows.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                if col_map[j] != usize::MAX {
                    t.push((new_i, col_map[j], x));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triplets() {
            d[(i, j)] = v;
        }
        d
    }

    /// `self * B` for a dense `B`.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.n_cols, b.nrows());
        let mut out = DMatrix::zeros(self.n_rows, b.ncols());
        for c in 0..b.ncols() {
            let bc = b.column(c);
            let mut oc = out.column_mut(c);
            for i in 0..self.n_rows {
                let (cols, vals) = self.row(i);
                let mut acc = 0.0;
                for (&j, &v) in cols.iter().zip(vals) {
                    acc += v * bc[j];
                }
                oc[i] = acc;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// max |A_ij - A_ji|
    pub fn max_asymmetry(&self) -> f64 {
        let t = self.transpose();
        self.add_scaled(&t, -1.0).max_abs()
    }

    /// Writes `n_rows n_cols nnz` followed by one `row col value` line per entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        Ok(())
    }

    pub fn read_coo<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty coordinate file".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| Error::Parse(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Parse(format!("bad header '{header}'")));
        }
        let mut t = Vec::with_capacity(dims[2]);
        for line in lines {
            let line = line?;
            let mut it = line.split_whitespace();
            let mut next = || {
                it.next()
                    .ok_or_else(|| Error::Parse(format!("short line '{line}'")))
            };
            let i: usize = next()?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
            let j: usize = next()?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
            let v: f64 = next()?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
            if i >= dims[0] || j >= dims[1] {
                return Err(Error::Parse(format!("entry ({i}, {j}) out of bounds")));
            }
            t.push((i, j, v));
        }
        if t.len() != dims[2] {
            return Err(Error::Parse(format!(
                "expected {} entries, found {}",
                dims[2],
                t.len()
            )));
        }
        Ok(Self::from_triplets(dims[0], dims[1], &t))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_and_drop_zeros() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 3.0), (1, 1, 1.0), (1, 1, -1.0)]);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 2), 4.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.row(0).0, &[0, 2]);
    }

    #[test]
    fn products_match_dense() {
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0), (2, 0, -1.0), (2, 1, 4.0)]);
        let b = SparseMatrix::from_triplets(3, 2, &[(0, 1, 1.0), (1, 0, 2.0), (2, 0, 5.0), (2, 1, -2.0)]);
        let ab = a.matmul(&b).to_dense();
        let expect = a.to_dense() * b.to_dense();
        assert_eq!(ab, expect);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
        let x = [1.0, -2.0, 0.5];
        let y = a.mul_vec(&x);
        let yd = a.to_dense() * nalgebra::DVector::from_row_slice(&x);
        assert_eq!(y, yd.as_slice());
        assert_eq!(a.mul_vec_transpose(&x), (a.to_dense().transpose() * nalgebra::DVector::from_row_slice(&x)).as_slice());
        let s = a.add_scaled(&a.transpose(), -1.0);
        assert_eq!(s.to_dense(), a.to_dense() - a.to_dense().transpose());
        let sub = a.submatrix(&[2, 0], &[1, 0]);
        assert_eq!(sub.get(0, 0), 4.0);
        assert_eq!(sub.get(0, 1), -1.0);
        assert_eq!(sub.get(1, 1), 1.0);
    }

    #[test]
    fn coo_round_trip() {
        let a = SparseMatrix::from_triplets(3, 4, &[(0, 3, 0.1), (2, 1, -1e-300), (1, 1, 1.0 / 3.0)]);
        let mut buf = Vec::new();
        a.write_coo(&mut buf).unwrap();
        let b = SparseMatrix::read_coo(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(a, b);
    }


    proptest::proptest! {
        #[test]
        fn transpose_is_adjoint(
            entries in proptest::collection::vec((0usize..7, 0usize..5, -10.0f64..10.0), 0..40),
            x in proptest::collection::vec(-1.0f64..1.0, 5),
            y in proptest::collection::vec(-1.0f64..1.0, 7),
        ) {
            let a = SparseMatrix::from_triplets(7, 5, &entries);
            let at = a.transpose();
            proptest::prop_assert_eq!(&at.transpose(), &a);
            let lhs = dot(&a.mul_vec(&x), &y);
            proptest::prop_assert!((lhs - dot(&x, &at.mul_vec(&y))).abs() < 1e-10);
            proptest::prop_assert!((lhs - dot(&x, &a.mul_vec_transpose(&y))).abs() < 1e-10);
        }
    }
}
