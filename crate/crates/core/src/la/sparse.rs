use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-compressed sparsity pattern. Column indices are sorted and unique
/// within each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Pattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of entry (i, j) in the value array, if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    /// Builds a pattern from (row, col) pairs; duplicates collapse.
    pub fn from_entries(
        nrows: usize,
        ncols: usize,
        entries: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Pattern> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); nrows];
        for (i, j) in entries {
            if i >= nrows || j >= ncols {
                return Err(Error::invalid(format!(
                    "entry ({i}, {j}) outside a {nrows}x{ncols} matrix"
                )));
            }
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        Ok(Pattern {
            nrows,
            ncols,
            row_ptr,
            col_idx,
        })
    }
}

/// Real sparse matrix in CSR form. The pattern is shared so matrices and
/// their adjoints can reuse it without copying.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pattern: Arc<Pattern>,
    pub values: Vec<f64>,
}

impl PartialEq for SparseMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.same_pattern(other) && self.values == other.values
    }
}

impl SparseMatrix {
    pub fn new(pattern: Arc<Pattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::invalid(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(SparseMatrix { pattern, values })
    }

    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let nnz = pattern.nnz();
        SparseMatrix {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    pub fn identity(n: usize) -> Self {
        let pattern = Pattern {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
        };
        SparseMatrix {
            pattern: Arc::new(pattern),
            values: vec![1.0; n],
        }
    }

    /// Assembles a matrix from coordinate triplets, summing duplicates.
    pub fn from_triplets(
        rows: &[usize],
        cols: &[usize],
        vals: &[f64],
        shape: (usize, usize),
    ) -> Result<Self> {
        if rows.len() != cols.len() || rows.len() != vals.len() {
            return Err(Error::invalid("triplet arrays differ in length"));
        }
        let pattern = Pattern::from_entries(
            shape.0,
            shape.1,
            rows.iter().copied().zip(cols.iter().copied()),
        )?;
        let mut m = SparseMatrix::zeros(Arc::new(pattern));
        for ((&i, &j), &v) in rows.iter().zip(cols).zip(vals) {
            let p = m.pattern.position(i, j).expect("entry in pattern");
            m.values[p] += v;
        }
        Ok(m)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut r = Vec::new();
        let mut c = Vec::new();
        let mut v = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::invalid("ragged dense matrix"));
            }
            for (j, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    r.push(i);
                    c.push(j);
                    v.push(x);
                }
            }
        }
        Self::from_triplets(&r, &c, &v, (nrows, ncols))
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern
    }

    /// A matrix with this pattern and the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.pattern.clone(), values)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.pattern.clone())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Iterates the stored entries of row `i` as (col, value).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.pattern.row_ptr[i], self.pattern.row_ptr[i + 1]);
        self.pattern.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Iterates all stored entries as (row, col, position).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.nrows()).flat_map(move |i| {
            (self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1])
                .map(move |p| (i, self.pattern.col_idx[p], p))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols() {
            return Err(Error::invalid(format!(
                "matvec: vector of length {} for {} columns",
                x.len(),
                self.ncols()
            )));
        }
        Ok((0..self.nrows())
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect())
    }

    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.nrows() {
            return Err(Error::invalid(format!(
                "transpose_matvec: vector of length {} for {} rows",
                x.len(),
                self.nrows()
            )));
        }
        let mut y = vec![0.0; self.ncols()];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    y[j] += v * xi;
                }
            }
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols()]; self.nrows()];
        for (i, j, p) in self.entries() {
            d[i][j] = self.values[p];
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut r = Vec::with_capacity(self.nnz());
        let mut c = Vec::with_capacity(self.nnz());
        for (i, j, _) in self.entries() {
            r.push(j);
            c.push(i);
        }
        SparseMatrix::from_triplets(&r, &c, &self.values, (self.ncols(), self.nrows()))
            .expect("transpose stays in range")
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |A_ij - A_ji| over the pattern (entries outside the pattern count as zero).
    pub fn asymmetry(&self) -> f64 {
        self.entries()
            .map(|(i, j, p)| (self.values[p] - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    /// Replaces the given rows by identity rows. Requires the diagonal to be
    /// in the pattern.
    pub fn set_identity_rows(&mut self, rows: impl IntoIterator<Item = usize>) -> Result<()> {
        for i in rows {
            let (lo, hi) = (self.pattern.row_ptr[i], self.pattern.row_ptr[i + 1]);
            let mut has_diag = false;
            for p in lo..hi {
                if self.pattern.col_idx[p] == i {
                    self.values[p] = 1.0;
                    has_diag = true;
                } else {
                    self.values[p] = 0.0;
                }
            }
            if !has_diag {
                return Err(Error::invalid(format!("row {i} has no diagonal entry")));
            }
        }
        Ok(())
    }

    /// MatrixMarket coordinate format (1-based, general real).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows(), self.ncols(), self.nnz())?;
        for (i, j, p) in self.entries() {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, self.values[p])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(&[0, 0], &[0, 0], &[1.0, 2.0], (1, 1)).unwrap();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.nnz(), 1);
    }

    #[test]
    fn empty_triplets_give_zero_matrix() {
        let m = SparseMatrix::from_triplets(&[], &[], &[], (2, 2)).unwrap();
        assert_eq!(m.to_dense(), vec![vec![0.0; 2]; 2]);
        assert_eq!(m.matvec(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        let r = SparseMatrix::from_triplets(&[2], &[0], &[1.0], (2, 2));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_matvec() {
        let i3 = SparseMatrix::from_triplets(&[0, 1, 2], &[0, 1, 2], &[1.0; 3], (3, 3)).unwrap();
        let x = vec![0.5, -2.0, 7.0];
        assert_eq!(i3.matvec(&x).unwrap(), x);
        assert_eq!(SparseMatrix::identity(3), i3);
        assert!(i3.matvec(&[1.0]).is_err());
        assert!(i3.transpose_matvec(&[1.0]).is_err());
    }

    #[test]
    fn transpose_matvec_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dense: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..10)
                    .map(|_| if rng.random_bool(0.4) { rng.random_range(-1.0..1.0) } else { 0.0 })
                    .collect()
            })
            .collect();
        let a = SparseMatrix::from_dense(&dense).unwrap();
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected: Vec<f64> = (0..10)
            .map(|j| (0..10).map(|i| dense[i][j] * x[i]).sum())
            .collect();
        let got = a.transpose_matvec(&x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
        assert_eq!(a.transpose().matvec(&x).unwrap(), got);
    }

    #[test]
    fn matrix_market_dump() {
        let m = SparseMatrix::from_triplets(&[0, 1], &[1, 0], &[2.0, 3.0], (2, 2)).unwrap();
        let mut buf = Vec::new();
        m.write_matrix_market(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[1], "2 2 2");
        assert!(lines[2].starts_with("1 2 "));
    }
}
