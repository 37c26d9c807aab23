//! Direct LU factorization with partial pivoting.
//!
//! The matrix is first reordered with reverse Cuthill-McKee on the
//! symmetrized pattern, then factored as a band matrix. Row interchanges
//! stay inside the band (at most `kl` rows below the diagonal), so `U`
//! has upper bandwidth `kl + ku`. The multipliers are kept per column in
//! the LINPACK style, which makes the transposed solve a straight reversal
//! of the forward elimination.

use std::collections::VecDeque;

use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

/// Reverse Cuthill-McKee ordering of the symmetrized pattern of `a`.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.entries() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for nb in &mut adj {
        nb.sort_unstable();
        nb.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = peripheral_node(seed, &adj, &degree);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

// George-Liu pseudo-peripheral node search within the component of `seed`.
fn peripheral_node(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut root = seed;
    let mut depth = level_structure(root, adj).len();
    loop {
        let levels = level_structure(root, adj);
        let cand = *levels
            .last()
            .and_then(|last| last.iter().min_by_key(|&&w| (degree[w], w)))
            .expect("nonempty level structure");
        let cand_depth = level_structure(cand, adj).len();
        if cand_depth <= depth {
            return root;
        }
        root = cand;
        depth = cand_depth;
    }
}

fn level_structure(root: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = std::collections::HashSet::from([root]);
    let mut levels = vec![vec![root]];
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &w in &adj[v] {
                if seen.insert(w) {
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

/// LU factors of a square sparse matrix, usable for solves with the matrix
/// and with its transpose.
#[derive(Clone, Debug)]
pub struct Factorization {
    n: usize,
    kl: usize,
    ku: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// Band storage of U, row i holds columns i - kl ..= i + kl + ku.
    band: Vec<f64>,
    /// Multipliers of column k for rows k + 1 ..= k + kl.
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl Factorization {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::invalid(format!(
                "cannot factor a non-square {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPhysical("non-finite matrix entry".into()));
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0, 0);
        for (i, j, _) in a.entries() {
            let (pi, pj) = (inv[i], inv[j]);
            if pi > pj {
                kl = kl.max(pi - pj);
            } else {
                ku = ku.max(pj - pi);
            }
        }
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (i, j, p) in a.entries() {
            let (pi, pj) = (inv[i], inv[j]);
            band[pi * width + pj + kl - pi] += a.values[p];
        }
        let scale = a.max_abs();
        let mut f = Factorization {
            n,
            kl,
            ku,
            perm,
            band,
            lower: vec![0.0; n * kl],
            pivots: vec![0; n],
        };
        f.factor(scale)?;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// (lower, upper) bandwidth of the reordered matrix.
    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.kl + self.ku + 1) + j + self.kl - i
    }

    fn factor(&mut self, scale: f64) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let tiny = 1e-14 * scale.max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.band[self.idx(k, k)].abs();
            for i in k + 1..=last {
                let v = self.band[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny || !best.is_finite() {
                return Err(Error::SingularMatrix { row: self.perm[k] });
            }
            self.pivots[k] = p;
            let right = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=right {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.idx(k, k)];
            for i in k + 1..=last {
                let ik = self.idx(i, k);
                let m = self.band[ik] / pivot;
                self.band[ik] = 0.0;
                self.lower[k * kl + (i - k - 1)] = m;
                if m != 0.0 {
                    for j in k + 1..=right {
                        let kj = self.band[self.idx(k, j)];
                        let ij = self.idx(i, j);
                        self.band[ij] -= m * kj;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_len(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::invalid(format!(
                "right-hand side of length {} for a system of size {}",
                b.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    x[i] -= self.lower[k * kl + (i - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.band[self.idx(k, j)] * x[j];
            }
            x[k] = s / self.band[self.idx(k, k)];
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        Ok(out)
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // U^T y = c, column-oriented forward substitution
        for k in 0..n {
            y[k] /= self.band[self.idx(k, k)];
            let yk = y[k];
            if yk != 0.0 {
                for j in k + 1..=(k + kl + ku).min(n - 1) {
                    y[j] -= self.band[self.idx(k, j)] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = y[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                s -= self.lower[k * kl + (i - k - 1)] * y[i];
            }
            y[k] = s;
            y.swap(k, self.pivots[k]);
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = y[new];
        }
        Ok(out)
    }
}
