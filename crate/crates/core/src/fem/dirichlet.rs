//! Symmetric row/column elimination of Dirichlet constraints and its
//! reverse rules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::la::SparseMatrix;

fn constrained_mask(n: usize, bc: &BTreeMap<usize, f64>) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &d in bc.keys() {
        if d >= n {
            return Err(Error::invalid(format!(
                "dirichlet dof {d} out of range for {n} unknowns"
            )));
        }
        mask[d] = true;
    }
    Ok(mask)
}

/// Eliminates the constrained matrix rows and columns: constrained rows and
/// columns become identity, and their coupling moves to the right-hand side.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    b: &[f64],
    bc: &BTreeMap<usize, f64>,
) -> Result<(SparseMatrix, Vec<f64>)> {
    Ok((dirichlet_matrix(a, bc)?, dirichlet_rhs(a, b, bc)?))
}

pub fn dirichlet_matrix(a: &SparseMatrix, bc: &BTreeMap<usize, f64>) -> Result<SparseMatrix> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid("dirichlet elimination needs a square system"));
    }
    let mask = constrained_mask(a.nrows(), bc)?;
    let mut out = a.clone();
    for (i, j, p) in a.entries() {
        if mask[i] || mask[j] {
            out.values[p] = if i == j { 1.0 } else { 0.0 };
        }
    }
    for &d in bc.keys() {
        if a.pattern().position(d, d).is_none() {
            return Err(Error::invalid(format!("constrained dof {d} has no diagonal entry")));
        }
    }
    Ok(out)
}

pub fn dirichlet_rhs(a: &SparseMatrix, b: &[f64], bc: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    if b.len() != a.nrows() {
        return Err(Error::invalid("dirichlet: right-hand side length mismatch"));
    }
    let mask = constrained_mask(a.nrows(), bc)?;
    let mut out = b.to_vec();
    for (i, j, p) in a.entries() {
        if !mask[i] && mask[j] {
            out[i] -= a.values[p] * bc[&j];
        }
    }
    for (&d, &g) in bc {
        out[d] = g;
    }
    Ok(out)
}

/// Reverse rule of [`dirichlet_matrix`]: only free-free entries pass through.
pub fn dirichlet_matrix_vjp(
    a: &SparseMatrix,
    bc: &BTreeMap<usize, f64>,
    out_bar: &SparseMatrix,
) -> Result<SparseMatrix> {
    let mask = constrained_mask(a.nrows(), bc)?;
    let mut abar = a.zeros_like();
    for (i, j, p) in a.entries() {
        if !mask[i] && !mask[j] {
            abar.values[p] = out_bar.values[p];
        }
    }
    Ok(abar)
}

/// Reverse rule of [`dirichlet_rhs`] with respect to `(A, b)`.
pub fn dirichlet_rhs_vjp(
    a: &SparseMatrix,
    bc: &BTreeMap<usize, f64>,
    out_bar: &[f64],
) -> Result<(SparseMatrix, Vec<f64>)> {
    let mask = constrained_mask(a.nrows(), bc)?;
    let mut abar = a.zeros_like();
    for (i, j, p) in a.entries() {
        if !mask[i] && mask[j] {
            abar.values[p] = -out_bar[i] * bc[&j];
        }
    }
    let bbar = out_bar
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    Ok((abar, bbar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::la::solve;

    fn laplace_chain() -> SparseMatrix {
        SparseMatrix::from_dense(&[
            vec![1.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn all_dofs_constrained() {
        let a = laplace_chain();
        let bc: BTreeMap<usize, f64> = [(0, 3.0), (1, -1.0), (2, 0.5)].into();
        let (a2, b2) = apply_dirichlet(&a, &[9.0, 9.0, 9.0], &bc).unwrap();
        assert_eq!(solve(&a2, &b2).unwrap().0, vec![3.0, -1.0, 0.5]);
    }

    #[test]
    fn symmetry_preserved() {
        let a = laplace_chain();
        let bc: BTreeMap<usize, f64> = [(0, 1.0)].into();
        let (a2, _) = apply_dirichlet(&a, &[0.0; 3], &bc).unwrap();
        assert_eq!(a2.asymmetry(), 0.0);
    }

    #[test]
    fn one_dimensional_laplace() {
        let a = laplace_chain();
        let bc: BTreeMap<usize, f64> = [(0, 0.0), (2, 1.0)].into();
        let (a2, b2) = apply_dirichlet(&a, &[0.0; 3], &bc).unwrap();
        let (u, _) = solve(&a2, &b2).unwrap();
        assert!((u[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_dof() {
        let bc: BTreeMap<usize, f64> = [(3, 0.0)].into();
        assert!(matches!(
            apply_dirichlet(&laplace_chain(), &[0.0; 3], &bc),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rhs_vjp_matches_fd() {
        let a = laplace_chain();
        let bc: BTreeMap<usize, f64> = [(2, 0.7)].into();
        let b = vec![0.2, -0.4, 1.0];
        let w = vec![1.5, -0.5, 2.0];
        let loss = |a: &SparseMatrix, b: &[f64]| crate::la::dot(&w, &dirichlet_rhs(a, b, &bc).unwrap());
        let (abar, bbar) = dirichlet_rhs_vjp(&a, &bc, &w).unwrap();
        let h = 1e-6;
        for p in 0..a.nnz() {
            let mut ap = a.clone();
            ap.values[p] += h;
            let mut am = a.clone();
            am.values[p] -= h;
            let fd = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            assert!((fd - abar.values[p]).abs() < 1e-9);
        }
        for k in 0..3 {
            let mut bp = b.clone();
            bp[k] += h;
            let mut bm = b.clone();
            bm[k] -= h;
            let fd = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            assert!((fd - bbar[k]).abs() < 1e-9);
        }
    }
}
