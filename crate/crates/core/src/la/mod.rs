//! Sparse matrices, the direct solver and the reverse rule of `A u = b`.

mod lu;
mod sparse;

pub use lu::{reverse_cuthill_mckee, Factorization};
pub use sparse::{Pattern, SparseMatrix};

use crate::error::{Error, Result};

/// Solves `A u = b`, returning the solution and the factorization so the
/// adjoint solve can reuse it.
pub fn solve(a: &SparseMatrix, b: &[f64]) -> Result<(Vec<f64>, Factorization)> {
    if b.len() != a.nrows() {
        return Err(Error::invalid(format!(
            "right-hand side of length {} for {} rows",
            b.len(),
            a.nrows()
        )));
    }
    let f = Factorization::new(a)?;
    let u = f.solve(b)?;
    Ok((u, f))
}

/// Reverse rule of `u = A^{-1} b`: solves `A^T lambda = ubar`, then
/// `bbar = lambda` and `Abar = -lambda u^T` restricted to the pattern of `A`.
pub fn solve_vjp(
    a: &SparseMatrix,
    factorization: &Factorization,
    u: &[f64],
    ubar: &[f64],
) -> Result<(SparseMatrix, Vec<f64>)> {
    if u.len() != a.ncols() || ubar.len() != a.nrows() {
        return Err(Error::invalid("solve_vjp: vector lengths do not match the matrix"));
    }
    if ubar.iter().all(|&v| v == 0.0) {
        return Ok((a.zeros_like(), vec![0.0; a.nrows()]));
    }
    let lambda = factorization.solve_transpose(ubar)?;
    let mut abar = a.zeros_like();
    for (i, j, p) in a.entries() {
        abar.values[p] = -lambda[i] * u[j];
    }
    Ok((abar, lambda))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(d: &[f64]) -> SparseMatrix {
        let idx: Vec<usize> = (0..d.len()).collect();
        SparseMatrix::from_triplets(&idx, &idx, d, (d.len(), d.len())).unwrap()
    }

    #[test]
    fn identity_and_diagonal_solves() {
        let (u, _) = solve(&SparseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(u, vec![1.0, 2.0, 3.0]);
        let (u, _) = solve(&diag(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert_eq!(u, vec![1.0, 2.0]);
    }

    fn seeded_spd(n: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>()
                            + if i == j { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        SparseMatrix::from_dense(&a).unwrap()
    }

    #[test]
    fn random_spd_residual() {
        let a = seeded_spd(20, 11);
        let b: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        let (u, _) = solve(&a, &b).unwrap();
        let r = a.matvec(&u).unwrap();
        let res = norm_inf(&r.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        assert!(res <= 1e-9 * (1.0 + norm_inf(&b)));
    }

    #[test]
    fn factorization_reuse_matches_fresh_solves() {
        let a = seeded_spd(12, 5);
        let b1: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let b2: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let (_, f) = solve(&a, &b1).unwrap();
        let x1 = f.solve(&b1).unwrap();
        let x2 = f.solve(&b2).unwrap();
        assert_eq!(x1, solve(&a, &b1).unwrap().0);
        assert_eq!(x2, solve(&a, &b2).unwrap().0);
    }

    #[test]
    fn vjp_identity() {
        let a = SparseMatrix::identity(3);
        let u = vec![1.0, -2.0, 0.5];
        let (_, f) = solve(&a, &u).unwrap();
        let v = vec![0.3, 0.1, -4.0];
        let (abar, bbar) = solve_vjp(&a, &f, &u, &v).unwrap();
        assert_eq!(bbar, v);
        for i in 0..3 {
            assert_eq!(abar.get(i, i), -v[i] * u[i]);
        }
    }

    #[test]
    fn vjp_diagonal_analytic() {
        // u = [1, 2], loss = u_2 => lambda = [0, 1/4], Abar = -lambda u^T on the diagonal
        let a = diag(&[2.0, 4.0]);
        let (u, f) = solve(&a, &[2.0, 8.0]).unwrap();
        let (abar, bbar) = solve_vjp(&a, &f, &u, &[0.0, 1.0]).unwrap();
        assert_eq!(bbar, vec![0.0, 0.25]);
        assert_eq!(abar.get(0, 0), 0.0);
        assert_eq!(abar.get(1, 1), -0.5);
        assert_eq!(abar.nnz(), 2);
    }

    #[test]
    fn vjp_zero_adjoint() {
        let a = seeded_spd(6, 2);
        let b = vec![1.0; 6];
        let (u, f) = solve(&a, &b).unwrap();
        let (abar, bbar) = solve_vjp(&a, &f, &u, &[0.0; 6]).unwrap();
        assert!(abar.values.iter().all(|&v| v == 0.0));
        assert!(bbar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(solve(&SparseMatrix::identity(2), &[1.0]).is_err());
    }
}
