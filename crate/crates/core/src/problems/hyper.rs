//! Compressible neo-Hookean solid on a P1 vector space:
//! `psi = mu/2 (tr C - 2) - mu ln J + lambda/2 (ln J)^2` with `C = F^T F`,
//! Lame parameters proportional to the local Young's modulus.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fem::{AssemblyPlan, ElasticMaterial, ShapeTable};
use crate::la::SparseMatrix;
use crate::mesh::DofMap;
use crate::pcl::NonlinearProblem;

type Mat2 = [[f64; 2]; 2];

pub struct NeoHookean<'a> {
    pub dofs: &'a DofMap,
    pub table: &'a ShapeTable,
    pub plan: &'a AssemblyPlan,
    pub material: ElasticMaterial,
    /// External load vector (tractions), subtracted from the internal forces.
    pub external: &'a [f64],
}

impl NeoHookean<'_> {
    fn deformation(&self, u: &[f64], e: usize, q: usize) -> Mat2 {
        let el = &self.dofs.element_dofs[e];
        let g = self.table.grads(e, q);
        let mut f = [[1.0, 0.0], [0.0, 1.0]];
        for (a, ga) in g.iter().enumerate() {
            for c in 0..2 {
                let uc = u[el[2 * a + c]];
                f[c][0] += uc * ga[0];
                f[c][1] += uc * ga[1];
            }
        }
        f
    }

    // (det F, F^{-1}) with a check on orientation
    fn invert(&self, f: &Mat2, e: usize, q: usize) -> Result<(f64, Mat2)> {
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        if !(det > 0.0) {
            return Err(Error::NonPhysical(format!(
                "deformation gradient determinant {det:e} at element {e}, quadrature point {q}"
            )));
        }
        let inv = [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]];
        Ok((det, inv))
    }

    // First Piola-Kirchhoff stress.
    fn stress(f: &Mat2, det: f64, inv: &Mat2, lambda: f64, mu: f64) -> Mat2 {
        let s = lambda * det.ln() - mu;
        let mut p = [[0.0; 2]; 2];
        for c in 0..2 {
            for d in 0..2 {
                p[c][d] = mu * f[c][d] + s * inv[d][c];
            }
        }
        p
    }

    fn check(&self, u: &[f64], coeff: &[f64]) -> Result<()> {
        if u.len() != self.dofs.num_dofs {
            return Err(Error::invalid("state length does not match the dof map"));
        }
        if coeff.len() != self.table.num_elements() * self.table.nq {
            return Err(Error::invalid("modulus length does not match the quadrature"));
        }
        Ok(())
    }

    // Internal force weighted by `scale(e, q)`, using stress per unit modulus
    // when `unit` is set.
    fn internal<F: FnMut(usize, usize, usize, f64)>(
        &self,
        u: &[f64],
        coeff: &[f64],
        unit: bool,
        mut sink: F,
    ) -> Result<()> {
        let (lp, mp) = self.material.lame_per_unit_modulus();
        for e in 0..self.table.num_elements() {
            let el = &self.dofs.element_dofs[e];
            for q in 0..self.table.nq {
                let f = self.deformation(u, e, q);
                let (det, inv) = self.invert(&f, e, q)?;
                let scale = if unit { 1.0 } else { coeff[e * self.table.nq + q] };
                let p = Self::stress(&f, det, &inv, scale * lp, scale * mp);
                let w = self.table.jxw(e, q);
                for (a, ga) in self.table.grads(e, q).iter().enumerate() {
                    for c in 0..2 {
                        sink(e * self.table.nq + q, el[2 * a + c], 2 * a + c, w * (p[c][0] * ga[0] + p[c][1] * ga[1]));
                    }
                }
            }
        }
        Ok(())
    }
}

impl NonlinearProblem for NeoHookean<'_> {
    fn num_dofs(&self) -> usize {
        self.dofs.num_dofs
    }

    fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        &self.dofs.dirichlet
    }

    fn residual(&self, u: &[f64], coeff: &[f64]) -> Result<Vec<f64>> {
        self.check(u, coeff)?;
        let mut r: Vec<f64> = self.external.iter().map(|v| -v).collect();
        self.internal(u, coeff, false, |_, dof, _, v| r[dof] += v)?;
        Ok(r)
    }

    fn jacobian(&self, u: &[f64], coeff: &[f64]) -> Result<SparseMatrix> {
        self.check(u, coeff)?;
        let (lp, mp) = self.material.lame_per_unit_modulus();
        let mut k = self.plan.zeros();
        for e in 0..self.table.num_elements() {
            for q in 0..self.table.nq {
                let f = self.deformation(u, e, q);
                let (det, inv) = self.invert(&f, e, q)?;
                let young = coeff[e * self.table.nq + q];
                let (lambda, mu) = (young * lp, young * mp);
                let s = mu - lambda * det.ln();
                let w = self.table.jxw(e, q);
                let g = self.table.grads(e, q);
                // dP_cd / dF_ef
                let tangent = |c: usize, d: usize, ee: usize, ff: usize| {
                    let id = if c == ee && d == ff { mu } else { 0.0 };
                    id + s * inv[d][ee] * inv[ff][c] + lambda * inv[ff][ee] * inv[d][c]
                };
                for (a, ga) in g.iter().enumerate() {
                    for (b, gb) in g.iter().enumerate() {
                        for c in 0..2 {
                            for ee in 0..2 {
                                let mut v = 0.0;
                                for d in 0..2 {
                                    for ff in 0..2 {
                                        v += ga[d] * tangent(c, d, ee, ff) * gb[ff];
                                    }
                                }
                                k.values[self.plan.position(e, 2 * a + c, 2 * b + ee)] += w * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(k)
    }

    fn param_vjp(&self, u: &[f64], coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check(u, coeff)?;
        let mut out = vec![0.0; coeff.len()];
        self.internal(u, coeff, true, |k, dof, _, v| out[k] += lambda[dof] * v)?;
        Ok(out)
    }
}
