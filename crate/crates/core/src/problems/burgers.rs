//! Implicit Euler step of the vector viscous Burgers equation
//! `du/dt + (u . grad) u = div(nu grad u)` on a P1 vector space:
//! `F(u, prev) = M (u - prev) / dt + N(u) + K(nu) u`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fem::{AssemblyPlan, ShapeTable};
use crate::la::SparseMatrix;
use crate::mesh::{DofMap, Point};
use crate::pcl::StepProblem;

pub struct BurgersStep<'a> {
    pub dofs: &'a DofMap,
    pub table: &'a ShapeTable,
    pub plan: &'a AssemblyPlan,
    /// Consistent vector mass matrix on the plan's pattern.
    pub mass: &'a SparseMatrix,
    pub dt: f64,
}

struct Local {
    value: [f64; 2],
    grad: [Point; 2],
}

impl BurgersStep<'_> {
    fn local(&self, u: &[f64], e: usize, q: usize) -> Local {
        let el = &self.dofs.element_dofs[e];
        let v = self.table.values(e, q);
        let g = self.table.grads(e, q);
        let mut out = Local {
            value: [0.0; 2],
            grad: [[0.0; 2]; 2],
        };
        for a in 0..self.table.nb {
            for c in 0..2 {
                let uc = u[el[2 * a + c]];
                out.value[c] += uc * v[a];
                out.grad[c][0] += uc * g[a][0];
                out.grad[c][1] += uc * g[a][1];
            }
        }
        out
    }

    fn check(&self, u: &[f64], prev: &[f64], coeff: &[f64]) -> Result<()> {
        let n = self.dofs.num_dofs;
        if u.len() != n || prev.len() != n {
            return Err(Error::invalid("state length does not match the dof map"));
        }
        if coeff.len() != self.table.num_elements() * self.table.nq {
            return Err(Error::invalid("viscosity length does not match the quadrature"));
        }
        Ok(())
    }
}

impl StepProblem for BurgersStep<'_> {
    fn num_dofs(&self) -> usize {
        self.dofs.num_dofs
    }

    fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        &self.dofs.dirichlet
    }

    fn residual(&self, u: &[f64], prev: &[f64], coeff: &[f64]) -> Result<Vec<f64>> {
        self.check(u, prev, coeff)?;
        let diff: Vec<f64> = u.iter().zip(prev).map(|(a, b)| (a - b) / self.dt).collect();
        let mut r = self.mass.matvec(&diff)?;
        for e in 0..self.table.num_elements() {
            let el = &self.dofs.element_dofs[e];
            for q in 0..self.table.nq {
                let loc = self.local(u, e, q);
                let w = self.table.jxw(e, q);
                let nu = coeff[e * self.table.nq + q];
                let v = self.table.values(e, q);
                let g = self.table.grads(e, q);
                for a in 0..self.table.nb {
                    for c in 0..2 {
                        let gc = loc.grad[c];
                        let convect = loc.value[0] * gc[0] + loc.value[1] * gc[1];
                        let diffuse = g[a][0] * gc[0] + g[a][1] * gc[1];
                        r[el[2 * a + c]] += w * (v[a] * convect + nu * diffuse);
                    }
                }
            }
        }
        Ok(r)
    }

    fn jacobian(&self, u: &[f64], prev: &[f64], coeff: &[f64]) -> Result<SparseMatrix> {
        self.check(u, prev, coeff)?;
        let mut k = self.plan.zeros();
        if !k.same_pattern(self.mass) {
            return Err(Error::invalid("mass matrix must share the assembly pattern"));
        }
        for (kv, mv) in k.values.iter_mut().zip(&self.mass.values) {
            *kv = mv / self.dt;
        }
        for e in 0..self.table.num_elements() {
            for q in 0..self.table.nq {
                let loc = self.local(u, e, q);
                let w = self.table.jxw(e, q);
                let nu = coeff[e * self.table.nq + q];
                let v = self.table.values(e, q);
                let g = self.table.grads(e, q);
                for a in 0..self.table.nb {
                    for b in 0..self.table.nb {
                        let adv = loc.value[0] * g[b][0] + loc.value[1] * g[b][1];
                        let lap = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                        for c in 0..2 {
                            for d in 0..2 {
                                let mut val = w * v[a] * v[b] * loc.grad[c][d];
                                if c == d {
                                    val += w * (v[a] * adv + nu * lap);
                                }
                                k.values[self.plan.position(e, 2 * a + c, 2 * b + d)] += val;
                            }
                        }
                    }
                }
            }
        }
        Ok(k)
    }

    fn prev_vjp(&self, _u: &[f64], _prev: &[f64], _coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .mass
            .transpose_matvec(lambda)?
            .into_iter()
            .map(|v| -v / self.dt)
            .collect())
    }

    fn param_vjp(&self, u: &[f64], prev: &[f64], coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check(u, prev, coeff)?;
        let mut out = vec![0.0; coeff.len()];
        for e in 0..self.table.num_elements() {
            let el = &self.dofs.element_dofs[e];
            for q in 0..self.table.nq {
                let loc = self.local(u, e, q);
                let g = self.table.grads(e, q);
                let mut acc = 0.0;
                for a in 0..self.table.nb {
                    for c in 0..2 {
                        acc += lambda[el[2 * a + c]]
                            * (g[a][0] * loc.grad[c][0] + g[a][1] * loc.grad[c][1]);
                    }
                }
                out[e * self.table.nq + q] = acc * self.table.jxw(e, q);
            }
        }
        Ok(out)
    }
}
