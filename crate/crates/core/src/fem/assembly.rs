//! Global assembly and the reverse rules of the coefficient-dependent
//! operators. Coefficients enter only through their values at quadrature
//! points, ordered element-major (`e * nq + q`).

use std::sync::Arc;

use super::material::ElasticMaterial;
use super::shape::ShapeTable;
use crate::error::{Error, Result};
use crate::la::{Pattern, SparseMatrix};
use crate::mesh::{DofMap, Mesh, Point, Side};

/// Sparsity pattern of a bilinear form on `rows x cols` together with the
/// value-array position of every local (row, col) pair of every element.
/// Built once per discretization and reused across assembly calls.
#[derive(Clone, Debug)]
pub struct AssemblyPlan {
    pattern: Arc<Pattern>,
    positions: Vec<Vec<usize>>,
    ncols_local: Vec<usize>,
}

impl AssemblyPlan {
    pub fn new(rows: &DofMap, cols: &DofMap) -> Result<Self> {
        if rows.element_dofs.len() != cols.element_dofs.len() {
            return Err(Error::invalid("dof maps live on different meshes"));
        }
        let entries = rows
            .element_dofs
            .iter()
            .zip(&cols.element_dofs)
            .flat_map(|(r, c)| r.iter().flat_map(move |&i| c.iter().map(move |&j| (i, j))));
        let pattern = Pattern::from_entries(rows.num_dofs, cols.num_dofs, entries)?;
        let positions = rows
            .element_dofs
            .iter()
            .zip(&cols.element_dofs)
            .map(|(r, c)| {
                r.iter()
                    .flat_map(|&i| c.iter().map(move |&j| (i, j)))
                    .map(|(i, j)| pattern.position(i, j).expect("entry in pattern"))
                    .collect()
            })
            .collect();
        Ok(AssemblyPlan {
            pattern: Arc::new(pattern),
            positions,
            ncols_local: cols.element_dofs.iter().map(Vec::len).collect(),
        })
    }

    pub fn square(dofs: &DofMap) -> Result<Self> {
        Self::new(dofs, dofs)
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn zeros(&self) -> SparseMatrix {
        SparseMatrix::zeros(self.pattern.clone())
    }

    /// Value-array position of local entry (a, b) of element `e`.
    #[inline]
    pub fn position(&self, e: usize, a: usize, b: usize) -> usize {
        self.positions[e][a * self.ncols_local[e] + b]
    }

    fn check_matrix(&self, m: &SparseMatrix) -> Result<()> {
        if Arc::ptr_eq(m.pattern(), &self.pattern) || **m.pattern() == *self.pattern {
            Ok(())
        } else {
            Err(Error::invalid("adjoint matrix does not share the assembly pattern"))
        }
    }
}

fn check_coefficient(table: &ShapeTable, coeff: &[f64], what: &str) -> Result<()> {
    let expected = table.num_elements() * table.nq;
    if coeff.len() != expected {
        return Err(Error::invalid(format!(
            "{what}: {} quadrature values, expected {expected}",
            coeff.len()
        )));
    }
    Ok(())
}

/// `A[i,j] = sum_q w_q nu(x_q) grad phi_i . grad phi_j`. Vector dof maps get
/// the same operator on each component.
pub fn assemble_scalar_stiffness(
    plan: &AssemblyPlan,
    dofs: &DofMap,
    table: &ShapeTable,
    nu: &[f64],
) -> Result<SparseMatrix> {
    check_coefficient(table, nu, "stiffness")?;
    let ncomp = dofs.components();
    let mut a = plan.zeros();
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let g = table.grads(e, q);
            let s = table.jxw(e, q) * nu[e * table.nq + q];
            for i in 0..table.nb {
                for j in 0..table.nb {
                    let k = s * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                    for c in 0..ncomp {
                        a.values[plan.position(e, ncomp * i + c, ncomp * j + c)] += k;
                    }
                }
            }
        }
    }
    Ok(a)
}

/// Reverse rule of [`assemble_scalar_stiffness`]:
/// `nubar[q] = sum_{(i,j)} Abar[i,j] w_q grad phi_i . grad phi_j`.
pub fn scalar_stiffness_vjp(
    plan: &AssemblyPlan,
    dofs: &DofMap,
    table: &ShapeTable,
    abar: &SparseMatrix,
) -> Result<Vec<f64>> {
    plan.check_matrix(abar)?;
    let ncomp = dofs.components();
    let mut nubar = vec![0.0; table.num_elements() * table.nq];
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let g = table.grads(e, q);
            let mut acc = 0.0;
            for i in 0..table.nb {
                for j in 0..table.nb {
                    let k = g[i][0] * g[j][0] + g[i][1] * g[j][1];
                    for c in 0..ncomp {
                        acc += abar.values[plan.position(e, ncomp * i + c, ncomp * j + c)] * k;
                    }
                }
            }
            nubar[e * table.nq + q] = acc * table.jxw(e, q);
        }
    }
    Ok(nubar)
}

// Local plane-strain stiffness per unit Young's modulus at one point.
#[inline]
fn elastic_entry(lambda: f64, mu: f64, g: Point, h: Point, c: usize, d: usize) -> f64 {
    let gh = g[0] * h[0] + g[1] * h[1];
    lambda * g[c] * h[d] + mu * (if c == d { gh } else { 0.0 } + g[d] * h[c])
}

/// Plane-strain bilinear form `int sigma(u) : eps(v)` with Lame parameters
/// derived from Young's modulus at each quadrature point.
pub fn assemble_elasticity_stiffness(
    plan: &AssemblyPlan,
    dofs: &DofMap,
    table: &ShapeTable,
    young: &[f64],
    material: &ElasticMaterial,
) -> Result<SparseMatrix> {
    check_coefficient(table, young, "elasticity")?;
    if dofs.components() != 2 {
        return Err(Error::invalid("elasticity needs a vector dof map"));
    }
    let (lp, mp) = material.lame_per_unit_modulus();
    let mut a = plan.zeros();
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let g = table.grads(e, q);
            let s = table.jxw(e, q) * young[e * table.nq + q];
            for i in 0..table.nb {
                for j in 0..table.nb {
                    for c in 0..2 {
                        for d in 0..2 {
                            a.values[plan.position(e, 2 * i + c, 2 * j + d)] +=
                                s * elastic_entry(lp, mp, g[i], g[j], c, d);
                        }
                    }
                }
            }
        }
    }
    Ok(a)
}

/// Reverse rule of [`assemble_elasticity_stiffness`] with respect to the
/// modulus at each quadrature point.
pub fn elasticity_stiffness_vjp(
    plan: &AssemblyPlan,
    table: &ShapeTable,
    material: &ElasticMaterial,
    abar: &SparseMatrix,
) -> Result<Vec<f64>> {
    plan.check_matrix(abar)?;
    let (lp, mp) = material.lame_per_unit_modulus();
    let mut ebar = vec![0.0; table.num_elements() * table.nq];
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let g = table.grads(e, q);
            let mut acc = 0.0;
            for i in 0..table.nb {
                for j in 0..table.nb {
                    for c in 0..2 {
                        for d in 0..2 {
                            acc += abar.values[plan.position(e, 2 * i + c, 2 * j + d)]
                                * elastic_entry(lp, mp, g[i], g[j], c, d);
                        }
                    }
                }
            }
            ebar[e * table.nq + q] = acc * table.jxw(e, q);
        }
    }
    Ok(ebar)
}

/// Consistent mass matrix, componentwise for vector spaces.
pub fn assemble_mass(plan: &AssemblyPlan, dofs: &DofMap, table: &ShapeTable) -> SparseMatrix {
    let ncomp = dofs.components();
    let mut m = plan.zeros();
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let v = table.values(e, q);
            let w = table.jxw(e, q);
            for i in 0..table.nb {
                for j in 0..table.nb {
                    for c in 0..ncomp {
                        m.values[plan.position(e, ncomp * i + c, ncomp * j + c)] += w * v[i] * v[j];
                    }
                }
            }
        }
    }
    m
}

/// `B[i, e] = int_e div phi_i` for a vector velocity space and a P0 pressure.
pub fn assemble_divergence(
    velocity: &DofMap,
    table: &ShapeTable,
    pressure: &DofMap,
) -> Result<SparseMatrix> {
    if velocity.components() != 2 {
        return Err(Error::invalid("divergence needs a vector velocity space"));
    }
    if pressure.kind != crate::mesh::SpaceKind::P0 {
        return Err(Error::invalid("divergence needs a P0 pressure space"));
    }
    let plan = AssemblyPlan::new(velocity, pressure)?;
    let mut b = plan.zeros();
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let g = table.grads(e, q);
            let w = table.jxw(e, q);
            for i in 0..table.nb {
                for c in 0..2 {
                    b.values[plan.position(e, 2 * i + c, 0)] += w * g[i][c];
                }
            }
        }
    }
    Ok(b)
}

/// `F[i] = int f . phi_i`. Scalar spaces use the first component of `f`.
pub fn assemble_load(
    mesh: &Mesh,
    dofs: &DofMap,
    table: &ShapeTable,
    rule_points: &[Point],
    f: &dyn Fn(Point) -> [f64; 2],
) -> Vec<f64> {
    let ncomp = dofs.components();
    let mut out = vec![0.0; dofs.num_dofs];
    for e in 0..table.num_elements() {
        for q in 0..table.nq {
            let x = mesh.map_point(e, rule_points[q]);
            let fx = f(x);
            let v = table.values(e, q);
            let w = table.jxw(e, q);
            for i in 0..table.nb {
                for c in 0..ncomp {
                    out[dofs.element_dofs[e][ncomp * i + c]] += w * v[i] * fx[c];
                }
            }
        }
    }
    out
}

/// Integral of `t . phi_i` over the boundary edges tagged `side`.
pub fn assemble_boundary_traction(
    mesh: &Mesh,
    dofs: &DofMap,
    side: Side,
    t: [f64; 2],
) -> Result<Vec<f64>> {
    let ncomp = dofs.components();
    let quadratic = match dofs.kind.scalar() {
        crate::mesh::SpaceKind::P1 => false,
        crate::mesh::SpaceKind::P2 => true,
        _ => return Err(Error::invalid("traction needs a P1 or P2 space")),
    };
    let edges: Vec<usize> = mesh
        .boundary_edges
        .iter()
        .filter(|(_, s)| *s == side)
        .map(|(e, _)| *e)
        .collect();
    if edges.is_empty() {
        return Err(Error::invalid(format!("no boundary edges on side {side}")));
    }
    // 3-point Gauss-Legendre on [0, 1]
    let r = (0.6f64).sqrt();
    let gauss = [
        (0.5 * (1.0 - r), 5.0 / 18.0),
        (0.5, 8.0 / 18.0),
        (0.5 * (1.0 + r), 5.0 / 18.0),
    ];
    let mut out = vec![0.0; dofs.num_dofs];
    for k in edges {
        let edge = mesh.edges[k];
        let [p, q] = edge.nodes;
        let len = ((mesh.nodes[q][0] - mesh.nodes[p][0]).powi(2)
            + (mesh.nodes[q][1] - mesh.nodes[p][1]).powi(2))
        .sqrt();
        for &(s, w) in &gauss {
            let basis: Vec<(usize, f64)> = if quadratic {
                vec![
                    (p, (1.0 - s) * (1.0 - 2.0 * s)),
                    (q, s * (2.0 * s - 1.0)),
                    (edge.midpoint, 4.0 * s * (1.0 - s)),
                ]
            } else {
                vec![(p, 1.0 - s), (q, s)]
            };
            for (node, phi) in basis {
                for c in 0..ncomp {
                    out[ncomp * node + c] += w * len * phi * t[c];
                }
            }
        }
    }
    Ok(out)
}
