#![allow(dead_code)]

use std::f64::consts::PI;

use fieldinv::fem::{
    apply_dirichlet, assemble_divergence, assemble_elasticity_stiffness, assemble_load,
    assemble_scalar_stiffness, AssemblyPlan, ElasticMaterial, LameMode, ShapeTable,
};
use fieldinv::la::{self, norm_inf};
use fieldinv::mesh::{build_dofmap, build_unit_square_mesh, quadrature, DofMap, Mesh, Side, SpaceKind};
use fieldinv::nn::{Granularity, Transform};
use fieldinv::problems::{GroundTruth, NewtonLog, Problem, ProblemKind, ProblemSettings};

fn bump(p: [f64; 2]) -> f64 {
    (PI * p[0]).sin() * (PI * p[1]).sin()
}

// L2 norm of u_h - exact over the mesh, per component.
fn l2_error(mesh: &Mesh, dofs: &DofMap, u: &[f64], exact: &dyn Fn([f64; 2]) -> [f64; 2]) -> f64 {
    let rule = quadrature(4).unwrap();
    let table = ShapeTable::new(mesh, SpaceKind::P1, &rule);
    let ncomp = dofs.components();
    let mut err = 0.0;
    for e in 0..mesh.num_elements() {
        for q in 0..table.nq {
            let x = mesh.map_point(e, rule.points[q]);
            let ex = exact(x);
            let v = table.values(e, q);
            for c in 0..ncomp {
                let uh: f64 = (0..table.nb).map(|a| v[a] * u[dofs.element_dofs[e][ncomp * a + c]]).sum();
                err += table.jxw(e, q) * (uh - ex[c]).powi(2);
            }
        }
    }
    err.sqrt()
}

/// L2 error of P1 for `-lap u = f` with `u = sin(pi x) sin(pi y)`.
pub fn diffusion_error(n: usize) -> f64 {
    let mesh = build_unit_square_mesh(n).unwrap();
    let mut dofs = build_dofmap(&mesh, SpaceKind::P1);
    for side in Side::ALL {
        dofs.constrain_side(side, 0, |_| 0.0).unwrap();
    }
    let rule = quadrature(4).unwrap();
    let table = ShapeTable::new(&mesh, SpaceKind::P1, &rule);
    let plan = AssemblyPlan::square(&dofs).unwrap();
    let nu = vec![1.0; mesh.num_elements() * table.nq];
    let a = assemble_scalar_stiffness(&plan, &dofs, &table, &nu).unwrap();
    let f = assemble_load(&mesh, &dofs, &table, &rule.points, &|p| [2.0 * PI * PI * bump(p), 0.0]);
    let (a, b) = apply_dirichlet(&a, &f, &dofs.dirichlet).unwrap();
    let (u, _) = la::solve(&a, &b).unwrap();
    l2_error(&mesh, &dofs, &u, &|p| [bump(p), 0.0])
}

/// L2 displacement error of P1 plane-strain elasticity with unit modulus and
/// both components equal to `sin(pi x) sin(pi y)`.
pub fn elasticity_error(n: usize) -> f64 {
    let mesh = build_unit_square_mesh(n).unwrap();
    let mut dofs = build_dofmap(&mesh, SpaceKind::P1Vector);
    for side in Side::ALL {
        for c in 0..2 {
            dofs.constrain_side(side, c, |_| 0.0).unwrap();
        }
    }
    let rule = quadrature(4).unwrap();
    let table = ShapeTable::new(&mesh, SpaceKind::P1, &rule);
    let plan = AssemblyPlan::square(&dofs).unwrap();
    let material = ElasticMaterial::new(0.3, LameMode::Standard).unwrap();
    let (lambda, mu) = material.lame(1.0);
    let young = vec![1.0; mesh.num_elements() * table.nq];
    let k = assemble_elasticity_stiffness(&plan, &dofs, &table, &young, &material).unwrap();
    // -div sigma = -(lambda + mu) grad div u - mu lap u
    let force = |p: [f64; 2]| {
        let s = bump(p);
        let cc = (PI * p[0]).cos() * (PI * p[1]).cos();
        let v = (lambda + mu) * PI * PI * (s - cc) + 2.0 * mu * PI * PI * s;
        [v, v]
    };
    let f = assemble_load(&mesh, &dofs, &table, &rule.points, &force);
    let (k, b) = apply_dirichlet(&k, &f, &dofs.dirichlet).unwrap();
    let (u, _) = la::solve(&k, &b).unwrap();
    l2_error(&mesh, &dofs, &u, &|p| [bump(p), bump(p)])
}

/// `||B^T U||_inf` of the ground-truth Stokes velocity.
pub fn stokes_divergence(n: usize) -> f64 {
    let p = Problem::new(ProblemKind::Stokes, n, ProblemSettings::default(), GroundTruth::default()).unwrap();
    let state = p.solve(&p.truth_at_quad()).unwrap();
    let b = assemble_divergence(&p.state, &p.table, p.pressure.as_ref().unwrap()).unwrap();
    norm_inf(&b.transpose_matvec(&state[..p.state.num_dofs]).unwrap())
}

/// Newton residual histories of a hyperelastic forward solve at the
/// ground truth.
pub fn newton_histories(n: usize) -> Vec<Vec<f64>> {
    let p = Problem::new(ProblemKind::Hyperelasticity, n, ProblemSettings::default(), GroundTruth::default())
        .unwrap();
    let obs = p.synthesize_observations().unwrap();
    let field = p
        .discretized(Granularity::PerQuadPoint, Transform::None, p.truth_at_quad())
        .unwrap();
    let log = NewtonLog::default();
    p.loss_and_grad(&field, &obs, Some(&log)).unwrap();
    log.into_inner().into_iter().map(|(_, r)| r.history).collect()
}

/// Whether the tail of a residual history converges quadratically: once
/// the residual is below 1e-2, every further step above round-off satisfies
/// `r_{k+1} <= C r_k^2`.
pub fn quadratic_tail(history: &[f64], c: f64) -> bool {
    let steps: Vec<(f64, f64)> = history
        .windows(2)
        .map(|w| (w[0], w[1]))
        .filter(|&(a, b)| a < 1e-2 && b > 1e-13)
        .collect();
    !steps.is_empty() && steps.iter().all(|&(a, b)| b <= c * a * a)
}

/// Observed convergence rate between two mesh sizes.
pub fn rate(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}
