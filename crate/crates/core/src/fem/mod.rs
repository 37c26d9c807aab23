//! Shape functions, differentiable assembly and boundary conditions.

mod assembly;
mod dirichlet;
mod material;
mod shape;

pub use assembly::{
    assemble_boundary_traction, assemble_divergence, assemble_elasticity_stiffness,
    assemble_load, assemble_mass, assemble_scalar_stiffness, elasticity_stiffness_vjp,
    scalar_stiffness_vjp, AssemblyPlan,
};
pub use dirichlet::{
    apply_dirichlet, dirichlet_matrix, dirichlet_matrix_vjp, dirichlet_rhs, dirichlet_rhs_vjp,
};
pub use material::{ElasticMaterial, LameMode};
pub use shape::{shape_eval, ShapeTable};
