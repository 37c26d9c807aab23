//! Tape operators used by the benchmark pipelines.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_elasticity_stiffness, assemble_scalar_stiffness, dirichlet_matrix,
    dirichlet_matrix_vjp, dirichlet_rhs, dirichlet_rhs_vjp, elasticity_stiffness_vjp,
    scalar_stiffness_vjp, AssemblyPlan, ElasticMaterial, ShapeTable,
};
use crate::graph::{Operator, Value};
use crate::la::{solve_vjp, Factorization, Pattern, SparseMatrix};
use crate::mesh::{DofMap, Point};
use crate::nn::FieldParam;
use crate::pcl::{
    newton_solve, pcl_adjoint, time_march, time_march_adjoint, NewtonOptions, NewtonReport,
    NewtonSolution, NonlinearProblem, StepProblem, Trajectory,
};

/// Sink for Newton reports, keyed by time step (0 for static solves).
pub type NewtonLog = RefCell<Vec<(usize, NewtonReport)>>;

/// Parameter vector -> field values at the quadrature points.
pub struct FieldEval<'a> {
    pub field: &'a FieldParam,
    pub coords: &'a [Point],
}

impl Operator for FieldEval<'_> {
    fn tag(&self) -> &str {
        "field_eval"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let f = self.field.with_theta(inputs[0].as_vector()?)?;
        Ok(Value::Vector(f.eval(self.coords)?))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let f = self.field.with_theta(inputs[0].as_vector()?)?;
        Ok(vec![Some(Value::Vector(f.vjp(self.coords, adj.as_vector()?)?))])
    }
}

/// Coefficient at quadrature points -> scalar (componentwise) stiffness.
pub struct ScalarStiffness<'a> {
    pub plan: &'a AssemblyPlan,
    pub dofs: &'a DofMap,
    pub table: &'a ShapeTable,
}

impl Operator for ScalarStiffness<'_> {
    fn tag(&self) -> &str {
        "scalar_stiffness"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let a = assemble_scalar_stiffness(self.plan, self.dofs, self.table, inputs[0].as_vector()?)?;
        Ok(Value::Matrix(a))
    }

    fn vjp(&self, _: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let g = scalar_stiffness_vjp(self.plan, self.dofs, self.table, adj.as_matrix()?)?;
        Ok(vec![Some(Value::Vector(g))])
    }
}

/// Young's modulus at quadrature points -> plane-strain stiffness.
pub struct ElasticStiffness<'a> {
    pub plan: &'a AssemblyPlan,
    pub dofs: &'a DofMap,
    pub table: &'a ShapeTable,
    pub material: ElasticMaterial,
}

impl Operator for ElasticStiffness<'_> {
    fn tag(&self) -> &str {
        "elastic_stiffness"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let a = assemble_elasticity_stiffness(
            self.plan,
            self.dofs,
            self.table,
            inputs[0].as_vector()?,
            &self.material,
        )?;
        Ok(Value::Matrix(a))
    }

    fn vjp(&self, _: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let g = elasticity_stiffness_vjp(self.plan, self.table, &self.material, adj.as_matrix()?)?;
        Ok(vec![Some(Value::Vector(g))])
    }
}

/// `A -> [[A, -B], [B^T, 0]]` for a fixed coupling block `B`. The pattern
/// carries an explicit (zero) diagonal in the lower-right block so that
/// pressure dofs can be constrained.
#[derive(Clone)]
pub struct SaddleBlock {
    template: SparseMatrix,
    a_positions: Vec<usize>,
}

impl SaddleBlock {
    pub fn new(a_pattern: &Pattern, b: &SparseMatrix) -> Result<Self> {
        let nv = a_pattern.nrows;
        if b.nrows() != nv {
            return Err(Error::invalid("coupling block rows differ from the velocity block"));
        }
        let np = b.ncols();
        let a_entries = (0..nv).flat_map(|i| {
            a_pattern.col_idx[a_pattern.row_ptr[i]..a_pattern.row_ptr[i + 1]]
                .iter()
                .map(move |&j| (i, j))
        });
        let b_entries = b.entries().map(|(i, j, _)| (i, nv + j));
        let bt_entries = b.entries().map(|(i, j, _)| (nv + j, i));
        let diag = (nv..nv + np).map(|k| (k, k));
        let entries: Vec<(usize, usize)> = a_entries.chain(b_entries).chain(bt_entries).chain(diag).collect();
        let pattern = Arc::new(Pattern::from_entries(nv + np, nv + np, entries)?);
        let mut template = SparseMatrix::zeros(pattern.clone());
        for (i, j, p) in b.entries() {
            let v = b.values[p];
            template.values[pattern.position(i, nv + j).expect("in pattern")] = -v;
            template.values[pattern.position(nv + j, i).expect("in pattern")] = v;
        }
        let a_positions = (0..nv)
            .flat_map(|i| {
                let pattern = &pattern;
                a_pattern.col_idx[a_pattern.row_ptr[i]..a_pattern.row_ptr[i + 1]]
                    .iter()
                    .map(move |&j| pattern.position(i, j).expect("in pattern"))
            })
            .collect();
        Ok(SaddleBlock { template, a_positions })
    }
}

impl Operator for SaddleBlock {
    fn tag(&self) -> &str {
        "saddle_block"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let a = inputs[0].as_matrix()?;
        if a.nnz() != self.a_positions.len() {
            return Err(Error::invalid("velocity block pattern changed"));
        }
        let mut m = self.template.clone();
        for (p, &q) in self.a_positions.iter().enumerate() {
            m.values[q] = a.values[p];
        }
        Ok(Value::Matrix(m))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let mbar = adj.as_matrix()?;
        let values = self.a_positions.iter().map(|&q| mbar.values[q]).collect();
        Ok(vec![Some(Value::Matrix(inputs[0].as_matrix()?.with_values(values)?))])
    }
}

pub struct DirichletMatrix<'a> {
    pub bc: &'a BTreeMap<usize, f64>,
}

impl Operator for DirichletMatrix<'_> {
    fn tag(&self) -> &str {
        "dirichlet_matrix"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        Ok(Value::Matrix(dirichlet_matrix(inputs[0].as_matrix()?, self.bc)?))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let abar = dirichlet_matrix_vjp(inputs[0].as_matrix()?, self.bc, adj.as_matrix()?)?;
        Ok(vec![Some(Value::Matrix(abar))])
    }
}

/// `A -> b'`: the eliminated right-hand side for a fixed load `b`.
pub struct DirichletRhs<'a> {
    pub bc: &'a BTreeMap<usize, f64>,
    pub load: &'a [f64],
}

impl Operator for DirichletRhs<'_> {
    fn tag(&self) -> &str {
        "dirichlet_rhs"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        Ok(Value::Vector(dirichlet_rhs(inputs[0].as_matrix()?, self.load, self.bc)?))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let (abar, _) = dirichlet_rhs_vjp(inputs[0].as_matrix()?, self.bc, adj.as_vector()?)?;
        Ok(vec![Some(Value::Matrix(abar))])
    }
}

/// `(A, b) -> A^{-1} b`, keeping the factorization for the adjoint.
#[derive(Default)]
pub struct LinearSolve {
    factorization: Option<Factorization>,
}

impl Operator for LinearSolve {
    fn tag(&self) -> &str {
        "linear_solve"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let (u, f) = crate::la::solve(inputs[0].as_matrix()?, inputs[1].as_vector()?)?;
        self.factorization = Some(f);
        Ok(Value::Vector(u))
    }

    fn vjp(&self, inputs: &[&Value], output: &Value, adj: &Value, wanted: &[bool]) -> Result<Vec<Option<Value>>> {
        let f = self
            .factorization
            .as_ref()
            .ok_or_else(|| Error::invalid("solve adjoint before forward"))?;
        let (abar, bbar) = solve_vjp(inputs[0].as_matrix()?, f, output.as_vector()?, adj.as_vector()?)?;
        Ok(vec![
            wanted[0].then_some(Value::Matrix(abar)),
            wanted[1].then_some(Value::Vector(bbar)),
        ])
    }
}

/// Coefficients -> converged Newton state; reverse rule by the implicit
/// function theorem.
pub struct NewtonSolve<'a, P: NonlinearProblem> {
    pub problem: P,
    pub u0: Vec<f64>,
    pub options: NewtonOptions,
    pub log: Option<&'a NewtonLog>,
    solution: Option<NewtonSolution>,
}

impl<'a, P: NonlinearProblem> NewtonSolve<'a, P> {
    pub fn new(problem: P, u0: Vec<f64>, options: NewtonOptions, log: Option<&'a NewtonLog>) -> Self {
        NewtonSolve {
            problem,
            u0,
            options,
            log,
            solution: None,
        }
    }
}

impl<P: NonlinearProblem> Operator for NewtonSolve<'_, P> {
    fn tag(&self) -> &str {
        "newton_solve"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let result = newton_solve(&self.problem, &self.u0, inputs[0].as_vector()?, &self.options);
        if let Some(log) = self.log {
            match &result {
                Ok(sol) => log.borrow_mut().push((0, sol.report.clone())),
                Err(Error::SolverDiverged { report }) => log.borrow_mut().push((0, report.clone())),
                Err(_) => {}
            }
        }
        let sol = result?;
        let u = sol.u.clone();
        self.solution = Some(sol);
        Ok(Value::Vector(u))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let sol = self
            .solution
            .as_ref()
            .ok_or_else(|| Error::invalid("newton adjoint before forward"))?;
        let g = pcl_adjoint(&self.problem, sol, inputs[0].as_vector()?, adj.as_vector()?)?;
        Ok(vec![Some(Value::Vector(g))])
    }
}

/// Coefficients -> concatenated states `u_1..u_T` of an implicit march.
pub struct TimeMarch<'a, S: StepProblem> {
    pub problem: S,
    pub u_init: Vec<f64>,
    pub steps: usize,
    pub options: NewtonOptions,
    pub log: Option<&'a NewtonLog>,
    trajectory: Option<Trajectory>,
}

impl<'a, S: StepProblem> TimeMarch<'a, S> {
    pub fn new(
        problem: S,
        u_init: Vec<f64>,
        steps: usize,
        options: NewtonOptions,
        log: Option<&'a NewtonLog>,
    ) -> Self {
        TimeMarch {
            problem,
            u_init,
            steps,
            options,
            log,
            trajectory: None,
        }
    }
}

impl<S: StepProblem> Operator for TimeMarch<'_, S> {
    fn tag(&self) -> &str {
        "time_march"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let traj = time_march(&self.problem, &self.u_init, inputs[0].as_vector()?, self.steps, &self.options)?;
        if let Some(log) = self.log {
            log.borrow_mut()
                .extend(traj.reports.iter().enumerate().map(|(t, r)| (t + 1, r.clone())));
        }
        let out = traj.states[1..].concat();
        self.trajectory = Some(traj);
        Ok(Value::Vector(out))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let traj = self
            .trajectory
            .as_ref()
            .ok_or_else(|| Error::invalid("march adjoint before forward"))?;
        let n = self.problem.num_dofs();
        let blocks: Vec<Vec<f64>> = adj.as_vector()?.chunks(n).map(<[f64]>::to_vec).collect();
        let g = time_march_adjoint(&self.problem, traj, inputs[0].as_vector()?, &blocks)?;
        Ok(vec![Some(Value::Vector(g))])
    }
}

/// Sum of squared differences between selected state entries and data.
/// With `center`, the selected entries are shifted to zero mean first.
pub struct Misfit<'a> {
    pub indices: &'a [usize],
    pub observed: &'a [f64],
    pub center: bool,
}

impl Misfit<'_> {
    fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        if self.indices.len() != self.observed.len() {
            return Err(Error::invalid("observation indices and values differ in length"));
        }
        let mut sel = Vec::with_capacity(self.indices.len());
        for &i in self.indices {
            sel.push(*u.get(i).ok_or_else(|| Error::invalid(format!("observed index {i} out of range")))?);
        }
        if self.center && !sel.is_empty() {
            let mean = sel.iter().sum::<f64>() / sel.len() as f64;
            sel.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(sel.iter().zip(self.observed).map(|(a, b)| a - b).collect())
    }
}

impl Operator for Misfit<'_> {
    fn tag(&self) -> &str {
        "misfit"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let r = self.residual(inputs[0].as_vector()?)?;
        Ok(Value::scalar(r.iter().map(|v| v * v).sum()))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let u = inputs[0].as_vector()?;
        let s = adj.as_vector()?[0];
        let mut r = self.residual(u)?;
        if self.center && !r.is_empty() {
            // the centering projection is symmetric
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            r.iter_mut().for_each(|v| *v -= mean);
        }
        let mut g = vec![0.0; u.len()];
        for (&i, v) in self.indices.iter().zip(&r) {
            g[i] += 2.0 * s * v;
        }
        Ok(vec![Some(Value::Vector(g))])
    }
}
