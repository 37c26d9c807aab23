//! The four benchmark forward models. Each records a taped pipeline
//! parameters -> field at quadrature points -> assembly -> solve -> misfit,
//! so one backward sweep gives the loss gradient.

mod burgers;
mod hyper;
pub mod ops;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use burgers::BurgersStep;
pub use hyper::NeoHookean;
pub use ops::NewtonLog;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_boundary_traction, assemble_divergence, assemble_load, assemble_mass, AssemblyPlan,
    ElasticMaterial, LameMode, ShapeTable,
};
use crate::graph::{NodeId, Tape, Value};
use crate::la::SparseMatrix;
use crate::mesh::{
    build_dofmap, build_unit_square_mesh, quad_points, quadrature, DofMap, Mesh, Point,
    QuadratureRule, Side, SpaceKind,
};
use crate::nn::{DiscretizedField, FieldParam, Granularity, Transform};
use crate::pcl::NewtonOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    LinearElasticity,
    Stokes,
    Hyperelasticity,
    Burgers,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::LinearElasticity,
        ProblemKind::Stokes,
        ProblemKind::Hyperelasticity,
        ProblemKind::Burgers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::LinearElasticity => "linear_elasticity",
            ProblemKind::Stokes => "stokes",
            ProblemKind::Hyperelasticity => "hyperelasticity",
            ProblemKind::Burgers => "burgers",
        }
    }

    /// Multiplier applied to the ground-truth shape: moduli are O(1),
    /// viscosities O(0.1).
    pub fn truth_scale(self) -> f64 {
        match self {
            ProblemKind::LinearElasticity | ProblemKind::Hyperelasticity => 1.0,
            ProblemKind::Stokes | ProblemKind::Burgers => 0.1,
        }
    }

    pub fn is_nonlinear(self) -> bool {
        matches!(self, ProblemKind::Hyperelasticity | ProblemKind::Burgers)
    }

    pub fn quadrature_degree(self) -> usize {
        match self {
            ProblemKind::Stokes => 4,
            _ => 2,
        }
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown problem `{s}`")))
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `scale * (base + amplitude * exp(-width |x - center|^2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruth {
    /// Overrides the per-problem scale when set.
    pub scale: Option<f64>,
    pub base: f64,
    pub amplitude: f64,
    pub width: f64,
    pub center: [f64; 2],
}

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth {
            scale: None,
            base: 1.0,
            amplitude: 1.0,
            width: 5.0,
            center: [0.5, 0.5],
        }
    }
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale.is_none_or(|s| s > 0.0)
            && self.base > 0.0
            && self.amplitude >= 0.0
            && self.width >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("ground truth must be strictly positive"))
        }
    }

    pub fn eval(&self, kind: ProblemKind, p: Point) -> f64 {
        let scale = self.scale.unwrap_or(kind.truth_scale());
        let r2 = (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2);
        scale * (self.base + self.amplitude * (-self.width * r2).exp())
    }
}

/// How the hyperelastic plate is loaded on its right side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperLoading {
    /// Prescribed displacement `hyper_load`.
    Displacement,
    /// Applied traction `hyper_load`.
    Traction,
}

/// Boundary data, loads and solver constants of the benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSettings {
    pub poisson: f64,
    /// Shear-modulus formula for linear elasticity; hyperelasticity always
    /// uses the standard one.
    pub lame_mode: LameMode,
    /// Traction on the right side for linear elasticity.
    pub traction: [f64; 2],
    /// Constant body force for Stokes.
    pub stokes_force: [f64; 2],
    /// Peak tangential speed of the parabolic lid profile on the top side
    /// (0 gives no-slip everywhere).
    pub lid_speed: f64,
    pub hyper_loading: HyperLoading,
    pub hyper_load: [f64; 2],
    pub dt: f64,
    pub steps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for ProblemSettings {
    fn default() -> Self {
        ProblemSettings {
            poisson: 0.3,
            lame_mode: LameMode::Scaled,
            traction: [0.0, -0.1],
            stokes_force: [0.0, -1.0],
            lid_speed: 1.0,
            hyper_loading: HyperLoading::Traction,
            hyper_load: [0.1, 0.0],
            dt: 0.05,
            steps: 10,
            newton_tol: 1e-8,
            newton_max_iter: 50,
        }
    }
}

impl ProblemSettings {
    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
        }
    }
}

/// Observed entries of the state. Time-dependent problems concatenate the
/// states `u_1..u_T`; `block` is the length of one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Shift the computed selection to zero mean before comparing.
    pub center: bool,
    pub block: usize,
    pub steps: usize,
}

impl Observation {
    /// `dof_index,value`, or `step,dof_index,value` for trajectories.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.steps > 0 {
            writeln!(w, "step,dof_index,value")?;
            for (&i, v) in self.indices.iter().zip(&self.values) {
                writeln!(w, "{},{},{v:e}", i / self.block + 1, i % self.block)?;
            }
        } else {
            writeln!(w, "dof_index,value")?;
            for (&i, v) in self.indices.iter().zip(&self.values) {
                writeln!(w, "{i},{v:e}")?;
            }
        }
        Ok(())
    }
}

/// A benchmark discretized on an `n x n` unit-square mesh.
pub struct Problem {
    pub kind: ProblemKind,
    pub settings: ProblemSettings,
    pub truth: GroundTruth,
    pub mesh: Mesh,
    /// Displacement or velocity space, with its Dirichlet data.
    pub state: DofMap,
    pub pressure: Option<DofMap>,
    pub rule: QuadratureRule,
    pub table: ShapeTable,
    pub plan: AssemblyPlan,
    /// Physical quadrature points, element-major.
    pub quad_coords: Vec<Point>,
    material: ElasticMaterial,
    /// Right-hand side of the full (possibly saddle) system.
    load: Vec<f64>,
    /// Constraints on the full system.
    bc: BTreeMap<usize, f64>,
    saddle: Option<ops::SaddleBlock>,
    mass: Option<SparseMatrix>,
    u_init: Vec<f64>,
}

fn lid_profile(speed: f64) -> impl Fn(Point) -> f64 {
    move |p| speed * 4.0 * p[0] * (1.0 - p[0])
}

impl Problem {
    pub fn new(
        kind: ProblemKind,
        n: usize,
        settings: ProblemSettings,
        truth: GroundTruth,
    ) -> Result<Self> {
        truth.validate()?;
        if !(settings.dt > 0.0) || settings.steps == 0 && kind == ProblemKind::Burgers {
            return Err(Error::invalid("time stepping needs dt > 0 and at least one step"));
        }
        let mesh = build_unit_square_mesh(n)?;
        let rule = quadrature(kind.quadrature_degree())?;
        let quad_coords = quad_points(&mesh, &rule);
        let state_kind = if kind == ProblemKind::Stokes {
            SpaceKind::P2Vector
        } else {
            SpaceKind::P1Vector
        };
        let mut state = build_dofmap(&mesh, state_kind);
        let table = ShapeTable::new(&mesh, state_kind, &rule);
        let plan = AssemblyPlan::square(&state)?;
        let material = match kind {
            ProblemKind::Hyperelasticity => ElasticMaterial::new(settings.poisson, LameMode::Standard)?,
            _ => ElasticMaterial::new(settings.poisson, settings.lame_mode)?,
        };
        let mut pressure = None;
        let mut saddle = None;
        let mut mass = None;
        let mut u_init = Vec::new();
        let load = match kind {
            ProblemKind::LinearElasticity => {
                for c in 0..2 {
                    state.constrain_side(Side::Left, c, |_| 0.0)?;
                }
                assemble_boundary_traction(&mesh, &state, Side::Right, settings.traction)?
            }
            ProblemKind::Hyperelasticity => {
                for c in 0..2 {
                    state.constrain_side(Side::Left, c, |_| 0.0)?;
                }
                match settings.hyper_loading {
                    HyperLoading::Displacement => {
                        for c in 0..2 {
                            let g = settings.hyper_load[c];
                            state.constrain_side(Side::Right, c, |_| g)?;
                        }
                        vec![0.0; state.num_dofs]
                    }
                    HyperLoading::Traction => {
                        assemble_boundary_traction(&mesh, &state, Side::Right, settings.hyper_load)?
                    }
                }
            }
            ProblemKind::Stokes => {
                for side in [Side::Left, Side::Right, Side::Bottom] {
                    for c in 0..2 {
                        state.constrain_side(side, c, |_| 0.0)?;
                    }
                }
                state.constrain_side(Side::Top, 0, lid_profile(settings.lid_speed))?;
                state.constrain_side(Side::Top, 1, |_| 0.0)?;
                let p = build_dofmap(&mesh, SpaceKind::P0);
                let b = assemble_divergence(&state, &table, &p)?;
                saddle = Some(ops::SaddleBlock::new(plan.pattern(), &b)?);
                let f = settings.stokes_force;
                let mut rhs = assemble_load(&mesh, &state, &table, &rule.points, &|_| f);
                rhs.extend(std::iter::repeat_n(0.0, p.num_dofs));
                pressure = Some(p);
                rhs
            }
            ProblemKind::Burgers => {
                for side in Side::ALL {
                    for c in 0..2 {
                        state.constrain_side(side, c, |_| 0.0)?;
                    }
                }
                mass = Some(assemble_mass(&plan, &state, &table));
                u_init = (0..state.num_dofs)
                    .map(|d| {
                        let p = state.node_coords[d / 2];
                        if d % 2 == 0 && !state.dirichlet.contains_key(&d) {
                            (PI * p[0]).sin() * (PI * p[1]).sin()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![0.0; state.num_dofs]
            }
        };
        let mut bc = state.dirichlet.clone();
        if kind == ProblemKind::Stokes {
            // pressure gauge: first pressure dof pinned to zero
            bc.insert(state.num_dofs, 0.0);
        }
        Ok(Problem {
            kind,
            settings,
            truth,
            mesh,
            state,
            pressure,
            rule,
            table,
            plan,
            quad_coords,
            material,
            load,
            bc,
            saddle,
            mass,
            u_init,
        })
    }

    /// Number of coefficient values (quadrature points over all elements).
    pub fn num_coefficients(&self) -> usize {
        self.quad_coords.len()
    }

    pub fn quad_per_element(&self) -> usize {
        self.rule.len()
    }

    /// Length of one state vector (velocity and pressure for Stokes).
    pub fn state_len(&self) -> usize {
        self.state.num_dofs + self.pressure.as_ref().map_or(0, |p| p.num_dofs)
    }

    pub fn truth_at(&self, p: Point) -> f64 {
        self.truth.eval(self.kind, p)
    }

    pub fn truth_at_quad(&self) -> Vec<f64> {
        self.quad_coords.iter().map(|&p| self.truth_at(p)).collect()
    }

    /// Per-element truth: the element mean of the quadrature values.
    pub fn truth_per_element(&self) -> Vec<f64> {
        let nq = self.quad_per_element();
        self.truth_at_quad()
            .chunks(nq)
            .map(|c| c.iter().sum::<f64>() / nq as f64)
            .collect()
    }

    /// A discretized field bound to this problem's mesh and quadrature.
    pub fn discretized(
        &self,
        granularity: Granularity,
        transform: Transform,
        theta: Vec<f64>,
    ) -> Result<FieldParam> {
        Ok(FieldParam::Discretized(DiscretizedField::new(
            granularity,
            transform,
            theta,
            self.mesh.num_elements(),
            self.quad_per_element(),
        )?))
    }

    pub fn newton_options(&self) -> NewtonOptions {
        self.settings.newton()
    }

    /// Records the forward solve on `tape`, from a node holding the
    /// coefficient at quadrature points to a node holding the state.
    pub fn record_state<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        coeff: NodeId,
        log: Option<&'a NewtonLog>,
    ) -> Result<NodeId> {
        match self.kind {
            ProblemKind::LinearElasticity => {
                let k = tape.record(
                    ops::ElasticStiffness {
                        plan: &self.plan,
                        dofs: &self.state,
                        table: &self.table,
                        material: self.material,
                    },
                    &[coeff],
                )?;
                self.record_linear_solve(tape, k)
            }
            ProblemKind::Stokes => {
                let a = tape.record(
                    ops::ScalarStiffness {
                        plan: &self.plan,
                        dofs: &self.state,
                        table: &self.table,
                    },
                    &[coeff],
                )?;
                let saddle = self.saddle.clone().expect("stokes has a saddle block");
                let m = tape.record(saddle, &[a])?;
                self.record_linear_solve(tape, m)
            }
            ProblemKind::Hyperelasticity => {
                let model = NeoHookean {
                    dofs: &self.state,
                    table: &self.table,
                    plan: &self.plan,
                    material: self.material,
                    external: &self.load,
                };
                let op = ops::NewtonSolve::new(model, vec![0.0; self.state.num_dofs], self.newton_options(), log);
                tape.record(op, &[coeff])
            }
            ProblemKind::Burgers => {
                let step = BurgersStep {
                    dofs: &self.state,
                    table: &self.table,
                    plan: &self.plan,
                    mass: self.mass.as_ref().expect("burgers has a mass matrix"),
                    dt: self.settings.dt,
                };
                let op = ops::TimeMarch::new(step, self.u_init.clone(), self.settings.steps, self.newton_options(), log);
                tape.record(op, &[coeff])
            }
        }
    }

    fn record_linear_solve<'a>(&'a self, tape: &mut Tape<'a>, matrix: NodeId) -> Result<NodeId> {
        let a = tape.record(ops::DirichletMatrix { bc: &self.bc }, &[matrix])?;
        let b = tape.record(
            ops::DirichletRhs {
                bc: &self.bc,
                load: &self.load,
            },
            &[matrix],
        )?;
        tape.record(ops::LinearSolve::default(), &[a, b])
    }

    /// Forward state for given coefficient values at the quadrature points
    /// (trajectories concatenated).
    pub fn solve(&self, coeff: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let c = tape.constant(Value::Vector(coeff.to_vec()));
        let s = self.record_state(&mut tape, c, None)?;
        Ok(tape.value(s).as_vector()?.to_vec())
    }

    /// Which state entries are observed, and whether the selection is
    /// compared after removing its mean.
    pub fn observed_indices(&self) -> (Vec<usize>, bool) {
        let nv = self.state.num_dofs;
        match self.kind {
            ProblemKind::Stokes => ((nv..self.state_len()).collect(), true),
            ProblemKind::Burgers => ((0..nv * self.settings.steps).collect(), false),
            _ => ((0..nv).collect(), false),
        }
    }

    /// Observations of the state generated by `coeff`.
    pub fn observe(&self, coeff: &[f64]) -> Result<Observation> {
        let state = self.solve(coeff)?;
        let (indices, center) = self.observed_indices();
        let mut values: Vec<f64> = indices.iter().map(|&i| state[i]).collect();
        if center && !values.is_empty() {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            values.iter_mut().for_each(|v| *v -= mean);
        }
        let steps = if self.kind == ProblemKind::Burgers { self.settings.steps } else { 0 };
        Ok(Observation {
            indices,
            values,
            center,
            block: self.state.num_dofs,
            steps,
        })
    }

    /// Observations generated by the ground-truth field.
    pub fn synthesize_observations(&self) -> Result<Observation> {
        self.observe(&self.truth_at_quad())
    }

    /// Loss and its gradient with respect to the field's parameters.
    pub fn loss_and_grad(
        &self,
        field: &FieldParam,
        obs: &Observation,
        log: Option<&NewtonLog>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let theta = tape.parameter("theta", field.theta().to_vec());
        let coeff = tape.record(
            ops::FieldEval {
                field,
                coords: &self.quad_coords,
            },
            &[theta],
        )?;
        let state = self.record_state(&mut tape, coeff, log)?;
        let loss = tape.record(
            ops::Misfit {
                indices: &obs.indices,
                observed: &obs.values,
                center: obs.center,
            },
            &[state],
        )?;
        let value = tape.value(loss).as_vector()?[0];
        let mut grads = tape.backward(loss)?;
        Ok((value, grads.remove("theta").unwrap_or_default()))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, field: &FieldParam, obs: &Observation) -> Result<f64> {
        let coeff = field.eval(&self.quad_coords)?;
        let state = self.solve(&coeff)?;
        use crate::graph::Operator;
        let mut m = ops::Misfit {
            indices: &obs.indices,
            observed: &obs.values,
            center: obs.center,
        };
        Ok(m.forward(&[&Value::Vector(state)])?.as_vector()?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::la::norm_inf;
    use crate::nn::{init_mlp, DEFAULT_LAYERS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(kind: ProblemKind, n: usize) -> Problem {
        Problem::new(kind, n, ProblemSettings::default(), GroundTruth::default()).unwrap()
    }

    fn truth_field(p: &Problem) -> FieldParam {
        p.discretized(Granularity::PerQuadPoint, Transform::None, p.truth_at_quad()).unwrap()
    }

    #[test]
    fn truth_reproduces_observations() {
        for kind in ProblemKind::ALL {
            let p = problem(kind, 3);
            let obs = p.synthesize_observations().unwrap();
            let (loss, _) = p.loss_and_grad(&truth_field(&p), &obs, None).unwrap();
            assert!(loss <= 1e-20, "{kind}: {loss}");
            assert_eq!(obs, p.synthesize_observations().unwrap());
        }
    }

    #[test]
    fn stokes_layout_and_incompressibility() {
        let p = problem(ProblemKind::Stokes, 4);
        let obs = p.synthesize_observations().unwrap();
        assert_eq!(obs.values.len(), p.mesh.num_elements());
        let u = p.solve(&p.truth_at_quad()).unwrap();
        let nv = p.state.num_dofs;
        let b = assemble_divergence(&p.state, &p.table, p.pressure.as_ref().unwrap()).unwrap();
        assert!(norm_inf(&b.transpose_matvec(&u[..nv]).unwrap()) <= 1e-9);
        assert_eq!(u[nv], 0.0);
    }

    #[test]
    fn stokes_loss_ignores_velocity() {
        use crate::graph::Operator;
        let p = problem(ProblemKind::Stokes, 3);
        let obs = p.synthesize_observations().unwrap();
        let coeff = vec![0.12; p.num_coefficients()];
        let mut state = p.solve(&coeff).unwrap();
        let mut misfit = ops::Misfit {
            indices: &obs.indices,
            observed: &obs.values,
            center: obs.center,
        };
        let before = misfit.forward(&[&Value::Vector(state.clone())]).unwrap();
        state[..p.state.num_dofs].iter_mut().for_each(|v| *v += 0.3);
        let after = misfit.forward(&[&Value::Vector(state)]).unwrap();
        assert_eq!(before, after);
        assert!(before.as_vector().unwrap()[0] > 0.0);
    }

    #[test]
    fn elasticity_zero_load_zero_displacement() {
        let settings = ProblemSettings {
            traction: [0.0, 0.0],
            ..ProblemSettings::default()
        };
        let truth = GroundTruth {
            amplitude: 0.0,
            ..GroundTruth::default()
        };
        let p = Problem::new(ProblemKind::LinearElasticity, 3, settings, truth).unwrap();
        let obs = p.synthesize_observations().unwrap();
        assert!(obs.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_residual_quadruples_loss() {
        let p = problem(ProblemKind::LinearElasticity, 3);
        let obs = p.synthesize_observations().unwrap();
        let field = p.discretized(Granularity::PerElement, Transform::Abs, vec![1.5; 18]).unwrap();
        let l1 = p.loss(&field, &obs).unwrap();
        let state = p.solve(&field.eval(&p.quad_coords).unwrap()).unwrap();
        let mut far = obs.clone();
        for (v, &i) in far.values.iter_mut().zip(&obs.indices) {
            *v = 2.0 * *v - state[i];
        }
        let l2 = p.loss(&field, &far).unwrap();
        assert!((l2 - 4.0 * l1).abs() <= 1e-12 * l2);
    }

    #[test]
    fn burgers_zero_initial_state() {
        let mut p = problem(ProblemKind::Burgers, 3);
        let obs = p.synthesize_observations().unwrap();
        p.u_init.iter_mut().for_each(|v| *v = 0.0);
        let field = truth_field(&p);
        let loss = p.loss(&field, &obs).unwrap();
        let expect: f64 = obs.values.iter().map(|v| v * v).sum();
        assert!((loss - expect).abs() <= 1e-14 * expect);
    }

    #[test]
    fn burgers_energy_decays() {
        let settings = ProblemSettings {
            steps: 6,
            ..ProblemSettings::default()
        };
        let truth = GroundTruth {
            scale: Some(1.0),
            ..GroundTruth::default()
        };
        let p = Problem::new(ProblemKind::Burgers, 4, settings, truth).unwrap();
        let traj = p.solve(&p.truth_at_quad()).unwrap();
        let m = p.mass.as_ref().unwrap();
        let energy = |u: &[f64]| crate::la::dot(u, &m.matvec(u).unwrap());
        let mut last = energy(&p.u_init);
        for u in traj.chunks(p.state.num_dofs) {
            let e = energy(u);
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn hyper_prescribed_displacement_converges() {
        let settings = ProblemSettings {
            hyper_loading: HyperLoading::Displacement,
            hyper_load: [0.05, 0.0],
            ..ProblemSettings::default()
        };
        let p = Problem::new(ProblemKind::Hyperelasticity, 4, settings, GroundTruth::default()).unwrap();
        let log = NewtonLog::default();
        let field = truth_field(&p);
        let obs = p.synthesize_observations().unwrap();
        p.loss_and_grad(&field, &obs, Some(&log)).unwrap();
        let reports = log.borrow();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].1.converged && reports[0].1.iterations <= 8);
    }

    fn fd_check(kind: ProblemKind, mlp: bool, seed: u64, tol: f64) {
        let p = problem(kind, 3);
        let obs = p.synthesize_observations().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = if mlp {
            let mut m = init_mlp(seed, &DEFAULT_LAYERS, kind.truth_scale()).unwrap();
            m.theta.iter_mut().for_each(|v| *v *= 0.3);
            FieldParam::Mlp(m)
        } else {
            let theta = p
                .truth_at_quad()
                .iter()
                .map(|v| v * rng.random_range(0.7..1.3))
                .collect();
            p.discretized(Granularity::PerQuadPoint, Transform::Abs, theta).unwrap()
        };
        let (_, grad) = p.loss_and_grad(&field, &obs, None).unwrap();
        let x = field.theta().to_vec();
        for _ in 0..3 {
            let d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = crate::la::norm2(&d);
            let h = 1e-6 * (1.0 + norm_inf(&x));
            let shift = |s: f64| {
                let xs: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * h * b / norm).collect();
                p.loss(&field.with_theta(&xs).unwrap(), &obs).unwrap()
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            let an = crate::la::dot(&grad, &d) / norm;
            let rel = (fd - an).abs() / (an.abs() + 1e-12);
            assert!(rel <= tol, "{kind} mlp={mlp}: fd {fd} vs {an} ({rel:e})");
        }
    }

    #[test]
    fn gradients_match_fd() {
        for kind in ProblemKind::ALL {
            let tol = if kind.is_nonlinear() { 1e-5 } else { 1e-6 };
            fd_check(kind, true, 1, tol);
            fd_check(kind, false, 2, tol);
        }
    }
}
