//! Newton solves of nonlinear residuals `F(u, c) = 0` and their
//! implicit-function adjoints, for single solves and implicit time marching.
//!
//! Coefficients `c` are the field values at quadrature points. Constrained
//! dofs are handled here: their residual rows are replaced by `u_i - g_i`
//! and their Jacobian rows by identity rows, so problems only describe the
//! physical residual.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::la::{norm_inf, Factorization, SparseMatrix};

/// A residual `F(u, c)` with its state Jacobian and the transpose action of
/// its coefficient Jacobian.
pub trait NonlinearProblem {
    fn num_dofs(&self) -> usize;
    fn dirichlet(&self) -> &BTreeMap<usize, f64>;
    fn residual(&self, u: &[f64], coeff: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, u: &[f64], coeff: &[f64]) -> Result<SparseMatrix>;
    /// `(dF/dc)^T lambda`.
    fn param_vjp(&self, u: &[f64], coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Residual infinity norm before each update and at the final state.
    pub history: Vec<f64>,
}

impl NewtonReport {
    /// Appends CSV rows `step,iter,residual_inf`.
    pub fn write_log<W: Write>(&self, mut w: W, step: usize) -> Result<()> {
        for (k, r) in self.history.iter().enumerate() {
            writeln!(w, "{step},{k},{r:e}")?;
        }
        Ok(())
    }
}

/// Converged state of a Newton solve with the Jacobian (constrained rows
/// replaced) and its factorization at that state.
#[derive(Debug)]
pub struct NewtonSolution {
    pub u: Vec<f64>,
    pub report: NewtonReport,
    pub jacobian: SparseMatrix,
    pub factorization: Factorization,
}

fn constrained_residual<P: NonlinearProblem + ?Sized>(
    p: &P,
    u: &[f64],
    coeff: &[f64],
) -> Result<Vec<f64>> {
    let mut r = p.residual(u, coeff)?;
    if r.len() != u.len() {
        return Err(Error::invalid("residual length differs from state length"));
    }
    for (&d, &g) in p.dirichlet() {
        r[d] = u[d] - g;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonPhysical("non-finite residual".into()));
    }
    Ok(r)
}

fn constrained_jacobian<P: NonlinearProblem + ?Sized>(
    p: &P,
    u: &[f64],
    coeff: &[f64],
) -> Result<SparseMatrix> {
    let mut j = p.jacobian(u, coeff)?;
    j.set_identity_rows(p.dirichlet().keys().copied())?;
    Ok(j)
}

/// Plain (undamped) Newton iteration from `u0`.
pub fn newton_solve<P: NonlinearProblem + ?Sized>(
    problem: &P,
    u0: &[f64],
    coeff: &[f64],
    opts: &NewtonOptions,
) -> Result<NewtonSolution> {
    if u0.len() != problem.num_dofs() {
        return Err(Error::invalid(format!(
            "initial state of length {} for {} dofs",
            u0.len(),
            problem.num_dofs()
        )));
    }
    let mut u = u0.to_vec();
    let mut history = Vec::new();
    loop {
        let r = constrained_residual(problem, &u, coeff)?;
        let rn = norm_inf(&r);
        history.push(rn);
        let iterations = history.len() - 1;
        if rn <= opts.tol {
            let jacobian = constrained_jacobian(problem, &u, coeff)?;
            let factorization = Factorization::new(&jacobian)?;
            return Ok(NewtonSolution {
                u,
                report: NewtonReport {
                    iterations,
                    final_residual: rn,
                    converged: true,
                    history,
                },
                jacobian,
                factorization,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::SolverDiverged {
                report: NewtonReport {
                    iterations,
                    final_residual: rn,
                    converged: false,
                    history,
                },
            });
        }
        let j = constrained_jacobian(problem, &u, coeff)?;
        let du = Factorization::new(&j)?.solve(&r)?;
        for (ui, di) in u.iter_mut().zip(&du) {
            *ui -= di;
        }
    }
}

fn mask_constrained(lambda: &mut [f64], bc: &BTreeMap<usize, f64>) {
    for &d in bc.keys() {
        lambda[d] = 0.0;
    }
}

/// Gradient of `J(u(c))` with respect to `c` at a converged solve, given
/// `dJ/du`: solves `(dF/du)^T lambda = dJ/du` and returns
/// `-(dF/dc)^T lambda`.
pub fn pcl_adjoint<P: NonlinearProblem + ?Sized>(
    problem: &P,
    solution: &NewtonSolution,
    coeff: &[f64],
    djdu: &[f64],
) -> Result<Vec<f64>> {
    if djdu.len() != solution.u.len() {
        return Err(Error::invalid("loss gradient length differs from state length"));
    }
    let mut lambda = solution.factorization.solve_transpose(djdu)?;
    // constrained residual rows do not depend on the coefficients
    mask_constrained(&mut lambda, problem.dirichlet());
    let g = problem.param_vjp(&solution.u, coeff, &lambda)?;
    Ok(g.into_iter().map(|v| -v).collect())
}

/// One implicit step `F(u_t, u_{t-1}, c) = 0` of a time-marching scheme.
pub trait StepProblem {
    fn num_dofs(&self) -> usize;
    fn dirichlet(&self) -> &BTreeMap<usize, f64>;
    fn residual(&self, u: &[f64], prev: &[f64], coeff: &[f64]) -> Result<Vec<f64>>;
    /// `dF/du_t`.
    fn jacobian(&self, u: &[f64], prev: &[f64], coeff: &[f64]) -> Result<SparseMatrix>;
    /// `(dF/du_{t-1})^T lambda`.
    fn prev_vjp(&self, u: &[f64], prev: &[f64], coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>>;
    /// `(dF/dc)^T lambda`.
    fn param_vjp(&self, u: &[f64], prev: &[f64], coeff: &[f64], lambda: &[f64])
        -> Result<Vec<f64>>;
}

struct FrozenStep<'a, S: ?Sized> {
    step: &'a S,
    prev: &'a [f64],
}

impl<S: StepProblem + ?Sized> NonlinearProblem for FrozenStep<'_, S> {
    fn num_dofs(&self) -> usize {
        self.step.num_dofs()
    }
    fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        self.step.dirichlet()
    }
    fn residual(&self, u: &[f64], coeff: &[f64]) -> Result<Vec<f64>> {
        self.step.residual(u, self.prev, coeff)
    }
    fn jacobian(&self, u: &[f64], coeff: &[f64]) -> Result<SparseMatrix> {
        self.step.jacobian(u, self.prev, coeff)
    }
    fn param_vjp(&self, u: &[f64], coeff: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.step.param_vjp(u, self.prev, coeff, lambda)
    }
}

/// All states `u_0..u_T` of a march with every converged factorization.
#[derive(Debug)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub factorizations: Vec<Factorization>,
    pub reports: Vec<NewtonReport>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.factorizations.len()
    }
}

/// Marches `steps` implicit steps from `u_init`, warm-starting each Newton
/// solve from the previous state.
pub fn time_march<S: StepProblem + ?Sized>(
    problem: &S,
    u_init: &[f64],
    coeff: &[f64],
    steps: usize,
    opts: &NewtonOptions,
) -> Result<Trajectory> {
    let mut states = vec![u_init.to_vec()];
    let mut factorizations = Vec::with_capacity(steps);
    let mut reports = Vec::with_capacity(steps);
    for t in 1..=steps {
        let prev = &states[t - 1];
        let frozen = FrozenStep { step: problem, prev };
        let sol = newton_solve(&frozen, prev, coeff, opts).map_err(|e| Error::StepFailed {
            step: t,
            source: Box::new(e),
        })?;
        states.push(sol.u);
        factorizations.push(sol.factorization);
        reports.push(sol.report);
    }
    Ok(Trajectory {
        states,
        factorizations,
        reports,
    })
}

/// Gradient of `sum_t J_t(u_t)` with respect to the coefficients, given
/// `djdu[t-1] = dJ_t/du_t` for `t = 1..T`. Reverse sweep:
/// `(dF_t/du_t)^T lambda_t = dJ_t/du_t - (dF_{t+1}/du_t)^T lambda_{t+1}`,
/// accumulating `-(dF_t/dc)^T lambda_t`.
pub fn time_march_adjoint<S: StepProblem + ?Sized>(
    problem: &S,
    traj: &Trajectory,
    coeff: &[f64],
    djdu: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let steps = traj.steps();
    if djdu.len() != steps || traj.states.len() != steps + 1 {
        return Err(Error::invalid(format!(
            "{} loss gradients for a trajectory of {steps} steps",
            djdu.len()
        )));
    }
    let mut grad = vec![0.0; coeff.len()];
    // (dF_{t+1}/du_t)^T lambda_{t+1}, zero past the horizon
    let mut carry = vec![0.0; problem.num_dofs()];
    for t in (1..=steps).rev() {
        let (u, prev) = (&traj.states[t], &traj.states[t - 1]);
        let rhs: Vec<f64> = djdu[t - 1].iter().zip(&carry).map(|(a, b)| a - b).collect();
        let mut lambda = traj.factorizations[t - 1].solve_transpose(&rhs)?;
        mask_constrained(&mut lambda, problem.dirichlet());
        let g = problem.param_vjp(u, prev, coeff, &lambda)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc -= v;
        }
        if t > 1 {
            carry = problem.prev_vjp(u, prev, coeff, &lambda)?;
        }
    }
    Ok(grad)
}
