//! L-BFGS with a strong-Wolfe line search, a projected variant for simple
//! bounds, and a finite-difference gradient checker.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::la::{dot, norm2, norm_inf};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the (projected) gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when an iteration decreases the loss by less than
    /// `f_tol * (1 + |f|)`.
    pub f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
    /// Solver failures tolerated within one line search. A failed trial
    /// point counts as an infinite loss and the step is shortened; once
    /// the allowance is used up the run stops with
    /// [`Termination::SolverFailure`].
    pub failure_retries: usize,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            memory: 10,
            max_iter: 1000,
            grad_tol: 1e-12,
            f_tol: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            failure_retries: 0,
            lower: None,
            upper: None,
        }
    }
}

impl OptimOptions {
    fn validate(&self, n: usize) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::invalid("wolfe constants must satisfy 0 < c1 < c2 < 1"));
        }
        if self.memory == 0 || self.max_line_search == 0 {
            return Err(Error::invalid("memory and line-search budget must be positive"));
        }
        for b in [&self.lower, &self.upper].into_iter().flatten() {
            if b.len() != n {
                return Err(Error::invalid("bound vector length differs from the problem size"));
            }
        }
        if let (Some(l), Some(u)) = (&self.lower, &self.upper) {
            if l.iter().zip(u).any(|(a, b)| a > b) {
                return Err(Error::invalid("lower bound exceeds upper bound"));
            }
        }
        Ok(())
    }

    fn bounded(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }

    fn project(&self, x: &mut [f64]) {
        if let Some(l) = &self.lower {
            x.iter_mut().zip(l).for_each(|(v, b)| *v = v.max(*b));
        }
        if let Some(u) = &self.upper {
            x.iter_mut().zip(u).for_each(|(v, b)| *v = v.min(*b));
        }
    }

    // Gradient with components that point out of the feasible box removed.
    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut pg = g.to_vec();
        for i in 0..x.len() {
            let at_lower = self.lower.as_ref().is_some_and(|l| x[i] <= l[i]);
            let at_upper = self.upper.as_ref().is_some_and(|u| x[i] >= u[i]);
            if (at_lower && g[i] > 0.0) || (at_upper && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
        pg
    }
}

/// Elementwise clamp of `x` to `[lower, upper]`.
pub fn project_bounds(x: &[f64], lower: &[f64], upper: &[f64]) -> Result<Vec<f64>> {
    if lower.len() != x.len() || upper.len() != x.len() {
        return Err(Error::invalid("bound vectors must match the point"));
    }
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Err(Error::invalid("lower bound exceeds upper bound"));
    }
    Ok(x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&l, &u))| v.clamp(l, u))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    FTol,
    MaxIter,
    SolverFailure,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradTol => "grad_tol",
            Termination::FTol => "f_tol",
            Termination::MaxIter => "max_iter",
            Termination::SolverFailure => "solver_failure",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }

    /// Whether the run stopped on a convergence test.
    pub fn converged(self) -> bool {
        matches!(self, Termination::GradTol | Termination::FTol)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One accepted iterate. Iteration 0 is the starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_inf: f64,
    pub step: f64,
    /// Cumulative objective evaluations.
    pub fevals: usize,
    /// Directional derivative at the start of the step and at the accepted
    /// point (zero for iteration 0).
    pub slope0: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimTrace {
    pub records: Vec<IterRecord>,
    pub termination: Termination,
    /// Message of the failure that stopped the run, if any.
    pub failure: Option<String>,
}

impl OptimTrace {
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// CSV with header `iter,loss,grad_inf,step,fevals`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,loss,grad_inf,step,fevals")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{:e},{}", r.iter, r.loss, r.grad_inf, r.step, r.fevals)?;
        }
        Ok(())
    }
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

enum Search {
    Accepted { point: Point, alpha: f64, slope: f64 },
    Failed,
    Solver(Error),
}

struct Evaluator<'o, F> {
    objective: &'o mut F,
    fevals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Evaluator<'_, F> {
    fn eval(&mut self, x: Vec<f64>) -> Result<Point> {
        self.fevals += 1;
        let (f, g) = (self.objective)(&x)?;
        if g.len() != x.len() {
            return Err(Error::invalid("objective gradient has the wrong length"));
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPhysical("non-finite objective value or gradient".into()));
        }
        Ok(Point { x, f, g })
    }
}

// Minimizer of the cubic through (a, fa, da), (b, fb, db), safeguarded to
// the interior of the interval.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let guess = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
    } else {
        f64::NAN
    };
    let margin = 0.1 * (hi - lo);
    if guess.is_finite() && guess > lo + margin && guess < hi - margin {
        guess
    } else {
        0.5 * (lo + hi)
    }
}

fn strong_wolfe<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    ev: &mut Evaluator<'_, F>,
    start: &Point,
    dir: &[f64],
    alpha0: f64,
    opts: &OptimOptions,
) -> Result<Search> {
    let f0 = start.f;
    let d0 = dot(&start.g, dir);
    let at = |alpha: f64| -> Vec<f64> {
        start.x.iter().zip(dir).map(|(x, d)| x + alpha * d).collect()
    };
    let mut budget = opts.max_line_search;
    let mut retries = opts.failure_retries;
    let mut prev = (0.0, f0, d0);
    let mut alpha = alpha0;
    let mut first = true;
    // bracketing phase
    let (mut lo, mut hi) = loop {
        if budget == 0 {
            return Ok(Search::Failed);
        }
        budget -= 1;
        let p = match ev.eval(at(alpha)) {
            Ok(p) => p,
            Err(e) if e.is_solver_failure() => {
                if retries == 0 {
                    return Ok(Search::Solver(e));
                }
                retries -= 1;
                break (prev, (alpha, f64::INFINITY, f64::NAN));
            }
            Err(e) => return Err(e),
        };
        let da = dot(&p.g, dir);
        if p.f > f0 + opts.c1 * alpha * d0 || (!first && p.f >= prev.1) {
            break (prev, (alpha, p.f, da));
        }
        if da.abs() <= -opts.c2 * d0 {
            return Ok(Search::Accepted { point: p, alpha, slope: da });
        }
        if da >= 0.0 {
            break ((alpha, p.f, da), prev);
        }
        prev = (alpha, p.f, da);
        alpha *= 2.0;
        first = false;
    };
    // zoom phase; `lo` always satisfies sufficient decrease
    loop {
        if budget == 0 {
            return Ok(Search::Failed);
        }
        budget -= 1;
        let alpha = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            return Ok(Search::Failed);
        }
        let p = match ev.eval(at(alpha)) {
            Ok(p) => p,
            Err(e) if e.is_solver_failure() => {
                if retries == 0 {
                    return Ok(Search::Solver(e));
                }
                retries -= 1;
                hi = (alpha, f64::INFINITY, f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        let da = dot(&p.g, dir);
        if p.f > f0 + opts.c1 * alpha * d0 || p.f >= lo.1 {
            hi = (alpha, p.f, da);
        } else {
            if da.abs() <= -opts.c2 * d0 {
                return Ok(Search::Accepted { point: p, alpha, slope: da });
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, p.f, da);
        }
    }
}

// Backtracking along the projection arc `P(x + alpha d)` with an Armijo test.
fn projected_backtrack<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    ev: &mut Evaluator<'_, F>,
    start: &Point,
    dir: &[f64],
    alpha0: f64,
    opts: &OptimOptions,
) -> Result<Search> {
    let mut alpha = alpha0;
    let mut retries = opts.failure_retries;
    for _ in 0..opts.max_line_search {
        let mut x: Vec<f64> = start.x.iter().zip(dir).map(|(x, d)| x + alpha * d).collect();
        opts.project(&mut x);
        let step: Vec<f64> = x.iter().zip(&start.x).map(|(a, b)| a - b).collect();
        let decrease = dot(&start.g, &step);
        if decrease >= 0.0 {
            return Ok(Search::Failed);
        }
        let p = match ev.eval(x) {
            Ok(p) => p,
            Err(e) if e.is_solver_failure() => {
                if retries == 0 {
                    return Ok(Search::Solver(e));
                }
                retries -= 1;
                alpha *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        if p.f <= start.f + opts.c1 * decrease {
            let slope = dot(&p.g, dir);
            return Ok(Search::Accepted { point: p, alpha, slope });
        }
        alpha *= 0.5;
    }
    Ok(Search::Failed)
}

/// Minimizes `objective` from `x0`. A solver failure during the run stops
/// it with [`Termination::SolverFailure`] at the last accepted iterate; a
/// failure at `x0` is returned as an error.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<(Vec<f64>, OptimTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    opts.validate(x0.len())?;
    let mut ev = Evaluator {
        objective: &mut objective,
        fevals: 0,
    };
    let mut x_start = x0.to_vec();
    opts.project(&mut x_start);
    let mut cur = ev.eval(x_start)?;
    let grad_norm = |p: &Point| {
        if opts.bounded() {
            norm_inf(&opts.projected_gradient(&p.x, &p.g))
        } else {
            norm_inf(&p.g)
        }
    };
    let mut records = vec![IterRecord {
        iter: 0,
        loss: cur.f,
        grad_inf: grad_norm(&cur),
        step: 0.0,
        fevals: ev.fevals,
        slope0: 0.0,
        slope: 0.0,
    }];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut failure = None;

    let termination = loop {
        let k = records.len() - 1;
        if records[k].grad_inf <= opts.grad_tol {
            break Termination::GradTol;
        }
        if k >= opts.max_iter {
            break Termination::MaxIter;
        }
        let g = if opts.bounded() {
            opts.projected_gradient(&cur.x, &cur.g)
        } else {
            cur.g.clone()
        };
        let mut dir = two_loop(&g, &pairs);
        if opts.bounded() {
            // keep active bounds from blocking the whole step
            for i in 0..dir.len() {
                if g[i] == 0.0 && cur.g[i] != 0.0 {
                    dir[i] = 0.0;
                }
            }
        }
        let mut slope0 = dot(&cur.g, &dir);
        if !(slope0 < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope0 = dot(&cur.g, &dir);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / norm2(&dir)).min(1.0)
        } else {
            1.0
        };
        let search = if opts.bounded() {
            projected_backtrack(&mut ev, &cur, &dir, alpha0, opts)?
        } else {
            strong_wolfe(&mut ev, &cur, &dir, alpha0, opts)?
        };
        let (next, alpha, slope) = match search {
            Search::Accepted { point, alpha, slope } => (point, alpha, slope),
            Search::Failed => break Termination::LineSearchFailure,
            Search::Solver(e) => {
                failure = Some(e.to_string());
                break Termination::SolverFailure;
            }
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = cur.f - next.f;
        cur = next;
        records.push(IterRecord {
            iter: k + 1,
            loss: cur.f,
            grad_inf: grad_norm(&cur),
            step: alpha,
            fevals: ev.fevals,
            slope0,
            slope,
        });
        if decrease <= opts.f_tol * (1.0 + cur.f.abs()) {
            if records[k + 1].grad_inf <= opts.grad_tol {
                break Termination::GradTol;
            }
            break Termination::FTol;
        }
    };
    Ok((
        cur.x,
        OptimTrace {
            records,
            termination,
            failure,
        },
    ))
}

// `-H g` from the stored curvature pairs.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionCheck {
    pub finite_difference: f64,
    pub analytic: f64,
    pub rel_error: f64,
    /// Objective failure at one of the perturbed points.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub directions: Vec<DirectionCheck>,
    /// Largest relative error; infinite when any direction failed.
    pub max_rel_error: f64,
}

/// Compares the objective's gradient with central differences along
/// `count` seeded random unit directions:
/// `|fd - g.d| / (|g.d| + 1e-12)`.
pub fn fd_gradient_check<F>(
    mut objective: F,
    x: &[f64],
    step: f64,
    count: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grad) = objective(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = norm2(&d);
        d.iter_mut().for_each(|v| *v /= norm);
        let analytic = dot(&grad, &d);
        let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * step * b).collect() };
        let plus = objective(&shifted(1.0));
        let minus = objective(&shifted(-1.0));
        directions.push(match (plus, minus) {
            (Ok((fp, _)), Ok((fm, _))) => {
                let fd = (fp - fm) / (2.0 * step);
                DirectionCheck {
                    finite_difference: fd,
                    analytic,
                    rel_error: (fd - analytic).abs() / (analytic.abs() + 1e-12),
                    failure: None,
                }
            }
            (Err(e), _) | (_, Err(e)) => DirectionCheck {
                finite_difference: f64::NAN,
                analytic,
                rel_error: f64::INFINITY,
                failure: Some(e.to_string()),
            },
        });
    }
    let max_rel_error = directions.iter().map(|d| d.rel_error).fold(0.0, f64::max);
    Ok(GradCheck {
        directions,
        max_rel_error,
    })
}
