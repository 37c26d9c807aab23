//! End-to-end inverse runs: configuration, observation synthesis,
//! optimization, and plot-ready outputs.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_mlp, FieldParam, Granularity, Transform, DEFAULT_LAYERS};
use crate::optim::{fd_gradient_check, lbfgs_minimize, GradCheck, OptimOptions, OptimTrace, Termination};
use crate::problems::{GroundTruth, NewtonLog, Observation, Problem, ProblemKind, ProblemSettings};

/// Resolution of the uniform grid the field error is measured on.
pub const ERROR_GRID: usize = 50;
/// Largest relative error accepted by [`gradcheck`].
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Mlp,
    QuadPoints,
    PerElement,
}

impl Parameterization {
    pub fn as_str(self) -> &'static str {
        match self {
            Parameterization::Mlp => "mlp",
            Parameterization::QuadPoints => "quad_points",
            Parameterization::PerElement => "per_element",
        }
    }

    fn granularity(self) -> Option<Granularity> {
        match self {
            Parameterization::Mlp => None,
            Parameterization::QuadPoints => Some(Granularity::PerQuadPoint),
            Parameterization::PerElement => Some(Granularity::PerElement),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Parameterization::Mlp),
            "quad_points" => Ok(Parameterization::QuadPoints),
            "per_element" => Ok(Parameterization::PerElement),
            _ => Err(Error::Config(format!("unknown parameterization `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Defaults per problem: 10000 elasticity, 600 Stokes, 1000
    /// hyperelasticity, 60 Burgers.
    pub max_iter: Option<usize>,
    pub memory: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Solver failures tolerated per line search; defaults to 10 for
    /// Burgers and 0 otherwise.
    pub failure_retries: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimOptions::default();
        OptimizerConfig {
            max_iter: None,
            memory: o.memory,
            grad_tol: o.grad_tol,
            f_tol: o.f_tol,
            c1: o.c1,
            c2: o.c2,
            max_line_search: o.max_line_search,
            failure_retries: None,
        }
    }
}

/// Constant added to the network output, and the constant start of a
/// discretization, unless configured: 1 except for Stokes, whose viscosity
/// is an order of magnitude smaller.
pub fn default_level(kind: ProblemKind) -> f64 {
    match kind {
        ProblemKind::Stokes => 0.1,
        _ => 1.0,
    }
}

pub fn default_failure_retries(kind: ProblemKind) -> usize {
    match kind {
        ProblemKind::Burgers => 10,
        _ => 0,
    }
}

pub fn default_max_iter(kind: ProblemKind) -> usize {
    match kind {
        ProblemKind::LinearElasticity => 10_000,
        ProblemKind::Stokes => 600,
        ProblemKind::Hyperelasticity => 1000,
        ProblemKind::Burgers => 60,
    }
}

/// A complete experiment description. Every key has a default and unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub mesh_n: usize,
    pub parameterization: Parameterization,
    /// Map from trainable values to the field (discretizations only).
    pub transform: Transform,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub seed: u64,
    /// Constant added to the network output; see [`default_level`].
    pub output_shift: Option<f64>,
    /// Constant starting value of a discretization; defaults to the output
    /// shift so both parameterizations start from the same level.
    pub initial_value: Option<f64>,
    /// Start a discretization from the ground truth, perturbed by a seeded
    /// relative amount up to `init_perturbation`.
    pub init_near_truth: bool,
    pub init_perturbation: f64,
    pub output_dir: PathBuf,
    pub optimizer: OptimizerConfig,
    pub truth: GroundTruth,
    pub settings: ProblemSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::LinearElasticity,
            mesh_n: 10,
            parameterization: Parameterization::Mlp,
            transform: Transform::None,
            lower_bound: None,
            upper_bound: None,
            seed: 1,
            output_shift: None,
            initial_value: None,
            init_near_truth: false,
            init_perturbation: 0.1,
            output_dir: PathBuf::from("out"),
            optimizer: OptimizerConfig::default(),
            truth: GroundTruth::default(),
            settings: ProblemSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.mesh_n < 2 {
            return bad("mesh_n must be at least 2");
        }
        if let (Some(l), Some(u)) = (self.lower_bound, self.upper_bound) {
            if l > u {
                return bad("lower_bound exceeds upper_bound");
            }
        }
        if self.output_shift.is_some_and(|s| !(s > 0.0)) {
            return bad("output_shift must be positive");
        }
        if !(self.init_perturbation >= 0.0) {
            return bad("init_perturbation must be nonnegative");
        }
        if self.init_near_truth && self.parameterization == Parameterization::Mlp {
            return bad("init_near_truth applies to discretizations only");
        }
        let o = &self.optimizer;
        if !(0.0 < o.c1 && o.c1 < o.c2 && o.c2 < 1.0) {
            return bad("optimizer constants must satisfy 0 < c1 < c2 < 1");
        }
        if o.memory == 0 || o.max_line_search == 0 {
            return bad("optimizer memory and max_line_search must be positive");
        }
        let s = &self.settings;
        if !(s.dt > 0.0) || s.steps == 0 || !(s.newton_tol > 0.0) {
            return bad("dt, steps and newton_tol must be positive");
        }
        self.truth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The same experiment with every optional setting filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let shift = *c.output_shift.get_or_insert(default_level(self.problem));
        c.initial_value.get_or_insert(shift);
        c.optimizer.max_iter.get_or_insert(default_max_iter(self.problem));
        c.optimizer.failure_retries.get_or_insert(default_failure_retries(self.problem));
        c.truth.scale.get_or_insert(self.problem.truth_scale());
        c
    }

    pub fn failure_retries(&self) -> usize {
        self.optimizer.failure_retries.unwrap_or(default_failure_retries(self.problem))
    }

    pub fn max_iter(&self) -> usize {
        self.optimizer.max_iter.unwrap_or(default_max_iter(self.problem))
    }

    fn optim_options(&self, n: usize) -> OptimOptions {
        let o = &self.optimizer;
        OptimOptions {
            memory: o.memory,
            max_iter: self.max_iter(),
            grad_tol: o.grad_tol,
            f_tol: o.f_tol,
            c1: o.c1,
            c2: o.c2,
            max_line_search: o.max_line_search,
            failure_retries: self.failure_retries(),
            lower: self.lower_bound.map(|b| vec![b; n]),
            upper: self.upper_bound.map(|b| vec![b; n]),
        }
    }
}

/// The problem, its observations and the initial field of an experiment.
pub struct Setup {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub observation: Observation,
    pub initial: FieldParam,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let problem = Problem::new(config.problem, config.mesh_n, config.settings.clone(), config.truth.clone())?;
        let observation = problem.synthesize_observations()?;
        let initial = initial_field(&config, &problem)?;
        Ok(Setup {
            config,
            problem,
            observation,
            initial,
        })
    }

    pub fn loss_and_grad(&self, theta: &[f64], log: Option<&NewtonLog>) -> Result<(f64, Vec<f64>)> {
        let field = self.initial.with_theta(theta)?;
        self.problem.loss_and_grad(&field, &self.observation, log)
    }
}

fn initial_field(config: &ExperimentConfig, problem: &Problem) -> Result<FieldParam> {
    let Some(granularity) = config.parameterization.granularity() else {
        let shift = config.output_shift.unwrap_or(default_level(problem.kind));
        return Ok(FieldParam::Mlp(init_mlp(config.seed, &DEFAULT_LAYERS, shift)?));
    };
    let theta = if config.init_near_truth {
        let truth = match granularity {
            Granularity::PerQuadPoint => problem.truth_at_quad(),
            Granularity::PerElement => problem.truth_per_element(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        truth
            .into_iter()
            .map(|t| t * (1.0 + config.init_perturbation * rng.random_range(-1.0..=1.0)))
            .collect()
    } else {
        let n = match granularity {
            Granularity::PerQuadPoint => problem.num_coefficients(),
            Granularity::PerElement => problem.mesh.num_elements(),
        };
        let level = config.initial_value.or(config.output_shift).unwrap_or(default_level(problem.kind));
        vec![level; n]
    };
    problem.discretized(granularity, config.transform, theta)
}

/// Recovered field against the ground truth on the error grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldComparison {
    /// Rows `(x, y, estimate, truth)`.
    pub samples: Vec<[f64; 4]>,
    pub rel_l2_error: f64,
    pub max_abs_error: f64,
}

impl FieldComparison {
    pub fn new(problem: &Problem, field: &FieldParam) -> Result<Self> {
        let h = 1.0 / ERROR_GRID as f64;
        let mut samples = Vec::with_capacity(ERROR_GRID * ERROR_GRID);
        let (mut diff2, mut truth2, mut max_abs) = (0.0, 0.0, 0.0_f64);
        for j in 0..ERROR_GRID {
            for i in 0..ERROR_GRID {
                let p = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
                let est = field.sample(p, &problem.mesh, &problem.quad_coords)?;
                let truth = problem.truth_at(p);
                diff2 += (est - truth).powi(2);
                truth2 += truth * truth;
                max_abs = max_abs.max((est - truth).abs());
                samples.push([p[0], p[1], est, truth]);
            }
        }
        Ok(FieldComparison {
            samples,
            rel_l2_error: (diff2 / truth2).sqrt(),
            max_abs_error: max_abs,
        })
    }

    /// CSV with header `x,y,nu_hat,nu_star`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,nu_hat,nu_star")?;
        for s in &self.samples {
            writeln!(w, "{},{},{:e},{:e}", s[0], s[1], s[2], s[3])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub problem: ProblemKind,
    pub parameterization: Parameterization,
    pub transform: Transform,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rel_l2_error: f64,
    pub max_abs_error: f64,
    pub iterations: usize,
    pub fevals: usize,
    pub termination: Termination,
    pub converged: bool,
    pub failure: Option<String>,
    /// Wall time in seconds; kept out of the result file so reruns produce
    /// identical files.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Everything a run produces.
pub struct ExperimentOutput {
    pub result: ExperimentResult,
    pub trace: OptimTrace,
    pub field: FieldParam,
    pub comparison: FieldComparison,
    pub config: ExperimentConfig,
    pub newton_log: Vec<(usize, usize, crate::pcl::NewtonReport)>,
}

/// Runs the inverse problem without touching the filesystem. Solver
/// failures after the first evaluation end the run and are recorded in the
/// result.
pub fn run_inverse(config: &ExperimentConfig, verbose: bool) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let setup = Setup::new(config)?;
    let theta0 = setup.initial.theta().to_vec();
    let opts = setup.config.optim_options(theta0.len());
    let log = NewtonLog::default();
    let newton_log = RefCell::new(Vec::new());
    let mut evals = 0usize;
    let objective = |theta: &[f64]| {
        evals += 1;
        let r = setup.loss_and_grad(theta, verbose.then_some(&log));
        if verbose {
            newton_log
                .borrow_mut()
                .extend(log.borrow_mut().drain(..).map(|(step, rep)| (evals, step, rep)));
        }
        r
    };
    let (theta, trace) = lbfgs_minimize(objective, &theta0, &opts)?;
    let field = setup.initial.with_theta(&theta)?;
    let comparison = FieldComparison::new(&setup.problem, &field)?;
    let result = ExperimentResult {
        problem: setup.config.problem,
        parameterization: setup.config.parameterization,
        transform: setup.config.transform,
        initial_loss: trace.records[0].loss,
        final_loss: trace.final_loss(),
        rel_l2_error: comparison.rel_l2_error,
        max_abs_error: comparison.max_abs_error,
        iterations: trace.iterations(),
        fevals: trace.records.last().map_or(0, |r| r.fevals),
        termination: trace.termination,
        converged: trace.termination.converged(),
        failure: trace.failure.clone(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutput {
        result,
        trace,
        field,
        comparison,
        config: setup.config,
        newton_log: newton_log.into_inner(),
    })
}

#[derive(Serialize)]
struct ResultFile<'a> {
    result: &'a ExperimentResult,
    constants: Constants,
    config: &'a ExperimentConfig,
}

// Fixed choices that are not part of the config.
#[derive(Serialize)]
struct Constants {
    loss: &'static str,
    error_grid: usize,
    mlp_layers: Vec<usize>,
    mlp_init: &'static str,
    quadrature_degree: usize,
    stokes_pressure_gauge: &'static str,
    hyperelastic_energy: &'static str,
    burgers_initial_condition: &'static str,
    newton_initial_guess: &'static str,
}

fn constants(kind: ProblemKind) -> Constants {
    Constants {
        loss: "sum of squared differences at observed dofs",
        error_grid: ERROR_GRID,
        mlp_layers: DEFAULT_LAYERS.to_vec(),
        mlp_init: "glorot uniform weights, zero biases, chacha8 seeded",
        quadrature_degree: kind.quadrature_degree(),
        stokes_pressure_gauge: "first pressure dof pinned to zero, observed and computed pressures mean-centered",
        hyperelastic_energy: "mu/2 (tr C - 2) - mu ln J + lambda/2 (ln J)^2",
        burgers_initial_condition: "(sin(pi x) sin(pi y), 0)",
        newton_initial_guess: "zero state",
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

impl ExperimentOutput {
    /// Writes `trace.csv`, `field.csv`, `observations.csv`, `result.toml`,
    /// `config.toml` (rerunnable as is), the network weights for MLP runs
    /// and `newton.csv` when a Newton log was kept.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.trace.write_csv(create(&dir.join("trace.csv"))?)?;
        self.comparison.write_csv(create(&dir.join("field.csv"))?)?;
        let file = ResultFile {
            result: &self.result,
            constants: constants(self.config.problem),
            config: &self.config,
        };
        let text = toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("result.toml"), text)?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        if let FieldParam::Mlp(m) = &self.field {
            m.write_checkpoint(create(&dir.join("weights.txt"))?)?;
        }
        if !self.newton_log.is_empty() {
            let mut w = create(&dir.join("newton.csv"))?;
            writeln!(w, "eval,step,iter,residual_inf")?;
            for (eval, step, rep) in &self.newton_log {
                for (k, r) in rep.history.iter().enumerate() {
                    writeln!(w, "{eval},{step},{k},{r:e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Runs an experiment and writes its outputs to `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, verbose: bool) -> Result<ExperimentResult> {
    let out = run_inverse(config, verbose)?;
    let setup_obs = Problem::new(
        out.config.problem,
        out.config.mesh_n,
        out.config.settings.clone(),
        out.config.truth.clone(),
    )?
    .synthesize_observations()?;
    out.write(&config.output_dir)?;
    setup_obs.write_csv(create(&config.output_dir.join("observations.csv"))?)?;
    Ok(out.result)
}

/// Default finite-difference step of [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Finite-difference check of the configured problem's gradient at the
/// initial parameters. `corrupt` doubles the analytic gradient.
pub fn gradcheck(config: &ExperimentConfig, directions: usize, step: f64, corrupt: bool) -> Result<GradCheck> {
    let setup = Setup::new(config)?;
    let objective = |theta: &[f64]| {
        let (f, mut g) = setup.loss_and_grad(theta, None)?;
        if corrupt {
            g.iter_mut().for_each(|v| *v *= 2.0);
        }
        Ok((f, g))
    };
    fd_gradient_check(objective, setup.initial.theta(), step, directions, setup.config.seed)
}

/// CSV header of [`write_comparison`].
pub const COMPARE_HEADER: &str =
    "label,problem,parameterization,transform,initial_loss,final_loss,rel_l2_error,max_abs_error,iterations,termination,converged";

/// Checks that two configs describe the same problem.
pub fn check_comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    if a.problem != b.problem || a.mesh_n != b.mesh_n {
        return Err(Error::InvalidArgument(format!(
            "cannot compare {} (n={}) with {} (n={})",
            a.problem, a.mesh_n, b.problem, b.mesh_n
        )));
    }
    Ok(())
}

/// Side-by-side table of two results.
pub fn write_comparison<W: Write>(mut w: W, rows: &[(&str, &ExperimentResult)]) -> Result<()> {
    writeln!(w, "{COMPARE_HEADER}")?;
    for (label, r) in rows {
        writeln!(
            w,
            "{label},{},{},{},{:e},{:e},{:e},{:e},{},{},{}",
            r.problem, r.parameterization, r.transform, r.initial_loss, r.final_loss, r.rel_l2_error,
            r.max_abs_error, r.iterations, r.termination, r.converged
        )?;
    }
    Ok(())
}
