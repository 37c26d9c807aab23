//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its verdict, and exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fieldinv::experiment::{
    gradcheck, run_experiment, run_inverse, ExperimentConfig, ExperimentOutput, OptimizerConfig,
    Parameterization, GRADCHECK_STEP,
};
use fieldinv::nn::Transform;
use fieldinv::optim::Termination;
use fieldinv::problems::ProblemKind;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn config(kind: ProblemKind, param: Parameterization) -> ExperimentConfig {
    ExperimentConfig {
        problem: kind,
        mesh_n: 10,
        parameterization: param,
        seed: 1,
        ..ExperimentConfig::default()
    }
}

fn with_max_iter(mut c: ExperimentConfig, n: usize) -> ExperimentConfig {
    c.optimizer = OptimizerConfig {
        max_iter: Some(n),
        ..c.optimizer
    };
    c
}

struct Run {
    out: ExperimentOutput,
    trace_csv: Vec<u8>,
}

fn run(c: &ExperimentConfig) -> Run {
    let out = run_inverse(c, false).expect("experiment setup");
    let mut trace_csv = Vec::new();
    out.trace.write_csv(&mut trace_csv).unwrap();
    Run { out, trace_csv }
}

fn describe(r: &Run) -> String {
    let r = &r.out.result;
    format!(
        "{} {}: err {:.4}, max {:.4}, {} it, {}",
        r.problem, r.parameterization, r.rel_l2_error, r.max_abs_error, r.iterations, r.termination
    )
}

fn adjoint_exactness() -> Verdict {
    let mut worst = [0.0f64; 2];
    let mut ok = true;
    for kind in ProblemKind::ALL {
        let tol = if kind.is_nonlinear() { 1e-5 } else { 1e-6 };
        for param in [Parameterization::Mlp, Parameterization::QuadPoints] {
            for seed in 1..=3 {
                let mut c = ExperimentConfig {
                    mesh_n: 3,
                    seed,
                    ..config(kind, param)
                };
                // states solved well below the default tolerance, so the
                // finite-difference reference is not limited by Newton
                c.settings.newton_tol = 1e-12;
                let err = gradcheck(&c, 10, GRADCHECK_STEP, false).map_or(f64::INFINITY, |r| r.max_rel_error);
                let slot = &mut worst[kind.is_nonlinear() as usize];
                *slot = slot.max(err);
                ok &= err <= tol;
            }
        }
    }
    verdict(
        ok,
        format!("max rel error linear {:.1e} (<= 1e-6), nonlinear {:.1e} (<= 1e-5)", worst[0], worst[1]),
    )
}

fn forward_correctness() -> Verdict {
    let rd = common::rate(common::diffusion_error(8), common::diffusion_error(16));
    let re = common::rate(common::elasticity_error(8), common::elasticity_error(16));
    let div = common::stokes_divergence(10);
    let histories = common::newton_histories(10);
    let quadratic = !histories.is_empty() && histories.iter().all(|h| common::quadratic_tail(h, 100.0));
    verdict(
        rd >= 1.9 && re >= 1.9 && div <= 1e-9 && quadratic,
        format!("rates diffusion {rd:.3}, elasticity {re:.3}; stokes div {div:.1e}; newton quadratic tail {quadratic}"),
    )
}

fn elasticity_inverse(mlp: &Run) -> Verdict {
    let r = &mlp.out.result;
    verdict(r.rel_l2_error <= 0.05 && r.iterations <= 10_000, describe(mlp))
}

fn stokes_inverse(mlp: &Run, disc: &Run) -> Verdict {
    let (m, d) = (&mlp.out.result, &disc.out.result);
    let disc_fails = !d.converged || d.rel_l2_error > 2.0 * m.rel_l2_error;
    verdict(
        m.rel_l2_error <= 0.1 && m.iterations <= 600 && disc_fails,
        format!("{}; {} (converged {})", describe(mlp), describe(disc), d.converged),
    )
}

// Loss after `k` iterations (or at the end) relative to the initial loss.
fn decay(run: &Run, k: usize) -> f64 {
    let records = &run.out.trace.records;
    records[k.min(records.len() - 1)].loss / records[0].loss
}

fn hyperelasticity_comparison(mlp: &Run, disc: &Run) -> Verdict {
    let (dm, dd) = (decay(mlp, 500), decay(disc, 500));
    let (m, d) = (&mlp.out.result, &disc.out.result);
    verdict(
        d.max_abs_error > m.max_abs_error && dd < dm,
        format!("{}; {}; loss ratio at 500 it mlp {dm:.1e}, discretization {dd:.1e}", describe(mlp), describe(disc)),
    )
}

fn burgers_inverse(mlp: &Run, cold: &Run, near: &Run) -> Verdict {
    let (m, c, n) = (&mlp.out.result, &cold.out.result, &near.out.result);
    let cold_fails = matches!(c.termination, Termination::SolverFailure | Termination::LineSearchFailure)
        || c.rel_l2_error > 0.1;
    let near_ok = n.rel_l2_error <= 0.1 && n.rel_l2_error >= m.rel_l2_error;
    verdict(
        m.rel_l2_error <= 0.1 && cold_fails && near_ok,
        format!("{}; constant start {}; near truth {}", describe(mlp), describe(cold), describe(near)),
    )
}

fn failure_contract() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        transform: Transform::None,
        output_dir: dir.path().to_path_buf(),
        ..config(ProblemKind::LinearElasticity, Parameterization::QuadPoints)
    };
    let r = match run_experiment(&c, false) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("run returned an error: {e}")),
    };
    let text = std::fs::read_to_string(dir.path().join("result.toml")).unwrap_or_default();
    let parsed: Result<toml::Table, _> = text.parse();
    let recorded = parsed
        .ok()
        .and_then(|t| t.get("result")?.get("termination")?.as_str().map(str::to_string));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap_or_default();
    let well_formed = recorded.as_deref() == Some(r.termination.as_str())
        && trace.starts_with("iter,loss,grad_inf,step,fevals\n");
    let allowed = r.converged || r.termination == Termination::SolverFailure;
    verdict(
        well_formed && allowed,
        format!("terminated with {} after {} it, result file well formed {well_formed}", r.termination, r.iterations),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |name: &str, took: Duration, v: Verdict| {
        all &= v.pass;
        println!(
            "{} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    };
    let timed = |check: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = check();
        (t.elapsed(), v)
    };

    let (took, v) = timed(&adjoint_exactness);
    report("adjoint gradients match finite differences", took, v);
    let (took, v) = timed(&forward_correctness);
    report("forward solvers converge at the expected rates", took, v);

    let configs = [
        config(ProblemKind::LinearElasticity, Parameterization::Mlp),
        config(ProblemKind::Stokes, Parameterization::Mlp),
        ExperimentConfig {
            lower_bound: Some(0.01),
            upper_bound: Some(1.0),
            ..config(ProblemKind::Stokes, Parameterization::QuadPoints)
        },
        config(ProblemKind::Hyperelasticity, Parameterization::Mlp),
        config(ProblemKind::Hyperelasticity, Parameterization::PerElement),
        with_max_iter(config(ProblemKind::Burgers, Parameterization::Mlp), 300),
        with_max_iter(config(ProblemKind::Burgers, Parameterization::QuadPoints), 300),
        with_max_iter(
            ExperimentConfig {
                init_near_truth: true,
                ..config(ProblemKind::Burgers, Parameterization::QuadPoints)
            },
            300,
        ),
    ];
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for c in &configs {
        let t = Instant::now();
        runs.push(run(c));
        times.push(t.elapsed());
    }
    report("elasticity field recovered by the network", times[0], elasticity_inverse(&runs[0]));
    report("stokes viscosity recovered from pressure only", times[1] + times[2], stokes_inverse(&runs[1], &runs[2]));
    report(
        "hyperelastic discretization: larger pointwise error, faster loss decay",
        times[3] + times[4],
        hyperelasticity_comparison(&runs[3], &runs[4]),
    );
    report(
        "burgers viscosity: network succeeds where the cold discretization does not",
        times[5] + times[6] + times[7],
        burgers_inverse(&runs[5], &runs[6], &runs[7]),
    );
    let (took, v) = timed(&failure_contract);
    report("unconstrained discretization ends cleanly", took, v);

    let t = Instant::now();
    let mismatched: Vec<String> = configs
        .iter()
        .zip(&runs)
        .filter(|(c, r)| run(c).trace_csv != r.trace_csv)
        .map(|(c, _)| format!("{} {}", c.problem, c.parameterization))
        .collect();
    report(
        "reruns reproduce identical traces",
        t.elapsed(),
        verdict(
            mismatched.is_empty(),
            if mismatched.is_empty() {
                format!("{} runs identical", configs.len())
            } else {
                format!("differing: {}", mismatched.join(", "))
            },
        ),
    );

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
