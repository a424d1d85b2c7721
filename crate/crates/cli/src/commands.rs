//! Command dispatch: wires the config into library calls and CSV artifacts.
//!
//! Exit-code contract: 0 success, 2 when a certified precondition (step-size
//! condition or sampled assumption audit) blocks the run, 1 for I/O, parse,
//! and validation errors. Outputs are byte-identical for a fixed config and
//! master seed regardless of worker count; floats are written with Rust's
//! shortest round-trip formatting.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stm_core::ergodicity::{
    contraction_curve, invariant_ensemble, lyapunov_audit, MeasureMode,
};
use stm_core::integrators::{run_chain, ChainResult, SchemeSpec};
use stm_core::model::{builtin_problem, check_assumptions_sampled, validate_step_size, Problem};
use stm_core::noise::{sample_path_noise, GridSpec};
use stm_core::sensitivity::du_decay;
use stm_core::stats::parallel_map;
use stm_core::weakerr::{
    invariant_gap, weak_error_curve, ErrorCurve, GapReference, Reference, TestFunctional,
};
use stm_core::Error;

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Library error; `Error::Precondition` maps to exit code 2.
    Core(Error),
    Io(String),
    Config(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Precondition { .. }) => 2,
            _ => 1,
        }
    }
}

/// CLI overrides applied on top of the parsed config.
#[derive(Debug, Default)]
pub struct Overrides {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

pub const COMMANDS: &[&str] = &[
    "simulate",
    "lyapunov",
    "contraction",
    "invariant",
    "weak-order",
    "invariant-gap",
    "sensitivity",
    "check",
];

/// Loads, resolves, and executes one experiment; the single entry point.
pub fn run(config_path: &Path, overrides: Overrides) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", config_path.display())))?;

    if let Some(seed) = overrides.seed {
        cfg.master_seed = seed;
    }
    if let Some(workers) = overrides.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.display().to_string();
    }
    let command = overrides
        .command
        .or_else(|| cfg.command.clone())
        .ok_or_else(|| {
            CliError::Config("no command: pass --command or set `command` in the config".into())
        })?;
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::Config(format!(
            "unknown command {command:?} (expected one of {})",
            COMMANDS.join(", ")
        )));
    }

    let problem = builtin_problem(&cfg.problem.name, &cfg.problem.params)?;
    let mut scheme = SchemeSpec::new(cfg.scheme.theta)?;
    scheme.newton_tol = cfg.scheme.newton_tol;
    scheme.newton_max_iter = cfg.scheme.newton_max_iter;
    scheme.validate()?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    // Manifest: the fully-resolved config (catalog defaults included), the
    // command, and the tool version. Re-running it reproduces the outputs.
    cfg.command = Some(command.clone());
    cfg.tool_version = Some(env!("CARGO_PKG_VERSION").to_string());
    cfg.problem.params = problem.params.clone();
    let manifest = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::Config(format!("cannot serialize manifest: {e}")))?;
    write_file(&out_dir, "manifest.toml", &manifest)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| dispatch(&command, &cfg, &problem, &scheme, &out_dir))
}

fn dispatch(
    command: &str,
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    out: &Path,
) -> Result<(), CliError> {
    let seed = cfg.master_seed;
    match command {
        "simulate" => run_simulate(cfg, problem, scheme, seed, out),
        "lyapunov" => run_lyapunov(cfg, problem, scheme, seed, out),
        "contraction" => run_contraction(cfg, problem, scheme, seed, out),
        "invariant" => run_invariant(cfg, problem, scheme, seed, out),
        "weak-order" => run_weak_order(cfg, problem, scheme, seed, out),
        "invariant-gap" => run_invariant_gap(cfg, problem, scheme, seed, out),
        "sensitivity" => run_sensitivity(cfg, problem, scheme, seed, out),
        "check" => run_check(cfg, problem, scheme, seed, out),
        _ => unreachable!("command validated"),
    }
}

fn block<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    block
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("config is missing the [{name}] block")))
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), content)
        .map_err(|e| CliError::Io(format!("cannot write {name}: {e}")))
}

fn steps_of(horizon: f64, tau: f64) -> Result<usize, CliError> {
    if !(tau > 0.0 && tau.is_finite() && horizon > 0.0 && horizon.is_finite()) {
        return Err(CliError::Config("horizon and tau must be finite and > 0".into()));
    }
    let steps = (horizon / tau).round();
    if steps < 1.0 || (steps * tau - horizon).abs() > 1e-9 * horizon {
        return Err(CliError::Config(format!(
            "tau = {tau} does not divide the horizon {horizon}"
        )));
    }
    Ok(steps as usize)
}

fn functional_of(name: &str, k: f64) -> Result<TestFunctional, CliError> {
    Ok(TestFunctional::from_name(name, k)?)
}

/// Appends `order,<slope>,<stderr>,<r2>` when the curve has a fit.
fn error_curve_csv(curve: &ErrorCurve) -> String {
    let mut s = String::from("tau,error,stderr,mode\n");
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.tau,
            p.error,
            p.stderr.unwrap_or(0.0),
            curve.mode
        );
    }
    if let Some(order) = &curve.order {
        let _ = writeln!(s, "order,{},{},{}", order.slope, order.stderr, order.r_squared);
    }
    s
}

fn run_simulate(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let sim = block(&cfg.simulate, "simulate")?;
    let steps = steps_of(sim.horizon, sim.tau)?;
    let grid = GridSpec::new(sim.horizon, steps)?;
    if sim.n_paths == 0 {
        return Err(CliError::Config("n_paths must be >= 1".into()));
    }
    let results: Vec<stm_core::Result<ChainResult>> =
        parallel_map(sim.n_paths, |path| {
            let noise = sample_path_noise(problem, &grid, seed, path as u64);
            let record = sim.record_first_path && path == 0;
            run_chain(problem, scheme, &grid, &noise, &sim.x0, record)
        });
    let mut overflows = 0usize;
    let mut max_residual = 0.0f64;
    let mut total_iters = 0u64;
    let mut first: Option<&ChainResult> = None;
    for (i, r) in results.iter().enumerate() {
        let r = r.as_ref().map_err(|e| CliError::Core(e.clone()))?;
        if r.diagnostics.overflow {
            overflows += 1;
        }
        max_residual = max_residual.max(r.diagnostics.max_residual);
        total_iters += r.diagnostics.total_newton_iters;
        if i == 0 {
            first = Some(r);
        }
    }
    let mut diag = String::from("paths,overflows,max_residual,total_newton_iters\n");
    let _ = writeln!(diag, "{},{},{},{}", sim.n_paths, overflows, max_residual, total_iters);
    write_file(out, "diagnostics.csv", &diag)?;
    if let Some(first) = first {
        if let Some(path) = &first.path {
            let d = problem.dim_state;
            let mut tr = String::from("step,t");
            for i in 1..=d {
                let _ = write!(tr, ",x_{i}");
            }
            tr.push('\n');
            for (j, node) in path.chunks_exact(d).enumerate() {
                let _ = write!(tr, "{},{}", j, grid.time(j));
                for v in node {
                    let _ = write!(tr, ",{v}");
                }
                tr.push('\n');
            }
            write_file(out, "trajectory.csv", &tr)?;
        }
    }
    println!(
        "simulate: {} paths x {} steps, {} overflow(s), max residual {max_residual:.3e}",
        sim.n_paths, steps, overflows
    );
    Ok(())
}

fn run_lyapunov(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let ly = block(&cfg.lyapunov, "lyapunov")?;
    let audit = lyapunov_audit(
        problem,
        &problem.certificate,
        scheme.theta,
        ly.tau,
        ly.n_paths,
        ly.n_steps,
        &ly.x0,
        seed,
    )?;
    let mut s = String::from("step,t,mean_V,stderr,bound,violation\n");
    for st in &audit.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            st.step, st.t, st.mean_v, st.stderr, st.bound, st.violation as u8
        );
    }
    write_file(out, "lyapunov.csv", &s)?;
    println!(
        "lyapunov: theta = {}, tau = {}, {} violation(s) in {} steps (fraction {:.4})",
        audit.theta,
        audit.tau,
        audit.violations(),
        audit.steps.len() - 1,
        audit.violation_fraction()
    );
    Ok(())
}

fn run_contraction(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let c = block(&cfg.contraction, "contraction")?;
    let curve = contraction_curve(
        problem,
        &problem.certificate,
        scheme.theta,
        c.tau,
        &c.x0,
        &c.y0,
        c.n_paths,
        c.n_steps,
        seed,
    )?;
    let mut s = String::from("step,t,mean_sq_diff,stderr\n");
    for i in 0..curve.t.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            i, curve.t[i], curve.mean_sq_diff[i], curve.stderr[i]
        );
    }
    if let Some(rate) = &curve.rate {
        let _ = writeln!(s, "rate,{},{},{}", rate.rate, rate.stderr, rate.r2);
    }
    write_file(out, "decay.csv", &s)?;
    match &curve.rate {
        Some(rate) => println!(
            "contraction: fitted rate {} +- {} over {} node(s)",
            rate.rate, rate.stderr, rate.n_used
        ),
        None => println!("contraction: degenerate curve (no usable signal)"),
    }
    Ok(())
}

fn run_invariant(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let inv = block(&cfg.invariant, "invariant")?;
    let mode = match inv.mode.as_str() {
        "ensemble" => MeasureMode::Ensemble,
        "time_average" => MeasureMode::TimeAverage,
        other => {
            return Err(CliError::Config(format!(
                "unknown invariant mode {other:?} (expected ensemble or time_average)"
            )))
        }
    };
    let measure = invariant_ensemble(
        problem,
        scheme,
        inv.tau,
        inv.burn_in,
        inv.n_samples,
        mode,
        inv.thinning,
        seed,
    )?;
    let d = measure.dim;
    let mut s = String::from("x_1");
    for i in 2..=d {
        let _ = write!(s, ",x_{i}");
    }
    s.push('\n');
    for i in 0..measure.len() {
        let row = measure.sample(i);
        let _ = write!(s, "{}", row[0]);
        for v in &row[1..] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_file(out, "samples.csv", &s)?;
    println!(
        "invariant: {} sample(s) at tau = {}, {} overflow(s){}",
        measure.len(),
        measure.tau,
        measure.overflow_count,
        if measure.correlated { ", serially correlated (time average)" } else { "" }
    );
    Ok(())
}

fn run_weak_order(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let wo = block(&cfg.weak_order, "weak-order")?;
    let functional = functional_of(&wo.functional, wo.k)?;
    let reference = match wo.reference.as_str() {
        "closed_form" => Reference::ClosedForm,
        "fine_grid" => Reference::FineGrid { ref_levels: wo.ref_levels },
        other => {
            return Err(CliError::Config(format!(
                "unknown reference {other:?} (expected closed_form or fine_grid)"
            )))
        }
    };
    let curve = weak_error_curve(
        problem,
        scheme,
        &functional,
        wo.horizon,
        &wo.tau_list,
        &wo.x0,
        wo.n_paths,
        reference,
        seed,
    )?;
    write_file(out, "error_curve.csv", &error_curve_csv(&curve))?;
    match &curve.order {
        Some(o) => println!(
            "weak-order: fitted order {} +- {} (R^2 {}) on {} point(s), {} reference",
            o.slope, o.stderr, o.r_squared, o.n_used, curve.mode
        ),
        None => println!("weak-order: no usable points for an order fit"),
    }
    Ok(())
}

fn run_invariant_gap(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let ig = block(&cfg.invariant_gap, "invariant-gap")?;
    let functional = functional_of(&ig.functional, ig.k)?;
    let reference = match ig.reference.as_str() {
        "closed_form" => GapReference::ClosedForm,
        "finest_tau" => GapReference::FinestTau,
        other => {
            return Err(CliError::Config(format!(
                "unknown reference {other:?} (expected closed_form or finest_tau)"
            )))
        }
    };
    let curve = invariant_gap(
        problem,
        scheme,
        &ig.tau_list,
        &functional,
        ig.burn_in,
        ig.n_samples,
        reference,
        seed,
    )?;
    write_file(out, "gap_curve.csv", &error_curve_csv(&curve))?;
    match &curve.order {
        Some(o) => println!(
            "invariant-gap: fitted order {} +- {} on {} point(s), {} reference",
            o.slope, o.stderr, o.n_used, curve.mode
        ),
        None => println!("invariant-gap: no usable points for an order fit"),
    }
    Ok(())
}

fn run_sensitivity(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let se = block(&cfg.sensitivity, "sensitivity")?;
    let functional = functional_of(&se.functional, se.k)?;
    let decay = du_decay(
        problem,
        scheme,
        &functional,
        &se.horizons,
        &se.x0,
        &se.v,
        se.tau,
        se.n_paths,
        seed,
    )?;
    let mut s = String::from("t,du_estimate,stderr\n");
    for p in &decay.points {
        let _ = writeln!(s, "{},{},{}", p.t, p.estimate, p.stderr);
    }
    if let Some(rate) = &decay.rate {
        let _ = writeln!(s, "rate,{},{},{}", rate.rate, rate.stderr, rate.r2);
    }
    write_file(out, "sensitivity.csv", &s)?;
    match &decay.rate {
        Some(rate) => println!(
            "sensitivity: fitted decay rate {} +- {} over {} horizon(s)",
            rate.rate, rate.stderr, rate.n_used
        ),
        None => println!("sensitivity: no usable horizons for a rate fit"),
    }
    Ok(())
}

fn run_check(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SchemeSpec,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let ck = block(&cfg.check, "check")?;
    let report = validate_step_size(&problem.certificate, scheme.theta, ck.tau)?;
    let mut s = String::from("condition,lhs,threshold,status\n");
    for c in &report.conditions {
        let lhs = c.lhs.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{:?}", c.name, lhs, c.threshold, c.status);
    }
    write_file(out, "conditions.csv", &s)?;
    if report.admissible() {
        print!("{report}");
    }
    if ck.sample_assumptions {
        let audit = check_assumptions_sampled(problem, ck.n_pairs, ck.radius, seed)?;
        let mut a = String::from("assumption,worst_margin,worst_ratio,satisfied\n");
        for c in &audit.checks {
            let ratio = c.worst_ratio.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(a, "{},{},{},{}", c.name, c.worst_margin, ratio, c.satisfied as u8);
            println!(
                "  assumption {:<24} worst margin {:>13.6e}  [{}]",
                c.name,
                c.worst_margin,
                if c.satisfied { "ok" } else { "VIOLATED" }
            );
        }
        write_file(out, "assumptions.csv", &a)?;
        if !audit.all_satisfied() {
            return Err(CliError::Core(Error::Precondition {
                report: format!(
                    "sampled assumption audit failed on {} ({} pairs, radius {})",
                    problem.name, audit.n_pairs, audit.radius
                ),
            }));
        }
    }
    if !report.admissible() {
        return Err(CliError::Core(Error::Precondition {
            report: report.to_string(),
        }));
    }
    Ok(())
}
