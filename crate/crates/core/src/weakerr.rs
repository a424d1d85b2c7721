//! Weak-error measurement and invariant-measure gaps.
//!
//! Estimates |E phi(X_T) - E phi(Y_N)| either exactly (closed-form laws on
//! the linear problem under backward Euler) or by Monte Carlo against a
//! fine-grid reference that consumes the same jump events and a
//! bridge-refined version of the same Brownian path, which variance-reduces
//! the difference enough to resolve order-tau errors at desk scale. Fitted
//! log-log orders and the stationary-law gap of the scheme are reported as
//! [`ErrorCurve`]s.

use crate::error::Error;
use crate::integrators::{run_chain, SchemeSpec};
use crate::Result;
use crate::model::{LinearParams, Problem};
use crate::noise::{refine_brownian, sample_path_noise, GridSpec, PathNoise, MAX_REFINE_LEVELS};
use crate::rng::{self, Purpose};
use crate::stats::{fit_line, inverse_normal_cdf, mean_stderr_from_sums, parallel_row_sums};

/// Scalar test functionals applied to the chain endpoint.
///
/// `cos` and `tanh` are bounded with three bounded derivatives and are the
/// theorem-backed choices; the coordinate map `x` and the squared norm `x^2`
/// are unbounded and tagged diagnostic-only. Scalar kinds read the first
/// coordinate of multi-dimensional states.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctional {
    pub name: String,
    kind: FunctionalKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FunctionalKind {
    /// `cos(k * x_1)`
    Cos(f64),
    /// `tanh(k * x_1)`
    Tanh(f64),
    /// `x_1`
    Coordinate,
    /// `|x|^2`
    SquaredNorm,
}

impl TestFunctional {
    pub fn cos(k: f64) -> Self {
        Self {
            name: "cos".into(),
            kind: FunctionalKind::Cos(k),
        }
    }

    pub fn tanh(k: f64) -> Self {
        Self {
            name: "tanh".into(),
            kind: FunctionalKind::Tanh(k),
        }
    }

    /// The first coordinate, `phi(x) = x_1` (unbounded, diagnostic only).
    pub fn coordinate() -> Self {
        Self {
            name: "x".into(),
            kind: FunctionalKind::Coordinate,
        }
    }

    /// The squared norm, `phi(x) = |x|^2` (unbounded, diagnostic only).
    pub fn squared_norm() -> Self {
        Self {
            name: "x2".into(),
            kind: FunctionalKind::SquaredNorm,
        }
    }

    /// Looks up a built-in by name; `k` scales the argument of `cos`/`tanh`.
    pub fn from_name(name: &str, k: f64) -> Result<Self> {
        match name {
            "cos" => Ok(Self::cos(k)),
            "tanh" => Ok(Self::tanh(k)),
            "x" | "mean" => Ok(Self::coordinate()),
            "x2" | "second_moment" => Ok(Self::squared_norm()),
            other => Err(Error::invalid_parameter(
                "functional",
                format!("unknown functional {other:?} (expected cos, tanh, x, x2)"),
            )),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            FunctionalKind::Cos(k) => (k * x[0]).cos(),
            FunctionalKind::Tanh(k) => (k * x[0]).tanh(),
            FunctionalKind::Coordinate => x[0],
            FunctionalKind::SquaredNorm => x.iter().map(|v| v * v).sum(),
        }
    }

    /// Writes the gradient at `x` into `out` (available for every built-in).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            FunctionalKind::Cos(k) => out[0] = -k * (k * x[0]).sin(),
            FunctionalKind::Tanh(k) => {
                let t = (k * x[0]).tanh();
                out[0] = k * (1.0 - t * t);
            }
            FunctionalKind::Coordinate => out[0] = 1.0,
            FunctionalKind::SquaredNorm => {
                for (o, xi) in out.iter_mut().zip(x.iter()) {
                    *o = 2.0 * xi;
                }
            }
        }
    }

    /// Uniform bound of the evaluator, when one exists.
    pub fn bound(&self) -> Option<f64> {
        match self.kind {
            FunctionalKind::Cos(_) | FunctionalKind::Tanh(_) => Some(1.0),
            FunctionalKind::Coordinate | FunctionalKind::SquaredNorm => None,
        }
    }

    /// Whether the functional sits inside the smooth-and-bounded hypothesis
    /// of the weak-error statements (unbounded ones are diagnostic only).
    pub fn theorem_compatible(&self) -> bool {
        self.bound().is_some()
    }
}

/// Reference used by [`weak_error_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Exact laws on both sides (linear jump-free problem, backward Euler).
    ClosedForm,
    /// Same-noise chain on a grid `ref_levels` dyadic levels below the
    /// finest requested step size (>= 3).
    FineGrid { ref_levels: u32 },
}

/// One measured point of an error curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPoint {
    pub tau: f64,
    pub error: f64,
    /// `None` when both sides are closed form (the point is exact).
    pub stderr: Option<f64>,
    /// Dropped from the order fit: exact zero (<= 1e-14) or below twice its
    /// own standard error.
    pub excluded: bool,
}

/// Weighted log-log fit of an error curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub stderr: f64,
    pub r_squared: f64,
    pub n_used: usize,
}

/// Error-versus-step-size curve with its fitted convergence order.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    /// Points in strictly decreasing `tau` order.
    pub points: Vec<ErrorPoint>,
    /// `None` when fewer than two points survive the fit exclusions.
    pub order: Option<OrderFit>,
    /// Reference used: `"exact"`, `"fine_grid"` or `"finest_tau"`.
    pub mode: &'static str,
}

impl ErrorCurve {
    fn assemble(mode: &'static str, taus: &[f64], raw: Vec<(f64, Option<f64>)>) -> Self {
        let mut points: Vec<ErrorPoint> = taus
            .iter()
            .zip(raw)
            .map(|(&tau, (error, stderr))| ErrorPoint {
                tau,
                error,
                stderr,
                excluded: false,
            })
            .collect();
        let triples: Vec<(f64, f64, Option<f64>)> =
            points.iter().map(|p| (p.tau, p.error, p.stderr)).collect();
        for p in points.iter_mut() {
            p.excluded = !point_usable(p.error, p.stderr);
        }
        let order = fit_order(&triples).ok();
        ErrorCurve {
            points,
            order,
            mode,
        }
    }
}

fn point_usable(error: f64, stderr: Option<f64>) -> bool {
    error > 1e-14 && stderr.map(|s| error > 2.0 * s).unwrap_or(true)
}

/// Weighted least-squares order fit on `(log tau, log error)`.
///
/// Points are `(tau, error, stderr)` with `stderr = None` for exact errors.
/// Points with `error <= 1e-14` or `error <= 2 stderr` are excluded. Weights
/// are `1/stderr^2`; uniform when any usable point is exact.
pub fn fit_order(points: &[(f64, f64, Option<f64>)]) -> Result<OrderFit> {
    let usable: Vec<&(f64, f64, Option<f64>)> = points
        .iter()
        .filter(|(_, e, s)| point_usable(*e, *s))
        .collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientData {
            context: "fit_order usable points".into(),
            needed: 2,
            got: usable.len(),
        });
    }
    let x: Vec<f64> = usable.iter().map(|(t, _, _)| t.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|(_, e, _)| e.ln()).collect();
    let uniform = usable.iter().any(|(_, _, s)| s.is_none());
    let fit = if uniform {
        fit_line(&x, &y, None)?
    } else {
        let w: Vec<f64> = usable
            .iter()
            .map(|(_, _, s)| 1.0 / (s.unwrap() * s.unwrap()))
            .collect();
        fit_line(&x, &y, Some(&w))?
    };
    Ok(OrderFit {
        slope: fit.slope,
        stderr: fit.slope_stderr,
        r_squared: fit.r2,
        n_used: usable.len(),
    })
}

/// Expectation of a built-in functional under a scalar Gaussian law.
pub fn gaussian_expectation(
    functional: &TestFunctional,
    mean: f64,
    variance: f64,
) -> Result<f64> {
    match functional.kind {
        FunctionalKind::Coordinate => Ok(mean),
        FunctionalKind::SquaredNorm => Ok(variance + mean * mean),
        FunctionalKind::Cos(k) => Ok((-0.5 * k * k * variance).exp() * (k * mean).cos()),
        FunctionalKind::Tanh(_) => Err(Error::Unsupported(
            "tanh has no closed form under a Gaussian law".into(),
        )),
    }
}

/// Exact `E phi(X_T)` for the scalar linear problem started at `x0`.
///
/// The mean is `exp(-aT) x0` and the variance is
/// `(s^2 + c^2 lambda m2) (1 - exp(-2aT)) / (2a)` where `m2` is the second
/// moment of the jump marks. `cos` requires the jump-free case (Gaussian
/// law); the mean and second moment are exact with jumps as well because the
/// compensated jump integral is a centred martingale.
pub fn ou_reference(
    params: &LinearParams,
    mark_second_moment: f64,
    x0: f64,
    horizon: f64,
    functional: &TestFunctional,
) -> Result<f64> {
    if !(params.a > 0.0) {
        return Err(Error::invalid_parameter("a", "must be > 0"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid_parameter("horizon", "must be finite and >= 0"));
    }
    let a = params.a;
    let jump_quad = params.c * params.c * params.lambda * mark_second_moment;
    let mean = (-a * horizon).exp() * x0;
    let variance = (params.s * params.s + jump_quad) * (1.0 - (-2.0 * a * horizon).exp())
        / (2.0 * a);
    if matches!(functional.kind, FunctionalKind::Cos(_)) && jump_quad > 0.0 {
        return Err(Error::Unsupported(
            "cos reference requires the jump-free (Gaussian) linear problem".into(),
        ));
    }
    gaussian_expectation(functional, mean, variance)
}

/// [`ou_reference`] for a catalog problem instance (normal marks, `m2 = 1`).
pub fn ou_reference_for(
    problem: &Problem,
    x0: f64,
    horizon: f64,
    functional: &TestFunctional,
) -> Result<f64> {
    let lp = problem
        .linear_params()
        .ok_or_else(|| Error::Unsupported("closed-form reference requires a linear problem".into()))?;
    ou_reference(&lp, 1.0, x0, horizon, functional)
}

/// Exact law `(mean, variance)` of the backward Euler chain on the scalar
/// jump-free linear problem after `n` steps of size `tau`.
///
/// The chain is Gaussian with `mean = x0 / (1 + a tau)^n` and variance
/// following `v <- (v + s^2 tau) / (1 + a tau)^2` from `v = 0`.
pub fn bem_ou_law(params: &LinearParams, x0: f64, tau: f64, n: usize) -> Result<(f64, f64)> {
    if params.c != 0.0 && params.lambda != 0.0 {
        return Err(Error::Unsupported(
            "bem_ou_law requires the jump-free linear problem".into(),
        ));
    }
    if !(params.a > 0.0) {
        return Err(Error::invalid_parameter("a", "must be > 0"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid_parameter("tau", "must be finite and > 0"));
    }
    let g = 1.0 + params.a * tau;
    let mean = x0 / g.powi(n as i32);
    let mut v = 0.0;
    for _ in 0..n {
        v = (v + params.s * params.s * tau) / (g * g);
    }
    Ok((mean, v))
}

/// Steps of a grid of span `horizon` at step `tau`, requiring divisibility.
fn steps_dividing(horizon: f64, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < horizon * (1.0 + 1e-12) && tau.is_finite()) {
        return Err(Error::invalid_parameter("tau", "must lie in (0, horizon]"));
    }
    let steps = (horizon / tau).round();
    if steps < 1.0 || (steps * tau - horizon).abs() > 1e-9 * horizon {
        return Err(Error::invalid_parameter(
            "tau_list",
            format!("tau = {tau} does not divide the horizon {horizon}"),
        ));
    }
    Ok(steps as usize)
}

fn require_strictly_decreasing(tau_list: &[f64]) -> Result<()> {
    if tau_list.is_empty() {
        return Err(Error::invalid_parameter("tau_list", "must be non-empty"));
    }
    if tau_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid_parameter(
            "tau_list",
            "step sizes must be strictly decreasing",
        ));
    }
    Ok(())
}

/// Weak-error curve `|E phi(X_T) - E phi(Y_N)|` over `tau_list`.
///
/// With [`Reference::ClosedForm`] both expectations are exact (linear
/// jump-free problem under backward Euler; `n_paths` and `seed` are unused).
/// With [`Reference::FineGrid`] each sampled path drives every requested
/// grid plus a reference chain `ref_levels` dyadic levels below the finest
/// one, reusing the path's jump events and a bridge-refined version of its
/// Brownian skeleton; the per-path difference `phi(Y_tau) - phi(Y_ref)`
/// is averaged. Every `tau` must divide `horizon` and the list must be a
/// chain of dyadic refinements of its first (coarsest) entry.
#[allow(clippy::too_many_arguments)]
pub fn weak_error_curve(
    problem: &Problem,
    scheme: &SchemeSpec,
    functional: &TestFunctional,
    horizon: f64,
    tau_list: &[f64],
    x0: &[f64],
    n_paths: usize,
    reference: Reference,
    seed: u64,
) -> Result<ErrorCurve> {
    scheme.validate()?;
    require_strictly_decreasing(tau_list)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid_parameter("horizon", "must be finite and > 0"));
    }
    if x0.len() != problem.dim_state {
        return Err(Error::DimensionMismatch {
            context: "weak_error_curve x0".into(),
            expected: problem.dim_state,
            got: x0.len(),
        });
    }
    let steps: Vec<usize> = tau_list
        .iter()
        .map(|&t| steps_dividing(horizon, t))
        .collect::<Result<_>>()?;
    match reference {
        Reference::ClosedForm => {
            if scheme.theta != 1.0 {
                return Err(Error::Unsupported(
                    "closed-form reference requires the backward Euler scheme".into(),
                ));
            }
            if problem.dim_state != 1 {
                return Err(Error::Unsupported(
                    "closed-form reference requires a scalar problem".into(),
                ));
            }
            let lp = problem.linear_params().ok_or_else(|| {
                Error::Unsupported("closed-form reference requires a linear problem".into())
            })?;
            let exact = ou_reference(&lp, 1.0, x0[0], horizon, functional)?;
            let raw = tau_list
                .iter()
                .zip(&steps)
                .map(|(&tau, &n)| {
                    let (m, v) = bem_ou_law(&lp, x0[0], tau, n)?;
                    Ok(((gaussian_expectation(functional, m, v)? - exact).abs(), None))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ErrorCurve::assemble("exact", tau_list, raw))
        }
        Reference::FineGrid { ref_levels } => {
            if ref_levels < 3 {
                return Err(Error::invalid_parameter(
                    "ref_levels",
                    "fine-grid reference needs >= 3 extra dyadic levels",
                ));
            }
            if n_paths < 2 {
                return Err(Error::invalid_parameter("n_paths", "must be >= 2"));
            }
            fine_grid_curve(
                problem, scheme, functional, horizon, tau_list, &steps, x0, n_paths, ref_levels,
                seed,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fine_grid_curve(
    problem: &Problem,
    scheme: &SchemeSpec,
    functional: &TestFunctional,
    horizon: f64,
    tau_list: &[f64],
    steps: &[usize],
    x0: &[f64],
    n_paths: usize,
    ref_levels: u32,
    seed: u64,
) -> Result<ErrorCurve> {
    let base_steps = steps[0];
    for (&s, &tau) in steps.iter().zip(tau_list) {
        let ratio = s / base_steps;
        if ratio * base_steps != s || !ratio.is_power_of_two() {
            return Err(Error::invalid_parameter(
                "tau_list",
                format!("tau = {tau} is not a dyadic refinement of the coarsest step"),
            ));
        }
    }
    let finest_ratio = steps[steps.len() - 1] / base_steps;
    let total_levels = finest_ratio.trailing_zeros() + ref_levels;
    if total_levels > MAX_REFINE_LEVELS {
        return Err(Error::invalid_parameter(
            "ref_levels",
            format!("refinement depth {total_levels} exceeds the supported {MAX_REFINE_LEVELS}"),
        ));
    }
    let base_grid = GridSpec::new(horizon, base_steps)?;
    let grids: Vec<GridSpec> = steps
        .iter()
        .map(|&s| GridSpec::new(horizon, s))
        .collect::<Result<_>>()?;
    let ref_grid = GridSpec::new(horizon, base_steps << total_levels)?;
    let m = tau_list.len();
    // Row: per tau (sum d, sum d^2), then an alive indicator.
    let width = 2 * m + 1;
    let sums = parallel_row_sums(
        n_paths,
        width,
        || (),
        |(), path, row| {
            let coarse = sample_path_noise(problem, &base_grid, seed, path as u64);
            let mut bridge = rng::stream(seed, path as u64, Purpose::Bridge);
            let fine = refine_brownian(&coarse.skeleton, total_levels, &mut bridge);
            let noise = PathNoise {
                skeleton: fine,
                events: coarse.events,
            };
            let endpoint = |grid: &GridSpec| -> Option<f64> {
                match run_chain(problem, scheme, grid, &noise, x0, false) {
                    Ok(res) if !res.diagnostics.overflow => Some(functional.eval(&res.endpoint)),
                    _ => None,
                }
            };
            let Some(phi_ref) = endpoint(&ref_grid) else {
                return;
            };
            let mut vals = Vec::with_capacity(m);
            for grid in &grids {
                match endpoint(grid) {
                    Some(v) => vals.push(v),
                    None => return,
                }
            }
            for (t, phi) in vals.into_iter().enumerate() {
                let d = phi - phi_ref;
                row[2 * t] = d;
                row[2 * t + 1] = d * d;
            }
            row[2 * m] = 1.0;
        },
    );
    let alive = sums[2 * m].round() as usize;
    if alive < 2 {
        return Err(Error::InsufficientData {
            context: "fine-grid weak-error paths (overflow-free)".into(),
            needed: 2,
            got: alive,
        });
    }
    let raw = (0..m)
        .map(|t| {
            let (mean, se) = mean_stderr_from_sums(sums[2 * t], sums[2 * t + 1], alive);
            (mean.abs(), Some(se))
        })
        .collect();
    Ok(ErrorCurve::assemble("fine_grid", tau_list, raw))
}

/// Reference used by [`invariant_gap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapReference {
    /// Exact stationary laws on both sides (linear jump-free problem,
    /// backward Euler): gaps are exact numbers.
    ClosedForm,
    /// The empirical measure at the finest `tau` in the list serves as the
    /// reference; that entry is consumed and not reported as a point.
    FinestTau,
}

/// Invariant-measure gap `|pi_tau(phi) - pi(phi)|` over `tau_list`.
///
/// Closed-form mode uses the exact stationary laws of the scalar linear
/// problem: `pi = N(0, s^2/(2a))` and, under backward Euler,
/// `pi_tau = N(0, s^2/(2a + a^2 tau))`; `burn_in_time`, `n_samples` and
/// `seed` are unused. Finest-tau mode estimates every `pi_tau(phi)` from
/// endpoint ensembles ([`crate::ergodicity::invariant_ensemble`]) and
/// reports gaps against the finest one.
#[allow(clippy::too_many_arguments)]
pub fn invariant_gap(
    problem: &Problem,
    scheme: &SchemeSpec,
    tau_list: &[f64],
    functional: &TestFunctional,
    burn_in_time: f64,
    n_samples: usize,
    reference: GapReference,
    seed: u64,
) -> Result<ErrorCurve> {
    scheme.validate()?;
    require_strictly_decreasing(tau_list)?;
    match reference {
        GapReference::ClosedForm => {
            if scheme.theta != 1.0 {
                return Err(Error::Unsupported(
                    "closed-form stationary law requires the backward Euler scheme".into(),
                ));
            }
            if problem.dim_state != 1 {
                return Err(Error::Unsupported(
                    "closed-form stationary law requires a scalar problem".into(),
                ));
            }
            let lp = problem.linear_params().ok_or_else(|| {
                Error::Unsupported("closed-form stationary law requires a linear problem".into())
            })?;
            if lp.c != 0.0 && lp.lambda != 0.0 {
                return Err(Error::Unsupported(
                    "closed-form stationary law requires the jump-free problem".into(),
                ));
            }
            let v_exact = lp.s * lp.s / (2.0 * lp.a);
            let pi_phi = gaussian_expectation(functional, 0.0, v_exact)?;
            let raw = tau_list
                .iter()
                .map(|&tau| {
                    let v_tau = lp.s * lp.s / (2.0 * lp.a + lp.a * lp.a * tau);
                    Ok(((gaussian_expectation(functional, 0.0, v_tau)? - pi_phi).abs(), None))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ErrorCurve::assemble("exact", tau_list, raw))
        }
        GapReference::FinestTau => {
            if tau_list.len() < 2 {
                return Err(Error::InsufficientData {
                    context: "finest-tau gap reference".into(),
                    needed: 2,
                    got: tau_list.len(),
                });
            }
            let stats: Vec<(f64, f64)> = tau_list
                .iter()
                .enumerate()
                .map(|(i, &tau)| {
                    let measure = crate::ergodicity::invariant_ensemble(
                        problem,
                        scheme,
                        tau,
                        burn_in_time,
                        n_samples,
                        crate::ergodicity::MeasureMode::Ensemble,
                        1,
                        seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    )?;
                    Ok(functional_mean(&measure, functional))
                })
                .collect::<Result<_>>()?;
            let (r_mean, r_se) = stats[stats.len() - 1];
            let raw = stats[..stats.len() - 1]
                .iter()
                .map(|&(mean, se)| {
                    (
                        (mean - r_mean).abs(),
                        Some((se * se + r_se * r_se).sqrt()),
                    )
                })
                .collect();
            Ok(ErrorCurve::assemble(
                "finest_tau",
                &tau_list[..tau_list.len() - 1],
                raw,
            ))
        }
    }
}

fn functional_mean(
    measure: &crate::ergodicity::EmpiricalMeasure,
    functional: &TestFunctional,
) -> (f64, f64) {
    let n = measure.len();
    let vals: Vec<f64> = (0..n).map(|i| functional.eval(measure.sample(i))).collect();
    let s1 = crate::stats::pairwise_sum(&vals);
    let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
    let s2 = crate::stats::pairwise_sum(&sq);
    mean_stderr_from_sums(s1, s2, n)
}

/// 1-Wasserstein distance between scalar samples and `N(mean, sd^2)`,
/// evaluated against the Gaussian quantile grid at levels `(i + 1/2)/n`.
pub fn w1_vs_gaussian_1d(samples: &[f64], mean: f64, sd: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData {
            context: "w1_vs_gaussian_1d samples".into(),
            needed: 1,
            got: 0,
        });
    }
    if !(sd >= 0.0 && sd.is_finite() && mean.is_finite()) {
        return Err(Error::invalid_parameter("sd", "must be finite and >= 0"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len() as f64;
    let diffs: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let q = mean + sd * inverse_normal_cdf((i as f64 + 0.5) / n);
            (s - q).abs()
        })
        .collect();
    Ok(crate::stats::pairwise_sum(&diffs) / n)
}
