//! Long-time certificates: Lyapunov recursions, coupling contraction,
//! invariant-measure sampling, and moment boundedness.
//!
//! Everything here is an empirical audit of an inequality that holds in
//! expectation. Monte Carlo means replace expectations, so each audit
//! carries standard errors and converts the inequality into a statistically
//! honest test (violations are flagged only beyond 3 standard errors).
//!
//! The Lyapunov function of the theta scheme is
//!
//! ```text
//! V_theta(x) = |x - theta*tau*b(x)|^2
//! ```
//!
//! and for `theta in (1/2, 1]` a validated step size gives the per-step
//! recursion `E[V(Z_{n+1}) | F_n] <= rho * V(Z_n) + L2*tau` with
//! `rho = 1 - (2*theta - 1)*L3_eff*tau/2`. The proof constant `L3_eff =
//! min(L3, 1/(theta^2*tau))` keeps the recursion valid for coarse steps
//! (lowering `L3` weakens coercivity without touching `L2`). At
//! `theta = 1/2` only the weak form holds:
//! `E[V(Z_{n+1})] <= E[V(Z_n)] + tau*(L2 - L3_eff*E|Z_n|^2)`.

use crate::error::Error;
use crate::integrators::{run_chain, run_coupled_chain, SchemeSpec};
use crate::model::{validate_step_size, AssumptionCertificate, Problem};
use crate::noise::{sample_path_noise, GridSpec};
use crate::rng::{self, Purpose};
use crate::stats::{fit_line, mean_stderr_from_sums, parallel_map, parallel_row_sums};
use crate::Result;

/// One audited step of the Lyapunov recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovStep {
    pub step: usize,
    pub t: f64,
    pub mean_v: f64,
    pub stderr: f64,
    /// Theoretical bound propagated from the *empirical* mean one step
    /// earlier (at step 0 the bound is the initial mean itself).
    pub bound: f64,
    /// `mean_v > bound + 3*stderr`.
    pub violation: bool,
}

/// Empirical audit of the Lyapunov recursion over a path ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovAudit {
    pub theta: f64,
    pub tau: f64,
    /// `theta = 1/2`: the weak form (no geometric factor) was audited.
    pub weak_form: bool,
    /// Geometric factor of the strong form (1.0 in the weak form).
    pub rho: f64,
    pub l2: f64,
    pub l3_eff: f64,
    pub steps: Vec<LyapunovStep>,
}

impl LyapunovAudit {
    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.violation).count()
    }

    /// Violating fraction among the audited transitions (step 0 is free).
    pub fn violation_fraction(&self) -> f64 {
        let n = self.steps.len().saturating_sub(1);
        if n == 0 {
            0.0
        } else {
            self.violations() as f64 / n as f64
        }
    }

    /// Fixed point `2*L2 / ((2*theta-1)*L3_eff)` of the strong recursion.
    pub fn fixed_point(&self) -> Option<f64> {
        if self.weak_form {
            None
        } else {
            Some(2.0 * self.l2 / ((2.0 * self.theta - 1.0) * self.l3_eff))
        }
    }
}

fn require_condition(
    cert: &AssumptionCertificate,
    theta: f64,
    tau: f64,
    name: &str,
) -> Result<()> {
    let report = validate_step_size(cert, theta, tau)?;
    if !report.passed(name) {
        return Err(Error::Precondition {
            report: format!("{report}"),
        });
    }
    Ok(())
}

fn grid_from_tau(tau: f64, steps: usize) -> Result<GridSpec> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid_parameter("tau", "must lie in (0, 1)"));
    }
    GridSpec::new(tau * steps as f64, steps)
}

/// Effective coercivity constant of the Lyapunov proof.
fn l3_effective(l3: f64, theta: f64, tau: f64) -> f64 {
    l3.min(1.0 / (theta * theta * tau))
}

/// Audits the Lyapunov recursion of `V_theta` on `n_paths` chains.
///
/// Requires the Lyapunov step-size condition and certificate constants
/// `l2`, `l3`; `theta = 1/2` audits the weak form.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_audit(
    problem: &Problem,
    cert: &AssumptionCertificate,
    theta: f64,
    tau: f64,
    n_paths: usize,
    n_steps: usize,
    x0: &[f64],
    seed: u64,
) -> Result<LyapunovAudit> {
    require_condition(cert, theta, tau, "lyapunov")?;
    let (Some(l2), Some(l3)) = (cert.l2, cert.l3) else {
        return Err(Error::invalid_parameter(
            "certificate",
            "lyapunov audit needs l2 and l3",
        ));
    };
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::invalid_parameter(
            "n_paths/n_steps",
            "must be >= 1",
        ));
    }
    let grid = grid_from_tau(tau, n_steps)?;
    let scheme = SchemeSpec::new(theta)?;
    let d = problem.dim_state;
    let width = 3 * (n_steps + 1);
    // Per node: sum V, sum V^2, sum |Z|^2. Overflowing paths poison the
    // sums with NaN and surface as an error below.
    let sums = parallel_row_sums(
        n_paths,
        width,
        || vec![0.0; d],
        |b_buf, path, row| {
            let noise = sample_path_noise(problem, &grid, seed, path as u64);
            match run_chain(problem, &scheme, &grid, &noise, x0, true) {
                Ok(res) if !res.diagnostics.overflow => {
                    let path_nodes = res.path.as_ref().expect("recorded");
                    for n in 0..=n_steps {
                        let x = &path_nodes[n * d..(n + 1) * d];
                        (problem.drift)(x, b_buf);
                        let mut v = 0.0;
                        let mut sq = 0.0;
                        for i in 0..d {
                            let w = x[i] - theta * tau * b_buf[i];
                            v += w * w;
                            sq += x[i] * x[i];
                        }
                        row[3 * n] = v;
                        row[3 * n + 1] = v * v;
                        row[3 * n + 2] = sq;
                    }
                }
                _ => row[0] = f64::NAN,
            }
        },
    );
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("lyapunov audit (a chain overflowed)"));
    }
    let weak_form = theta == 0.5;
    let l3_eff = l3_effective(l3, theta, tau);
    let rho = if weak_form {
        1.0
    } else {
        1.0 - (2.0 * theta - 1.0) * l3_eff * tau / 2.0
    };
    let mut steps = Vec::with_capacity(n_steps + 1);
    let mut prev_mean = 0.0;
    let mut prev_mean_sq = 0.0;
    for n in 0..=n_steps {
        let (mean_v, stderr) = mean_stderr_from_sums(sums[3 * n], sums[3 * n + 1], n_paths);
        let mean_sq = sums[3 * n + 2] / n_paths as f64;
        let bound = if n == 0 {
            mean_v
        } else if weak_form {
            prev_mean + tau * (l2 - l3_eff * prev_mean_sq)
        } else {
            rho * prev_mean + l2 * tau
        };
        steps.push(LyapunovStep {
            step: n,
            t: grid.time(n),
            mean_v,
            stderr,
            bound,
            violation: n > 0 && mean_v > bound + 3.0 * stderr,
        });
        prev_mean = mean_v;
        prev_mean_sq = mean_sq;
    }
    Ok(LyapunovAudit {
        theta,
        tau,
        weak_form,
        rho,
        l2,
        l3_eff,
        steps,
    })
}

/// Fitted exponential rate of a decay curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Decay rate (positive means decay).
    pub rate: f64,
    pub stderr: f64,
    pub r2: f64,
    /// Points entering the fit (signal above 10x noise).
    pub n_used: usize,
}

/// Mean squared coupling distance per node, with the guaranteed envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurve {
    pub t: Vec<f64>,
    pub mean_sq_diff: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `exp(-(theta-1/2) L1* t_n) / (1 + L1* theta tau) * |D0 - theta tau
    /// (b(x0)-b(y0))|^2`, when `l1_star` is certified.
    pub envelope: Option<Vec<f64>>,
    pub rate: Option<RateFit>,
    /// Starts coincided (or no usable signal): no rate fitted.
    pub degenerate: bool,
}

/// Runs `n_paths` synchronously coupled chains from `x0`, `y0` and fits the
/// exponential decay rate of `E|Z_n^x - Z_n^y|^2`.
///
/// The fit uses `log(mean)` against `t_n` by ordinary least squares over
/// the nodes where the mean exceeds 10x its standard error, avoiding the
/// Monte Carlo noise floor.
#[allow(clippy::too_many_arguments)]
pub fn contraction_curve(
    problem: &Problem,
    cert: &AssumptionCertificate,
    theta: f64,
    tau: f64,
    x0: &[f64],
    y0: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<DecayCurve> {
    require_condition(cert, theta, tau, "contraction")?;
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::invalid_parameter(
            "n_paths/n_steps",
            "must be >= 1",
        ));
    }
    let grid = grid_from_tau(tau, n_steps)?;
    let scheme = SchemeSpec::new(theta)?;
    let width = 2 * (n_steps + 1);
    let sums = parallel_row_sums(
        n_paths,
        width,
        || (),
        |_, path, row| {
            let noise = sample_path_noise(problem, &grid, seed, path as u64);
            match run_coupled_chain(problem, &scheme, &grid, &noise, x0, y0) {
                Ok(res) if res.sq_diff.len() == n_steps + 1 => {
                    for (n, &v) in res.sq_diff.iter().enumerate() {
                        row[2 * n] = v;
                        row[2 * n + 1] = v * v;
                    }
                }
                _ => row[0] = f64::NAN,
            }
        },
    );
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("contraction audit (a chain overflowed)"));
    }
    let mut t = Vec::with_capacity(n_steps + 1);
    let mut mean_sq = Vec::with_capacity(n_steps + 1);
    let mut stderr = Vec::with_capacity(n_steps + 1);
    for n in 0..=n_steps {
        let (m, se) = mean_stderr_from_sums(sums[2 * n], sums[2 * n + 1], n_paths);
        t.push(grid.time(n));
        mean_sq.push(m);
        stderr.push(se);
    }
    let envelope = cert.l1_star.map(|l1s| {
        let d = problem.dim_state;
        let mut bx = vec![0.0; d];
        let mut by = vec![0.0; d];
        (problem.drift)(x0, &mut bx);
        (problem.drift)(y0, &mut by);
        let mut e0 = 0.0;
        for i in 0..d {
            let w = (x0[i] - y0[i]) - theta * tau * (bx[i] - by[i]);
            e0 += w * w;
        }
        let pref = e0 / (1.0 + l1s * theta * tau);
        t.iter()
            .map(|&tn| pref * (-(theta - 0.5) * l1s * tn).exp())
            .collect()
    });
    // Fit over the signal window.
    let mut fx = Vec::new();
    let mut fy = Vec::new();
    for n in 0..=n_steps {
        if mean_sq[n] > 10.0 * stderr[n] && mean_sq[n] > 0.0 {
            fx.push(t[n]);
            fy.push(mean_sq[n].ln());
        }
    }
    let (rate, degenerate) = if fx.len() >= 2 {
        match fit_line(&fx, &fy, None) {
            Ok(f) => (
                Some(RateFit {
                    rate: -f.slope,
                    stderr: f.slope_stderr,
                    r2: f.r2,
                    n_used: fx.len(),
                }),
                false,
            ),
            Err(_) => (None, true),
        }
    } else {
        (None, true)
    };
    Ok(DecayCurve {
        t,
        mean_sq_diff: mean_sq,
        stderr,
        envelope,
        rate,
        degenerate,
    })
}

/// How invariant-measure samples are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureMode {
    /// Independent chains; endpoints after the burn-in (i.i.d. samples).
    Ensemble,
    /// One chain sampled every `thinning` steps after the burn-in
    /// (samples are correlated; flagged in the metadata).
    TimeAverage,
}

/// Empirical proxy for the invariant measure of the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    /// Row-major `[sample][coordinate]`.
    pub samples: Vec<f64>,
    pub dim: usize,
    pub theta: f64,
    pub tau: f64,
    pub burn_in_time: f64,
    pub mode: MeasureMode,
    pub thinning: usize,
    pub seed: u64,
    /// Time-average samples are serially correlated.
    pub correlated: bool,
    /// Chains dropped because they overflowed (none on validated setups).
    pub overflow_count: usize,
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Scalar view for one-dimensional problems.
    pub fn scalar_samples(&self) -> Result<&[f64]> {
        if self.dim != 1 {
            return Err(Error::Unsupported(
                "scalar samples require a one-dimensional state".into(),
            ));
        }
        Ok(&self.samples)
    }
}

/// Samples the invariant law of the scheme, starting chains at the origin.
///
/// Ensemble mode runs `n_samples` independent chains for the burn-in
/// horizon (rounded up to whole steps) and collects endpoints; time-average
/// mode runs one chain and collects every `thinning`-th state after the
/// burn-in. Requires the Lyapunov and contraction step-size conditions.
#[allow(clippy::too_many_arguments)]
pub fn invariant_ensemble(
    problem: &Problem,
    scheme: &SchemeSpec,
    tau: f64,
    burn_in_time: f64,
    n_samples: usize,
    mode: MeasureMode,
    thinning: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    require_condition(&problem.certificate, scheme.theta, tau, "lyapunov")?;
    require_condition(&problem.certificate, scheme.theta, tau, "contraction")?;
    if !(burn_in_time > 0.0 && burn_in_time.is_finite()) {
        return Err(Error::invalid_parameter("burn_in_time", "must be > 0"));
    }
    if n_samples == 0 {
        return Err(Error::invalid_parameter("n_samples", "must be >= 1"));
    }
    if mode == MeasureMode::TimeAverage && thinning == 0 {
        return Err(Error::invalid_parameter("thinning", "must be >= 1"));
    }
    let d = problem.dim_state;
    let x0 = vec![0.0; d];
    let burn_steps = ((burn_in_time / tau).ceil() as usize).max(1);
    match mode {
        MeasureMode::Ensemble => {
            let grid = grid_from_tau(tau, burn_steps)?;
            let endpoints = parallel_map(n_samples, |path| {
                let noise = sample_path_noise(problem, &grid, seed, path as u64);
                match run_chain(problem, scheme, &grid, &noise, &x0, false) {
                    Ok(res) if !res.diagnostics.overflow => Some(res.endpoint),
                    _ => None,
                }
            });
            let overflow_count = endpoints.iter().filter(|e| e.is_none()).count();
            let mut samples = Vec::with_capacity((n_samples - overflow_count) * d);
            for e in endpoints.into_iter().flatten() {
                samples.extend_from_slice(&e);
            }
            Ok(EmpiricalMeasure {
                samples,
                dim: d,
                theta: scheme.theta,
                tau,
                burn_in_time,
                mode,
                thinning: 1,
                seed,
                correlated: false,
                overflow_count,
            })
        }
        MeasureMode::TimeAverage => {
            let total = burn_steps + n_samples * thinning;
            let grid = grid_from_tau(tau, total)?;
            let noise = sample_path_noise(problem, &grid, seed, 0);
            let res = run_chain(problem, scheme, &grid, &noise, &x0, true)?;
            let path = res.path.as_ref().expect("recorded");
            let available = path.len() / d;
            let mut samples = Vec::with_capacity(n_samples * d);
            let mut overflow_count = 0;
            for k in 1..=n_samples {
                let node = burn_steps + k * thinning;
                if node < available {
                    samples.extend_from_slice(&path[node * d..(node + 1) * d]);
                } else {
                    overflow_count = 1;
                    break;
                }
            }
            Ok(EmpiricalMeasure {
                samples,
                dim: d,
                theta: scheme.theta,
                tau,
                burn_in_time,
                mode,
                thinning,
                seed,
                correlated: true,
                overflow_count,
            })
        }
    }
}

/// Exact Wasserstein-1 distance between two equal-weight empirical measures
/// on the line: the mean absolute difference of order statistics.
///
/// Unequal sizes are reconciled by uniformly subsampling the larger set
/// (without replacement) with a stream keyed by the two sizes, so the
/// result is deterministic for given inputs.
pub fn w1_empirical_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData {
            context: "w1_empirical_1d".into(),
            needed: 1,
            got: 0,
        });
    }
    let subsample = |v: &[f64], k: usize, other: usize| -> Vec<f64> {
        let mut out: Vec<f64> = v.to_vec();
        let mut s = rng::stream(v.len() as u64, other as u64, Purpose::Audit);
        // Partial Fisher-Yates: the first k entries are a uniform draw
        // without replacement.
        for i in 0..k {
            let j = i + (rand::Rng::random::<u64>(&mut s) as usize) % (out.len() - i);
            out.swap(i, j);
        }
        out.truncate(k);
        out
    };
    let (mut xa, mut xb) = if a.len() == b.len() {
        (a.to_vec(), b.to_vec())
    } else if a.len() > b.len() {
        (subsample(a, b.len(), b.len()), b.to_vec())
    } else {
        (a.to_vec(), subsample(b, a.len(), a.len()))
    };
    xa.sort_by(|p, q| p.partial_cmp(q).expect("finite samples"));
    xb.sort_by(|p, q| p.partial_cmp(q).expect("finite samples"));
    let n = xa.len();
    Ok(xa
        .iter()
        .zip(xb.iter())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / n as f64)
}

/// Moment trajectory `t_n -> E|Y_n|^{2p}` with per-node standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurve {
    pub t: Vec<f64>,
    /// Mean among the paths still finite at each node.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Paths contributing at each node.
    pub alive: Vec<usize>,
    pub overflow_count: usize,
    /// Certificate claim `2 l9 > (2p-1) l6` (sufficient condition for
    /// time-uniform BEM moments); `None` when the constants are missing.
    pub uniform_flag: Option<bool>,
    /// Boundedness proxy `sup <= max(first 10)*1.5 + 1`, evaluated on every
    /// BEM run that did not overflow; `None` otherwise. The proxy can pass
    /// without the certificate flag: the flag is sufficient, not necessary.
    pub uniform_proxy: Option<bool>,
}

/// Tracks `E|Y_n|^{2p}` over `n_steps` steps of the scheme.
///
/// No step-size precondition: the explicit baseline is allowed here
/// precisely so its divergence can be measured (`overflow_count`).
#[allow(clippy::too_many_arguments)]
pub fn moment_curve(
    problem: &Problem,
    scheme: &SchemeSpec,
    tau: f64,
    order_2p: u32,
    n_paths: usize,
    n_steps: usize,
    x0: &[f64],
    seed: u64,
) -> Result<MomentCurve> {
    if ![2, 4, 6].contains(&order_2p) {
        return Err(Error::invalid_parameter("order_2p", "must be 2, 4, or 6"));
    }
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::invalid_parameter(
            "n_paths/n_steps",
            "must be >= 1",
        ));
    }
    let grid = grid_from_tau(tau, n_steps)?;
    let d = problem.dim_state;
    let p = order_2p / 2;
    let width = 3 * (n_steps + 1) + 1;
    let sums = parallel_row_sums(
        n_paths,
        width,
        || (),
        |_, path, row| {
            let noise = sample_path_noise(problem, &grid, seed, path as u64);
            let res = match run_chain(problem, scheme, &grid, &noise, x0, true) {
                Ok(r) => r,
                Err(_) => {
                    row[width - 1] = 1.0;
                    return;
                }
            };
            let nodes = res.path.as_ref().expect("recorded");
            for n in 0..nodes.len() / d {
                let x = &nodes[n * d..(n + 1) * d];
                let sq: f64 = x.iter().map(|v| v * v).sum();
                let m = sq.powi(p as i32);
                row[3 * n] = m;
                row[3 * n + 1] = m * m;
                row[3 * n + 2] = 1.0;
            }
            if res.diagnostics.overflow {
                row[width - 1] = 1.0;
            }
        },
    );
    let mut t = Vec::with_capacity(n_steps + 1);
    let mut mean = Vec::with_capacity(n_steps + 1);
    let mut stderr = Vec::with_capacity(n_steps + 1);
    let mut alive = Vec::with_capacity(n_steps + 1);
    for n in 0..=n_steps {
        let count = sums[3 * n + 2].round() as usize;
        let (m, se) = if count > 0 {
            mean_stderr_from_sums(sums[3 * n], sums[3 * n + 1], count)
        } else {
            (f64::NAN, f64::NAN)
        };
        t.push(grid.time(n));
        mean.push(m);
        stderr.push(se);
        alive.push(count);
    }
    let overflow_count = sums[width - 1].round() as usize;
    let uniform_flag = problem.certificate.uniform_bem_ok_for(p);
    let uniform_proxy = if scheme.theta == 1.0 && overflow_count == 0 {
        let head = mean
            .iter()
            .take(10.min(mean.len()))
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let sup = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(sup <= head * 1.5 + 1.0)
    } else {
        None
    };
    Ok(MomentCurve {
        t,
        mean,
        stderr,
        alive,
        overflow_count,
        uniform_flag,
        uniform_proxy,
    })
}
