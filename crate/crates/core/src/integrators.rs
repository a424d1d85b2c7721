//! Implicit theta step and chain runners.
//!
//! One step of the stochastic theta method reads
//!
//! ```text
//! Z_{j+1} = Z_j + (1-theta) b(Z_j) tau + theta b(Z_{j+1}) tau
//!         + sigma(Z_j) dW_j + compensated jump sum over (t_j, t_{j+1}]
//! ```
//!
//! with the jump coefficient frozen at the left endpoint. `theta = 1` is
//! backward Euler, `theta = 0` the explicit Euler baseline (whose blow-up on
//! super-linear drift is expected behaviour and is reported via the overflow
//! flag rather than raised).
//!
//! The implicit equation `z - theta*tau*b(z) = rhs` is solved by damped
//! Newton from the explicit predictor `z0 = rhs`; `g(z) = z - theta*tau*b(z)
//! - rhs` is strongly monotone whenever the one-sided Lipschitz step-size
//! condition holds, which makes the damped iteration globally convergent.
//! Problems without a drift Jacobian fall back to damped Picard, and
//! one-dimensional problems get a guarded bisection fallback for absolute
//! robustness. Step-size admissibility is the caller's job (see
//! [`crate::model::validate_step_size`]); the solver itself only requires
//! `theta*tau >= 0`.

use crate::error::Error;
use crate::model::Problem;
use crate::noise::{compensated_jump_sum, GridSpec, PathNoise};
use crate::stats::solve_dense_inplace;
use crate::Result;

/// Time-stepping scheme: the theta parameter plus implicit-solver controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeSpec {
    /// Implicitness parameter in `[0, 1]`; `0` explicit Euler, `1` BEM.
    pub theta: f64,
    /// Residual tolerance, relative to `1 + |rhs|`.
    pub newton_tol: f64,
    /// Iteration budget for the implicit solve.
    pub newton_max_iter: usize,
}

impl SchemeSpec {
    pub fn new(theta: f64) -> Result<Self> {
        let s = SchemeSpec {
            theta,
            newton_tol: 1e-12,
            newton_max_iter: 50,
        };
        s.validate()?;
        Ok(s)
    }

    /// Backward Euler (`theta = 1`).
    pub fn bem() -> Self {
        SchemeSpec::new(1.0).unwrap()
    }

    /// Explicit Euler baseline (`theta = 0`).
    pub fn explicit_euler() -> Self {
        SchemeSpec::new(0.0).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.theta <= 1.0) {
            return Err(Error::invalid_parameter("theta", "must lie in [0, 1]"));
        }
        if !(self.newton_tol > 0.0 && self.newton_tol.is_finite()) {
            return Err(Error::invalid_parameter("newton_tol", "must be > 0"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::invalid_parameter("newton_max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// Implicit-solver and overflow diagnostics accumulated over a chain.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    /// Implicit-solver iterations (Newton/Picard/bisection), summed.
    pub total_newton_iters: u64,
    /// Largest accepted final residual among the solves.
    pub max_residual: f64,
    /// Some coordinate became non-finite; stepping stopped there.
    pub overflow: bool,
    /// Index of the step whose update first went non-finite.
    pub overflow_step: Option<usize>,
}

impl Diagnostics {
    fn absorb_solve(&mut self, iters: u64, residual: f64) {
        self.total_newton_iters += iters;
        if residual > self.max_residual {
            self.max_residual = residual;
        }
    }
}

/// Outcome of one chain: endpoint, optional recorded path, diagnostics.
///
/// On overflow the endpoint is the last finite state and
/// `diagnostics.overflow_step` records where stepping stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub endpoint: Vec<f64>,
    /// Row-major `[node][coordinate]` over nodes `0..=steps` when recorded
    /// (truncated after the last finite node on overflow).
    pub path: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl ChainResult {
    /// State at grid node `j` of a recorded path.
    pub fn node(&self, j: usize, dim: usize) -> &[f64] {
        let p = self.path.as_ref().expect("path was not recorded");
        &p[j * dim..(j + 1) * dim]
    }
}

/// Two synchronously coupled chains and their per-node squared distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledResult {
    pub first: ChainResult,
    pub second: ChainResult,
    /// `|Z_n^x - Z_n^y|^2` at nodes `0..=steps` (truncated on overflow).
    pub sq_diff: Vec<f64>,
}

/// Reusable buffers for the solver and stepper; one per chain.
#[derive(Debug)]
pub struct Workspace {
    b: Vec<f64>,
    g: Vec<f64>,
    g_trial: Vec<f64>,
    z_trial: Vec<f64>,
    step_dir: Vec<f64>,
    jac: Vec<f64>,
    sigma: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    pub fn new(problem: &Problem) -> Self {
        let d = problem.dim_state;
        let m = problem.dim_noise;
        Workspace {
            b: vec![0.0; d],
            g: vec![0.0; d],
            g_trial: vec![0.0; d],
            z_trial: vec![0.0; d],
            step_dir: vec![0.0; d],
            jac: vec![0.0; d * d],
            sigma: vec![0.0; d * m],
            rhs: vec![0.0; d],
            scratch: vec![0.0; d],
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fills `g = z - theta_tau*b(z) - rhs` (and `b`), returns `|g|`.
fn residual(
    problem: &Problem,
    z: &[f64],
    theta_tau: f64,
    rhs: &[f64],
    b: &mut [f64],
    g: &mut [f64],
) -> f64 {
    (problem.drift)(z, b);
    for i in 0..z.len() {
        g[i] = z[i] - theta_tau * b[i] - rhs[i];
    }
    norm(g)
}

/// Guarded bisection for `d = 1`: `g` is strictly increasing under the
/// step-size condition, so a sign bracket always pins the root.
fn bisect_1d(
    problem: &Problem,
    theta_tau: f64,
    rhs: f64,
    start: f64,
    tol_abs: f64,
    iters: &mut u64,
) -> Result<f64> {
    let mut b = [0.0];
    let mut g = [0.0];
    let mut eval = |z: f64, iters: &mut u64| -> f64 {
        *iters += 1;
        residual(problem, &[z], theta_tau, &[rhs], &mut b, &mut g);
        g[0]
    };
    let g0 = eval(start, iters);
    if g0.abs() <= tol_abs {
        return Ok(start);
    }
    let mut h = 1.0 + start.abs();
    let (mut lo, mut hi) = if g0 > 0.0 {
        let mut lo = start - h;
        let mut n = 0;
        while eval(lo, iters) > 0.0 {
            h *= 2.0;
            lo = start - h;
            n += 1;
            if n > 200 || !lo.is_finite() {
                return Err(Error::NonConvergence {
                    iters: *iters,
                    residual: g0.abs(),
                });
            }
        }
        (lo, start)
    } else {
        let mut hi = start + h;
        let mut n = 0;
        while eval(hi, iters) < 0.0 {
            h *= 2.0;
            hi = start + h;
            n += 1;
            if n > 200 || !hi.is_finite() {
                return Err(Error::NonConvergence {
                    iters: *iters,
                    residual: g0.abs(),
                });
            }
        }
        (start, hi)
    };
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval collapsed to adjacent floats; best achievable.
            return Ok(mid.clamp(lo, hi));
        }
        let gm = eval(mid, iters);
        last = gm.abs();
        if last <= tol_abs {
            return Ok(mid);
        }
        if gm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NonConvergence {
        iters: *iters,
        residual: last,
    })
}

/// Core solver for `z - theta_tau*b(z) = rhs`; starts from `z0 = rhs`.
#[allow(clippy::too_many_arguments)]
fn solve_monotone(
    problem: &Problem,
    rhs: &[f64],
    theta_tau: f64,
    scheme: &SchemeSpec,
    z: &mut [f64],
    b: &mut [f64],
    g: &mut [f64],
    g_trial: &mut [f64],
    z_trial: &mut [f64],
    step_dir: &mut [f64],
    jac: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    let d = z.len();
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("implicit solve right-hand side"));
    }
    z.copy_from_slice(rhs);
    if theta_tau == 0.0 {
        diag.absorb_solve(0, 0.0);
        return Ok(());
    }
    let tol_abs = scheme.newton_tol * (1.0 + norm(rhs));
    let mut iters: u64 = 0;
    let mut res = residual(problem, z, theta_tau, rhs, b, g);
    if res <= tol_abs {
        diag.absorb_solve(iters, res);
        return Ok(());
    }
    for _ in 0..scheme.newton_max_iter {
        iters += 1;
        // Direction: Newton when a Jacobian is available, Picard otherwise
        // (Picard's direction is g itself: z - (rhs + theta_tau*b(z))).
        let mut have_newton = false;
        if let Some(db) = &problem.drift_jacobian {
            db(z, jac);
            for r in 0..d {
                for c in 0..d {
                    let idx = r * d + c;
                    let eye = if r == c { 1.0 } else { 0.0 };
                    jac[idx] = eye - theta_tau * jac[idx];
                }
            }
            step_dir.copy_from_slice(g);
            if solve_dense_inplace(jac, step_dir, d).is_ok() {
                have_newton = true;
            }
        }
        if !have_newton {
            step_dir.copy_from_slice(g);
        }
        // Backtrack (factor 1/2, max 30 halvings) until the residual drops.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            for i in 0..d {
                z_trial[i] = z[i] - alpha * step_dir[i];
            }
            let res_trial = residual(problem, z_trial, theta_tau, rhs, b, g_trial);
            if res_trial.is_finite() && res_trial < res {
                z.copy_from_slice(z_trial);
                g.copy_from_slice(g_trial);
                res = res_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if d == 1 {
                z[0] = bisect_1d(problem, theta_tau, rhs[0], z[0], tol_abs, &mut iters)?;
                res = residual(problem, z, theta_tau, rhs, b, g);
                if res <= tol_abs {
                    diag.absorb_solve(iters, res);
                    return Ok(());
                }
            }
            return Err(Error::NonConvergence {
                iters,
                residual: res,
            });
        }
        if res <= tol_abs {
            diag.absorb_solve(iters, res);
            return Ok(());
        }
    }
    Err(Error::NonConvergence {
        iters,
        residual: res,
    })
}

/// Solves the implicit equation `z - theta_tau*b(z) = rhs`.
///
/// Returns `z` with `|z - theta_tau*b(z) - rhs| <= newton_tol*(1 + |rhs|)`.
pub fn implicit_solve(
    problem: &Problem,
    rhs: &[f64],
    theta_tau: f64,
    scheme: &SchemeSpec,
) -> Result<Vec<f64>> {
    if rhs.len() != problem.dim_state {
        return Err(Error::DimensionMismatch {
            context: "implicit_solve rhs".into(),
            expected: problem.dim_state,
            got: rhs.len(),
        });
    }
    if !(theta_tau >= 0.0 && theta_tau.is_finite()) {
        return Err(Error::invalid_parameter(
            "theta_tau",
            "must be finite and >= 0",
        ));
    }
    scheme.validate()?;
    let mut ws = Workspace::new(problem);
    let mut diag = Diagnostics::default();
    let mut z = vec![0.0; problem.dim_state];
    solve_monotone(
        problem,
        rhs,
        theta_tau,
        scheme,
        &mut z,
        &mut ws.b,
        &mut ws.g,
        &mut ws.g_trial,
        &mut ws.z_trial,
        &mut ws.step_dir,
        &mut ws.jac,
        &mut diag,
    )?;
    Ok(z)
}

/// One theta step, in place. `dw` is the Wiener increment of the interval
/// and `jump_sum` the compensated jump contribution evaluated at the
/// current state over the same interval.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_in_place(
    problem: &Problem,
    scheme: &SchemeSpec,
    tau: f64,
    state: &mut [f64],
    dw: &[f64],
    jump_sum: &[f64],
    ws: &mut Workspace,
    diag: &mut Diagnostics,
) -> Result<()> {
    let m = problem.dim_noise;
    // rhs = state + (1-theta) tau b(state) + sigma(state) dw + jump_sum.
    // The explicit drift term is skipped entirely at theta = 1, so a BEM
    // step never evaluates b at the left endpoint (and never forms 0 * inf
    // on wild states).
    if scheme.theta < 1.0 {
        (problem.drift)(state, &mut ws.b);
        let w = (1.0 - scheme.theta) * tau;
        for (rhs, (&s, &b)) in ws.rhs.iter_mut().zip(state.iter().zip(&ws.b)) {
            *rhs = s + w * b;
        }
    } else {
        ws.rhs.copy_from_slice(state);
    }
    (problem.diffusion)(state, &mut ws.sigma);
    for ((rhs, row), &js) in ws
        .rhs
        .iter_mut()
        .zip(ws.sigma.chunks_exact(m))
        .zip(jump_sum)
    {
        let mut acc = 0.0;
        for (&sig, &w) in row.iter().zip(dw) {
            acc += sig * w;
        }
        *rhs += acc + js;
    }
    let theta_tau = scheme.theta * tau;
    if theta_tau == 0.0 {
        if ws.rhs.iter().any(|v| !v.is_finite()) {
            state.copy_from_slice(&ws.rhs);
            return Err(Error::non_finite("explicit update"));
        }
        state.copy_from_slice(&ws.rhs);
        diag.absorb_solve(0, 0.0);
        return Ok(());
    }
    solve_monotone(
        problem,
        &ws.rhs,
        theta_tau,
        scheme,
        state,
        &mut ws.b,
        &mut ws.g,
        &mut ws.g_trial,
        &mut ws.z_trial,
        &mut ws.step_dir,
        &mut ws.jac,
        diag,
    )
}

/// One theta step from `state`: returns the next state.
pub fn stm_step(
    problem: &Problem,
    scheme: &SchemeSpec,
    tau: f64,
    state: &[f64],
    dw: &[f64],
    jump_sum: &[f64],
) -> Result<Vec<f64>> {
    scheme.validate()?;
    if state.len() != problem.dim_state || jump_sum.len() != problem.dim_state {
        return Err(Error::DimensionMismatch {
            context: "stm_step state".into(),
            expected: problem.dim_state,
            got: state.len().min(jump_sum.len()),
        });
    }
    if dw.len() != problem.dim_noise {
        return Err(Error::DimensionMismatch {
            context: "stm_step dw".into(),
            expected: problem.dim_noise,
            got: dw.len(),
        });
    }
    let mut ws = Workspace::new(problem);
    let mut diag = Diagnostics::default();
    let mut x = state.to_vec();
    step_in_place(problem, scheme, tau, &mut x, dw, jump_sum, &mut ws, &mut diag)?;
    Ok(x)
}

/// Ratio of chain step to skeleton step: the chain consumes `r` skeleton
/// increments per interval. Errors unless the grids nest.
pub(crate) fn increments_per_interval(grid: &GridSpec, noise: &PathNoise) -> Result<usize> {
    let sk = &noise.skeleton;
    if sk.horizon < grid.horizon * (1.0 - 1e-12) {
        return Err(Error::invalid_parameter(
            "noise",
            "skeleton horizon is shorter than the grid horizon",
        ));
    }
    let ratio = grid.tau() / sk.dt();
    let r = ratio.round();
    if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio {
        return Err(Error::invalid_parameter(
            "noise",
            "skeleton step does not divide the grid step",
        ));
    }
    let r = r as usize;
    if grid.steps * r > sk.steps() {
        return Err(Error::invalid_parameter(
            "noise",
            "skeleton has fewer increments than the grid requires",
        ));
    }
    Ok(r)
}

/// Sums skeleton increments `[lo, lo+len)` into `out` by recursive halving,
/// matching the dyadic refinement tree so that aggregation over refined
/// noise reproduces the coarse increments exactly.
pub(crate) fn aggregate_increments(incs: &[f64], dim: usize, lo: usize, len: usize, out: &mut [f64]) {
    debug_assert!(len >= 1);
    if len == 1 {
        out.copy_from_slice(&incs[lo * dim..(lo + 1) * dim]);
        return;
    }
    if len == 2 {
        for i in 0..dim {
            out[i] = incs[lo * dim + i] + incs[(lo + 1) * dim + i];
        }
        return;
    }
    let half = len / 2;
    let mut right_buf = [0.0; 16];
    debug_assert!(dim <= 16, "aggregation buffer sized for catalog dims");
    let right = &mut right_buf[..dim];
    aggregate_increments(incs, dim, lo, half, out);
    aggregate_increments(incs, dim, lo + half, len - half, right);
    for i in 0..dim {
        out[i] += right[i];
    }
}

pub(crate) fn check_chain_inputs(problem: &Problem, noise: &PathNoise, x0: &[f64]) -> Result<()> {
    if x0.len() != problem.dim_state {
        return Err(Error::DimensionMismatch {
            context: "initial state".into(),
            expected: problem.dim_state,
            got: x0.len(),
        });
    }
    if noise.skeleton.dim != problem.dim_noise {
        return Err(Error::DimensionMismatch {
            context: "skeleton noise dimension".into(),
            expected: problem.dim_noise,
            got: noise.skeleton.dim,
        });
    }
    if problem.has_jumps() && noise.events.count() > 0 && noise.events.mark_dim != problem.mark_dim
    {
        return Err(Error::DimensionMismatch {
            context: "jump mark dimension".into(),
            expected: problem.mark_dim,
            got: noise.events.mark_dim,
        });
    }
    Ok(())
}

/// Runs one chain over `grid`, consuming `noise`.
///
/// The skeleton may be finer than the grid (nested dyadic refinement);
/// increments are then aggregated per interval, exactly. Non-finite states
/// set the overflow flag and stop the chain; the endpoint stays at the last
/// finite state.
pub fn run_chain(
    problem: &Problem,
    scheme: &SchemeSpec,
    grid: &GridSpec,
    noise: &PathNoise,
    x0: &[f64],
    record_path: bool,
) -> Result<ChainResult> {
    scheme.validate()?;
    check_chain_inputs(problem, noise, x0)?;
    let r = increments_per_interval(grid, noise)?;
    let d = problem.dim_state;
    let mut ws = Workspace::new(problem);
    let mut diag = Diagnostics::default();
    let mut dw = vec![0.0; problem.dim_noise];
    let mut jump = vec![0.0; d];
    let mut prev = x0.to_vec();
    let mut x = x0.to_vec();
    let mut path = if record_path {
        let mut p = Vec::with_capacity((grid.steps + 1) * d);
        p.extend_from_slice(&x);
        Some(p)
    } else {
        None
    };
    for j in 0..grid.steps {
        let t0 = grid.time(j);
        let t1 = grid.time(j + 1);
        aggregate_increments(&noise.skeleton.increments, noise.skeleton.dim, j * r, r, &mut dw);
        jump.fill(0.0);
        if problem.has_jumps() {
            compensated_jump_sum(problem, &x, &noise.events, t0, t1, &mut jump, &mut ws.scratch);
        }
        prev.copy_from_slice(&x);
        match step_in_place(problem, scheme, tau_of(grid), &mut x, &dw, &jump, &mut ws, &mut diag)
        {
            Ok(()) if x.iter().all(|v| v.is_finite()) => {
                if let Some(p) = path.as_mut() {
                    p.extend_from_slice(&x);
                }
            }
            Ok(()) | Err(Error::NonFinite { .. }) => {
                diag.overflow = true;
                diag.overflow_step = Some(j);
                x.copy_from_slice(&prev);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ChainResult {
        endpoint: x,
        path,
        diagnostics: diag,
    })
}

fn tau_of(grid: &GridSpec) -> f64 {
    grid.tau()
}

/// Runs two chains from `x0` and `y0` under identical noise (synchronous
/// coupling) and records their squared distance at every node.
pub fn run_coupled_chain(
    problem: &Problem,
    scheme: &SchemeSpec,
    grid: &GridSpec,
    noise: &PathNoise,
    x0: &[f64],
    y0: &[f64],
) -> Result<CoupledResult> {
    scheme.validate()?;
    check_chain_inputs(problem, noise, x0)?;
    check_chain_inputs(problem, noise, y0)?;
    let r = increments_per_interval(grid, noise)?;
    let d = problem.dim_state;
    let mut ws = Workspace::new(problem);
    let mut diag_x = Diagnostics::default();
    let mut diag_y = Diagnostics::default();
    let mut dw = vec![0.0; problem.dim_noise];
    let mut jump = vec![0.0; d];
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    let mut sq_diff = Vec::with_capacity(grid.steps + 1);
    sq_diff.push(sq(&x, &y));
    let tau = grid.tau();
    for j in 0..grid.steps {
        let t0 = grid.time(j);
        let t1 = grid.time(j + 1);
        aggregate_increments(&noise.skeleton.increments, noise.skeleton.dim, j * r, r, &mut dw);
        let mut overflowed = false;
        for (state, diag) in [(&mut x, &mut diag_x), (&mut y, &mut diag_y)] {
            jump.fill(0.0);
            if problem.has_jumps() {
                compensated_jump_sum(
                    problem,
                    state,
                    &noise.events,
                    t0,
                    t1,
                    &mut jump,
                    &mut ws.scratch,
                );
            }
            let ok = match step_in_place(problem, scheme, tau, state, &dw, &jump, &mut ws, diag) {
                Ok(()) => state.iter().all(|v| v.is_finite()),
                Err(Error::NonFinite { .. }) => false,
                Err(e) => return Err(e),
            };
            if !ok {
                diag.overflow = true;
                diag.overflow_step = Some(j);
                overflowed = true;
            }
        }
        if overflowed {
            break;
        }
        sq_diff.push(sq(&x, &y));
    }
    let wrap = |endpoint: Vec<f64>, diagnostics: Diagnostics| ChainResult {
        endpoint,
        path: None,
        diagnostics,
    };
    Ok(CoupledResult {
        first: wrap(x, diag_x),
        second: wrap(y, diag_y),
        sq_diff,
    })
}
