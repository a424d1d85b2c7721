//! First-variation chains and Monte Carlo derivative estimates.
//!
//! The first variation `eta = D_x X(t) v` of the flow in the direction `v`
//! solves the linearized equation driven by the Jacobians of the
//! coefficients along the base path. It is discretized with the same theta
//! scheme as the base chain (so it inherits its stability; the implicit part
//! is a d-by-d linear solve against the already-computed next state), and
//! `E[Dphi(X_N) . eta_N]` estimates the derivative of the Kolmogorov
//! solution `u(t, x) = E[phi(X_t^x)]` in the direction `v`. On dissipative
//! problems this estimate decays exponentially in `t`, which is the
//! certified sensitivity property.

use crate::error::Error;
use crate::ergodicity::RateFit;
use crate::integrators::{
    aggregate_increments, check_chain_inputs, increments_per_interval, step_in_place, Diagnostics,
    SchemeSpec, Workspace,
};
use crate::model::Problem;
use crate::noise::{compensated_jump_sum, sample_path_noise, GridSpec, PathNoise};
use crate::stats::{fit_line, mean_stderr_from_sums, parallel_row_sums, solve_dense_inplace};
use crate::weakerr::TestFunctional;
use crate::Result;

/// One node of the coupled base/variation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationState {
    /// Base chain state `X_n`.
    pub base: Vec<f64>,
    /// First variation `eta_n` in the requested direction.
    pub eta: Vec<f64>,
}

/// Validates the structural requirements of the variation scheme.
///
/// The base scheme must be strictly implicit (`theta` in `(1/2, 1]`) and the
/// problem must supply every Jacobian its coefficients need: the drift
/// Jacobian always, the jump Jacobian when jumps are present, and the
/// compensator Jacobian when a nonzero compensator is declared. A missing
/// `diffusion_jacobian` is read as state-independent diffusion.
pub fn validate_variation_inputs(problem: &Problem, scheme: &SchemeSpec) -> Result<()> {
    scheme.validate()?;
    if !(scheme.theta > 0.5) {
        return Err(Error::invalid_parameter(
            "theta",
            "first-variation chains require theta in (1/2, 1]",
        ));
    }
    if problem.drift_jacobian.is_none() {
        return Err(Error::Unsupported(
            "first-variation chain needs the drift jacobian".into(),
        ));
    }
    if problem.has_jumps() && problem.jump_jacobian.is_none() {
        return Err(Error::Unsupported(
            "first-variation chain needs the jump jacobian".into(),
        ));
    }
    if problem.has_jumps() && problem.compensator.is_some() && problem.compensator_jacobian.is_none()
    {
        return Err(Error::Unsupported(
            "first-variation chain needs the compensator jacobian".into(),
        ));
    }
    Ok(())
}

/// `out += scale * A x` for a row-major `d x d` matrix.
fn matvec_acc(a: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let mut acc = 0.0;
        for (j, xj) in x.iter().enumerate() {
            acc += a[i * d + j] * xj;
        }
        out[i] += scale * acc;
    }
}

/// Steps the base chain and its first variation in lockstep.
///
/// The base state follows the theta scheme; the variation solves
///
/// ```text
/// (I - theta tau Db(X_{n+1})) eta_{n+1} =
///     eta_n + (1-theta) tau Db(X_n) eta_n
///     + sum_j Dsigma_j(X_n) eta_n dW_j
///     + sum_{t_i in (t_n, t_{n+1}]} Dgamma(X_n, z_i) eta_n
///     - tau Dcompensator(X_n) eta_n
/// ```
///
/// with every explicit Jacobian frozen at the window's left endpoint,
/// matching how the coefficients enter the base scheme. If the base chain
/// overflows, the output is truncated at the last finite node.
pub fn coupled_variation_chain(
    problem: &Problem,
    scheme: &SchemeSpec,
    grid: &GridSpec,
    noise: &PathNoise,
    x0: &[f64],
    v: &[f64],
) -> Result<Vec<VariationState>> {
    validate_variation_inputs(problem, scheme)?;
    check_chain_inputs(problem, noise, x0)?;
    let d = problem.dim_state;
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            context: "coupled_variation_chain v".into(),
            expected: d,
            got: v.len(),
        });
    }
    let r = increments_per_interval(grid, noise)?;
    let m = problem.dim_noise;
    let tau = grid.tau();
    let theta = scheme.theta;
    let djac = problem.drift_jacobian.as_ref().expect("validated");

    let mut ws = Workspace::new(problem);
    let mut diag = Diagnostics::default();
    let mut dw = vec![0.0; m];
    let mut jump = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut jac2 = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];

    let mut x = x0.to_vec();
    let mut eta = v.to_vec();
    let mut out = Vec::with_capacity(grid.steps + 1);
    out.push(VariationState {
        base: x.clone(),
        eta: eta.clone(),
    });
    for j in 0..grid.steps {
        let t0 = grid.time(j);
        let t1 = grid.time(j + 1);
        aggregate_increments(&noise.skeleton.increments, noise.skeleton.dim, j * r, r, &mut dw);
        jump.fill(0.0);
        if problem.has_jumps() {
            compensated_jump_sum(problem, &x, &noise.events, t0, t1, &mut jump, &mut scratch);
        }

        // Explicit part of the variation update, at the left endpoint X_n.
        rhs.copy_from_slice(&eta);
        djac(&x, &mut jac);
        if theta < 1.0 {
            matvec_acc(&jac, &eta, (1.0 - theta) * tau, &mut rhs);
        }
        if let Some(dsig) = &problem.diffusion_jacobian {
            for (jn, &dwj) in dw.iter().enumerate() {
                dsig(&x, jn, &mut jac2);
                matvec_acc(&jac2, &eta, dwj, &mut rhs);
            }
        }
        if problem.has_jumps() {
            let times = &noise.events.times;
            let lo = times.partition_point(|&t| t <= t0);
            let hi = times.partition_point(|&t| t <= t1);
            let dgam = problem.jump_jacobian.as_ref().expect("validated");
            for i in lo..hi {
                dgam(&x, noise.events.mark(i), &mut jac2);
                matvec_acc(&jac2, &eta, 1.0, &mut rhs);
            }
            if problem.compensator.is_some() {
                let dcomp = problem.compensator_jacobian.as_ref().expect("validated");
                dcomp(&x, &mut jac2);
                matvec_acc(&jac2, &eta, -(t1 - t0), &mut rhs);
            }
        }

        // Base step, then the implicit variation solve at X_{n+1}.
        match step_in_place(problem, scheme, tau, &mut x, &dw, &jump, &mut ws, &mut diag) {
            Ok(()) if x.iter().all(|v| v.is_finite()) => {}
            Ok(()) | Err(Error::NonFinite { .. }) => break,
            Err(e) => return Err(e),
        }
        djac(&x, &mut jac);
        let w = theta * tau;
        for (i, ai) in a.chunks_exact_mut(d).enumerate() {
            for (k, av) in ai.iter_mut().enumerate() {
                *av = if i == k { 1.0 } else { 0.0 } - w * jac[i * d + k];
            }
        }
        solve_dense_inplace(&mut a, &mut rhs, d)?;
        if rhs.iter().any(|e| !e.is_finite()) {
            return Err(Error::non_finite("first-variation solve"));
        }
        eta.copy_from_slice(&rhs);
        out.push(VariationState {
            base: x.clone(),
            eta: eta.clone(),
        });
    }
    Ok(out)
}

fn steps_on(horizon: f64, tau: f64, name: &'static str) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite() && horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid_parameter(name, "horizon and tau must be finite and > 0"));
    }
    let steps = (horizon / tau).round();
    if steps < 1.0 || (steps * tau - horizon).abs() > 1e-9 * horizon {
        return Err(Error::invalid_parameter(
            name,
            format!("{horizon} is not a whole number of steps of size {tau}"),
        ));
    }
    Ok(steps as usize)
}

/// Monte Carlo estimate of `Du(t, x0) v = E[Dphi(X_t^{x0}) . eta_t]`,
/// returned as `(estimate, stderr)`.
///
/// `t = 0` returns `Dphi(x0) . v` without simulation; otherwise `t` must be
/// a whole number of steps of size `tau`. Paths whose base chain overflows
/// are dropped from the average.
#[allow(clippy::too_many_arguments)]
pub fn du_monte_carlo(
    problem: &Problem,
    scheme: &SchemeSpec,
    functional: &TestFunctional,
    t: f64,
    x0: &[f64],
    v: &[f64],
    tau: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    validate_variation_inputs(problem, scheme)?;
    let d = problem.dim_state;
    if x0.len() != d || v.len() != d {
        return Err(Error::DimensionMismatch {
            context: "du_monte_carlo x0/v".into(),
            expected: d,
            got: x0.len().min(v.len()),
        });
    }
    if t == 0.0 {
        let mut grad = vec![0.0; d];
        functional.gradient_into(x0, &mut grad);
        let du = grad.iter().zip(v).map(|(g, vi)| g * vi).sum();
        return Ok((du, 0.0));
    }
    let decay = du_decay(problem, scheme, functional, &[t], x0, v, tau, n_paths, seed)?;
    let p = &decay.points[0];
    Ok((p.estimate, p.stderr))
}

/// One horizon of a sensitivity-decay campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuPoint {
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// `Du(t, x0) v` over several horizons, with a fitted exponential rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DuDecay {
    pub points: Vec<DuPoint>,
    /// Exponential decay rate of `|Du|` (positive means decay); `None` when
    /// fewer than two horizons carry signal above twice their noise.
    pub rate: Option<RateFit>,
    /// Paths dropped because the base chain overflowed.
    pub overflow_count: usize,
}

/// Estimates `Du(t_i, x0) v` at every requested horizon from one chain per
/// path run to the largest horizon, evaluating `Dphi(X) . eta` at the
/// intermediate nodes. Horizons must be strictly increasing multiples of
/// `tau`. The decay rate is fitted on `log |Du|` against `t` over the points
/// whose estimate exceeds twice its standard error.
#[allow(clippy::too_many_arguments)]
pub fn du_decay(
    problem: &Problem,
    scheme: &SchemeSpec,
    functional: &TestFunctional,
    horizons: &[f64],
    x0: &[f64],
    v: &[f64],
    tau: f64,
    n_paths: usize,
    seed: u64,
) -> Result<DuDecay> {
    validate_variation_inputs(problem, scheme)?;
    if horizons.is_empty() {
        return Err(Error::invalid_parameter("horizons", "must be non-empty"));
    }
    if horizons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid_parameter(
            "horizons",
            "must be strictly increasing",
        ));
    }
    if n_paths == 0 {
        return Err(Error::invalid_parameter("n_paths", "must be >= 1"));
    }
    let nodes: Vec<usize> = horizons
        .iter()
        .map(|&t| steps_on(t, tau, "horizons"))
        .collect::<Result<_>>()?;
    let total_steps = nodes[nodes.len() - 1];
    let grid = GridSpec::new(horizons[horizons.len() - 1], total_steps)?;
    let m = horizons.len();
    let d = problem.dim_state;
    // Row: per horizon (sum, sum of squares), then an alive indicator.
    let width = 2 * m + 1;
    let sums = parallel_row_sums(n_paths, width, || vec![0.0; d], |grad, path, row| {
        let noise = sample_path_noise(problem, &grid, seed, path as u64);
        let chain = match coupled_variation_chain(problem, scheme, &grid, &noise, x0, v) {
            Ok(c) => c,
            Err(_) => return,
        };
        if chain.len() != total_steps + 1 {
            return; // overflowed: drop the path
        }
        for (k, &node) in nodes.iter().enumerate() {
            let state = &chain[node];
            functional.gradient_into(&state.base, grad);
            let du: f64 = grad.iter().zip(&state.eta).map(|(g, e)| g * e).sum();
            row[2 * k] = du;
            row[2 * k + 1] = du * du;
        }
        row[2 * m] = 1.0;
    });
    let alive = sums[2 * m].round() as usize;
    if alive == 0 {
        return Err(Error::InsufficientData {
            context: "sensitivity paths (overflow-free)".into(),
            needed: 1,
            got: 0,
        });
    }
    let points: Vec<DuPoint> = (0..m)
        .map(|k| {
            let (est, se) = mean_stderr_from_sums(sums[2 * k], sums[2 * k + 1], alive);
            DuPoint {
                t: horizons[k],
                estimate: est,
                stderr: se,
            }
        })
        .collect();
    let usable: Vec<&DuPoint> = points
        .iter()
        .filter(|p| p.estimate.abs() > 2.0 * p.stderr && p.estimate != 0.0)
        .collect();
    let rate = if usable.len() >= 2 {
        let ts: Vec<f64> = usable.iter().map(|p| p.t).collect();
        let ys: Vec<f64> = usable.iter().map(|p| p.estimate.abs().ln()).collect();
        fit_line(&ts, &ys, None).ok().map(|fit| RateFit {
            rate: -fit.slope,
            stderr: fit.slope_stderr,
            r2: fit.r2,
            n_used: usable.len(),
        })
    } else {
        None
    };
    Ok(DuDecay {
        points,
        rate,
        overflow_count: n_paths - alive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::run_chain;
    use crate::model::builtin_problem;
    use std::collections::BTreeMap;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn problem(name: &str, kv: &[(&str, f64)]) -> Problem {
        builtin_problem(name, &params(kv)).unwrap()
    }

    #[test]
    fn linear_variation_matches_closed_form() {
        // eta_{n+1} = eta_n (1 - (1-theta) a tau) / (1 + theta a tau); at
        // theta = 1 this is v / (1 + a tau)^n.
        let p = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        let tau = 0.1;
        let grid = GridSpec::new(2.0, 20).unwrap();
        for &theta in &[0.75, 1.0] {
            let scheme = SchemeSpec::new(theta).unwrap();
            let noise = sample_path_noise(&p, &grid, 42, 0);
            let chain = coupled_variation_chain(&p, &scheme, &grid, &noise, &[1.3], &[2.0]).unwrap();
            let factor = (1.0 - (1.0 - theta) * tau) / (1.0 + theta * tau);
            for (n, st) in chain.iter().enumerate() {
                let exact = 2.0 * factor.powi(n as i32);
                assert!(
                    (st.eta[0] - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                    "theta={theta} n={n}: {} vs {exact}",
                    st.eta[0]
                );
            }
            // The variation of a linear problem is noise-independent.
            let other = sample_path_noise(&p, &grid, 4242, 0);
            let chain2 =
                coupled_variation_chain(&p, &scheme, &grid, &other, &[1.3], &[2.0]).unwrap();
            for (a, b) in chain.iter().zip(&chain2) {
                assert_eq!(a.eta[0].to_bits(), b.eta[0].to_bits());
            }
        }
    }

    #[test]
    fn zero_direction_stays_exactly_zero() {
        let p = problem("cubic_dissipative", &[("s", 0.5), ("c", 0.5), ("lambda", 2.0)]);
        let grid = GridSpec::new(1.0, 20).unwrap();
        let noise = sample_path_noise(&p, &grid, 9, 3);
        let chain = coupled_variation_chain(
            &p,
            &SchemeSpec::new(0.8).unwrap(),
            &grid,
            &noise,
            &[0.4],
            &[0.0],
        )
        .unwrap();
        assert_eq!(chain.len(), 21);
        assert!(chain.iter().all(|st| st.eta[0] == 0.0));
    }

    #[test]
    fn variation_is_linear_in_direction_bitwise() {
        // Doubling v doubles eta exactly: every operation on eta is linear
        // and scaling by a power of two is exact in floating point.
        let cases = [
            problem("ou_jump", &[("a", 1.0), ("s", 1.0), ("c", 0.5), ("lambda", 1.0)]),
            problem("cubic_dissipative", &[("s", 0.5), ("c", 0.5), ("lambda", 2.0)]),
            problem("double_well", &[("s", 0.4)]),
        ];
        let grid = GridSpec::new(1.0, 25).unwrap();
        for p in &cases {
            for &theta in &[0.6, 1.0] {
                let scheme = SchemeSpec::new(theta).unwrap();
                let noise = sample_path_noise(p, &grid, 17, 1);
                let one =
                    coupled_variation_chain(p, &scheme, &grid, &noise, &[0.3], &[0.7]).unwrap();
                let two =
                    coupled_variation_chain(p, &scheme, &grid, &noise, &[0.3], &[1.4]).unwrap();
                assert_eq!(one.len(), two.len());
                for (a, b) in one.iter().zip(&two) {
                    assert_eq!(a.base[0].to_bits(), b.base[0].to_bits());
                    assert_eq!((2.0 * a.eta[0]).to_bits(), b.eta[0].to_bits());
                }
            }
        }
    }

    #[test]
    fn finite_difference_oracle_along_the_whole_chain() {
        // (X(x0 + eps v) - X(x0)) / eps under shared noise approximates eta
        // at every node, not just the endpoint.
        let p = problem("cubic_dissipative", &[("s", 0.5), ("c", 0.5), ("lambda", 2.0)]);
        let scheme = SchemeSpec::bem();
        let grid = GridSpec::new(1.0, 20).unwrap();
        let eps = 1e-5;
        for path in 0..5u64 {
            let noise = sample_path_noise(&p, &grid, 31, path);
            let chain =
                coupled_variation_chain(&p, &scheme, &grid, &noise, &[0.3], &[1.0]).unwrap();
            let lo = run_chain(&p, &scheme, &grid, &noise, &[0.3], true).unwrap();
            let hi = run_chain(&p, &scheme, &grid, &noise, &[0.3 + eps], true).unwrap();
            let (lo, hi) = (lo.path.unwrap(), hi.path.unwrap());
            for (n, st) in chain.iter().enumerate() {
                let fd = (hi[n] - lo[n]) / eps;
                assert!(
                    (fd - st.eta[0]).abs() <= 1e-3 * st.eta[0].abs() + 1e-6,
                    "path {path} node {n}: fd {fd} vs eta {}",
                    st.eta[0]
                );
            }
        }
    }

    #[test]
    fn du_linear_closed_form_and_first_order_bias() {
        let p = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        let v = 0.8;
        let du_at = |tau: f64| {
            du_monte_carlo(
                &p,
                &SchemeSpec::bem(),
                &TestFunctional::coordinate(),
                1.0,
                &[0.5],
                &[v],
                tau,
                64,
                3,
            )
            .unwrap()
        };
        let (est, se) = du_at(0.1);
        let exact = v / 1.1_f64.powi(10);
        assert!((est - exact).abs() <= 1e-12, "{est} vs {exact}");
        assert_eq!(se, 0.0, "deterministic variation has zero spread");
        // The discretization bias against e^{-at} v is first order in tau.
        let truth = (-1.0_f64).exp() * v;
        let d1 = (du_at(0.1).0 - truth).abs();
        let d2 = (du_at(0.05).0 - truth).abs();
        assert!(d1 < 0.05 && d2 < d1);
        let ratio = d1 / d2;
        assert!((1.8..=2.3).contains(&ratio), "bias ratio {ratio}");
    }

    #[test]
    fn du_at_time_zero_is_the_directional_gradient() {
        let p = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        let f = TestFunctional::cos(2.0);
        let (du, se) = du_monte_carlo(
            &p, &SchemeSpec::bem(), &f, 0.0, &[0.7], &[1.5], 0.1, 10, 0,
        )
        .unwrap();
        assert_eq!(se, 0.0);
        let expect = -2.0 * (2.0 * 0.7_f64).sin() * 1.5;
        assert!((du - expect).abs() <= 1e-15);
    }

    #[test]
    fn sensitivity_decays_exponentially_on_dissipative_problem() {
        let p = problem("cubic_dissipative", &[("s", 0.5)]);
        let decay = du_decay(
            &p,
            &SchemeSpec::bem(),
            &TestFunctional::tanh(1.0),
            &[1.0, 2.0, 4.0, 8.0],
            &[0.3],
            &[1.0],
            0.05,
            20_000,
            71,
        )
        .unwrap();
        assert_eq!(decay.points.len(), 4);
        assert_eq!(decay.overflow_count, 0);
        for w in decay.points.windows(2) {
            assert!(
                w[1].estimate.abs() < w[0].estimate.abs(),
                "|Du| not decreasing: {w:?}"
            );
        }
        let rate = decay.rate.expect("signal at every horizon");
        assert_eq!(rate.n_used, 4);
        assert!(
            rate.rate - 2.0 * rate.stderr > 0.0,
            "decay rate {} +- {} not positive at 2 sigma",
            rate.rate,
            rate.stderr
        );
    }

    #[test]
    fn variation_preconditions_are_enforced() {
        let p = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        let grid = GridSpec::new(1.0, 10).unwrap();
        let noise = sample_path_noise(&p, &grid, 0, 0);
        // Midpoint and explicit schemes are rejected.
        for theta in [0.0, 0.5] {
            let err = coupled_variation_chain(
                &p,
                &SchemeSpec::new(theta).unwrap(),
                &grid,
                &noise,
                &[0.0],
                &[1.0],
            );
            assert!(matches!(err, Err(Error::InvalidParameter { .. })));
        }
        // Missing drift jacobian.
        let mut broken = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        broken.drift_jacobian = None;
        assert!(matches!(
            coupled_variation_chain(&broken, &SchemeSpec::bem(), &grid, &noise, &[0.0], &[1.0]),
            Err(Error::Unsupported(_))
        ));
        // Missing jump jacobian on a jump problem.
        let mut no_jj = problem("ou_jump", &[("a", 1.0), ("s", 1.0), ("c", 0.5), ("lambda", 1.0)]);
        no_jj.jump_jacobian = None;
        let jn = sample_path_noise(&no_jj, &grid, 0, 0);
        assert!(matches!(
            coupled_variation_chain(&no_jj, &SchemeSpec::bem(), &grid, &jn, &[0.0], &[1.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn du_decay_rejects_bad_horizons() {
        let p = problem("ou", &[("a", 1.0), ("s", 0.5)]);
        let f = TestFunctional::coordinate();
        let bem = SchemeSpec::bem();
        assert!(du_decay(&p, &bem, &f, &[], &[0.0], &[1.0], 0.1, 10, 0).is_err());
        assert!(du_decay(&p, &bem, &f, &[2.0, 1.0], &[0.0], &[1.0], 0.1, 10, 0).is_err());
        assert!(du_decay(&p, &bem, &f, &[1.05], &[0.0], &[1.0], 0.1, 10, 0).is_err());
    }
}
