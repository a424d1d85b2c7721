//! Problem definitions, assumption certificates, and step-size checks.
//!
//! A [`Problem`] packages the coefficients of the jump-diffusion SDE
//!
//! ```text
//! dX = b(X) dt + sigma(X) dW + integral_Z gamma(X, z) Ntilde(dt, dz)
//! ```
//!
//! together with an [`AssumptionCertificate`]: the structural constants the
//! integrators and estimators rely on. Certificates for catalog problems are
//! sharp closed-form values; [`check_assumptions_sampled`] probes them
//! numerically on random point pairs as an independent audit.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Error;
use crate::rng::{self, Purpose, Stream};
use crate::Result;

/// Vector field `x -> out` with `out.len() == dim_state`.
pub type StateFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Matrix field `x -> out` (row-major).
pub type MatrixFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Jump coefficient `(x, z) -> out` with `out.len() == dim_state`.
pub type JumpFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Jump Jacobian in the state argument `(x, z) -> out` (`dim_state^2`, row-major).
pub type JumpJacobianFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Diffusion Jacobian: `(x, noise column j) -> out` (`dim_state^2`, row-major).
pub type DiffusionJacobianFn = Box<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;
/// Draws one mark vector into `out` (`out.len() == mark_dim`).
pub type MarkSampler = Box<dyn Fn(&mut Stream, &mut [f64]) + Send + Sync>;
/// Scalar field of one state.
pub type StateScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Scalar field of a state pair.
pub type PairScalarFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Structural constants certified for a problem.
///
/// Each constant is the (preferably sharp) coefficient of one inequality,
/// understood to hold for all states `x, y` with `D = x - y`,
/// `J2(x,y) = integral |gamma(x,z)-gamma(y,z)|^2 nu(dz)` and
/// `J2(x) = integral |gamma(x,z)|^2 nu(dz)`:
///
/// - `l1`:      `2<D, b(x)-b(y)> + |sigma(x)-sigma(y)|^2 + J2(x,y) <= l1 |D|^2`
/// - `l2, l3`:  `2<x, b(x)> + |sigma(x)|^2 + J2(x) <= l2 - l3 |x|^2`
/// - `l1_star`: same left side as `l1` but `<= -l1_star |D|^2`
/// - `l4`:      `<D, b(x)-b(y)> <= l4 |D|^2`
/// - `l4_star`: `<D, b(x)-b(y)> <= -l4_star |D|^2`
/// - `l5`:      `|sigma(x)-sigma(y)|^2 + J2(x,y) <= l5 |D|^2`
/// - `l6`:      `|sigma(x)|^2 + J2(x) <= l6 (1 + |x|^2)`
/// - `l8, l9`:  `<x, b(x)> <= l8 - l9 |x|^2`
/// - `q`:       polynomial-derivative growth exponent of the data, `q >= 3`
/// - `p`:       moment order targeted by the certificate (`E|X|^{2p}`)
///
/// Matrix norms are Hilbert-Schmidt. `l3`, `l1_star`, `l4_star`, and `l9`
/// must be strictly positive when present; `l5` and `l6` may be zero
/// (constant noise coefficients attain exactly zero).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssumptionCertificate {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub l1_star: Option<f64>,
    pub l4: Option<f64>,
    pub l4_star: Option<f64>,
    pub l5: Option<f64>,
    pub l6: Option<f64>,
    pub l8: Option<f64>,
    pub l9: Option<f64>,
    pub q: Option<f64>,
    pub p: Option<u32>,
}

impl AssumptionCertificate {
    /// Validates sign and range constraints on the declared constants.
    pub fn validate(&self) -> Result<()> {
        let strictly_positive = [
            ("l3", self.l3),
            ("l1_star", self.l1_star),
            ("l4_star", self.l4_star),
            ("l9", self.l9),
        ];
        for (name, v) in strictly_positive {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::invalid_parameter(name, "must be finite and > 0"));
                }
            }
        }
        let non_negative = [("l2", self.l2), ("l5", self.l5), ("l6", self.l6), ("l8", self.l8)];
        for (name, v) in non_negative {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid_parameter(name, "must be finite and >= 0"));
                }
            }
        }
        for (name, v) in [("l1", self.l1), ("l4", self.l4)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::invalid_parameter(name, "must be finite"));
                }
            }
        }
        if let Some(q) = self.q {
            if !(q.is_finite() && q >= 3.0) {
                return Err(Error::invalid_parameter("q", "must be finite and >= 3"));
            }
        }
        if let Some(p) = self.p {
            if p < 1 {
                return Err(Error::invalid_parameter("p", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Uniform-in-time moment flag for the exact flow and the implicit chain
    /// at order `2p`: requires `2 l4_star > (2p - 1) l5`.
    pub fn uniform_moments_ok_for(&self, p: u32) -> Option<bool> {
        let (l4s, l5) = (self.l4_star?, self.l5?);
        Some(2.0 * l4s > (2.0 * p as f64 - 1.0) * l5)
    }

    /// Uniform-in-time moment flag at the certificate's own `p`.
    pub fn uniform_moments_ok(&self) -> Option<bool> {
        self.uniform_moments_ok_for(self.p?)
    }

    /// Uniform backward-Euler moment flag at order `2p`:
    /// requires `2 l9 > (2p - 1) l6`.
    pub fn uniform_bem_ok_for(&self, p: u32) -> Option<bool> {
        let (l9, l6) = (self.l9?, self.l6?);
        Some(2.0 * l9 > (2.0 * p as f64 - 1.0) * l6)
    }

    /// Uniform backward-Euler moment flag at the certificate's own `p`.
    pub fn uniform_bem_ok(&self) -> Option<bool> {
        self.uniform_bem_ok_for(self.p?)
    }
}

/// Coefficients, dimensions, and certificate of one SDE.
///
/// Jump-free problems have `intensity == 0` and `jump_coeff == None`.
/// `compensator == None` means the compensator term is identically zero
/// (centred marks). Optional Jacobians enable Newton solves and
/// first-variation chains; estimators fall back to derivative-free paths
/// when they are absent.
pub struct Problem {
    pub name: String,
    /// Resolved parameter set (defaults filled in), for manifests.
    pub params: BTreeMap<String, f64>,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub mark_dim: usize,
    /// Jump intensity `lambda >= 0` of the driving Poisson measure.
    pub intensity: f64,
    pub drift: StateFn,
    pub drift_jacobian: Option<MatrixFn>,
    pub diffusion: MatrixFn,
    pub diffusion_jacobian: Option<DiffusionJacobianFn>,
    pub jump_coeff: Option<JumpFn>,
    pub jump_jacobian: Option<JumpJacobianFn>,
    pub mark_sampler: Option<MarkSampler>,
    /// `x -> lambda * E_z[ gamma(x, z) ]`; `None` means identically zero.
    pub compensator: Option<StateFn>,
    pub compensator_jacobian: Option<MatrixFn>,
    /// Closed form of `integral |gamma(x,z)|^2 nu(dz)`, when available.
    pub jump_square_integral: Option<StateScalarFn>,
    /// Closed form of `integral |gamma(x,z)-gamma(y,z)|^2 nu(dz)`, when available.
    pub jump_square_diff: Option<PairScalarFn>,
    pub certificate: AssumptionCertificate,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("intensity", &self.intensity)
            .field("certificate", &self.certificate)
            .finish()
    }
}

impl Problem {
    /// Evaluates the drift into a freshly allocated vector (test convenience).
    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        (self.drift)(x, &mut out);
        out
    }

    /// Linear problem parameters when this is an `ou` / `ou_jump` instance.
    pub fn linear_params(&self) -> Option<LinearParams> {
        if self.name == "ou" || self.name == "ou_jump" {
            Some(LinearParams {
                a: self.params["a"],
                s: self.params["s"],
                c: *self.params.get("c").unwrap_or(&0.0),
                lambda: self.intensity,
            })
        } else {
            None
        }
    }

    pub fn has_jumps(&self) -> bool {
        self.intensity > 0.0 && self.jump_coeff.is_some()
    }
}

/// Parameters of the linear (Ornstein-Uhlenbeck type) catalog problems,
/// `b(x) = -a x`, `sigma = s`, `gamma(x,z) = c z` at intensity `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub a: f64,
    pub s: f64,
    pub c: f64,
    pub lambda: f64,
}

/// Outcome of one step-size condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionStatus {
    Pass,
    Fail,
    /// A constant the condition needs is absent from the certificate.
    NotCheckable,
    /// The scheme parameter is outside the regime the condition speaks about
    /// (explicit baselines with `theta < 1/2`).
    NotApplicable,
}

impl ConditionStatus {
    pub fn is_blocking(self) -> bool {
        self == ConditionStatus::Fail
    }
}

/// One step-size condition with its evaluated sides.
#[derive(Debug, Clone)]
pub struct ConditionCheck {
    pub name: &'static str,
    /// Left-hand side value, when computable.
    pub lhs: Option<f64>,
    /// Upper bound the left side is compared against.
    pub threshold: f64,
    /// Whether the comparison is strict (`<`) or non-strict (`<=`).
    pub strict: bool,
    pub status: ConditionStatus,
}

/// Step-size admissibility report for a `(theta, tau)` pair.
#[derive(Debug, Clone)]
pub struct StepSizeReport {
    pub theta: f64,
    pub tau: f64,
    pub conditions: Vec<ConditionCheck>,
}

impl StepSizeReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn status(&self, name: &str) -> ConditionStatus {
        self.condition(name).map(|c| c.status).unwrap_or(ConditionStatus::NotCheckable)
    }

    /// True when no condition failed (absent constants are not failures).
    pub fn admissible(&self) -> bool {
        self.conditions.iter().all(|c| !c.status.is_blocking())
    }

    /// True when `name` passed; `NotCheckable`/`NotApplicable` are not passes.
    pub fn passed(&self, name: &str) -> bool {
        self.status(name) == ConditionStatus::Pass
    }
}

impl fmt::Display for StepSizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "step-size report: theta = {}, tau = {}", self.theta, self.tau)?;
        for c in &self.conditions {
            let rel = if c.strict { "<" } else { "<=" };
            match (c.status, c.lhs) {
                (ConditionStatus::NotApplicable, _) => {
                    writeln!(f, "  {:<16} not applicable at theta = {}", c.name, self.theta)?
                }
                (ConditionStatus::NotCheckable, _) => {
                    writeln!(f, "  {:<16} not checkable (certificate constant absent)", c.name)?
                }
                (st, Some(lhs)) => writeln!(
                    f,
                    "  {:<16} {:.6} {} {:.6}  [{}]",
                    c.name,
                    lhs,
                    rel,
                    c.threshold,
                    if st == ConditionStatus::Pass { "pass" } else { "FAIL" }
                )?,
                (_, None) => writeln!(f, "  {:<16} internal: missing lhs", c.name)?,
            }
        }
        Ok(())
    }
}

/// Evaluates every step-size condition the certified constants allow.
///
/// Conditions (left side built from certified constants):
/// - `well_posedness`: `l1 * theta * tau < 2` (implicit one-step map invertible)
/// - `feller`:         `l1 * theta * tau <= 1/2` (finite-horizon stability)
/// - `lyapunov`:       `theta > 1/2`: same left side as well-posedness, `< 2`;
///   `theta == 1/2`: `l1 * tau < 4` (weak drift form)
/// - `contraction`:    `l1_star * theta^2 * tau <= 3 - 2 theta`
///
/// `theta < 1/2` is admitted purely as an explicit baseline: every condition
/// is reported `NotApplicable` there. Errors: `theta` outside `[0, 1]` or
/// `tau` outside `(0, 1)`.
pub fn validate_step_size(
    cert: &AssumptionCertificate,
    theta: f64,
    tau: f64,
) -> Result<StepSizeReport> {
    if !(theta.is_finite() && (0.0..=1.0).contains(&theta)) {
        return Err(Error::invalid_parameter("theta", "must lie in [0, 1]"));
    }
    if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid_parameter("tau", "must lie in (0, 1)"));
    }
    cert.validate()?;

    let baseline = theta < 0.5;
    let mut conditions = Vec::new();
    let mut push = |name: &'static str, lhs: Option<f64>, threshold: f64, strict: bool| {
        let status = if baseline {
            ConditionStatus::NotApplicable
        } else {
            match lhs {
                None => ConditionStatus::NotCheckable,
                Some(v) => {
                    let ok = if strict { v < threshold } else { v <= threshold };
                    if ok {
                        ConditionStatus::Pass
                    } else {
                        ConditionStatus::Fail
                    }
                }
            }
        };
        conditions.push(ConditionCheck {
            name,
            lhs,
            threshold,
            strict,
            status,
        });
    };

    push("well_posedness", cert.l1.map(|l1| l1 * theta * tau), 2.0, true);
    push("feller", cert.l1.map(|l1| l1 * theta * tau), 0.5, false);
    if theta == 0.5 {
        push("lyapunov", cert.l1.map(|l1| l1 * tau), 4.0, true);
    } else {
        push("lyapunov", cert.l1.map(|l1| l1 * theta * tau), 2.0, true);
    }
    push(
        "contraction",
        cert.l1_star.map(|l1s| l1s * theta * theta * tau),
        3.0 - 2.0 * theta,
        false,
    );

    Ok(StepSizeReport {
        theta,
        tau,
        conditions,
    })
}

fn take_params(
    params: &BTreeMap<String, f64>,
    allowed: &[(&str, f64)],
) -> Result<BTreeMap<String, f64>> {
    for key in params.keys() {
        if !allowed.iter().any(|(k, _)| k == key) {
            return Err(Error::invalid_parameter(
                key.clone(),
                "unknown parameter for this problem",
            ));
        }
    }
    let mut out = BTreeMap::new();
    for (key, default) in allowed {
        let v = *params.get(*key).unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::invalid_parameter(*key, "must be finite"));
        }
        out.insert((*key).to_string(), v);
    }
    Ok(out)
}

fn dim_from(params: &BTreeMap<String, f64>) -> Result<usize> {
    let d = params["dim"];
    if d.fract() != 0.0 || !(1.0..=64.0).contains(&d) {
        return Err(Error::invalid_parameter("dim", "must be an integer in [1, 64]"));
    }
    Ok(d as usize)
}

fn standard_normal_marks(dim: usize) -> MarkSampler {
    Box::new(move |stream, out| {
        debug_assert_eq!(out.len(), dim);
        rng::fill_standard_normal(stream, out);
    })
}

/// Additive scaled jumps `gamma(x, z) = c z` with standard normal marks:
/// state-independent, centred, so the compensator vanishes and the
/// Lipschitz-type jump integrals are exactly zero.
fn attach_scaled_normal_jumps(problem: &mut Problem, c: f64, lambda: f64) {
    let dim = problem.dim_state;
    problem.mark_dim = dim;
    problem.intensity = lambda;
    problem.jump_coeff = Some(Box::new(move |_x, z, out| {
        for (o, zi) in out.iter_mut().zip(z.iter()) {
            *o = c * zi;
        }
    }));
    // gamma is state-independent: zero Jacobian.
    problem.jump_jacobian = Some(Box::new(move |_x, _z, out| out.iter_mut().for_each(|v| *v = 0.0)));
    problem.mark_sampler = Some(standard_normal_marks(dim));
    problem.compensator = None;
    problem.compensator_jacobian = None;
    problem.jump_square_integral = Some(Box::new(move |_x| lambda * c * c * dim as f64));
    problem.jump_square_diff = Some(Box::new(|_x, _y| 0.0));
}

fn linear_drift_problem(
    name: &str,
    params: BTreeMap<String, f64>,
    a: f64,
    s: f64,
    dim: usize,
) -> Problem {
    Problem {
        name: name.to_string(),
        params,
        dim_state: dim,
        dim_noise: dim,
        mark_dim: 0,
        intensity: 0.0,
        drift: Box::new(move |x, out| {
            for (o, xi) in out.iter_mut().zip(x.iter()) {
                *o = -a * xi;
            }
        }),
        drift_jacobian: Some(Box::new(move |_x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                out[i * dim + i] = -a;
            }
        })),
        diffusion: Box::new(move |_x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                out[i * dim + i] = s;
            }
        }),
        diffusion_jacobian: None,
        jump_coeff: None,
        jump_jacobian: None,
        mark_sampler: None,
        compensator: None,
        compensator_jacobian: None,
        jump_square_integral: None,
        jump_square_diff: None,
        certificate: AssumptionCertificate::default(),
    }
}

fn cubic_drift_problem(
    name: &str,
    params: BTreeMap<String, f64>,
    linear_sign: f64,
    s: f64,
    dim: usize,
) -> Problem {
    // drift component i: linear_sign * x_i - x_i^3
    Problem {
        name: name.to_string(),
        params,
        dim_state: dim,
        dim_noise: dim,
        mark_dim: 0,
        intensity: 0.0,
        drift: Box::new(move |x, out| {
            for (o, &xi) in out.iter_mut().zip(x.iter()) {
                *o = linear_sign * xi - xi * xi * xi;
            }
        }),
        drift_jacobian: Some(Box::new(move |x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                out[i * dim + i] = linear_sign - 3.0 * x[i] * x[i];
            }
        })),
        diffusion: Box::new(move |_x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                out[i * dim + i] = s;
            }
        }),
        diffusion_jacobian: None,
        jump_coeff: None,
        jump_jacobian: None,
        mark_sampler: None,
        compensator: None,
        compensator_jacobian: None,
        jump_square_integral: None,
        jump_square_diff: None,
        certificate: AssumptionCertificate::default(),
    }
}

/// Instantiates a catalog problem with sharp certified constants.
///
/// Names and parameters (defaults in parentheses):
/// - `"ou"`: `b = -a x`, `sigma = s I`; keys `a` (1), `s` (1), `dim` (1)
/// - `"ou_jump"`: `ou` plus jumps `gamma(x,z) = c z`, standard normal marks;
///   keys `a` (1), `s` (1), `c` (1), `lambda` (1), `dim` (1)
/// - `"cubic_dissipative"`: `b = -x - x^3` componentwise, `sigma = s I`,
///   optional jumps; keys `s` (0.5), `c` (0.5), `lambda` (0), `dim` (1)
/// - `"double_well"`: `b = x - x^3` componentwise, `sigma = s I`; keys
///   `s` (1), `dim` (1). Monotone but not dissipative: no contraction
///   constants are certified.
pub fn builtin_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<Problem> {
    match name {
        "ou" => {
            let p = take_params(params, &[("a", 1.0), ("s", 1.0), ("dim", 1.0)])?;
            let (a, s) = (p["a"], p["s"]);
            let dim = dim_from(&p)?;
            if a <= 0.0 {
                return Err(Error::invalid_parameter("a", "must be > 0"));
            }
            if s < 0.0 {
                return Err(Error::invalid_parameter("s", "must be >= 0"));
            }
            let d = dim as f64;
            let mut prob = linear_drift_problem("ou", p, a, s, dim);
            prob.certificate = AssumptionCertificate {
                l1: Some(-2.0 * a),
                l2: Some(s * s * d),
                l3: Some(2.0 * a),
                l1_star: Some(2.0 * a),
                l4: Some(-a),
                l4_star: Some(a),
                l5: Some(0.0),
                l6: Some(s * s * d),
                l8: Some(0.0),
                l9: Some(a),
                q: Some(3.0),
                p: Some(1),
            };
            Ok(prob)
        }
        "ou_jump" => {
            let p = take_params(
                params,
                &[("a", 1.0), ("s", 1.0), ("c", 1.0), ("lambda", 1.0), ("dim", 1.0)],
            )?;
            let (a, s, c, lambda) = (p["a"], p["s"], p["c"], p["lambda"]);
            let dim = dim_from(&p)?;
            if a <= 0.0 {
                return Err(Error::invalid_parameter("a", "must be > 0"));
            }
            if s < 0.0 {
                return Err(Error::invalid_parameter("s", "must be >= 0"));
            }
            if lambda <= 0.0 {
                return Err(Error::invalid_parameter("lambda", "must be > 0"));
            }
            let d = dim as f64;
            let noise2 = (s * s + c * c * lambda) * d;
            let mut prob = linear_drift_problem("ou_jump", p, a, s, dim);
            attach_scaled_normal_jumps(&mut prob, c, lambda);
            prob.certificate = AssumptionCertificate {
                l1: Some(-2.0 * a),
                l2: Some(noise2),
                l3: Some(2.0 * a),
                l1_star: Some(2.0 * a),
                l4: Some(-a),
                l4_star: Some(a),
                l5: Some(0.0),
                l6: Some(noise2),
                l8: Some(0.0),
                l9: Some(a),
                q: Some(3.0),
                p: Some(1),
            };
            Ok(prob)
        }
        "cubic_dissipative" => {
            let p = take_params(
                params,
                &[("s", 0.5), ("c", 0.5), ("lambda", 0.0), ("dim", 1.0)],
            )?;
            let (s, c, lambda) = (p["s"], p["c"], p["lambda"]);
            let dim = dim_from(&p)?;
            if s < 0.0 {
                return Err(Error::invalid_parameter("s", "must be >= 0"));
            }
            if lambda < 0.0 {
                return Err(Error::invalid_parameter("lambda", "must be >= 0"));
            }
            let d = dim as f64;
            let noise2 = (s * s + c * c * lambda) * d;
            let mut prob = cubic_drift_problem("cubic_dissipative", p, -1.0, s, dim);
            if lambda > 0.0 {
                attach_scaled_normal_jumps(&mut prob, c, lambda);
            }
            prob.certificate = AssumptionCertificate {
                l1: Some(-2.0),
                l2: Some(noise2),
                l3: Some(2.0),
                l1_star: Some(2.0),
                l4: Some(-1.0),
                l4_star: Some(1.0),
                l5: Some(0.0),
                l6: Some(noise2),
                l8: Some(0.0),
                l9: Some(1.0),
                q: Some(3.0),
                p: Some(1),
            };
            Ok(prob)
        }
        "double_well" => {
            let p = take_params(params, &[("s", 1.0), ("dim", 1.0)])?;
            let s = p["s"];
            let dim = dim_from(&p)?;
            if s < 0.0 {
                return Err(Error::invalid_parameter("s", "must be >= 0"));
            }
            let d = dim as f64;
            let mut prob = cubic_drift_problem("double_well", p, 1.0, s, dim);
            // <x, b(x)> = |x|^2 - sum x_i^4 <= |x|^2 - |x|^4/d; maximizing
            // 2r - r^2/d over r = |x|^2 gives l8 = d at l9 = 1, and the
            // coercive pair (l2, l3) follows the same envelope with l3 = 2.
            prob.certificate = AssumptionCertificate {
                l1: Some(2.0),
                l2: Some(s * s * d + 2.0 * d),
                l3: Some(2.0),
                l1_star: None,
                l4: Some(1.0),
                l4_star: None,
                l5: Some(0.0),
                l6: Some(s * s * d),
                l8: Some(d),
                l9: Some(1.0),
                q: Some(3.0),
                p: Some(1),
            };
            Ok(prob)
        }
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

/// One sampled assumption audit.
#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: &'static str,
    /// Maximum over samples of (left side) - (certified right side).
    pub worst_margin: f64,
    /// For pair-based drift checks: maximum of `<D, b(x)-b(y)> / |D|^2`.
    pub worst_ratio: Option<f64>,
    pub satisfied: bool,
}

/// Result of [`check_assumptions_sampled`].
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub n_pairs: usize,
    pub radius: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_satisfied(&self) -> bool {
        self.checks.iter().all(|c| c.satisfied)
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "sampled assumption audit: {} pairs in |x| <= {}",
            self.n_pairs, self.radius
        )?;
        for c in &self.checks {
            write!(f, "  {:<24} worst margin {:+.3e}", c.name, c.worst_margin)?;
            if let Some(r) = c.worst_ratio {
                write!(f, "  worst ratio {:+.6}", r)?;
            }
            writeln!(f, "  [{}]", if c.satisfied { "ok" } else { "VIOLATED" })?;
        }
        Ok(())
    }
}

/// Number of Monte Carlo marks used per sample point when a jump integral has
/// no closed form on the problem.
const MC_MARKS: usize = 256;

fn sample_in_ball(stream: &mut Stream, radius: f64, out: &mut [f64]) {
    // Isotropic direction times radius * U^{1/d}: uniform in the ball.
    rng::fill_standard_normal(stream, out);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let u: f64 = rand::Rng::random(stream);
    let r = radius * u.powf(1.0 / out.len() as f64);
    for v in out.iter_mut() {
        *v *= r / norm;
    }
}

fn hs_norm_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Monte Carlo fallback for `integral |gamma(x,z) - gamma(y,z)|^2 nu(dz)`
/// (pass `y = None` for the single-point integral).
fn jump_integral_mc(problem: &Problem, x: &[f64], y: Option<&[f64]>, stream: &mut Stream) -> f64 {
    let (Some(gamma), Some(marks)) = (&problem.jump_coeff, &problem.mark_sampler) else {
        return 0.0;
    };
    let d = problem.dim_state;
    let mut z = vec![0.0; problem.mark_dim];
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut acc = 0.0;
    for _ in 0..MC_MARKS {
        marks(stream, &mut z);
        gamma(x, &z, &mut gx);
        match y {
            Some(y) => {
                gamma(y, &z, &mut gy);
                acc += gx.iter().zip(gy.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            None => acc += hs_norm_sq(&gx),
        }
    }
    problem.intensity * acc / MC_MARKS as f64
}

/// Numerically audits every certified inequality on `n_pairs` random state
/// pairs drawn uniformly from the ball `|x| <= radius`.
///
/// For each declared constant the report records the worst observed
/// `left side - right side`; `satisfied` allows a relative rounding slack of
/// `1e-9 (1 + |lhs| + |rhs|)`. Jump integrals use the problem's closed forms
/// when present and an MC estimate over marks otherwise.
pub fn check_assumptions_sampled(
    problem: &Problem,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<AssumptionReport> {
    if n_pairs == 0 {
        return Err(Error::invalid_parameter("n_pairs", "must be >= 1"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid_parameter("radius", "must be finite and > 0"));
    }
    let cert = &problem.certificate;
    cert.validate()?;
    let d = problem.dim_state;
    let m = problem.dim_noise;

    struct Acc {
        name: &'static str,
        worst_margin: f64,
        worst_ratio: Option<f64>,
        worst_excess: f64,
        declared: bool,
    }
    let mut accs: Vec<Acc> = [
        "joint_monotonicity",
        "coercivity",
        "joint_dissipativity",
        "drift_one_sided_lipschitz",
        "drift_dissipativity",
        "noise_lipschitz",
        "noise_growth",
        "drift_coercivity",
    ]
    .iter()
    .map(|&name| Acc {
        name,
        worst_margin: f64::NEG_INFINITY,
        worst_ratio: None,
        worst_excess: f64::NEG_INFINITY,
        declared: true,
    })
    .collect();

    let declared = [
        cert.l1.is_some(),
        cert.l2.is_some() && cert.l3.is_some(),
        cert.l1_star.is_some(),
        cert.l4.is_some(),
        cert.l4_star.is_some(),
        cert.l5.is_some(),
        cert.l6.is_some(),
        cert.l8.is_some() && cert.l9.is_some(),
    ];
    for (acc, d) in accs.iter_mut().zip(declared) {
        acc.declared = d;
    }

    let mut stream = rng::stream(seed, 0, Purpose::Audit);
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut sx = vec![0.0; d * m];
    let mut sy = vec![0.0; d * m];
    let mut diff = vec![0.0; d];
    let mut sdiff = vec![0.0; d * m];

    for _ in 0..n_pairs {
        sample_in_ball(&mut stream, radius, &mut x);
        sample_in_ball(&mut stream, radius, &mut y);
        (problem.drift)(&x, &mut bx);
        (problem.drift)(&y, &mut by);
        (problem.diffusion)(&x, &mut sx);
        (problem.diffusion)(&y, &mut sy);
        for i in 0..d {
            diff[i] = x[i] - y[i];
        }
        for i in 0..d * m {
            sdiff[i] = sx[i] - sy[i];
        }
        let dd = hs_norm_sq(&diff);
        if dd < 1e-300 {
            continue;
        }
        let xx = hs_norm_sq(&x);
        let bdiff_dot = bx.iter().zip(by.iter()).zip(diff.iter()).map(|((a, b), d)| (a - b) * d).sum::<f64>();
        let xbx = dot(&x, &bx);
        let noise_diff_sq = hs_norm_sq(&sdiff)
            + match &problem.jump_square_diff {
                Some(f) => f(&x, &y),
                None if problem.has_jumps() => jump_integral_mc(problem, &x, Some(&y), &mut stream),
                None => 0.0,
            };
        let noise_sq = hs_norm_sq(&sx)
            + match &problem.jump_square_integral {
                Some(f) => f(&x),
                None if problem.has_jumps() => jump_integral_mc(problem, &x, None, &mut stream),
                None => 0.0,
            };

        let mut update = |idx: usize, lhs: f64, rhs: f64, ratio: Option<f64>| {
            let acc = &mut accs[idx];
            if !acc.declared {
                return;
            }
            let margin = lhs - rhs;
            if margin > acc.worst_margin {
                acc.worst_margin = margin;
            }
            let excess = margin - 1e-9 * (1.0 + lhs.abs() + rhs.abs());
            if excess > acc.worst_excess {
                acc.worst_excess = excess;
            }
            if let Some(r) = ratio {
                acc.worst_ratio = Some(acc.worst_ratio.map_or(r, |w: f64| w.max(r)));
            }
        };

        let ratio = bdiff_dot / dd;
        if let Some(l1) = cert.l1 {
            update(0, 2.0 * bdiff_dot + noise_diff_sq, l1 * dd, None);
        }
        if let (Some(l2), Some(l3)) = (cert.l2, cert.l3) {
            update(1, 2.0 * xbx + noise_sq, l2 - l3 * xx, None);
        }
        if let Some(l1s) = cert.l1_star {
            update(2, 2.0 * bdiff_dot + noise_diff_sq, -l1s * dd, None);
        }
        if let Some(l4) = cert.l4 {
            update(3, bdiff_dot, l4 * dd, Some(ratio));
        }
        if let Some(l4s) = cert.l4_star {
            update(4, bdiff_dot, -l4s * dd, Some(ratio));
        }
        if let Some(l5) = cert.l5 {
            update(5, noise_diff_sq, l5 * dd, None);
        }
        if let Some(l6) = cert.l6 {
            update(6, noise_sq, l6 * (1.0 + xx), None);
        }
        if let (Some(l8), Some(l9)) = (cert.l8, cert.l9) {
            update(7, xbx, l8 - l9 * xx, None);
        }
    }

    let checks = accs
        .into_iter()
        .filter(|a| a.declared)
        .map(|a| AssumptionCheck {
            name: a.name,
            worst_margin: a.worst_margin,
            worst_ratio: a.worst_ratio,
            satisfied: a.worst_excess <= 0.0,
        })
        .collect();
    Ok(AssumptionReport {
        n_pairs,
        radius,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ou_certificate_is_sharp_closed_form() {
        let p = builtin_problem("ou", &params(&[("a", 1.0), ("s", 0.0)])).unwrap();
        let c = &p.certificate;
        assert_eq!(c.l1_star, Some(2.0));
        assert_eq!(c.l4_star, Some(1.0));
        assert_eq!(c.l5, Some(0.0));
        assert_eq!(c.l9, Some(1.0));
        assert_eq!(c.l8, Some(0.0));
        assert_eq!(c.q, Some(3.0));
        assert_eq!(c.l2, Some(0.0));
        // drift value: b(2) = -2
        assert_abs_diff_eq!(p.drift_vec(&[2.0])[0], -2.0);
    }

    #[test]
    fn ou_jump_certificate_adds_jump_second_moment() {
        // a=1, s=sqrt(2), c=0.5, lambda=2: noise level 2 + 0.25*2 = 2.5.
        let p = builtin_problem(
            "ou_jump",
            &params(&[("a", 1.0), ("s", std::f64::consts::SQRT_2), ("c", 0.5), ("lambda", 2.0)]),
        )
        .unwrap();
        assert_abs_diff_eq!(p.certificate.l2.unwrap(), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.certificate.l6.unwrap(), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.jump_square_integral.as_ref().unwrap()(&[0.3]), 0.5, epsilon = 1e-15);
        assert_eq!(p.jump_square_diff.as_ref().unwrap()(&[1.0], &[2.0]), 0.0);
    }

    #[test]
    fn cubic_certificate_values() {
        let p = builtin_problem("cubic_dissipative", &params(&[("s", 1.0)])).unwrap();
        let c = &p.certificate;
        assert_eq!(c.l4_star, Some(1.0));
        assert_eq!(c.l9, Some(1.0));
        assert_eq!(c.l8, Some(0.0));
        assert_eq!(c.l1_star, Some(2.0));
        assert_eq!(c.l3, Some(2.0));
        assert_eq!(c.l2, Some(1.0));
        assert_eq!(c.q, Some(3.0));
        // b(2) = -2 - 8 = -10
        assert_abs_diff_eq!(p.drift_vec(&[2.0])[0], -10.0);
    }

    #[test]
    fn double_well_has_no_contraction_constants() {
        let p = builtin_problem("double_well", &BTreeMap::new()).unwrap();
        assert_eq!(p.certificate.l1_star, None);
        assert_eq!(p.certificate.l4_star, None);
        assert_eq!(p.certificate.l1, Some(2.0));
        assert_eq!(p.certificate.l4, Some(1.0));
        // b(2) = 2 - 8 = -6
        assert_abs_diff_eq!(p.drift_vec(&[2.0])[0], -6.0);
    }

    #[test]
    fn unknown_name_and_bad_params_are_rejected() {
        assert!(matches!(
            builtin_problem("nope", &BTreeMap::new()),
            Err(Error::UnknownProblem(_))
        ));
        assert!(builtin_problem("ou", &params(&[("a", -1.0)])).is_err());
        assert!(builtin_problem("ou", &params(&[("bogus", 1.0)])).is_err());
        assert!(builtin_problem("ou", &params(&[("dim", 2.5)])).is_err());
        assert!(builtin_problem("ou_jump", &params(&[("lambda", 0.0)])).is_err());
    }

    #[test]
    fn uniform_flags_follow_their_defining_inequalities() {
        let mut c = AssumptionCertificate {
            l4_star: Some(1.0),
            l5: Some(0.0),
            l9: Some(1.0),
            l6: Some(0.25),
            p: Some(2),
            ..Default::default()
        };
        // 2*1 > 3*0 and 2*1 > 3*0.25.
        assert_eq!(c.uniform_moments_ok(), Some(true));
        assert_eq!(c.uniform_bem_ok(), Some(true));
        c.l6 = Some(1.0); // 2 > 3 fails
        assert_eq!(c.uniform_bem_ok(), Some(false));
        assert_eq!(c.uniform_bem_ok_for(1), Some(true)); // 2 > 1
        c.l6 = None;
        assert_eq!(c.uniform_bem_ok(), None);
    }

    #[test]
    fn step_size_report_example_passes_all() {
        // l1 = 2, l1_star = 2, theta = 1, tau = 0.2:
        // well-posedness 0.4 < 2, feller 0.4 <= 0.5, lyapunov 0.4 < 2,
        // contraction 0.4 <= 1.
        let cert = AssumptionCertificate {
            l1: Some(2.0),
            l1_star: Some(2.0),
            ..Default::default()
        };
        let r = validate_step_size(&cert, 1.0, 0.2).unwrap();
        for name in ["well_posedness", "feller", "lyapunov", "contraction"] {
            assert!(r.passed(name), "{name}: {r}");
        }
        assert!(r.admissible());
    }

    #[test]
    fn step_size_contraction_fails_at_large_tau() {
        // l1_star = 2, theta = 1, tau = 0.9: 1.8 > 3 - 2 = 1.
        let cert = AssumptionCertificate {
            l1_star: Some(2.0),
            ..Default::default()
        };
        let r = validate_step_size(&cert, 1.0, 0.9).unwrap();
        assert_eq!(r.status("contraction"), ConditionStatus::Fail);
        assert!(!r.admissible());
        // l1 missing: the l1-based conditions are not checkable, not failed.
        assert_eq!(r.status("well_posedness"), ConditionStatus::NotCheckable);
    }

    #[test]
    fn step_size_weak_lyapunov_form_at_theta_half() {
        let cert = AssumptionCertificate {
            l1: Some(5.0),
            ..Default::default()
        };
        // theta = 1/2 uses l1 * tau < 4: 5 * 0.5 = 2.5 < 4 passes even though
        // the strong form would compare 1.25 < 2 anyway; at tau = 0.9 the weak
        // form 4.5 < 4 fails.
        let r = validate_step_size(&cert, 0.5, 0.5).unwrap();
        assert!(r.passed("lyapunov"));
        let r = validate_step_size(&cert, 0.5, 0.9).unwrap();
        assert_eq!(r.status("lyapunov"), ConditionStatus::Fail);
    }

    #[test]
    fn step_size_explicit_baseline_not_applicable() {
        let cert = AssumptionCertificate {
            l1: Some(2.0),
            l1_star: Some(2.0),
            ..Default::default()
        };
        let r = validate_step_size(&cert, 0.0, 0.5).unwrap();
        for c in &r.conditions {
            assert_eq!(c.status, ConditionStatus::NotApplicable);
        }
        assert!(r.admissible());
    }

    #[test]
    fn step_size_rejects_out_of_range_inputs() {
        let cert = AssumptionCertificate::default();
        assert!(validate_step_size(&cert, 1.5, 0.1).is_err());
        assert!(validate_step_size(&cert, -0.1, 0.1).is_err());
        assert!(validate_step_size(&cert, 1.0, 0.0).is_err());
        assert!(validate_step_size(&cert, 1.0, 1.0).is_err());
    }

    #[test]
    fn sampled_audit_cubic_ratio_at_most_minus_one() {
        let p = builtin_problem("cubic_dissipative", &params(&[("s", 1.0)])).unwrap();
        let rep = check_assumptions_sampled(&p, 2000, 5.0, 7).unwrap();
        assert!(rep.all_satisfied(), "{rep}");
        let dd = rep.check("drift_dissipativity").unwrap();
        assert!(dd.worst_ratio.unwrap() <= -1.0 + 1e-9, "{}", dd.worst_ratio.unwrap());
    }

    #[test]
    fn sampled_audit_double_well_ratio_matches_grid_oracle() {
        // Oracle: on a dense 1-D grid, (b(x)-b(y))/(x-y) = 1 - (x^2+xy+y^2)
        // attains its maximum 1 near x = y = 0; check the scan agrees.
        let mut oracle: f64 = f64::NEG_INFINITY;
        let grid: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.05).collect();
        for &x in &grid {
            for &y in &grid {
                if x == y {
                    continue;
                }
                oracle = oracle.max(1.0 - (x * x + x * y + y * y));
            }
        }
        assert!(oracle <= 1.0 && oracle > 0.99, "oracle {oracle}");

        let p = builtin_problem("double_well", &BTreeMap::new()).unwrap();
        let rep = check_assumptions_sampled(&p, 2000, 5.0, 11).unwrap();
        assert!(rep.all_satisfied(), "{rep}");
        let osl = rep.check("drift_one_sided_lipschitz").unwrap();
        let r = osl.worst_ratio.unwrap();
        assert!(r <= 1.0 + 1e-9 && r > 0.5, "sampled worst ratio {r}");
    }

    #[test]
    fn sampled_audit_ou_dissipativity_margin_is_zero() {
        let p = builtin_problem("ou", &params(&[("a", 1.0)])).unwrap();
        let rep = check_assumptions_sampled(&p, 1000, 10.0, 3).unwrap();
        let jd = rep.check("joint_dissipativity").unwrap();
        assert!(jd.worst_margin.abs() <= 1e-12, "margin {}", jd.worst_margin);
        assert!(rep.all_satisfied());
    }

    #[test]
    fn sampled_audit_flags_a_false_certificate() {
        // Claim dissipativity for the double well: the audit must catch it.
        let mut p = builtin_problem("double_well", &BTreeMap::new()).unwrap();
        p.certificate.l1_star = Some(1.0);
        p.certificate.l4_star = Some(0.5);
        let rep = check_assumptions_sampled(&p, 2000, 3.0, 5).unwrap();
        assert!(!rep.check("joint_dissipativity").unwrap().satisfied);
        assert!(!rep.check("drift_dissipativity").unwrap().satisfied);
    }

    #[test]
    fn certificate_sign_constraints_enforced() {
        let c = AssumptionCertificate {
            l3: Some(0.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = AssumptionCertificate {
            l5: Some(0.0),
            l1: Some(-3.0),
            ..Default::default()
        };
        assert!(c.validate().is_ok(), "l5 = 0 and negative l1 are legal");
    }
}
