//! Reproducible driving noise: Brownian skeletons, dyadic bridge refinement,
//! and finite-activity jump events.
//!
//! Noise is generated per path from the streams in [`crate::rng`] and never
//! shared between paths, so schedules cannot affect output. Refinement is a
//! standard Brownian bridge: a parent increment `w` over a window of length
//! `h` splits into children `w/2 + xi` and `w/2 - xi` with `xi ~ N(0, h/4)`
//! per coordinate.
//!
//! Cross-level exactness. Chains on nested grids must consume *identical*
//! aggregate noise, so children are required to sum to their parent
//! bit-for-bit. With arbitrary doubles that is impossible: when `|xi|`
//! exceeds `|w|` the children cannot carry the parent's lowest mantissa bits.
//! Increments are therefore snapped at generation time to a power-of-two
//! lattice about 2^-26 below the increment's standard deviation (a relative
//! perturbation of ~1e-8, far beneath every statistical resolution used
//! here), and each refinement level halves the lattice. All bridge
//! arithmetic then happens on the lattice without rounding, giving exact
//! conservation for at least 20 refinement levels. Hand-built skeletons
//! without a lattice are refined on a best-effort ulp-adjustment path.

use crate::error::Error;
use crate::model::{MarkSampler, Problem};
use crate::rng::{self, Stream};
use crate::Result;

/// Maximum dyadic refinement depth with guaranteed exact conservation.
pub const MAX_REFINE_LEVELS: u32 = 20;

/// Uniform time grid on `[0, horizon]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid_parameter("horizon", "must be finite and > 0"));
        }
        if steps == 0 {
            return Err(Error::invalid_parameter("steps", "must be >= 1"));
        }
        Ok(GridSpec { horizon, steps })
    }

    /// Step size `tau = horizon / steps`.
    pub fn tau(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of grid node `j` (`j = 0..=steps`).
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.tau()
    }
}

/// Brownian increments on a uniform grid, row-major `[step][coordinate]`.
///
/// `level` counts dyadic refinements below the grid the skeleton was born
/// on; `quantum` is the power-of-two lattice spacing of the increments
/// (`0.0` marks a hand-built skeleton with no lattice guarantee).
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianSkeleton {
    pub horizon: f64,
    pub dim: usize,
    pub level: u32,
    pub quantum: f64,
    pub increments: Vec<f64>,
}

impl BrownianSkeleton {
    /// Wraps externally supplied increments (no lattice metadata).
    pub fn from_increments(horizon: f64, dim: usize, increments: Vec<f64>) -> Self {
        assert!(dim > 0 && increments.len().is_multiple_of(dim));
        BrownianSkeleton {
            horizon,
            dim,
            level: 0,
            quantum: 0.0,
            increments,
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    /// Window length of one increment.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Increment vector of step `j`.
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }
}

/// Lattice spacing for increments of standard deviation `sd`:
/// the largest power of two not above `sd * 2^-26`.
fn lattice(sd: f64) -> f64 {
    debug_assert!(sd > 0.0 && sd.is_finite());
    let e = sd.log2().floor() as i32 - 26;
    (e as f64).exp2()
}

#[inline]
fn snap(x: f64, q: f64) -> f64 {
    // q is a power of two and |x/q| stays far below 2^53, so both the
    // scaling and the rounded product are exact.
    (x / q).round() * q
}

/// Draws the level-0 skeleton: `grid.steps` independent `N(0, tau I)`
/// vectors, snapped to the refinement lattice.
pub fn brownian_skeleton(grid: &GridSpec, dim: usize, stream: &mut Stream) -> BrownianSkeleton {
    assert!(dim > 0, "noise dimension must be >= 1");
    let sd = grid.tau().sqrt();
    let q = lattice(sd);
    let mut increments = vec![0.0; grid.steps * dim];
    rng::fill_standard_normal(stream, &mut increments);
    for v in increments.iter_mut() {
        *v = snap(*v * sd, q);
    }
    BrownianSkeleton {
        horizon: grid.horizon,
        dim,
        level: 0,
        quantum: q,
        increments,
    }
}

/// Best-effort conserving split for skeletons without a lattice: adjust the
/// second child by ulps until the floating-point sum reproduces the parent,
/// shrinking the midpoint draw in the (measure-zero) configurations where no
/// neighbour works.
fn conserving_split_foreign(w: f64, xi: f64) -> (f64, f64) {
    let mut xi = xi;
    for _ in 0..64 {
        let a = 0.5 * w + xi;
        if a.is_finite() {
            let mut b = w - a;
            for _ in 0..4 {
                let s = a + b;
                if s == w {
                    return (a, b);
                }
                b = if s > w { b.next_down() } else { b.next_up() };
            }
        }
        xi *= 0.5;
    }
    (0.5 * w, 0.5 * w)
}

/// Refines a skeleton by `extra_levels` dyadic levels via Brownian bridge.
///
/// Midpoint draws come from `stream` in a fixed order (level by level, then
/// step, then coordinate), so successive refinements of the same path are
/// reproducible and independent of how many levels are requested at once.
/// Children of every parent sum to the parent exactly; see the module notes
/// on the increment lattice. Lattice-backed skeletons support at most
/// [`MAX_REFINE_LEVELS`] cumulative levels.
pub fn refine_brownian(
    skeleton: &BrownianSkeleton,
    extra_levels: u32,
    stream: &mut Stream,
) -> BrownianSkeleton {
    assert!(
        skeleton.quantum == 0.0 || skeleton.level + extra_levels <= MAX_REFINE_LEVELS,
        "refinement depth exceeds the exact-conservation budget"
    );
    let dim = skeleton.dim;
    let mut cur = skeleton.clone();
    for _ in 0..extra_levels {
        let n = cur.steps();
        let h = cur.dt();
        let bridge_sd = (h / 4.0).sqrt();
        let child_q = 0.5 * cur.quantum;
        let mut next = vec![0.0; 2 * n * dim];
        for j in 0..n {
            for k in 0..dim {
                let w = cur.increments[j * dim + k];
                let xi = bridge_sd * rng::standard_normal(stream);
                let (ca, cb) = if child_q > 0.0 {
                    // w/2 and the snapped xi are lattice points, their sums
                    // stay well inside 2^53 lattice units: exact arithmetic.
                    let xi_s = snap(xi, child_q);
                    let (ca, cb) = (0.5 * w + xi_s, 0.5 * w - xi_s);
                    debug_assert_eq!(ca + cb, w);
                    (ca, cb)
                } else {
                    conserving_split_foreign(w, xi)
                };
                next[2 * j * dim + k] = ca;
                next[(2 * j + 1) * dim + k] = cb;
            }
        }
        cur = BrownianSkeleton {
            horizon: skeleton.horizon,
            dim,
            level: cur.level + 1,
            quantum: child_q,
            increments: next,
        };
    }
    cur
}

/// One path's driving randomness: a Brownian skeleton plus jump events.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub skeleton: BrownianSkeleton,
    pub events: JumpEvents,
}

/// Draws the full noise of one path on `grid` from the path's dedicated
/// streams (Brownian increments and jump events use separate purposes, so
/// the two never interleave).
pub fn sample_path_noise(
    problem: &Problem,
    grid: &GridSpec,
    master_seed: u64,
    path: u64,
) -> PathNoise {
    let mut bs = rng::stream(master_seed, path, rng::Purpose::Brownian);
    let skeleton = brownian_skeleton(grid, problem.dim_noise, &mut bs);
    let events = if problem.has_jumps() {
        let sampler = problem
            .mark_sampler
            .as_ref()
            .expect("jump problems carry a mark sampler");
        let mut js = rng::stream(master_seed, path, rng::Purpose::Jumps);
        sample_jump_events(
            problem.intensity,
            grid.horizon,
            problem.mark_dim,
            sampler,
            &mut js,
        )
    } else {
        JumpEvents::none()
    };
    PathNoise { skeleton, events }
}

/// Jump times and marks of one path over `[0, horizon]`, sorted by time.
/// `marks` is row-major `[event][mark coordinate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvents {
    pub horizon: f64,
    pub mark_dim: usize,
    pub times: Vec<f64>,
    pub marks: Vec<f64>,
}

impl JumpEvents {
    /// Empty event list (jump-free problems).
    pub fn none() -> Self {
        JumpEvents {
            horizon: 0.0,
            mark_dim: 0,
            times: Vec::new(),
            marks: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.times.len()
    }

    pub fn mark(&self, i: usize) -> &[f64] {
        &self.marks[i * self.mark_dim..(i + 1) * self.mark_dim]
    }
}

/// Samples the events of one path: a Poisson(`intensity * horizon`) count,
/// event times as sorted uniforms, then one mark per event in time order.
pub fn sample_jump_events(
    intensity: f64,
    horizon: f64,
    mark_dim: usize,
    sampler: &MarkSampler,
    stream: &mut Stream,
) -> JumpEvents {
    assert!(intensity >= 0.0 && horizon > 0.0);
    let count = rng::poisson(stream, intensity * horizon) as usize;
    let mut times: Vec<f64> = (0..count)
        .map(|_| horizon * rand::Rng::random::<f64>(stream))
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite jump times"));
    let mut marks = vec![0.0; count * mark_dim];
    for i in 0..count {
        sampler(stream, &mut marks[i * mark_dim..(i + 1) * mark_dim]);
    }
    JumpEvents {
        horizon,
        mark_dim,
        times,
        marks,
    }
}

/// Accumulates the compensated jump contribution of the window `(t0, t1]`
/// with the state frozen at the window's left endpoint:
///
/// ```text
/// out += sum_{t0 < t_i <= t1} gamma(x, z_i)  -  (t1 - t0) * compensator(x)
/// ```
///
/// `scratch` must have length `dim_state`.
pub fn compensated_jump_sum(
    problem: &Problem,
    x: &[f64],
    events: &JumpEvents,
    t0: f64,
    t1: f64,
    out: &mut [f64],
    scratch: &mut [f64],
) {
    let Some(gamma) = &problem.jump_coeff else {
        return;
    };
    let lo = events.times.partition_point(|&t| t <= t0);
    let hi = events.times.partition_point(|&t| t <= t1);
    for i in lo..hi {
        gamma(x, events.mark(i), scratch);
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o += s;
        }
    }
    if let Some(comp) = &problem.compensator {
        comp(x, scratch);
        let dt = t1 - t0;
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o -= dt * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_problem;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn grid(h: f64, n: usize) -> GridSpec {
        GridSpec::new(h, n).unwrap()
    }

    #[test]
    fn skeleton_has_requested_shape_and_scale() {
        let g = grid(2.0, 8);
        let mut s = stream(1, 0, Purpose::Brownian);
        let sk = brownian_skeleton(&g, 3, &mut s);
        assert_eq!(sk.steps(), 8);
        assert_eq!(sk.dim, 3);
        assert_eq!(sk.level, 0);
        assert_abs_diff_eq!(sk.dt(), 0.25);
    }

    #[test]
    fn increment_variance_matches_step_size() {
        // 1e5 paths, one step of length 1: sample variance within 1 +- 0.02.
        let g = grid(1.0, 1);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for path in 0..n {
            let mut s = stream(42, path, Purpose::Brownian);
            let sk = brownian_skeleton(&g, 1, &mut s);
            let w = sk.increments[0];
            sum += w;
            sumsq += w * w;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn path_sum_variance_is_horizon() {
        // N = 4 steps over T = 1: the path sum over 1e5 streams has
        // variance within 1 +- 0.02 (independent increments).
        let g = grid(1.0, 4);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for path in 0..n {
            let mut s = stream(21, path, Purpose::Brownian);
            let sk = brownian_skeleton(&g, 1, &mut s);
            let w: f64 = sk.increments.iter().sum();
            sum += w;
            sumsq += w * w;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn zero_extra_levels_is_identity() {
        let g = grid(1.0, 4);
        let mut s = stream(2, 0, Purpose::Brownian);
        let sk = brownian_skeleton(&g, 2, &mut s);
        let mut r = stream(2, 0, Purpose::Bridge);
        assert_eq!(refine_brownian(&sk, 0, &mut r), sk);
    }

    #[test]
    fn bridge_children_sum_exactly_and_have_half_variance() {
        // Children of a unit-window parent have marginal variance
        // Var(w/2) + Var(xi) = 1/4 + 1/4 = 1/2.
        let g = grid(1.0, 1);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for path in 0..n {
            let mut bs = stream(7, path, Purpose::Brownian);
            let sk = brownian_skeleton(&g, 1, &mut bs);
            let mut rs = stream(7, path, Purpose::Bridge);
            let fine = refine_brownian(&sk, 1, &mut rs);
            assert_eq!(fine.increments[0] + fine.increments[1], sk.increments[0]);
            let c = fine.increments[0];
            sum += c;
            sumsq += c * c;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 0.5).abs() < 0.02, "child variance {var}");
    }

    #[test]
    fn foreign_parent_conserved_exactly() {
        // A hand-built skeleton (no lattice): children still sum to the
        // parent bit-for-bit on the ulp-adjustment path.
        let sk = BrownianSkeleton::from_increments(1.0, 1, vec![0.7]);
        let mut rs = stream(3, 0, Purpose::Bridge);
        let fine = refine_brownian(&sk, 1, &mut rs);
        assert_eq!(fine.increments[0] + fine.increments[1], 0.7);
    }

    proptest! {
        #[test]
        fn foreign_split_is_exact(w in -1e9f64..1e9, xi in -1e9f64..1e9) {
            let (a, b) = conserving_split_foreign(w, xi);
            prop_assert_eq!(a + b, w);
        }

        #[test]
        fn lattice_refinement_conserves_every_parent(seed in 0u64..5000) {
            let g = GridSpec::new(0.75, 2).unwrap();
            let mut bs = stream(seed, 0, Purpose::Brownian);
            let sk = brownian_skeleton(&g, 2, &mut bs);
            let mut rs = stream(seed, 0, Purpose::Bridge);
            let fine = refine_brownian(&sk, 1, &mut rs);
            for j in 0..sk.steps() {
                for k in 0..2 {
                    let parent = sk.increments[j * 2 + k];
                    let sum = fine.increments[2 * j * 2 + k] + fine.increments[(2 * j + 1) * 2 + k];
                    prop_assert_eq!(sum, parent);
                }
            }
        }
    }

    #[test]
    fn multi_level_refinement_aggregates_back_exactly() {
        let g = grid(3.0, 4);
        let mut bs = stream(11, 3, Purpose::Brownian);
        let sk = brownian_skeleton(&g, 2, &mut bs);
        let mut rs = stream(11, 3, Purpose::Bridge);
        let fine = refine_brownian(&sk, 3, &mut rs);
        assert_eq!(fine.steps(), 32);
        assert_eq!(fine.level, 3);
        // Aggregate pairs back up three levels; bit-identical to level 0.
        let mut cur = fine.increments.clone();
        for _ in 0..3 {
            let n = cur.len() / (2 * sk.dim);
            let mut up = vec![0.0; n * sk.dim];
            for j in 0..n {
                for k in 0..sk.dim {
                    up[j * sk.dim + k] =
                        cur[2 * j * sk.dim + k] + cur[(2 * j + 1) * sk.dim + k];
                }
            }
            cur = up;
        }
        assert_eq!(cur, sk.increments);
    }

    #[test]
    fn refinement_in_stages_matches_one_shot() {
        let g = grid(1.0, 2);
        let mut bs = stream(5, 9, Purpose::Brownian);
        let sk = brownian_skeleton(&g, 1, &mut bs);
        let mut r1 = stream(5, 9, Purpose::Bridge);
        let two = refine_brownian(&sk, 2, &mut r1);
        let mut r2 = stream(5, 9, Purpose::Bridge);
        let staged = refine_brownian(&refine_brownian(&sk, 1, &mut r2), 1, &mut r2);
        assert_eq!(two, staged);
    }

    fn normal_marks(dim: usize) -> MarkSampler {
        Box::new(move |s, out| {
            assert_eq!(out.len(), dim);
            rng::fill_standard_normal(s, out)
        })
    }

    #[test]
    fn jump_events_sorted_in_window_with_marks() {
        let sampler = normal_marks(2);
        let mut s = stream(3, 0, Purpose::Jumps);
        let ev = sample_jump_events(4.0, 2.5, 2, &sampler, &mut s);
        assert!(ev.times.windows(2).all(|w| w[0] <= w[1]));
        assert!(ev.times.iter().all(|&t| t > 0.0 && t <= 2.5));
        assert_eq!(ev.marks.len(), ev.count() * 2);
    }

    #[test]
    fn jump_count_mean_matches_intensity() {
        // 1e4 paths at lambda*T = 3*2 = 6: mean count within 6 +- 0.25.
        let sampler = normal_marks(1);
        let mut total = 0usize;
        for path in 0..10_000u64 {
            let mut s = stream(77, path, Purpose::Jumps);
            total += sample_jump_events(3.0, 2.0, 1, &sampler, &mut s).count();
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 6.0).abs() < 0.25, "mean count {mean}");
    }

    #[test]
    fn jump_sum_window_semantics_left_open_right_closed() {
        let mut p = BTreeMap::new();
        p.insert("c".to_string(), 2.0);
        let prob = builtin_problem("ou_jump", &p).unwrap();
        let ev = JumpEvents {
            horizon: 1.0,
            mark_dim: 1,
            times: vec![0.25, 0.5, 0.9],
            marks: vec![1.0, 10.0, 100.0],
        };
        let mut out = vec![0.0];
        let mut scratch = vec![0.0];
        // (0.25, 0.9]: excludes the event at 0.25, includes 0.5 and 0.9.
        compensated_jump_sum(&prob, &[0.0], &ev, 0.25, 0.9, &mut out, &mut scratch);
        assert_abs_diff_eq!(out[0], 2.0 * 110.0);
        // Empty window adds nothing.
        out[0] = 0.0;
        compensated_jump_sum(&prob, &[0.0], &ev, 0.91, 1.0, &mut out, &mut scratch);
        assert_abs_diff_eq!(out[0], 0.0);
    }

    #[test]
    fn centred_marks_have_vanishing_compensator() {
        // MC average of intensity * gamma(x, z) over 1e6 marks should match
        // the problem's (zero) compensator within 4 standard errors.
        let prob = builtin_problem("ou_jump", &BTreeMap::new()).unwrap();
        let sampler = prob.mark_sampler.as_ref().unwrap();
        let gamma = prob.jump_coeff.as_ref().unwrap();
        let x = [0.7];
        let mut s = stream(13, 0, Purpose::Jumps);
        let n = 1_000_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        let mut z = [0.0];
        let mut g = [0.0];
        for _ in 0..n {
            sampler(&mut s, &mut z);
            gamma(&x, &z, &mut g);
            sum += g[0];
            sumsq += g[0] * g[0];
        }
        let lambda = prob.intensity;
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        let stderr = lambda * sd / (n as f64).sqrt();
        assert!(
            (lambda * mean - 0.0).abs() <= 4.0 * stderr,
            "compensator mismatch: {} vs 0 (stderr {stderr})",
            lambda * mean
        );
    }

    #[test]
    fn noise_is_reproducible_per_key() {
        let g = grid(1.0, 16);
        let mk = |seed| {
            let mut s = stream(seed, 4, Purpose::Brownian);
            brownian_skeleton(&g, 2, &mut s)
        };
        assert_eq!(mk(9), mk(9));
        assert_ne!(mk(9), mk(10));
    }
}
