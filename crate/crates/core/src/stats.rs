//! Numerical and statistical utilities shared across modules.
//!
//! The reduction helpers here are the reason the crate's Monte Carlo output is
//! byte-identical for any worker count: items are grouped into fixed-size
//! chunks by index, each chunk accumulates sequentially, and chunk partials
//! are combined by pairwise summation in chunk order. Thread scheduling can
//! change which worker computes a chunk, never the arithmetic.

use rayon::prelude::*;

use crate::error::Error;
use crate::Result;

/// Items per reduction chunk. Fixed so the summation tree does not depend on
/// the number of workers.
pub const REDUCTION_CHUNK: usize = 1024;

/// Pairwise (cascade) summation. Deterministic for a given slice and more
/// accurate than naive left-to-right accumulation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sums `width` quantities over `n_items` items in parallel.
///
/// `fill(state, item, row)` must write the item's contribution into `row`
/// (it is zeroed beforehand). `init` builds per-chunk scratch state, so
/// expensive workspaces are reused across the items of a chunk.
///
/// The result is independent of the rayon pool size.
pub fn parallel_row_sums<S: Send>(
    n_items: usize,
    width: usize,
    init: impl Fn() -> S + Sync + Send,
    fill: impl Fn(&mut S, usize, &mut [f64]) + Sync + Send,
) -> Vec<f64> {
    let n_chunks = n_items.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = ((c + 1) * REDUCTION_CHUNK).min(n_items);
            let mut state = init();
            let mut acc = vec![0.0; width];
            let mut row = vec![0.0; width];
            for i in lo..hi {
                row.iter_mut().for_each(|v| *v = 0.0);
                fill(&mut state, i, &mut row);
                for (a, r) in acc.iter_mut().zip(row.iter()) {
                    *a += r;
                }
            }
            acc
        })
        .collect();
    // Column-wise pairwise combine in chunk order.
    let mut col = vec![0.0; n_chunks];
    let mut out = vec![0.0; width];
    for (j, o) in out.iter_mut().enumerate() {
        for (c, p) in partials.iter().enumerate() {
            col[c] = p[j];
        }
        *o = pairwise_sum(&col);
    }
    out
}

/// Maps `f` over `0..n_items` in parallel, preserving index order.
pub fn parallel_map<T: Send>(n_items: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n_items).into_par_iter().map(f).collect()
}

/// Sample mean and standard error of the mean from raw sums.
///
/// `s1 = sum x_i`, `s2 = sum x_i^2`. The variance estimate is clamped at zero
/// to absorb cancellation when all samples are (nearly) identical.
pub fn mean_stderr_from_sums(s1: f64, s2: f64, n: usize) -> (f64, f64) {
    assert!(n > 0);
    let nf = n as f64;
    let mean = s1 / nf;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = ((s2 - s1 * s1 / nf) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Straight-line fit `y ~ intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
}

/// Least-squares line fit.
///
/// With `weights = Some(w)` (interpreted as `1/sigma_i^2`) the slope standard
/// error is the known-variance expression `sqrt(Sw / Delta)`. Without weights
/// the fit is ordinary least squares and the slope error is estimated from the
/// residuals (zero when only two points are given).
pub fn fit_line(x: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || weights.map(|w| w.len() != n).unwrap_or(false) {
        return Err(Error::DimensionMismatch {
            context: "fit_line".into(),
            expected: n,
            got: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientData {
            context: "fit_line".into(),
            needed: 2,
            got: n,
        });
    }
    let w_of = |i: usize| weights.map(|w| w[i]).unwrap_or(1.0);
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let w = w_of(i);
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::invalid_parameter("weights", "must be finite and positive"));
        }
        sw += w;
        sx += w * x[i];
        sy += w * y[i];
        sxx += w * x[i] * x[i];
        sxy += w * x[i] * y[i];
    }
    let delta = sw * sxx - sx * sx;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InsufficientData {
            context: "fit_line: abscissae are degenerate".into(),
            needed: 2,
            got: 1,
        });
    }
    let slope = (sw * sxy - sx * sy) / delta;
    let intercept = (sxx * sy - sx * sxy) / delta;

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let ybar = sy / sw;
    for i in 0..n {
        let w = w_of(i);
        let fit = intercept + slope * x[i];
        ss_res += w * (y[i] - fit) * (y[i] - fit);
        ss_tot += w * (y[i] - ybar) * (y[i] - ybar);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let slope_stderr = if weights.is_some() {
        (sw / delta).sqrt()
    } else if n > 2 {
        let s2 = ss_res / (n as f64 - 2.0);
        (s2 * sw / delta).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr,
        r2,
    })
}

/// Inverse standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Solves the dense system `a x = b` in place by Gaussian elimination with
/// partial pivoting; `a` is `n x n` row-major and is destroyed, `b` becomes
/// the solution. Intended for the small systems of implicit steps (n <= 16).
pub fn solve_dense_inplace(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > f64::MIN_POSITIVE) {
            return Err(Error::non_finite("singular matrix in dense solve"));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in (col + 1)..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn row_sums_deterministic_across_pool_sizes() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                parallel_row_sums(10_000, 2, || (), |_, i, row| {
                    let x = ((i as f64) * 0.731).sin();
                    row[0] = x;
                    row[1] = x * x;
                })
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn mean_stderr_basics() {
        // Samples 1, 2, 3: mean 2, sample variance 1, stderr 1/sqrt(3).
        let (m, se) = mean_stderr_from_sums(6.0, 14.0, 3);
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(se, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 - 1.25 * v).collect();
        let fit = fit_line(&x, &y, None).unwrap();
        assert_abs_diff_eq!(fit.slope, -1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 2.5, epsilon = 1e-12);
        assert!(fit.r2 > 0.999999);
        assert!(fit.slope_stderr < 1e-12);
    }

    #[test]
    fn weighted_fit_uses_known_variance_error() {
        // Three points with stderr 0.1 each: Var(slope) = Sw/Delta.
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 2.1, 2.9];
        let w = [100.0, 100.0, 100.0];
        let fit = fit_line(&x, &y, Some(&w)).unwrap();
        // Delta = Sw*Sxx - Sx^2 = 300*1400 - 600^2 = 60000; sqrt(300/60000).
        assert_abs_diff_eq!(fit.slope_stderr, (300.0f64 / 60000.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn inverse_normal_cdf_reference_values() {
        // Frozen reference quantiles of the standard normal distribution.
        let cases = [
            (0.5, 0.0),
            (0.8413447460685429, 1.0),
            (0.9772498680518208, 2.0),
            (0.06680720126885807, -1.5),
            (0.975, 1.959963984540054),
            (0.01, -2.3263478740408408),
            (0.995, 2.5758293035489004),
        ];
        for (p, q) in cases {
            assert_abs_diff_eq!(inverse_normal_cdf(p), q, epsilon = 5e-8);
        }
    }

    #[test]
    fn dense_solve_matches_known_solution() {
        // [[2,1],[1,3]] x = [5,10] -> x = [1,3].
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![5.0, 10.0];
        solve_dense_inplace(&mut a, &mut b, 2).unwrap();
        assert_abs_diff_eq!(b[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_solve_rejects_singular() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense_inplace(&mut a, &mut b, 2).is_err());
    }
}
