//! Small dense linear-algebra helpers shared by the steering solvers.
//!
//! Everything operates on `nalgebra::DMatrix<f64>` at the problem sizes of
//! this crate (state dimensions below ten), so no attempt is made at sparse
//! or blocked algorithms. The routines here exist to centralize the numeric
//! conventions: explicit symmetrization before eigendecompositions, Cholesky
//! as the positive-definiteness test, and fixed-step RK4 with a deterministic
//! partial final step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Explicit symmetrization `(m + m') / 2`.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix (input symmetrized first).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero; anything below `-tol`
/// is an error because the argument was supposed to be PSD.
pub fn sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let se = sym(m).symmetric_eigen();
    let mut min_ev = f64::INFINITY;
    for &ev in se.eigenvalues.iter() {
        min_ev = min_ev.min(ev);
    }
    if min_ev < -tol {
        return Err(Error::NonpositiveSqrtArgument {
            min_eigenvalue: min_ev,
        });
    }
    let d = DMatrix::from_diagonal(&se.eigenvalues.map(|ev| ev.max(0.0).sqrt()));
    Ok(&se.eigenvectors * d * se.eigenvectors.transpose())
}

/// Matrix inverse through LU; error names the calling context.
pub fn inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::SingularMatrix {
        context: context.to_string(),
    })
}

/// log det of a symmetric positive definite matrix via Cholesky.
pub fn logdet_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = sym(m).cholesky()?;
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let d = chol.l()[(i, i)];
        if d <= 0.0 {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

/// Cholesky-based strict positive-definiteness test.
pub fn is_pd(m: &DMatrix<f64>) -> bool {
    sym(m).cholesky().is_some()
}

/// 2-norm condition number via SVD; `f64::INFINITY` for rank-deficient input.
pub fn cond_2(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Numerical rank: singular values above `rel_tol * s_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Frobenius-norm relative difference `|a - b|_F / max(1, |b|_F)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// A matrix-valued function of time, sampled on a (not necessarily uniform)
/// increasing grid and evaluated by linear interpolation with clamping.
///
/// Integrator stages land between nodes, so interpolation is the contract:
/// it keeps fixed-step RK4 order-consistent between grid points.
#[derive(Debug, Clone)]
pub struct Schedule {
    times: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl Schedule {
    pub fn new(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(times.len(), values.len(), "schedule length mismatch");
        assert!(!times.is_empty(), "schedule must have at least one node");
        for w in times.windows(2) {
            assert!(w[1] > w[0], "schedule times must be strictly increasing");
        }
        Schedule { times, values }
    }

    /// Constant-in-time schedule.
    pub fn constant(value: DMatrix<f64>) -> Self {
        Schedule {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().unwrap()
    }

    /// Linear interpolation at `t`, clamped to the grid span.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        // partition_point: first index with times[i] > t
        let hi = self.times.partition_point(|&x| x <= t);
        let lo = hi - 1;
        let span = self.times[hi] - self.times[lo];
        let w = (t - self.times[lo]) / span;
        &self.values[lo] * (1.0 - w) + &self.values[hi] * w
    }

    /// Value at the node nearest to `t` (no interpolation).
    pub fn at_node_nearest(&self, t: f64) -> &DMatrix<f64> {
        let hi = self.times.partition_point(|&x| x <= t);
        if hi == 0 {
            return &self.values[0];
        }
        if hi >= self.times.len() {
            return self.values.last().unwrap();
        }
        if (t - self.times[hi - 1]).abs() <= (self.times[hi] - t).abs() {
            &self.values[hi - 1]
        } else {
            &self.values[hi]
        }
    }
}

/// Node times for a span `[t0, tf]` stepped by `dt`, with a final partial
/// step when `tf - t0` is not a multiple of `dt`. Deterministic: the node
/// count depends only on the inputs.
pub fn span_nodes(t0: f64, tf: f64, dt: f64) -> Vec<f64> {
    assert!(tf > t0, "empty time span");
    assert!(dt > 0.0, "nonpositive step");
    let n_full = ((tf - t0) / dt + 1e-9).floor() as usize;
    let mut ts: Vec<f64> = (0..=n_full).map(|i| t0 + i as f64 * dt).collect();
    let last = *ts.last().unwrap();
    if tf - last > 1e-9 * dt {
        ts.push(tf);
    } else {
        *ts.last_mut().unwrap() = tf;
    }
    ts
}

/// One classical RK4 step for a matrix ODE `y' = f(t, y)`.
pub fn rk4_step<F>(f: &F, t: f64, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// RK4 over a span, returning the whole solution schedule.
///
/// `post_step` is applied to each new node value (symmetrization, PSD
/// checks); returning an error aborts the integration.
pub fn rk4_span<F, P>(
    t0: f64,
    tf: f64,
    dt: f64,
    y0: DMatrix<f64>,
    f: &F,
    post_step: &P,
) -> Result<Schedule>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
    P: Fn(f64, DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let ts = span_nodes(t0, tf, dt);
    let mut values = Vec::with_capacity(ts.len());
    values.push(y0);
    for i in 1..ts.len() {
        let h = ts[i] - ts[i - 1];
        let next = rk4_step(f, ts[i - 1], &values[i - 1], h);
        values.push(post_step(ts[i], next)?);
    }
    Ok(Schedule::new(ts, values))
}

/// Same RK4 stepping for vector-valued ODEs.
pub fn rk4_step_vec<F>(f: &F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Trapezoid quadrature of a scalar function sampled on schedule nodes.
pub fn trapezoid(times: &[f64], samples: &[f64]) -> f64 {
    assert_eq!(times.len(), samples.len());
    let mut acc = 0.0;
    for i in 1..times.len() {
        acc += 0.5 * (samples[i] + samples[i - 1]) * (times[i] - times[i - 1]);
    }
    acc
}

/// Dense row-major serialization of a matrix, used by every JSON artifact.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Inverse of [`matrix_to_rows`]; validates rectangularity.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config("empty matrix literal".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix literal".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_psd_recovers_square() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_psd(&m, 1e-12).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_psd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            sqrt_psd(&m, 1e-12),
            Err(Error::NonpositiveSqrtArgument { .. })
        ));
    }

    #[test]
    fn schedule_interpolates_linearly() {
        let s = Schedule::new(
            vec![0.0, 1.0],
            vec![
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 2.0),
            ],
        );
        assert_relative_eq!(s.at(0.25)[(0, 0)], 0.5);
        assert_relative_eq!(s.at(-1.0)[(0, 0)], 0.0);
        assert_relative_eq!(s.at(9.0)[(0, 0)], 2.0);
    }

    #[test]
    fn span_nodes_handles_partial_step() {
        let ts = span_nodes(0.0, 1.05, 0.25);
        assert_eq!(ts.len(), 6);
        assert_relative_eq!(ts[4], 1.0);
        assert_relative_eq!(ts[5], 1.05);
        // exact multiple: no extra node
        let ts = span_nodes(0.0, 1.0, 0.25);
        assert_eq!(ts.len(), 5);
        assert_relative_eq!(*ts.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_matches_exponential() {
        // y' = y, y(0) = 1 over [0, 1]
        let f = |_t: f64, y: &DMatrix<f64>| y.clone();
        let sched = rk4_span(
            0.0,
            1.0,
            1e-2,
            DMatrix::from_element(1, 1, 1.0),
            &f,
            &|_t, y| Ok(y),
        )
        .unwrap();
        assert_relative_eq!(sched.last()[(0, 0)], 1.0_f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn logdet_matches_direct() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let expected = (2.0 * 1.5 - 0.25_f64).ln();
        assert_relative_eq!(logdet_pd(&m).unwrap(), expected, epsilon = 1e-12);
    }
}
