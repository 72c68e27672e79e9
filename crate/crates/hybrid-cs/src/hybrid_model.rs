//! Hybrid system definitions: modes with smooth flows, guard-triggered
//! resets, event detection on trajectories, and saltation matrices.
//!
//! A transition fires when its guard function `g(t, x)` crosses zero along a
//! flow. The reset `R(t, x)` is applied exactly in rollouts; its first-order
//! model for everything covariance-related is the saltation matrix
//!
//! ```text
//! Xi = dR/dx + (F_post - dR/dx F_pre - dR/dt) dg/dx / (dg/dt + dg/dx F_pre),
//! ```
//!
//! which accounts for both the reset Jacobian and the variation of the event
//! time with the pre-event state. The denominator vanishing means the flow
//! grazes the guard surface and the linearization is meaningless; that case
//! is an error, never a silent fallback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cond_2, matrix_from_rows, rk4_step_vec, Schedule};

/// Guard residual refinement target: `|g| <= 1e-10 * (1 + |g at bracket|)`.
const GUARD_RESIDUAL_TOL: f64 = 1e-10;
/// Below this magnitude the saltation denominator counts as grazing.
const GRAZING_TOL: f64 = 1e-12;
/// Saltation matrices with condition number above this are routed to the
/// SDP path; the analytic path would square the error through `(Xi')^-1`.
pub const INVERTIBILITY_COND_LIMIT: f64 = 1e8;

/// Smooth flow of one mode. Linear flows carry their matrices on a time
/// grid; the builtin nonlinear flows are the experiment models.
#[derive(Debug, Clone)]
pub enum FlowSpec {
    /// `dx = A(t) x + B(t) u`
    Linear { a: Schedule, b: Schedule },
    /// Vertical bouncing ball: `z'' = (u - m g) / m`, state `[z, z']`.
    BouncingBall { mass: f64, gravity: f64 },
    /// SLIP stance phase in polar coordinates, state `[th, th', r, r']`.
    SlipStance { r0: f64, k: f64, m: f64, gravity: f64 },
    /// SLIP flight phase, state `[px, vx, pz, vz, th]`: double-integrator
    /// body plus directly actuated leg angle.
    SlipFlight { gravity: f64 },
}

impl FlowSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            FlowSpec::Linear { a, .. } => a.first().nrows(),
            FlowSpec::BouncingBall { .. } => 2,
            FlowSpec::SlipStance { .. } => 4,
            FlowSpec::SlipFlight { .. } => 5,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FlowSpec::Linear { b, .. } => b.first().ncols(),
            FlowSpec::BouncingBall { .. } => 1,
            FlowSpec::SlipStance { .. } => 2,
            FlowSpec::SlipFlight { .. } => 3,
        }
    }

    /// Drift `f(t, x, u)` of the controlled deterministic flow.
    pub fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            FlowSpec::Linear { a, b } => a.at(t) * x + b.at(t) * u,
            FlowSpec::BouncingBall { mass, gravity } => {
                DVector::from_vec(vec![x[1], (u[0] - mass * gravity) / mass])
            }
            FlowSpec::SlipStance { r0, k, m, gravity } => {
                let (th, thd, r, rd) = (x[0], x[1], x[2], x[3]);
                DVector::from_vec(vec![
                    thd,
                    (-2.0 * thd * rd - gravity * th.cos()) / r,
                    rd + (m / (r * r)) * u[0],
                    k * (r0 - r) / m - gravity * th.sin() + thd * thd * r + (k / m) * u[1],
                ])
            }
            FlowSpec::SlipFlight { gravity } => {
                DVector::from_vec(vec![x[1], u[0], x[3], -gravity + u[1], u[2]])
            }
        }
    }

    /// State Jacobian `df/dx` along a trajectory point.
    pub fn jac_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            FlowSpec::Linear { a, .. } => a.at(t),
            FlowSpec::BouncingBall { .. } => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            FlowSpec::SlipStance { r0: _, k, m, gravity } => {
                let (th, thd, r, rd) = (x[0], x[1], x[2], x[3]);
                let mut j = DMatrix::zeros(4, 4);
                j[(0, 1)] = 1.0;
                j[(1, 0)] = gravity * th.sin() / r;
                j[(1, 1)] = -2.0 * rd / r;
                j[(1, 2)] = (2.0 * thd * rd + gravity * th.cos()) / (r * r);
                j[(1, 3)] = -2.0 * thd / r;
                j[(2, 2)] = -2.0 * m * u[0] / (r * r * r);
                j[(2, 3)] = 1.0;
                j[(3, 0)] = -gravity * th.cos();
                j[(3, 1)] = 2.0 * thd * r;
                j[(3, 2)] = -k / m + thd * thd;
                j
            }
            FlowSpec::SlipFlight { .. } => {
                let mut j = DMatrix::zeros(5, 5);
                j[(0, 1)] = 1.0;
                j[(2, 3)] = 1.0;
                j
            }
        }
    }

    /// Input Jacobian `df/du`; this is also the noise gain of the mode.
    pub fn jac_u(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            FlowSpec::Linear { b, .. } => b.at(t),
            FlowSpec::BouncingBall { mass, .. } => {
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / mass])
            }
            FlowSpec::SlipStance { k, m, .. } => {
                let r = x[2];
                let mut b = DMatrix::zeros(4, 2);
                b[(2, 0)] = m / (r * r);
                b[(3, 1)] = k / m;
                b
            }
            FlowSpec::SlipFlight { .. } => {
                let mut b = DMatrix::zeros(5, 3);
                b[(1, 0)] = 1.0;
                b[(3, 1)] = 1.0;
                b[(4, 2)] = 1.0;
                b
            }
        }
    }
}

/// One mode of the hybrid system.
#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub mode_id: usize,
    pub flow: FlowSpec,
    /// Running state-cost weight `Q(t)`, symmetric PSD on each grid node.
    pub state_cost: Schedule,
}

impl ModeSpec {
    pub fn new(mode_id: usize, flow: FlowSpec) -> Self {
        let n = flow.state_dim();
        ModeSpec {
            mode_id,
            flow,
            state_cost: Schedule::constant(DMatrix::zeros(n, n)),
        }
    }

    pub fn with_state_cost(mut self, q: Schedule) -> Self {
        assert_eq!(q.first().nrows(), self.state_dim());
        self.state_cost = q;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.flow.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.flow.input_dim()
    }
}

/// Scalar guard `g(t, x)` whose zero crossing triggers a transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GuardSpec {
    /// `g = w' x + time_coeff * t + offset`
    Affine {
        w: Vec<f64>,
        #[serde(default)]
        time_coeff: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Ball height `g = z`.
    BallHeight,
    /// SLIP leg at natural length: `g = r0 - r`.
    SlipLiftoff { r0: f64 },
    /// SLIP foot touches ground: `g = pz - r0 sin(th)`.
    SlipTouchdown { r0: f64 },
}

impl GuardSpec {
    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        match self {
            GuardSpec::Affine { w, time_coeff, offset } => {
                w.iter().zip(x.iter()).map(|(wi, xi)| wi * xi).sum::<f64>()
                    + time_coeff * t
                    + offset
            }
            GuardSpec::BallHeight => x[0],
            GuardSpec::SlipLiftoff { r0 } => r0 - x[2],
            GuardSpec::SlipTouchdown { r0 } => x[2] - r0 * x[4].sin(),
        }
    }

    /// Gradient `dg/dx` as a column vector.
    pub fn grad_x(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            GuardSpec::Affine { w, .. } => DVector::from_vec(w.clone()),
            GuardSpec::BallHeight => DVector::from_vec(vec![1.0, 0.0]),
            GuardSpec::SlipLiftoff { .. } => DVector::from_vec(vec![0.0, 0.0, -1.0, 0.0]),
            GuardSpec::SlipTouchdown { r0 } => {
                DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, -r0 * x[4].cos()])
            }
        }
    }

    pub fn grad_t(&self, _t: f64, _x: &DVector<f64>) -> f64 {
        match self {
            GuardSpec::Affine { time_coeff, .. } => *time_coeff,
            _ => 0.0,
        }
    }
}

/// Reset map applied at a guard crossing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResetSpec {
    Identity { dim: usize },
    /// `x+ = M x + c`
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Vec<f64>,
    },
    /// Elastic ball impact `diag(1, -e2)`.
    BallImpact { e2: f64 },
    /// Polar stance state to Cartesian flight state at leg length `r0`.
    SlipStanceToFlight { r0: f64, toe_x: f64 },
    /// Cartesian flight state to polar stance state at touchdown.
    SlipFlightToStance { r0: f64 },
}

impl ResetSpec {
    pub fn output_dim(&self) -> usize {
        match self {
            ResetSpec::Identity { dim } => *dim,
            ResetSpec::Linear { matrix, .. } => matrix.len(),
            ResetSpec::BallImpact { .. } => 2,
            ResetSpec::SlipStanceToFlight { .. } => 5,
            ResetSpec::SlipFlightToStance { .. } => 4,
        }
    }

    pub fn apply(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ResetSpec::Identity { .. } => x.clone(),
            ResetSpec::Linear { matrix, offset } => {
                let m = matrix_from_rows(matrix).expect("validated at construction");
                let mut out = m * x;
                for (i, c) in offset.iter().enumerate() {
                    out[i] += c;
                }
                out
            }
            ResetSpec::BallImpact { e2 } => DVector::from_vec(vec![x[0], -e2 * x[1]]),
            ResetSpec::SlipStanceToFlight { r0, toe_x } => {
                let (th, thd, r, rd) = (x[0], x[1], x[2], x[3]);
                DVector::from_vec(vec![
                    toe_x + r0 * th.cos(),
                    rd * th.cos() - r * thd * th.sin(),
                    r0 * th.sin(),
                    r0 * thd * th.cos() + rd * th.sin(),
                    th,
                ])
            }
            ResetSpec::SlipFlightToStance { r0 } => {
                let (px, vx, pz, vz, th) = (x[0], x[1], x[2], x[3], x[4]);
                DVector::from_vec(vec![
                    th,
                    (px * vz - pz * vx) / (r0 * r0),
                    *r0,
                    -vx * th.cos() + vz * th.sin(),
                ])
            }
        }
    }

    /// Reset Jacobian `dR/dx`, shape `output_dim x input_dim`.
    pub fn jac_x(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            ResetSpec::Identity { dim } => DMatrix::identity(*dim, *dim),
            ResetSpec::Linear { matrix, .. } => {
                matrix_from_rows(matrix).expect("validated at construction")
            }
            ResetSpec::BallImpact { e2 } => DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -e2]),
            ResetSpec::SlipStanceToFlight { r0, .. } => {
                let (th, thd, r, rd) = (x[0], x[1], x[2], x[3]);
                let mut j = DMatrix::zeros(5, 4);
                j[(0, 0)] = -r0 * th.sin();
                j[(1, 0)] = -rd * th.sin() - r * thd * th.cos();
                j[(1, 1)] = -r * th.sin();
                j[(1, 2)] = -thd * th.sin();
                j[(1, 3)] = th.cos();
                j[(2, 0)] = r0 * th.cos();
                j[(3, 0)] = -r0 * thd * th.sin() + rd * th.cos();
                j[(3, 1)] = r0 * th.cos();
                j[(3, 3)] = th.sin();
                j[(4, 0)] = 1.0;
                j
            }
            ResetSpec::SlipFlightToStance { r0 } => {
                let (px, vx, pz, vz, th) = (x[0], x[1], x[2], x[3], x[4]);
                let r0sq = r0 * r0;
                let mut j = DMatrix::zeros(4, 5);
                j[(0, 4)] = 1.0;
                j[(1, 0)] = vz / r0sq;
                j[(1, 1)] = -pz / r0sq;
                j[(1, 2)] = -vx / r0sq;
                j[(1, 3)] = px / r0sq;
                j[(3, 1)] = -th.cos();
                j[(3, 3)] = th.sin();
                j[(3, 4)] = vx * th.sin() + vz * th.cos();
                j
            }
        }
    }

    pub fn jac_t(&self, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.output_dim())
    }
}

/// Guarded transition between two modes.
#[derive(Debug, Clone)]
pub struct TransitionSpec {
    pub from_mode: usize,
    pub to_mode: usize,
    pub guard: GuardSpec,
    pub reset: ResetSpec,
}

/// A detected hybrid event with its first-order model.
#[derive(Debug, Clone)]
pub struct SaltationEvent {
    pub t_minus: f64,
    pub t_plus: f64,
    pub x_minus: DVector<f64>,
    pub x_plus: DVector<f64>,
    pub xi: DMatrix<f64>,
    /// Invertibility verdict with its condition-number evidence.
    pub invertible: bool,
    pub cond: f64,
    pub from_mode: usize,
    pub to_mode: usize,
    /// Index of the rollout step whose interval contains the event.
    pub step_index: usize,
}

/// The full hybrid system: modes, transitions, grid, and Zeno cap.
#[derive(Debug, Clone)]
pub struct HybridSystemSpec {
    pub modes: Vec<ModeSpec>,
    pub transitions: Vec<TransitionSpec>,
    pub dt: f64,
    pub horizon: f64,
    pub initial_mode: usize,
    pub max_events: usize,
}

impl HybridSystemSpec {
    pub fn mode(&self, id: usize) -> &ModeSpec {
        self.modes
            .iter()
            .find(|m| m.mode_id == id)
            .expect("unknown mode id")
    }

    pub fn transitions_from(&self, mode: usize) -> impl Iterator<Item = &TransitionSpec> {
        self.transitions.iter().filter(move |t| t.from_mode == mode)
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt + 0.5).round() as usize
    }
}

/// Event time and state located by bisection inside one grid interval.
#[derive(Debug, Clone)]
pub struct EventLocation {
    pub t_minus: f64,
    pub x_minus: DVector<f64>,
    pub guard_residual: f64,
    pub interval_index: usize,
}

/// Deterministic single RK4 sub-step of the controlled flow.
pub fn flow_substep(
    flow: &FlowSpec,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    if h == 0.0 {
        return x.clone();
    }
    let rhs = |tt: f64, xx: &DVector<f64>| flow.drift(tt, xx, u);
    rk4_step_vec(&rhs, t, x, h)
}

/// One grid step of the hybrid flow with within-step event handling, for
/// callers that need the step as a differentiable map (finite differences
/// across the event included). Guards are armed by their value at the step
/// start; at most four chained events per step.
pub fn single_hybrid_step(
    system: &HybridSystemSpec,
    t_k: f64,
    dt: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    mode_id: usize,
) -> Result<(DVector<f64>, usize)> {
    let arm_tol = 1e-9;
    let t_next = t_k + dt;
    let mut t_cursor = t_k;
    let mut x_cursor = x.clone();
    let mut u_cursor = u.clone();
    let mut mode = mode_id;
    for _ in 0..4 {
        let flow = &system.mode(mode).flow;
        let x_trial = flow_substep(flow, t_cursor, &x_cursor, &u_cursor, t_next - t_cursor);
        let mut best: Option<(usize, EventLocation)> = None;
        for (idx, tr) in system.transitions.iter().enumerate() {
            if tr.from_mode != mode {
                continue;
            }
            let g_a = tr.guard.value(t_cursor, &x_cursor);
            let g_b = tr.guard.value(t_next, &x_trial);
            if g_a.abs() <= arm_tol {
                continue;
            }
            let crossing = (g_a > 0.0 && g_b <= 0.0) || (g_a < 0.0 && g_b >= 0.0);
            if !crossing {
                continue;
            }
            let u_hold = u_cursor.clone();
            let loc = refine_crossing(
                flow,
                &tr.guard,
                t_cursor,
                t_next,
                &x_cursor,
                &move |_t| u_hold.clone(),
                g_a,
                0,
            )?;
            if best.as_ref().map_or(true, |(_, b)| loc.t_minus < b.t_minus) {
                best = Some((idx, loc));
            }
        }
        match best {
            None => return Ok((x_trial, mode)),
            Some((idx, loc)) => {
                let tr = &system.transitions[idx];
                let x_plus = tr.reset.apply(loc.t_minus, &loc.x_minus);
                mode = tr.to_mode;
                let post_dim = system.mode(mode).input_dim();
                if u_cursor.len() != post_dim {
                    u_cursor = DVector::zeros(post_dim);
                }
                t_cursor = loc.t_minus;
                x_cursor = x_plus;
                if t_next - t_cursor <= f64::EPSILON * t_next.max(1.0) {
                    return Ok((x_cursor, mode));
                }
            }
        }
    }
    Ok((x_cursor, mode))
}

/// Scans a sampled trajectory for the first sign change of the guard and
/// refines the crossing by bisection with deterministic sub-step
/// integration. Returns `None` when the guard never changes sign.
///
/// The tangentiality check rejects crossings where the guard's total time
/// derivative along the flow is below the grazing threshold; the saltation
/// denominator would be meaningless there.
pub fn detect_event(
    mode: &ModeSpec,
    transition: &TransitionSpec,
    times: &[f64],
    states: &[DVector<f64>],
    controls: &dyn Fn(f64) -> DVector<f64>,
) -> Result<Option<EventLocation>> {
    assert_eq!(times.len(), states.len());
    for i in 1..times.len() {
        let g_prev = transition.guard.value(times[i - 1], &states[i - 1]);
        let g_next = transition.guard.value(times[i], &states[i]);
        let crossing = (g_prev > 0.0 && g_next <= 0.0) || (g_prev < 0.0 && g_next >= 0.0);
        if !crossing {
            continue;
        }
        let loc = refine_crossing(
            &mode.flow,
            &transition.guard,
            times[i - 1],
            times[i],
            &states[i - 1],
            controls,
            g_prev,
            i - 1,
        )?;
        // tangentiality check at the located crossing
        let u = controls(loc.t_minus);
        let f = mode.flow.drift(loc.t_minus, &loc.x_minus, &u);
        let dgdx = transition.guard.grad_x(loc.t_minus, &loc.x_minus);
        let total = transition.guard.grad_t(loc.t_minus, &loc.x_minus) + dgdx.dot(&f);
        if total.abs() < GRAZING_TOL {
            return Err(Error::TangentialCrossing {
                t: loc.t_minus,
                derivative: total,
            });
        }
        return Ok(Some(loc));
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn refine_crossing(
    flow: &FlowSpec,
    guard: &GuardSpec,
    t_lo: f64,
    t_hi: f64,
    x_lo: &DVector<f64>,
    controls: &dyn Fn(f64) -> DVector<f64>,
    g_lo_initial: f64,
    interval_index: usize,
) -> Result<EventLocation> {
    let residual_target = GUARD_RESIDUAL_TOL * (1.0 + g_lo_initial.abs());
    let mut lo = t_lo;
    let mut hi = t_hi;
    let mut g_lo = g_lo_initial;
    let u_hold = controls(t_lo);
    let state_at = |t: f64| flow_substep(flow, t_lo, x_lo, &u_hold, t - t_lo);
    let mut t_mid = 0.5 * (lo + hi);
    let mut x_mid = state_at(t_mid);
    let mut g_mid = guard.value(t_mid, &x_mid);
    for _ in 0..200 {
        if g_mid.abs() <= residual_target || (hi - lo) < f64::EPSILON * t_hi.abs().max(1.0) {
            break;
        }
        if (g_lo > 0.0) == (g_mid > 0.0) {
            lo = t_mid;
            g_lo = g_mid;
        } else {
            hi = t_mid;
        }
        t_mid = 0.5 * (lo + hi);
        x_mid = state_at(t_mid);
        g_mid = guard.value(t_mid, &x_mid);
    }
    Ok(EventLocation {
        t_minus: t_mid,
        x_minus: x_mid,
        guard_residual: g_mid.abs(),
        interval_index,
    })
}

/// Saltation matrix of a transition at a located event.
///
/// `u_minus` and `u_plus` are the controls just before and just after the
/// event; the post-flow drift is evaluated at the reset state.
pub fn saltation_matrix(
    flow_pre: &FlowSpec,
    flow_post: &FlowSpec,
    transition: &TransitionSpec,
    t_minus: f64,
    x_minus: &DVector<f64>,
    u_minus: &DVector<f64>,
    u_plus: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n_pre = flow_pre.state_dim();
    let n_post = flow_post.state_dim();
    if x_minus.len() != n_pre {
        return Err(Error::DimensionMismatch {
            context: format!("pre-event state has dim {}, mode has {}", x_minus.len(), n_pre),
        });
    }
    let jac_r = transition.reset.jac_x(t_minus, x_minus);
    if jac_r.nrows() != n_post || jac_r.ncols() != n_pre {
        return Err(Error::DimensionMismatch {
            context: format!(
                "reset Jacobian is {}x{}, expected {}x{}",
                jac_r.nrows(),
                jac_r.ncols(),
                n_post,
                n_pre
            ),
        });
    }
    let x_plus = transition.reset.apply(t_minus, x_minus);
    let f_pre = flow_pre.drift(t_minus, x_minus, u_minus);
    let f_post = flow_post.drift(t_minus, &x_plus, u_plus);
    let dgdx = transition.guard.grad_x(t_minus, x_minus);
    let dgdt = transition.guard.grad_t(t_minus, x_minus);
    let denominator = dgdt + dgdx.dot(&f_pre);
    if denominator.abs() < GRAZING_TOL {
        return Err(Error::Grazing { denominator });
    }
    let numerator = f_post - &jac_r * f_pre - transition.reset.jac_t(t_minus, x_minus);
    Ok(jac_r + numerator * dgdx.transpose() / denominator)
}

/// Builds the [`SaltationEvent`] record for a located crossing.
pub fn saltation_event(
    system: &HybridSystemSpec,
    transition: &TransitionSpec,
    loc: &EventLocation,
    u_minus: &DVector<f64>,
    step_index: usize,
) -> Result<SaltationEvent> {
    let pre = system.mode(transition.from_mode);
    let post = system.mode(transition.to_mode);
    let x_plus = transition.reset.apply(loc.t_minus, &loc.x_minus);
    let u_plus = if pre.input_dim() == post.input_dim() {
        u_minus.clone()
    } else {
        DVector::zeros(post.input_dim())
    };
    let xi = saltation_matrix(
        &pre.flow,
        &post.flow,
        transition,
        loc.t_minus,
        &loc.x_minus,
        u_minus,
        &u_plus,
    )?;
    let cond = if xi.is_square() { cond_2(&xi) } else { f64::INFINITY };
    Ok(SaltationEvent {
        t_minus: loc.t_minus,
        t_plus: loc.t_minus,
        x_minus: loc.x_minus.clone(),
        x_plus,
        xi,
        invertible: cond <= INVERTIBILITY_COND_LIMIT,
        cond,
        from_mode: transition.from_mode,
        to_mode: transition.to_mode,
        step_index,
    })
}

/// Nominal mean trajectory with its hybrid events.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Zero-order-hold control over each step, in the active mode's input dim.
    pub controls: Vec<DVector<f64>>,
    /// Active mode at each grid node.
    pub modes: Vec<usize>,
    pub events: Vec<SaltationEvent>,
}

impl TrajectoryBundle {
    pub fn n_steps(&self) -> usize {
        self.controls.len()
    }
}

/// Fixed-step RK4 rollout of the deterministic hybrid flow.
///
/// Each grid step integrates the active mode; if a guard changes sign inside
/// the step, the crossing is bisected, the nonlinear reset applied exactly,
/// and the step remainder completed in the new mode, so nodes stay on the
/// uniform grid. Guards re-arm only after their value leaves a small band
/// around zero, which keeps a reset that lands on its own guard surface from
/// immediately re-firing.
pub fn rollout_deterministic(
    system: &HybridSystemSpec,
    x0: &DVector<f64>,
    controls: &dyn Fn(usize, usize) -> DVector<f64>,
    horizon: f64,
) -> Result<TrajectoryBundle> {
    rollout_with_policy(system, x0, &|k, mode, _x| controls(k, mode), horizon)
}

/// Rollout under a state-feedback policy `u = policy(step, mode, x)`.
/// Same event semantics as [`rollout_deterministic`].
pub fn rollout_with_policy(
    system: &HybridSystemSpec,
    x0: &DVector<f64>,
    policy: &dyn Fn(usize, usize, &DVector<f64>) -> DVector<f64>,
    horizon: f64,
) -> Result<TrajectoryBundle> {
    let dt = system.dt;
    let n_steps = (horizon / dt + 0.5).round() as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut used_controls = Vec::with_capacity(n_steps);
    let mut modes = Vec::with_capacity(n_steps + 1);
    let mut events = Vec::new();

    let mut mode_id = system.initial_mode;
    let mut x = x0.clone();
    times.push(0.0);
    states.push(x.clone());
    modes.push(mode_id);

    let arm_tol = 1e-9;
    let mut armed: Vec<bool> = system
        .transitions
        .iter()
        .map(|tr| tr.from_mode != mode_id || tr.guard.value(0.0, &x).abs() > arm_tol)
        .collect();

    for k in 0..n_steps {
        let t_k = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        let mode = system.mode(mode_id);
        let u = policy(k, mode_id, &x);
        assert_eq!(u.len(), mode.input_dim(), "control dim mismatch at step {k}");
        used_controls.push(u.clone());

        let mut t_cursor = t_k;
        let mut x_cursor = x.clone();
        let mut u_cursor = u;
        loop {
            let mode = system.mode(mode_id);
            let x_trial =
                flow_substep(&mode.flow, t_cursor, &x_cursor, &u_cursor, t_next - t_cursor);
            // earliest crossing among armed transitions out of the current mode
            let mut best: Option<(usize, EventLocation)> = None;
            for (idx, tr) in system.transitions.iter().enumerate() {
                if tr.from_mode != mode_id {
                    continue;
                }
                let g_a = tr.guard.value(t_cursor, &x_cursor);
                let g_b = tr.guard.value(t_next, &x_trial);
                if !armed[idx] {
                    if g_a.abs() > arm_tol {
                        armed[idx] = true;
                    } else {
                        continue;
                    }
                }
                let crossing = (g_a > 0.0 && g_b <= 0.0) || (g_a < 0.0 && g_b >= 0.0);
                if !crossing {
                    continue;
                }
                let u_hold = u_cursor.clone();
                let loc = refine_crossing(
                    &mode.flow,
                    &tr.guard,
                    t_cursor,
                    t_next,
                    &x_cursor,
                    &move |_t| u_hold.clone(),
                    g_a,
                    k,
                )?;
                if best.as_ref().map_or(true, |(_, b)| loc.t_minus < b.t_minus) {
                    best = Some((idx, loc));
                }
            }
            match best {
                None => {
                    x = x_trial;
                    break;
                }
                Some((idx, loc)) => {
                    if events.len() >= system.max_events {
                        return Err(Error::ZenoGuard {
                            max_events: system.max_events,
                        });
                    }
                    let tr = &system.transitions[idx];
                    let event = saltation_event(system, tr, &loc, &u_cursor, k)?;
                    let x_plus = event.x_plus.clone();
                    mode_id = tr.to_mode;
                    events.push(event);
                    // disarm any guard sitting on its surface at the new state
                    for (j, tr2) in system.transitions.iter().enumerate() {
                        if tr2.from_mode == mode_id {
                            armed[j] = tr2.guard.value(loc.t_minus, &x_plus).abs() > arm_tol;
                        }
                    }
                    let post_mode = system.mode(mode_id);
                    u_cursor = if u_cursor.len() == post_mode.input_dim() {
                        u_cursor
                    } else {
                        DVector::zeros(post_mode.input_dim())
                    };
                    t_cursor = loc.t_minus;
                    x_cursor = x_plus;
                    if t_next - t_cursor <= f64::EPSILON * t_next.max(1.0) {
                        x = x_cursor.clone();
                        break;
                    }
                }
            }
        }
        times.push(t_next);
        states.push(x.clone());
        modes.push(mode_id);
    }

    Ok(TrajectoryBundle {
        times,
        states,
        controls: used_controls,
        modes,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ball_flow() -> FlowSpec {
        FlowSpec::BouncingBall {
            mass: 1.0,
            gravity: 9.81,
        }
    }

    fn ball_mode() -> ModeSpec {
        ModeSpec::new(0, ball_flow())
    }

    fn impact_transition(e2: f64) -> TransitionSpec {
        TransitionSpec {
            from_mode: 0,
            to_mode: 0,
            guard: GuardSpec::BallHeight,
            reset: ResetSpec::BallImpact { e2 },
        }
    }

    fn ball_system(e2: f64, dt: f64, horizon: f64) -> HybridSystemSpec {
        HybridSystemSpec {
            modes: vec![ball_mode()],
            transitions: vec![impact_transition(e2)],
            dt,
            horizon,
            initial_mode: 0,
            max_events: 16,
        }
    }

    fn zero_control(dim: usize) -> impl Fn(f64) -> DVector<f64> {
        move |_t| DVector::zeros(dim)
    }

    #[test]
    fn detect_event_ballistic_root() {
        // z(t) = 1 - t - 4.905 t^2; oracle root from the quadratic formula
        let oracle = (-1.0 + (1.0 + 4.0 * 4.905_f64).sqrt()) / (2.0 * 4.905);
        let mode = ball_mode();
        let tr = impact_transition(0.6);
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let u = zero_control(1);
        let dt = 0.01;
        let mut times = vec![0.0];
        let mut states = vec![x0.clone()];
        for i in 0..60 {
            let t = i as f64 * dt;
            let next = flow_substep(&mode.flow, t, states.last().unwrap(), &u(t), dt);
            times.push(t + dt);
            states.push(next);
        }
        let loc = detect_event(&mode, &tr, &times, &states, &u)
            .unwrap()
            .expect("crossing exists");
        assert!(loc.guard_residual <= 1e-10 * 2.0);
        assert_relative_eq!(loc.t_minus, oracle, epsilon = 1e-9);
    }

    #[test]
    fn detect_event_interior_trajectory_is_none() {
        let mode = ball_mode();
        let tr = impact_transition(0.6);
        let times = vec![0.0, 0.1, 0.2];
        let states = vec![
            DVector::from_vec(vec![5.0, 1.0]),
            DVector::from_vec(vec![5.05, 0.5]),
            DVector::from_vec(vec![5.08, 0.2]),
        ];
        let got = detect_event(&mode, &tr, &times, &states, &zero_control(1)).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn detect_event_time_triggered_guard() {
        let mode = ball_mode();
        let tr = TransitionSpec {
            from_mode: 0,
            to_mode: 0,
            guard: GuardSpec::Affine {
                w: vec![0.0, 0.0],
                time_coeff: 1.0,
                offset: -0.3,
            },
            reset: ResetSpec::Identity { dim: 2 },
        };
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let states: Vec<DVector<f64>> = times
            .iter()
            .map(|_| DVector::from_vec(vec![5.0, 0.0]))
            .collect();
        let loc = detect_event(&mode, &tr, &times, &states, &zero_control(1))
            .unwrap()
            .unwrap();
        // exact up to the bisection residual target 1e-10 * (1 + |g|)
        assert_relative_eq!(loc.t_minus, 0.3, epsilon = 2e-10);
    }

    #[test]
    fn saltation_identity_reduction() {
        // dR/dx = I, same flow on both sides: Xi = I exactly
        let mode = ball_mode();
        let tr = TransitionSpec {
            from_mode: 0,
            to_mode: 0,
            guard: GuardSpec::BallHeight,
            reset: ResetSpec::Identity { dim: 2 },
        };
        let x = DVector::from_vec(vec![0.0, -2.0]);
        let u = DVector::zeros(1);
        let xi = saltation_matrix(&mode.flow, &mode.flow, &tr, 0.5, &x, &u, &u).unwrap();
        assert!((xi - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn saltation_time_triggered_guard_reduces_to_reset_jacobian() {
        let mode = ball_mode();
        let m = vec![vec![1.0, 0.2], vec![0.0, -0.5]];
        let tr = TransitionSpec {
            from_mode: 0,
            to_mode: 0,
            guard: GuardSpec::Affine {
                w: vec![0.0, 0.0],
                time_coeff: 1.0,
                offset: -0.25,
            },
            reset: ResetSpec::Linear {
                matrix: m.clone(),
                offset: vec![],
            },
        };
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let u = DVector::zeros(1);
        let xi = saltation_matrix(&mode.flow, &mode.flow, &tr, 0.25, &x, &u, &u).unwrap();
        let expected = matrix_from_rows(&m).unwrap();
        assert!((xi - expected).norm() < 1e-12);
    }

    #[test]
    fn saltation_bouncing_ball_hand_value() {
        // impact at (z, z') = (0, -2), e2 = 0.6, u = 0, g = 9.81:
        // Xi = [[-0.6, 0], [7.848, -0.6]] by direct evaluation
        let mode = ball_mode();
        let tr = impact_transition(0.6);
        let x = DVector::from_vec(vec![0.0, -2.0]);
        let u = DVector::zeros(1);
        let xi = saltation_matrix(&mode.flow, &mode.flow, &tr, 1.0, &x, &u, &u).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-0.6, 0.0, 7.848, -0.6]);
        assert!((xi - expected).norm() < 1e-12);
    }

    #[test]
    fn saltation_grazing_is_rejected() {
        let mode = ball_mode();
        let tr = impact_transition(0.6);
        // z' = 0 at the surface: the denominator is exactly zero
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let u = DVector::zeros(1);
        let err = saltation_matrix(&mode.flow, &mode.flow, &tr, 1.0, &x, &u, &u).unwrap_err();
        assert!(matches!(err, Error::Grazing { .. }));
    }

    #[test]
    fn rollout_zero_dynamics_is_constant() {
        let n = 2;
        let sys = HybridSystemSpec {
            modes: vec![ModeSpec::new(
                0,
                FlowSpec::Linear {
                    a: Schedule::constant(DMatrix::zeros(n, n)),
                    b: Schedule::constant(DMatrix::zeros(n, 1)),
                },
            )],
            transitions: vec![],
            dt: 0.01,
            horizon: 0.5,
            initial_mode: 0,
            max_events: 16,
        };
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let bundle = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::zeros(1), 0.5).unwrap();
        assert!(bundle.events.is_empty());
        for s in &bundle.states {
            assert_relative_eq!(s.clone(), x0.clone());
        }
    }

    #[test]
    fn rollout_ballistic_matches_closed_form() {
        // the ball flow is affine with nilpotent A: RK4 is exact
        let sys = ball_system(0.6, 0.0015, 0.9);
        let x0 = DVector::from_vec(vec![5.0, 1.5]);
        let bundle = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::zeros(1), 0.9).unwrap();
        assert!(bundle.events.is_empty());
        let t = *bundle.times.last().unwrap();
        let z = 5.0 + 1.5 * t - 4.905 * t * t;
        let zd = 1.5 - 9.81 * t;
        assert_relative_eq!(bundle.states.last().unwrap()[0], z, epsilon = 1e-10);
        assert_relative_eq!(bundle.states.last().unwrap()[1], zd, epsilon = 1e-10);
    }

    #[test]
    fn rollout_ball_exactly_one_impact() {
        let sys = ball_system(0.6, 0.0015, 1.8);
        let x0 = DVector::from_vec(vec![5.0, 1.5]);
        let bundle = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::zeros(1), 1.8).unwrap();
        assert_eq!(bundle.events.len(), 1);
        let ev = &bundle.events[0];
        // impact of the uncontrolled arc: 5 + 1.5 t - 4.905 t^2 = 0
        let oracle = (1.5 + (1.5_f64 * 1.5 + 4.0 * 4.905 * 5.0).sqrt()) / (2.0 * 4.905);
        assert_relative_eq!(ev.t_minus, oracle, epsilon = 1e-9);
        assert!(ev.invertible);
        // velocity flips sign and shrinks by e2
        assert_relative_eq!(ev.x_plus[1], -0.6 * ev.x_minus[1], epsilon = 1e-12);
    }

    #[test]
    fn rollout_is_bit_deterministic() {
        let sys = ball_system(0.6, 0.0015, 1.8);
        let x0 = DVector::from_vec(vec![5.0, 1.5]);
        let b1 = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::zeros(1), 1.8).unwrap();
        let b2 = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::zeros(1), 1.8).unwrap();
        assert_eq!(b1.events[0].t_minus.to_bits(), b2.events[0].t_minus.to_bits());
        for (a, b) in b1.states.iter().zip(&b2.states) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn rollout_zeno_guard_trips() {
        // 1-D sawtooth: the state drifts through z = 0 and the reset
        // teleports it back to 1, forever. The Zeno cap has to fire.
        let sys = HybridSystemSpec {
            modes: vec![ModeSpec::new(
                0,
                FlowSpec::Linear {
                    a: Schedule::constant(DMatrix::zeros(1, 1)),
                    b: Schedule::constant(DMatrix::identity(1, 1)),
                },
            )],
            transitions: vec![TransitionSpec {
                from_mode: 0,
                to_mode: 0,
                guard: GuardSpec::Affine {
                    w: vec![1.0],
                    time_coeff: 0.0,
                    offset: 0.0,
                },
                reset: ResetSpec::Linear {
                    matrix: vec![vec![0.0]],
                    offset: vec![1.0],
                },
            }],
            dt: 0.01,
            horizon: 40.0,
            initial_mode: 0,
            max_events: 16,
        };
        let x0 = DVector::from_vec(vec![1.0]);
        let err = rollout_deterministic(&sys, &x0, &|_k, _m| DVector::from_vec(vec![-1.0]), 40.0)
            .unwrap_err();
        assert!(matches!(err, Error::ZenoGuard { max_events: 16 }));
    }

    #[test]
    fn perturbation_through_impact_matches_saltation() {
        // perturb the state shortly before the impact, re-roll, and compare
        // the post-event deviation against the saltation prediction
        let sys = ball_system(0.6, 0.0015, 1.5);
        let x0 = DVector::from_vec(vec![5.0, 1.5]);
        let u = |_k: usize, _m: usize| DVector::zeros(1);
        let nominal = rollout_deterministic(&sys, &x0, &u, 1.5).unwrap();
        let ev = &nominal.events[0];
        let k_before = ev.step_index.saturating_sub(2);
        let k_after = ev.step_index + 3;
        // smooth transport of the affine ball flow: exp(A dt) = I + A dt
        let transport = |dt: f64| DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        for (delta_mag, tol) in [(1e-4, 2e-3), (1e-5, 4e-4)] {
            let mut worst: f64 = 0.0;
            for dir in [[1.0, 0.0], [0.0, 1.0], [0.7, -0.7]] {
                let delta = DVector::from_vec(vec![dir[0] * delta_mag, dir[1] * delta_mag]);
                // the ball flow is autonomous, so restarting at t = 0 is fine
                let sub = HybridSystemSpec {
                    horizon: 1.5 - nominal.times[k_before],
                    ..sys.clone()
                };
                let x_start = &nominal.states[k_before] + &delta;
                let pert = rollout_deterministic(&sub, &x_start, &u, sub.horizon).unwrap();
                let idx = k_after - k_before;
                let d_post = &pert.states[idx] - &nominal.states[k_after];
                let predicted = transport(nominal.times[k_after] - ev.t_minus)
                    * &ev.xi
                    * transport(ev.t_minus - nominal.times[k_before])
                    * &delta;
                worst = worst.max((d_post - predicted).norm() / delta.norm());
            }
            // first-order agreement: the relative defect shrinks with delta
            assert!(
                worst < tol,
                "saltation prediction defect {worst} at delta {delta_mag}"
            );
        }
    }

    #[test]
    fn slip_stance_jacobian_matches_finite_differences() {
        let flow = FlowSpec::SlipStance {
            r0: 1.0,
            k: 25.0,
            m: 0.5,
            gravity: 9.81,
        };
        let x = DVector::from_vec(vec![1.745, -4.0, 0.5, 0.3]);
        let u = DVector::from_vec(vec![0.1, -0.2]);
        let jx = flow.jac_x(0.0, &x, &u);
        let ju = flow.jac_u(0.0, &x);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (flow.drift(0.0, &xp, &u) - flow.drift(0.0, &xm, &u)) / (2.0 * h);
            for i in 0..4 {
                assert_relative_eq!(jx[(i, j)], col[i], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
        for j in 0..2 {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (flow.drift(0.0, &x, &up) - flow.drift(0.0, &x, &um)) / (2.0 * h);
            for i in 0..4 {
                assert_relative_eq!(ju[(i, j)], col[i], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn slip_reset_jacobians_match_finite_differences() {
        let r12 = ResetSpec::SlipStanceToFlight { r0: 1.0, toe_x: 0.3 };
        let x = DVector::from_vec(vec![1.2, -3.0, 1.0, 2.5]);
        let j = r12.jac_x(0.0, &x);
        let h = 1e-6;
        for col in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let fd = (r12.apply(0.0, &xp) - r12.apply(0.0, &xm)) / (2.0 * h);
            for row in 0..5 {
                assert_relative_eq!(j[(row, col)], fd[row], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
        let r21 = ResetSpec::SlipFlightToStance { r0: 1.0 };
        let x = DVector::from_vec(vec![1.4, 2.0, 0.9, -1.0, 1.1]);
        let j = r21.jac_x(0.0, &x);
        for col in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let fd = (r21.apply(0.0, &xp) - r21.apply(0.0, &xm)) / (2.0 * h);
            for row in 0..4 {
                assert_relative_eq!(j[(row, col)], fd[row], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }
}
