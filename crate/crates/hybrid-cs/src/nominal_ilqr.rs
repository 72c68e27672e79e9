//! Event-aware iterative LQR for the nominal mean trajectory.
//!
//! The forward pass is the exact hybrid rollout (nonlinear resets applied
//! exactly); the backward pass is the standard iLQR value recursion with one
//! change: at a step containing a hybrid event the step Jacobian is the
//! chain `Phi_post * Xi * Phi_pre` of the smooth sub-step transitions around
//! the saltation matrix, so the value function propagates through the event
//! as `Xi' V+ Xi`. The converged trajectory, its linearizations, and the
//! saltation matrices are what the steering solvers consume.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hybrid_model::{
    flow_substep, rollout_with_policy, single_hybrid_step, HybridSystemSpec, TrajectoryBundle,
};
use crate::linalg::{sym, Schedule};
use crate::smooth_steering::Segment;

/// Configuration of the nominal trajectory solve.
#[derive(Debug, Clone)]
pub struct IlqrConfig {
    /// Goal mean state, in the expected final mode's dimension.
    pub goal: DVector<f64>,
    /// Terminal weight `Q_T` (cost `0.5 |x_T - goal|^2_{Q_T}`).
    pub terminal_weight: DMatrix<f64>,
    /// Scalar control weight `r` in the running cost `r |u|^2 dt`.
    pub control_weight: f64,
    /// Running state weight, applied as `w |x - goal|^2 dt` when dimensions
    /// match (zero reproduces the experiments).
    pub running_state_weight: f64,
    pub max_iterations: usize,
    /// Relative cost-decrease threshold declaring convergence.
    pub tol: f64,
}

impl IlqrConfig {
    pub fn new(goal: DVector<f64>, terminal_weight: DMatrix<f64>) -> Self {
        assert_eq!(goal.len(), terminal_weight.nrows());
        IlqrConfig {
            goal,
            terminal_weight,
            control_weight: 1.0,
            running_state_weight: 0.0,
            max_iterations: 100,
            tol: 1e-8,
        }
    }
}

/// Converged nominal plan: trajectory bundle, iLQR gains, diagnostics.
#[derive(Debug, Clone)]
pub struct NominalPlan {
    pub bundle: TrajectoryBundle,
    /// Feedback gain per step (dimensions follow the active mode).
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|dQ/du|` over event-free steps at the last backward pass,
    /// scaled by `1 + |cost|`.
    pub stationarity: f64,
}

fn total_cost(
    system: &HybridSystemSpec,
    config: &IlqrConfig,
    bundle: &TrajectoryBundle,
) -> f64 {
    let dt = system.dt;
    let mut cost = 0.0;
    for (k, u) in bundle.controls.iter().enumerate() {
        cost += config.control_weight * u.dot(u) * dt;
        if config.running_state_weight > 0.0 {
            let x = &bundle.states[k];
            if x.len() == config.goal.len() {
                let d = x - &config.goal;
                cost += config.running_state_weight * d.dot(&d) * dt;
            } else {
                cost += config.running_state_weight * x.dot(x) * dt;
            }
        }
    }
    let x_f = bundle.states.last().unwrap();
    if x_f.len() == config.goal.len() {
        let d = x_f - &config.goal;
        cost += 0.5 * (d.transpose() * &config.terminal_weight * d)[(0, 0)];
    } else {
        // wrong final mode: heavily penalize so the line search rejects it
        cost += 1e6 * (1.0 + x_f.norm_squared());
    }
    cost
}

/// Central-difference Jacobian of a smooth sub-step w.r.t. the state.
fn fd_state_jacobian(
    flow: &crate::hybrid_model::FlowSpec,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h_step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let col =
            (flow_substep(flow, t, &xp, u, h_step) - flow_substep(flow, t, &xm, u, h_step))
                / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Step Jacobians `(A_k, B_k)` of the discrete hybrid step at step `k`.
/// Event steps chain the smooth sub-step transitions through the saltation
/// matrix; the control Jacobian differences the full hybrid step.
fn step_jacobians(
    system: &HybridSystemSpec,
    bundle: &TrajectoryBundle,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dt = system.dt;
    let t_k = bundle.times[k];
    let x_k = &bundle.states[k];
    let u_k = &bundle.controls[k];
    let mode_k = bundle.modes[k];
    let events: Vec<_> = bundle.events.iter().filter(|e| e.step_index == k).collect();
    let a_k = if events.len() == 1 {
        let ev = events[0];
        let pre_flow = &system.mode(ev.from_mode).flow;
        let post_flow = &system.mode(ev.to_mode).flow;
        let u_post = if u_k.len() == post_flow.input_dim() {
            u_k.clone()
        } else {
            DVector::zeros(post_flow.input_dim())
        };
        let phi_pre = fd_state_jacobian(pre_flow, t_k, x_k, u_k, ev.t_minus - t_k);
        let phi_post = fd_state_jacobian(
            post_flow,
            ev.t_minus,
            &ev.x_plus,
            &u_post,
            t_k + dt - ev.t_minus,
        );
        phi_post * &ev.xi * phi_pre
    } else if events.is_empty() {
        let flow = &system.mode(mode_k).flow;
        fd_state_jacobian(flow, t_k, x_k, u_k, dt)
    } else {
        // several chained events in one step: difference the full step
        let n = x_k.len();
        let n_next = bundle.states[k + 1].len();
        let mut jac = DMatrix::zeros(n_next, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + x_k[j].abs());
            let mut xp = x_k.clone();
            xp[j] += h;
            let mut xm = x_k.clone();
            xm[j] -= h;
            let (fp, _) = single_hybrid_step(system, t_k, dt, &xp, u_k, mode_k)?;
            let (fm, _) = single_hybrid_step(system, t_k, dt, &xm, u_k, mode_k)?;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        jac
    };
    // control Jacobian across the full (possibly hybrid) step
    let m = u_k.len();
    let n_next = bundle.states[k + 1].len();
    let mut b_k = DMatrix::zeros(n_next, m);
    for j in 0..m {
        let h = 1e-6 * (1.0 + u_k[j].abs());
        let mut up = u_k.clone();
        up[j] += h;
        let mut um = u_k.clone();
        um[j] -= h;
        let (fp, _) = single_hybrid_step(system, t_k, dt, x_k, &up, mode_k)?;
        let (fm, _) = single_hybrid_step(system, t_k, dt, x_k, &um, mode_k)?;
        b_k.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok((a_k, b_k))
}

struct BackwardPass {
    gains: Vec<DMatrix<f64>>,
    feedforward: Vec<DVector<f64>>,
    stationarity: f64,
    expected_decrease: f64,
}

fn backward_pass(
    system: &HybridSystemSpec,
    config: &IlqrConfig,
    bundle: &TrajectoryBundle,
    mu: f64,
) -> Result<BackwardPass> {
    let dt = system.dt;
    let n_steps = bundle.n_steps();
    let x_f = bundle.states.last().unwrap();
    if x_f.len() != config.goal.len() {
        return Err(Error::Config(format!(
            "terminal state dim {} does not match goal dim {}",
            x_f.len(),
            config.goal.len()
        )));
    }
    let mut v_x = &config.terminal_weight * (x_f - &config.goal);
    let mut v_xx = config.terminal_weight.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); n_steps];
    let mut feedforward = vec![DVector::zeros(0); n_steps];
    let mut stationarity = 0.0_f64;
    let mut expected_decrease = 0.0;
    for k in (0..n_steps).rev() {
        let (a_k, b_k) = step_jacobians(system, bundle, k)?;
        let u_k = &bundle.controls[k];
        let x_k = &bundle.states[k];
        let m = u_k.len();
        let r_term = 2.0 * config.control_weight * dt;
        let mut l_x = DVector::zeros(x_k.len());
        let mut l_xx = DMatrix::zeros(x_k.len(), x_k.len());
        if config.running_state_weight > 0.0 && x_k.len() == config.goal.len() {
            l_x = (x_k - &config.goal) * (2.0 * config.running_state_weight * dt);
            l_xx = DMatrix::identity(x_k.len(), x_k.len())
                * (2.0 * config.running_state_weight * dt);
        }
        let q_x = l_x + a_k.transpose() * &v_x;
        let q_u = u_k * r_term + b_k.transpose() * &v_x;
        let q_xx = l_xx + a_k.transpose() * &v_xx * &a_k;
        let mut q_uu = DMatrix::identity(m, m) * r_term + b_k.transpose() * &v_xx * &b_k;
        for d in 0..m {
            q_uu[(d, d)] += mu;
        }
        let q_ux = b_k.transpose() * &v_xx * &a_k;
        let chol = sym(&q_uu)
            .cholesky()
            .ok_or(Error::SingularMatrix {
                context: "Q_uu not positive definite in backward pass".into(),
            })?;
        let k_ff = -chol.solve(&q_u);
        let k_fb = -chol.solve(&q_ux);
        v_x = &q_x + k_fb.transpose() * &q_uu * &k_ff + k_fb.transpose() * &q_u
            + q_ux.transpose() * &k_ff;
        v_xx = sym(&(&q_xx
            + k_fb.transpose() * &q_uu * &k_fb
            + k_fb.transpose() * &q_ux
            + q_ux.transpose() * &k_fb));
        expected_decrease += -(q_u.dot(&k_ff) + 0.5 * (k_ff.transpose() * &q_uu * &k_ff)[(0, 0)]);
        if !bundle.events.iter().any(|e| e.step_index == k) {
            stationarity = stationarity.max(q_u.amax());
        }
        gains[k] = k_fb;
        feedforward[k] = k_ff;
    }
    Ok(BackwardPass {
        gains,
        feedforward,
        stationarity,
        expected_decrease,
    })
}

/// Event-aware iLQR solve of the nominal mean trajectory.
pub fn solve_hilqr(
    system: &HybridSystemSpec,
    x0: &DVector<f64>,
    config: &IlqrConfig,
    horizon: f64,
) -> Result<NominalPlan> {
    let zero_policy =
        |_k: usize, mode: usize, _x: &DVector<f64>| DVector::zeros(system.mode(mode).input_dim());
    let mut bundle = rollout_with_policy(system, x0, &zero_policy, horizon)?;
    let mut cost = total_cost(system, config, &bundle);
    let mut mu = 1e-8;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_pass: Option<BackwardPass> = None;
    let mut improved_once = false;
    while iterations < config.max_iterations {
        iterations += 1;
        let pass = match backward_pass(system, config, &bundle, mu) {
            Ok(p) => p,
            Err(Error::SingularMatrix { .. }) => {
                mu = (mu * 10.0).max(1e-6);
                continue;
            }
            Err(e) => return Err(e),
        };
        // forward line search on the hybrid rollout
        let mut accepted = false;
        for &alpha in &[1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.01, 0.003] {
            let policy = |k: usize, mode: usize, x: &DVector<f64>| {
                let dim_u = system.mode(mode).input_dim();
                if k < bundle.controls.len()
                    && bundle.controls[k].len() == dim_u
                    && bundle.states[k].len() == x.len()
                    && pass.gains[k].ncols() == x.len()
                {
                    &bundle.controls[k]
                        + &pass.feedforward[k] * alpha
                        + &pass.gains[k] * (x - &bundle.states[k])
                } else {
                    DVector::zeros(dim_u)
                }
            };
            let Ok(trial) = rollout_with_policy(system, x0, &policy, horizon) else {
                continue;
            };
            let trial_cost = total_cost(system, config, &trial);
            if trial_cost < cost {
                if trial.events.len() != bundle.events.len() {
                    log::warn!(
                        "event sequence changed: {} -> {} events; relinearizing",
                        bundle.events.len(),
                        trial.events.len()
                    );
                }
                let decrease = (cost - trial_cost) / cost.abs().max(1e-12);
                bundle = trial;
                cost = trial_cost;
                accepted = true;
                improved_once = true;
                mu = (mu * 0.1).max(1e-10);
                if decrease < config.tol {
                    converged = true;
                }
                break;
            }
        }
        last_pass = Some(pass);
        if converged {
            break;
        }
        if !accepted {
            if !improved_once && mu >= 1e6 {
                return Err(Error::Diverged);
            }
            if mu >= 1e10 {
                // no further progress possible; declare the current
                // trajectory converged at the achieved tolerance
                converged = improved_once;
                break;
            }
            mu = (mu * 10.0).max(1e-6);
        }
    }
    // final backward pass for reporting gains and stationarity at the
    // converged trajectory
    let final_pass = match backward_pass(system, config, &bundle, 0.0) {
        Ok(p) => p,
        Err(_) => last_pass.ok_or(Error::Diverged)?,
    };
    let scale = 1.0 + cost.abs();
    Ok(NominalPlan {
        gains: final_pass.gains,
        feedforward: final_pass.feedforward,
        stationarity: final_pass.stationarity / scale,
        bundle,
        cost,
        iterations,
        converged,
    })
}

/// Per-segment linear problem data extracted along a nominal plan.
#[derive(Debug, Clone)]
pub struct SegmentLinearization {
    pub mode_id: usize,
    pub t0: f64,
    pub tf: f64,
    pub a: Schedule,
    pub b: Schedule,
    pub q: Schedule,
    /// Nominal state and zero-order-hold control on the segment's nodes.
    pub x_nom: Schedule,
    pub u_nom: Schedule,
}

impl SegmentLinearization {
    pub fn to_segment(&self, dt: f64) -> Segment {
        Segment::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.t0,
            self.tf,
            dt,
        )
    }
}

/// Extracts per-segment `(A(t), B(t))` grids along the nominal trajectory,
/// split at the hybrid events, together with the nominal references the
/// simulator needs. The saltation matrices live in the plan's events.
pub fn linearize_along(
    plan: &NominalPlan,
    system: &HybridSystemSpec,
) -> Result<Vec<SegmentLinearization>> {
    let bundle = &plan.bundle;
    let n_nodes = bundle.states.len();
    let horizon = *bundle.times.last().unwrap();
    let mut boundaries: Vec<f64> = vec![0.0];
    for ev in &bundle.events {
        boundaries.push(ev.t_minus);
    }
    boundaries.push(horizon);
    let mut segments = Vec::new();
    for (s, win) in boundaries.windows(2).enumerate() {
        let (t0, tf) = (win[0], win[1]);
        if tf - t0 <= 1e-12 {
            return Err(Error::Config(format!(
                "degenerate segment {s}: events too close together"
            )));
        }
        let mut times = Vec::new();
        let mut a_vals = Vec::new();
        let mut b_vals = Vec::new();
        let mut x_vals = Vec::new();
        let mut u_vals = Vec::new();
        let mut mode_id = None;
        // segment start: exact post-event state when this segment follows a jump
        if s > 0 {
            let ev = &bundle.events[s - 1];
            let mode = system.mode(ev.to_mode);
            mode_id = Some(ev.to_mode);
            let u_plus = if bundle.controls[ev.step_index].len() == mode.input_dim() {
                bundle.controls[ev.step_index].clone()
            } else {
                DVector::zeros(mode.input_dim())
            };
            times.push(t0);
            a_vals.push(mode.flow.jac_x(t0, &ev.x_plus, &u_plus));
            b_vals.push(mode.flow.jac_u(t0, &ev.x_plus));
            x_vals.push(DMatrix::from_column_slice(ev.x_plus.len(), 1, ev.x_plus.as_slice()));
            u_vals.push(DMatrix::from_column_slice(u_plus.len(), 1, u_plus.as_slice()));
        }
        for k in 0..n_nodes {
            let t = bundle.times[k];
            if t <= t0 + 1e-12 || t >= tf - 1e-12 {
                continue;
            }
            let mode = system.mode(bundle.modes[k]);
            if mode_id.is_none() {
                mode_id = Some(bundle.modes[k]);
            }
            if bundle.modes[k] != mode_id.unwrap() {
                continue;
            }
            let u_k = if k < bundle.controls.len() {
                bundle.controls[k].clone()
            } else {
                bundle.controls[k - 1].clone()
            };
            let u_k = if u_k.len() == mode.input_dim() {
                u_k
            } else {
                DVector::zeros(mode.input_dim())
            };
            times.push(t);
            a_vals.push(mode.flow.jac_x(t, &bundle.states[k], &u_k));
            b_vals.push(mode.flow.jac_u(t, &bundle.states[k]));
            x_vals.push(DMatrix::from_column_slice(
                bundle.states[k].len(),
                1,
                bundle.states[k].as_slice(),
            ));
            u_vals.push(DMatrix::from_column_slice(u_k.len(), 1, u_k.as_slice()));
        }
        // segment end: exact pre-event state when this segment ends in a jump
        if s < bundle.events.len() {
            let ev = &bundle.events[s];
            let mode = system.mode(ev.from_mode);
            if mode_id.is_none() {
                mode_id = Some(ev.from_mode);
            }
            let u_minus = if bundle.controls[ev.step_index].len() == mode.input_dim() {
                bundle.controls[ev.step_index].clone()
            } else {
                DVector::zeros(mode.input_dim())
            };
            times.push(tf);
            a_vals.push(mode.flow.jac_x(tf, &ev.x_minus, &u_minus));
            b_vals.push(mode.flow.jac_u(tf, &ev.x_minus));
            x_vals.push(DMatrix::from_column_slice(
                ev.x_minus.len(),
                1,
                ev.x_minus.as_slice(),
            ));
            u_vals.push(DMatrix::from_column_slice(u_minus.len(), 1, u_minus.as_slice()));
        } else {
            // final node of the horizon
            let k = n_nodes - 1;
            let mode = system.mode(bundle.modes[k]);
            if mode_id.is_none() {
                mode_id = Some(bundle.modes[k]);
            }
            let u_k = bundle.controls[k - 1].clone();
            let u_k = if u_k.len() == mode.input_dim() {
                u_k
            } else {
                DVector::zeros(mode.input_dim())
            };
            times.push(tf);
            a_vals.push(mode.flow.jac_x(tf, &bundle.states[k], &u_k));
            b_vals.push(mode.flow.jac_u(tf, &bundle.states[k]));
            x_vals.push(DMatrix::from_column_slice(
                bundle.states[k].len(),
                1,
                bundle.states[k].as_slice(),
            ));
            u_vals.push(DMatrix::from_column_slice(u_k.len(), 1, u_k.as_slice()));
        }
        let mode_id = mode_id.ok_or_else(|| {
            Error::Config(format!("segment {s} contains no trajectory nodes"))
        })?;
        let q = system.mode(mode_id).state_cost.clone();
        segments.push(SegmentLinearization {
            mode_id,
            t0,
            tf,
            a: Schedule::new(times.clone(), a_vals),
            b: Schedule::new(times.clone(), b_vals),
            q,
            x_nom: Schedule::new(times.clone(), x_vals),
            u_nom: Schedule::new(times, u_vals),
        });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_model::{
        saltation_matrix, FlowSpec, GuardSpec, ModeSpec, ResetSpec, TransitionSpec,
    };
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn linear_system(dt: f64, horizon: f64) -> HybridSystemSpec {
        HybridSystemSpec {
            modes: vec![ModeSpec::new(
                0,
                FlowSpec::Linear {
                    a: Schedule::constant(dmatrix![0.0, 1.0; -0.5, -0.2]),
                    b: Schedule::constant(dmatrix![0.0; 1.0]),
                },
            )],
            transitions: vec![],
            dt,
            horizon,
            initial_mode: 0,
            max_events: 16,
        }
    }

    fn ball_system(dt: f64, horizon: f64) -> HybridSystemSpec {
        HybridSystemSpec {
            modes: vec![ModeSpec::new(
                0,
                FlowSpec::BouncingBall {
                    mass: 1.0,
                    gravity: 9.81,
                },
            )],
            transitions: vec![TransitionSpec {
                from_mode: 0,
                to_mode: 0,
                guard: GuardSpec::BallHeight,
                reset: ResetSpec::BallImpact { e2: 0.6 },
            }],
            dt,
            horizon,
            initial_mode: 0,
            max_events: 16,
        }
    }

    #[test]
    fn ilqr_on_linear_quadratic_problem_is_immediate() {
        let sys = linear_system(0.01, 1.0);
        let config = IlqrConfig::new(dvector![1.0, 0.0], DMatrix::identity(2, 2) * 20.0);
        let plan = solve_hilqr(&sys, &dvector![0.0, 0.0], &config, 1.0).unwrap();
        assert!(plan.converged);
        // iLQR on an LQR problem is exact after one accepted step (the
        // second iteration only confirms convergence)
        assert!(plan.iterations <= 3, "iterations = {}", plan.iterations);
        assert!(plan.stationarity < 1e-6, "stationarity = {}", plan.stationarity);
        let x_f = plan.bundle.states.last().unwrap();
        assert!((x_f[0] - 1.0).abs() < 0.1, "terminal {x_f}");
    }

    #[test]
    fn ilqr_bouncing_ball_reaches_goal_through_one_impact() {
        let sys = ball_system(0.0015, 1.8);
        let config = IlqrConfig::new(dvector![2.5, 0.0], DMatrix::identity(2, 2) * 25.0);
        let plan = solve_hilqr(&sys, &dvector![5.0, 1.5], &config, 1.8).unwrap();
        assert_eq!(plan.bundle.events.len(), 1, "expected exactly one impact");
        let x_f = plan.bundle.states.last().unwrap();
        let miss = (x_f - dvector![2.5, 0.0]).norm();
        assert!(miss < 0.1, "terminal miss {miss}, state {x_f}");
        // saltation handoff: the event's Xi is the saltation_matrix output
        // at the converged event state (same code path)
        let ev = &plan.bundle.events[0];
        let tr = &sys.transitions[0];
        let u = &plan.bundle.controls[ev.step_index];
        let xi = saltation_matrix(
            &sys.modes[0].flow,
            &sys.modes[0].flow,
            tr,
            ev.t_minus,
            &ev.x_minus,
            u,
            u,
        )
        .unwrap();
        assert!((xi - &ev.xi).norm() < 1e-12);
    }

    #[test]
    fn linearize_along_linear_mode_recovers_matrices() {
        let sys = linear_system(0.01, 1.0);
        let config = IlqrConfig::new(dvector![1.0, 0.0], DMatrix::identity(2, 2) * 20.0);
        let plan = solve_hilqr(&sys, &dvector![0.0, 0.0], &config, 1.0).unwrap();
        let segs = linearize_along(&plan, &sys).unwrap();
        assert_eq!(segs.len(), 1);
        assert_relative_eq!(
            segs[0].a.at(0.5),
            dmatrix![0.0, 1.0; -0.5, -0.2],
            epsilon = 1e-12
        );
        assert_relative_eq!(segs[0].b.at(0.5), dmatrix![0.0; 1.0], epsilon = 1e-12);
    }

    #[test]
    fn linearize_along_ball_gives_constant_double_integrator() {
        let sys = ball_system(0.0015, 1.8);
        let config = IlqrConfig::new(dvector![2.5, 0.0], DMatrix::identity(2, 2) * 25.0);
        let plan = solve_hilqr(&sys, &dvector![5.0, 1.5], &config, 1.8).unwrap();
        let segs = linearize_along(&plan, &sys).unwrap();
        assert_eq!(segs.len(), 2);
        for seg in &segs {
            assert_relative_eq!(seg.a.at(0.5 * (seg.t0 + seg.tf)), dmatrix![0.0, 1.0; 0.0, 0.0]);
            assert_relative_eq!(seg.b.at(0.5 * (seg.t0 + seg.tf)), dmatrix![0.0; 1.0]);
        }
        // segments abut exactly at the event time
        assert_relative_eq!(segs[0].tf, plan.bundle.events[0].t_minus);
        assert_relative_eq!(segs[1].t0, plan.bundle.events[0].t_minus);
    }

    #[test]
    fn ilqr_slip_stance_to_flight() {
        let r0 = 1.0;
        let sys = HybridSystemSpec {
            modes: vec![
                ModeSpec::new(
                    0,
                    FlowSpec::SlipStance {
                        r0,
                        k: 25.0,
                        m: 0.5,
                        gravity: 9.81,
                    },
                ),
                ModeSpec::new(1, FlowSpec::SlipFlight { gravity: 9.81 }),
            ],
            transitions: vec![TransitionSpec {
                from_mode: 0,
                to_mode: 1,
                guard: GuardSpec::SlipLiftoff { r0 },
                reset: ResetSpec::SlipStanceToFlight { r0, toe_x: 0.0 },
            }],
            dt: 5e-5,
            horizon: 0.5,
            initial_mode: 0,
            max_events: 4,
        };
        let goal = dvector![1.1, 2.25, 1.4, 0.0, std::f64::consts::FRAC_PI_3];
        let config = IlqrConfig {
            max_iterations: 60,
            ..IlqrConfig::new(goal, DMatrix::identity(5, 5) * 2.0)
        };
        let x0 = dvector![1.745, -4.0, 0.5, 0.0];
        let plan = solve_hilqr(&sys, &x0, &config, 0.5).unwrap();
        assert_eq!(plan.bundle.events.len(), 1, "expected one liftoff");
        let ev = &plan.bundle.events[0];
        assert_eq!(ev.xi.shape(), (5, 4));
        assert!(!ev.invertible);
        // liftoff happens at leg length r0
        assert_relative_eq!(ev.x_minus[2], r0, epsilon = 1e-8);
        // the plan transfers into flight mode and improves the cost
        assert_eq!(*plan.bundle.modes.last().unwrap(), 1);
    }
}
