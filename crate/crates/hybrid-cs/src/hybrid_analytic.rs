//! Closed-form hybrid covariance steering for invertible jumps.
//!
//! An invertible saltation matrix `Xi` acts on the Hamiltonian phase space as
//! the block-diagonal kernel `blkdiag(Xi, (Xi')^{-1})`. Chaining the smooth
//! segment kernels through these jump kernels yields a single hybrid kernel
//! over the whole horizon that satisfies the same six symplectic identities
//! as a smooth one — so the smooth closed-form boundary solve applies
//! verbatim with the composed blocks. The per-segment schedules then follow
//! by integrating each segment and mapping `(Pi, H, Sigma)` through the jump:
//!
//! ```text
//! Pi+ = (Xi')^{-1} Pi- Xi^{-1},   H+ = (Xi')^{-1} H- Xi^{-1},
//! Sigma+ = Xi Sigma- Xi'.
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hybrid_model::INVERTIBILITY_COND_LIMIT;
use crate::linalg::{cond_2, inverse, sym, Schedule};
use crate::smooth_steering::{
    hamiltonian_kernel_schedule, solve_segment_from_initial, solve_smooth_cs, KernelBlocks,
    KernelDirection, Segment, SteeringSolution,
};

/// Composed-kernel identity residuals above this are rejected.
pub const COMPOSED_RESIDUAL_TOL: f64 = 1e-8;

/// A hybrid steering problem: contiguous smooth segments chained by
/// saltation jumps. `jumps[i]` maps segment `i`'s terminal state space onto
/// segment `i + 1`'s initial one.
#[derive(Debug, Clone)]
pub struct HybridSteeringProblem {
    pub segments: Vec<Segment>,
    pub jumps: Vec<DMatrix<f64>>,
    pub sigma0: DMatrix<f64>,
    pub sigma_f: DMatrix<f64>,
    pub epsilon: f64,
}

impl HybridSteeringProblem {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("no segments".into()));
        }
        if self.jumps.len() + 1 != self.segments.len() {
            return Err(Error::Config(format!(
                "{} segments need {} jumps, got {}",
                self.segments.len(),
                self.segments.len() - 1,
                self.jumps.len()
            )));
        }
        for (i, xi) in self.jumps.iter().enumerate() {
            let n_pre = self.segments[i].state_dim();
            let n_post = self.segments[i + 1].state_dim();
            if xi.ncols() != n_pre || xi.nrows() != n_post {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "jump {i} is {}x{}, expected {n_post}x{n_pre}",
                        xi.nrows(),
                        xi.ncols()
                    ),
                });
            }
        }
        for w in self.segments.windows(2) {
            if (w[0].tf - w[1].t0).abs() > 1e-9 {
                return Err(Error::Config("segments are not contiguous in time".into()));
            }
        }
        Ok(())
    }
}

/// Jump kernel `Phi^Xi = blkdiag(Xi, (Xi')^{-1})` of an invertible saltation
/// matrix. Rectangular or ill-conditioned `Xi` is rejected; those cases
/// belong to the SDP path.
pub fn jump_kernel(xi: &DMatrix<f64>, t: f64) -> Result<KernelBlocks> {
    if !xi.is_square() {
        return Err(Error::NoninvertibleSaltation { cond: f64::INFINITY });
    }
    let cond = cond_2(xi);
    if !cond.is_finite() || cond > INVERTIBILITY_COND_LIMIT {
        return Err(Error::NoninvertibleSaltation { cond });
    }
    let n = xi.nrows();
    let xi_inv_t = inverse(xi, "saltation matrix")?.transpose();
    Ok(KernelBlocks {
        phi11: xi.clone(),
        phi12: DMatrix::zeros(n, n),
        phi21: DMatrix::zeros(n, n),
        phi22: xi_inv_t,
        t_from: t,
        t_to: t,
        direction: KernelDirection::Forward,
    })
}

/// Hybrid transition kernel: per-segment kernels, jump kernels, and their
/// ordered composition over the full horizon.
#[derive(Debug, Clone)]
pub struct HybridKernel {
    pub segment_kernels: Vec<KernelBlocks>,
    pub jump_kernels: Vec<KernelBlocks>,
    pub composed: KernelBlocks,
}

/// Composes segment kernels through jump kernels in trajectory order and
/// checks the symplectic identities of the product.
pub fn compose_hybrid_kernel(
    segment_kernels: &[KernelBlocks],
    jump_kernels: &[KernelBlocks],
) -> Result<HybridKernel> {
    assert_eq!(
        segment_kernels.len(),
        jump_kernels.len() + 1,
        "k segments chain through k - 1 jumps"
    );
    let mut composed = segment_kernels[0].clone();
    for (jump, seg) in jump_kernels.iter().zip(&segment_kernels[1..]) {
        composed = jump.compose_after(&composed);
        composed = seg.compose_after(&composed);
    }
    let residual = composed.identity_residual();
    if residual > COMPOSED_RESIDUAL_TOL {
        return Err(Error::IdentityResidualExceeded {
            residual,
            tolerance: COMPOSED_RESIDUAL_TOL,
        });
    }
    Ok(HybridKernel {
        segment_kernels: segment_kernels.to_vec(),
        jump_kernels: jump_kernels.to_vec(),
        composed,
    })
}

/// Builds the hybrid kernel of a problem from its segments and jumps.
pub fn build_hybrid_kernel(problem: &HybridSteeringProblem) -> Result<HybridKernel> {
    problem.validate()?;
    let mut segment_kernels = Vec::with_capacity(problem.segments.len());
    for seg in &problem.segments {
        let (_, blocks) = hamiltonian_kernel_schedule(seg)?;
        segment_kernels.push(blocks);
    }
    let jump_kernels = problem
        .jumps
        .iter()
        .enumerate()
        .map(|(i, xi)| jump_kernel(xi, problem.segments[i].tf))
        .collect::<Result<Vec<_>>>()?;
    compose_hybrid_kernel(&segment_kernels, &jump_kernels)
}

/// Schedule of the hybrid kernel `Phi^H(t, t0)` (assembled 2n x 2n) across
/// all segments and jumps; the jump instant contributes the post-jump value.
pub fn hybrid_kernel_schedule(
    problem: &HybridSteeringProblem,
    kernel: &HybridKernel,
) -> Result<Schedule> {
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<DMatrix<f64>> = Vec::new();
    let mut prefix: Option<KernelBlocks> = None;
    for (i, seg) in problem.segments.iter().enumerate() {
        let (sched, blocks) = hamiltonian_kernel_schedule(seg)?;
        for (j, &t) in sched.times().iter().enumerate() {
            if i > 0 && j == 0 {
                continue; // segment start coincides with the previous jump node
            }
            let phi = match &prefix {
                None => sched.values()[j].clone(),
                Some(p) => &sched.values()[j] * p.assemble(),
            };
            // nudge repeated jump-instant times so the schedule stays strictly increasing
            let t_adj = if times.last().is_some_and(|&last| t <= last) {
                times.last().unwrap() + 1e-12 * seg.dt
            } else {
                t
            };
            times.push(t_adj);
            values.push(phi);
        }
        if i < kernel.jump_kernels.len() {
            let chained = kernel.jump_kernels[i].compose_after(&match &prefix {
                None => blocks.clone(),
                Some(p) => blocks.compose_after(p),
            });
            prefix = Some(chained);
        }
    }
    Ok(Schedule::new(times, values))
}

/// Theorem-1 boundary solve: the smooth closed form applied to the composed
/// hybrid kernel, in the epsilon-explicit convention.
pub fn solve_hybrid_cs(
    sigma0: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
    kernel: &HybridKernel,
    epsilon: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    solve_smooth_cs(sigma0, sigma_f, &kernel.composed, epsilon)
}

/// Record of one jump in a solved hybrid plan.
#[derive(Debug, Clone)]
pub struct JumpRecord {
    pub t: f64,
    pub xi: DMatrix<f64>,
    pub sigma_minus: DMatrix<f64>,
    pub sigma_plus: DMatrix<f64>,
    pub pi_minus: DMatrix<f64>,
    pub pi_plus: DMatrix<f64>,
    pub h_minus: DMatrix<f64>,
    pub h_plus: DMatrix<f64>,
    /// `tr(Pi+ Sigma+) - tr(Pi- Sigma-)`: the expected jump cost, which
    /// vanishes when the discrete Riccati condition holds.
    pub jump_cost_residual: f64,
}

/// A complete hybrid steering plan: per-segment solutions plus the jump
/// records and the total expected cost.
#[derive(Debug, Clone)]
pub struct HybridSteeringSolution {
    pub segments: Vec<SteeringSolution>,
    pub jumps: Vec<JumpRecord>,
    /// Total expected cost `E int (|u|^2 + X'QX) dt` of the plan.
    pub cost: f64,
}

impl HybridSteeringSolution {
    /// Relative Frobenius error of the achieved terminal covariance.
    pub fn terminal_error(&self) -> f64 {
        self.segments.last().map_or(f64::NAN, |s| s.terminal_error())
    }

    pub fn sigma_minus(&self) -> Option<&DMatrix<f64>> {
        self.jumps.first().map(|j| &j.sigma_minus)
    }

    pub fn sigma_plus(&self) -> Option<&DMatrix<f64>> {
        self.jumps.first().map(|j| &j.sigma_plus)
    }

    /// Worst discrete-Riccati residual `|Xi' Pi+ Xi - Pi-|` over the jumps.
    pub fn pi_jump_residual(&self) -> f64 {
        self.jumps
            .iter()
            .map(|j| (j.xi.transpose() * &j.pi_plus * &j.xi - &j.pi_minus).norm())
            .fold(0.0, f64::max)
    }

    /// Worst covariance-jump residual `|Sigma+ - Xi Sigma- Xi'|`.
    pub fn sigma_jump_residual(&self) -> f64 {
        self.jumps
            .iter()
            .map(|j| (&j.xi * &j.sigma_minus * j.xi.transpose() - &j.sigma_plus).norm())
            .fold(0.0, f64::max)
    }
}

/// Integrates the full hybrid plan from the Theorem-1 initial values,
/// applying the jump maps between segments.
pub fn propagate_hybrid_plan(
    pi0: &DMatrix<f64>,
    h0: &DMatrix<f64>,
    problem: &HybridSteeringProblem,
) -> Result<HybridSteeringSolution> {
    problem.validate()?;
    let mut segments = Vec::with_capacity(problem.segments.len());
    let mut jumps = Vec::with_capacity(problem.jumps.len());
    let mut pi_start = pi0.clone();
    let mut h_start = h0.clone();
    let mut sigma_start = problem.sigma0.clone();
    let mut cost = 0.0;
    for (i, seg) in problem.segments.iter().enumerate() {
        let last = i + 1 == problem.segments.len();
        // interior targets emerge from propagation; only the final segment
        // carries the designated terminal covariance
        let mut sol = solve_segment_from_initial(
            seg,
            &sigma_start,
            &problem.sigma_f,
            &pi_start,
            &h_start,
            problem.epsilon,
        )?;
        if !last {
            let xi = &problem.jumps[i];
            let xi_inv = inverse(xi, "saltation matrix in jump map")?;
            let pi_minus = sol.pi_schedule.last().clone();
            let h_minus = sol.h_schedule.last().clone();
            let sigma_minus = sol.sigma_schedule.last().clone();
            let pi_plus = sym(&(xi_inv.transpose() * &pi_minus * &xi_inv));
            let h_plus = sym(&(xi_inv.transpose() * &h_minus * &xi_inv));
            let sigma_plus = sym(&(xi * &sigma_minus * xi.transpose()));
            let jump_cost_residual =
                (&pi_plus * &sigma_plus).trace() - (&pi_minus * &sigma_minus).trace();
            sol.sigma_f = sigma_minus.clone();
            jumps.push(JumpRecord {
                t: seg.tf,
                xi: xi.clone(),
                sigma_minus,
                sigma_plus: sigma_plus.clone(),
                pi_minus,
                pi_plus: pi_plus.clone(),
                h_minus,
                h_plus: h_plus.clone(),
                jump_cost_residual,
            });
            pi_start = pi_plus;
            h_start = h_plus;
            sigma_start = sigma_plus;
        }
        cost += sol.expected_cost(seg);
        segments.push(sol);
    }
    Ok(HybridSteeringSolution {
        segments,
        jumps,
        cost,
    })
}

/// End-to-end analytic solve of a hybrid problem with invertible jumps.
pub fn solve_invertible_path(
    problem: &HybridSteeringProblem,
) -> Result<(HybridKernel, HybridSteeringSolution)> {
    let kernel = build_hybrid_kernel(problem)?;
    let (pi0, h0) = solve_hybrid_cs(&problem.sigma0, &problem.sigma_f, &kernel, problem.epsilon)?;
    let plan = propagate_hybrid_plan(&pi0, &h0, problem)?;
    Ok((kernel, plan))
}
