//! Numerical health checks: symplectic identity suites, steering exactness,
//! and duality cross-checks on randomized instances.
//!
//! These are the user-facing counterpart of the test suite — `hcs verify`
//! runs them against freshly generated random instances and reports the
//! worst residuals per check. The instance generators here are also what
//! the crate's own property and acceptance tests draw from.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::hybrid_analytic::{
    build_hybrid_kernel, hybrid_kernel_schedule, jump_kernel, solve_invertible_path,
    HybridSteeringProblem,
};
use crate::linalg::{min_eigenvalue, sym, Schedule};
use crate::sdp_steering::{
    build_prior, joint_prior_covariance, objective_constant, objective_eval, solve_sdp,
    SdpProblem,
};
use crate::smooth_steering::{
    hamiltonian_kernel, hamiltonian_kernel_schedule, riccati_integrate, solve_segment,
    solve_smooth_cs, terminal_pi, KernelBlocks, KernelDirection, RiccatiKind, Segment,
};

/// One named residual check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.residual.is_finite() && self.residual <= self.tolerance
    }
}

/// A suite of checks with a shared topic.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass())
    }
}

// ---------------------------------------------------------------------------
// random instance generation

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random symmetric positive definite matrix `L L' + d I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n, scale);
    sym(&(&l * l.transpose())) + DMatrix::identity(n, n) * (0.1 * scale * scale)
}

/// Random constant-coefficient segment with controllable input.
pub fn random_segment(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    t0: f64,
    tf: f64,
    dt: f64,
    with_state_cost: bool,
) -> Segment {
    let a = random_matrix(rng, n, n, 0.6 / (n as f64).sqrt());
    // full-row-rank input coupling keeps the segment controllable
    let mut b = random_matrix(rng, n, m, 0.4);
    for i in 0..n.min(m) {
        b[(i, i)] += 1.0;
    }
    let q = if with_state_cost {
        let l = random_matrix(rng, n, n, 0.3);
        sym(&(&l * l.transpose()))
    } else {
        DMatrix::zeros(n, n)
    };
    Segment::new(
        Schedule::constant(a),
        Schedule::constant(b),
        Schedule::constant(q),
        t0,
        tf,
        dt,
    )
}

/// Random well-conditioned square jump matrix `I + s R`.
pub fn random_invertible_jump(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let xi = DMatrix::identity(n, n) + random_matrix(rng, n, n, 0.4);
        if crate::linalg::cond_2(&xi) < 50.0 {
            return xi;
        }
    }
}

/// Random two-segment hybrid problem with an invertible jump.
pub fn random_invertible_hybrid(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    dt: f64,
) -> HybridSteeringProblem {
    let t_jump = 0.4 + 0.3 * rng.gen::<f64>();
    let horizon = t_jump + 0.4 + 0.3 * rng.gen::<f64>();
    let seg1 = random_segment(rng, n, m, 0.0, t_jump, dt, false);
    let seg2 = random_segment(rng, n, m, t_jump, horizon, dt, false);
    HybridSteeringProblem {
        segments: vec![seg1, seg2],
        jumps: vec![random_invertible_jump(rng, n)],
        sigma0: random_spd(rng, n, 0.4),
        sigma_f: random_spd(rng, n, 0.3),
        epsilon: 0.3 + 0.5 * rng.gen::<f64>(),
    }
}

/// Per-identity residuals of the six symplectic block relations.
pub fn kernel_identity_residuals(k: &KernelBlocks) -> [f64; 6] {
    let n = k.state_dim();
    let id = DMatrix::identity(n, n);
    let checks = [
        k.phi11.transpose() * &k.phi22 - k.phi21.transpose() * &k.phi12 - &id,
        k.phi12.transpose() * &k.phi22 - k.phi22.transpose() * &k.phi12,
        k.phi21.transpose() * &k.phi11 - k.phi11.transpose() * &k.phi21,
        &k.phi11 * k.phi22.transpose() - &k.phi12 * k.phi21.transpose() - &id,
        &k.phi12 * k.phi11.transpose() - &k.phi11 * k.phi12.transpose(),
        &k.phi21 * k.phi22.transpose() - &k.phi22 * k.phi21.transpose(),
    ];
    let scale = 1.0 + k.assemble().norm_squared();
    let mut out = [0.0; 6];
    for (i, c) in checks.iter().enumerate() {
        out[i] = c.norm() / scale;
    }
    out
}

// ---------------------------------------------------------------------------
// suites

/// Symplectic identity suite: smooth kernels, products, jump kernels, and
/// PSD-order monotonicity of the hybrid witness.
pub fn kernels_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_smooth = 0.0_f64;
    let mut worst_product = 0.0_f64;
    let mut worst_jump = 0.0_f64;
    let mut worst_hybrid = 0.0_f64;
    let mut worst_monotone = 0.0_f64;
    for _ in 0..instances {
        let n = 1 + rng.gen_range(0..4);
        let m = 1 + rng.gen_range(0..n);
        let seg = random_segment(&mut rng, n, m, 0.0, 0.8, 1e-3, true);
        let k = hamiltonian_kernel(&seg)?;
        worst_smooth = worst_smooth.max(
            kernel_identity_residuals(&k)
                .into_iter()
                .fold(0.0, f64::max),
        );
        // product preservation
        let seg_b = random_segment(&mut rng, n, m, 0.8, 1.4, 1e-3, true);
        let kb = hamiltonian_kernel(&seg_b)?;
        let prod = kb.compose_after(&k);
        worst_product = worst_product.max(
            kernel_identity_residuals(&prod)
                .into_iter()
                .fold(0.0, f64::max),
        );
        // jump-kernel preservation
        let xi = random_invertible_jump(&mut rng, n);
        let jk = jump_kernel(&xi, 0.8)?;
        worst_jump = worst_jump.max(
            kernel_identity_residuals(&jk)
                .into_iter()
                .fold(0.0, f64::max),
        );
        let hybrid = jk.compose_after(&k);
        let hybrid = kb.compose_after(&hybrid);
        worst_hybrid = worst_hybrid.max(
            kernel_identity_residuals(&hybrid)
                .into_iter()
                .fold(0.0, f64::max),
        );
    }
    // monotonicity of phi11^-1 phi12 across a jump, on a fixed instance
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let problem = random_invertible_hybrid(&mut rng, 2, 2, 1e-3);
        let kernel = build_hybrid_kernel(&problem)?;
        let sched = hybrid_kernel_schedule(&problem, &kernel)?;
        let mut prev: Option<DMatrix<f64>> = None;
        let n = problem.segments[0].state_dim();
        for (i, phi) in sched.values().iter().enumerate() {
            let blocks = KernelBlocks::from_full(
                phi,
                0.0,
                sched.times()[i],
                KernelDirection::Forward,
            );
            let Ok(w) = blocks.monotone_witness() else {
                continue; // phi11 singular exactly at the start
            };
            if let Some(p) = prev {
                let defect = (-min_eigenvalue(&(p - &w))).max(0.0);
                worst_monotone = worst_monotone.max(defect);
            }
            prev = Some(w);
            let _ = n;
        }
    }
    Ok(SuiteReport {
        suite: "kernels".into(),
        checks: vec![
            CheckResult {
                name: "smooth kernel identities".into(),
                residual: worst_smooth,
                tolerance: 1e-8,
            },
            CheckResult {
                name: "product preservation".into(),
                residual: worst_product,
                tolerance: 1e-8,
            },
            CheckResult {
                name: "jump kernel identities".into(),
                residual: worst_jump,
                tolerance: 1e-8,
            },
            CheckResult {
                name: "hybrid composition identities".into(),
                residual: worst_hybrid,
                tolerance: 1e-8,
            },
            CheckResult {
                name: "monotone witness across jump".into(),
                residual: worst_monotone,
                tolerance: 1e-8,
            },
        ],
    })
}

/// Riccati/steering suite: terminal exactness, kernel-vs-ODE agreement,
/// boundary coupling, and the two boundary closed forms.
pub fn riccati_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_terminal = 0.0_f64;
    let mut worst_coupling = 0.0_f64;
    let mut worst_kernel_ode = 0.0_f64;
    let mut worst_terminal_form = 0.0_f64;
    let mut worst_hybrid_terminal = 0.0_f64;
    for i in 0..instances {
        let n = 1 + rng.gen_range(0..4);
        let m = 1 + rng.gen_range(0..n);
        let seg = random_segment(&mut rng, n, m, 0.0, 0.9, 2e-4, false);
        let sigma0 = random_spd(&mut rng, n, 0.4);
        let sigma_f = random_spd(&mut rng, n, 0.3);
        let eps = 0.3 + 0.5 * rng.gen::<f64>();
        let sol = solve_segment(&seg, &sigma0, &sigma_f, eps)?;
        worst_terminal = worst_terminal.max(sol.terminal_error());
        // boundary coupling at tf: eps Sigma^-1 = Pi + H
        let lhs = sym(&sigma_f).try_inverse().unwrap() * eps;
        let rhs = sol.pi_schedule.last() + sol.h_schedule.last();
        worst_coupling = worst_coupling.max((lhs - rhs).norm() / (1.0 + eps));
        // terminal closed form vs forward integration
        let kernel = hamiltonian_kernel(&seg)?;
        let pi_f_closed = terminal_pi(&sigma0, &sigma_f, &kernel, eps)?;
        worst_terminal_form = worst_terminal_form
            .max((sol.pi_schedule.last() - &pi_f_closed).norm() / (1.0 + pi_f_closed.norm()));
        // kernel propagation vs ODE on the first instance only (dense walk)
        if i == 0 {
            let (sched, _) = hamiltonian_kernel_schedule(&seg)?;
            let pi0 = sol.pi_schedule.first().clone();
            let pi_path = riccati_integrate(&pi0, &seg, true, RiccatiKind::Pi)?;
            for (j, phi) in sched.values().iter().enumerate().step_by(50) {
                let x = DMatrix::from(phi.view((0, 0), (n, n)))
                    + phi.view((0, n), (n, n)) * &pi0;
                let y = DMatrix::from(phi.view((n, 0), (n, n)))
                    + phi.view((n, n), (n, n)) * &pi0;
                if let Some(x_inv) = x.try_inverse() {
                    let from_kernel = y * x_inv;
                    let from_ode = pi_path.at(sched.times()[j]);
                    worst_kernel_ode = worst_kernel_ode
                        .max((from_kernel - from_ode).norm() / (1.0 + pi0.norm()));
                }
            }
        }
    }
    // hybrid steering exactness on invertible jumps
    for _ in 0..(instances / 2).max(1) {
        let n = 1 + rng.gen_range(0..3);
        let problem = random_invertible_hybrid(&mut rng, n, n, 2e-4);
        let (_, plan) = solve_invertible_path(&problem)?;
        worst_hybrid_terminal = worst_hybrid_terminal.max(plan.terminal_error());
    }
    Ok(SuiteReport {
        suite: "riccati".into(),
        checks: vec![
            CheckResult {
                name: "smooth terminal steering".into(),
                residual: worst_terminal,
                tolerance: 1e-6,
            },
            CheckResult {
                name: "hybrid terminal steering".into(),
                residual: worst_hybrid_terminal,
                tolerance: 1e-6,
            },
            CheckResult {
                name: "boundary coupling eps*inv(Sigma) = Pi + H".into(),
                residual: worst_coupling,
                tolerance: 1e-6,
            },
            CheckResult {
                name: "kernel-propagated vs integrated Riccati".into(),
                residual: worst_kernel_ode,
                tolerance: 1e-7,
            },
            CheckResult {
                name: "terminal closed form vs forward integration".into(),
                residual: worst_terminal_form,
                tolerance: 1e-6,
            },
        ],
    })
}

/// Duality suite: Girsanov energy/KL identity, objective-vs-KL equality,
/// SDP-vs-analytic agreement, and jump-constraint exactness.
pub fn sdp_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_girsanov = 0.0_f64;
    let mut worst_duality = 0.0_f64;
    let mut worst_agreement = 0.0_f64;
    let mut worst_constraint = 0.0_f64;
    for _ in 0..instances.max(1) {
        let n = 1 + rng.gen_range(0..3);
        let m = n; // square input for controllability
        let seg = random_segment(&mut rng, n, m, 0.0, 0.8, 2e-4, false);
        let sigma0 = random_spd(&mut rng, n, 0.4);
        let sigma_f = random_spd(&mut rng, n, 0.3);
        let eps = 0.4 + 0.4 * rng.gen::<f64>();
        worst_girsanov = worst_girsanov.max(girsanov_residual(&seg, &sigma0, &sigma_f, eps)?);
    }
    {
        // objective-vs-KL on a scalar instance (the identity is dimension free)
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
        let seg1 = random_segment(&mut rng, 1, 1, 0.0, 0.5, 1e-3, false);
        let seg2 = random_segment(&mut rng, 1, 1, 0.5, 1.0, 1e-3, false);
        let xi = DMatrix::from_element(1, 1, 0.4 + rng.gen::<f64>());
        let sigma0 = random_spd(&mut rng, 1, 0.5);
        let sigma_f = random_spd(&mut rng, 1, 0.4);
        let p = SdpProblem::from_segments(&seg1, &seg2, &xi, &sigma0, &sigma_f, 0.7)?;
        let prior1 = build_prior(&seg1)?;
        let prior2 = build_prior(&seg2)?;
        let sm = random_spd(&mut rng, 1, 0.5) + DMatrix::identity(1, 1) * 0.2;
        let w1 = DMatrix::from_element(1, 1, 0.1);
        let w2 = DMatrix::from_element(1, 1, 0.05);
        if let Ok(j) = objective_eval(&sm, &w1, &w2, &p, 0.0) {
            let c = objective_constant(&p)?;
            let sp = &xi * &sm * xi.transpose();
            let kl = |spm: &DMatrix<f64>, sq: &DMatrix<f64>| {
                let d = spm.nrows() as f64;
                0.5 * ((sq.clone().try_inverse().unwrap() * spm).trace() - d
                    + crate::linalg::logdet_pd(sq).unwrap()
                    - crate::linalg::logdet_pd(spm).unwrap())
            };
            let j1 = DMatrix::from_row_slice(
                2,
                2,
                &[sigma0[(0, 0)], w1[(0, 0)], w1[(0, 0)], sm[(0, 0)]],
            );
            let j2 = DMatrix::from_row_slice(
                2,
                2,
                &[sp[(0, 0)], w2[(0, 0)], w2[(0, 0)], sigma_f[(0, 0)]],
            );
            let q1 = joint_prior_covariance(&prior1, &sigma0, 0.7);
            let q2 = joint_prior_covariance(&prior2, &sp, 0.7);
            let kl_sum = kl(&j1, &q1) + kl(&j2, &q2);
            worst_duality = (kl_sum - 0.5 * (j + c)).abs() / (1.0 + kl_sum.abs());
        }
    }
    {
        // SDP vs analytic on one invertible instance
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        let problem = random_invertible_hybrid(&mut rng, 2, 2, 5e-4);
        let (_, analytic) = solve_invertible_path(&problem)?;
        let p = SdpProblem::from_segments(
            &problem.segments[0],
            &problem.segments[1],
            &problem.jumps[0],
            &problem.sigma0,
            &problem.sigma_f,
            problem.epsilon,
        )?;
        let sol = solve_sdp(&p)?;
        worst_agreement = (sol.sigma_minus.clone() - analytic.sigma_minus().unwrap()).amax();
        worst_constraint = (&sol.sigma_plus
            - &problem.jumps[0] * &sol.sigma_minus * problem.jumps[0].transpose())
            .norm();
    }
    Ok(SuiteReport {
        suite: "sdp".into(),
        checks: vec![
            CheckResult {
                name: "control energy vs endpoint KL (Girsanov)".into(),
                residual: worst_girsanov,
                tolerance: 1e-4,
            },
            CheckResult {
                name: "six-term objective vs direct Gaussian KL".into(),
                residual: worst_duality,
                tolerance: 1e-8,
            },
            CheckResult {
                name: "SDP vs analytic pre-jump covariance".into(),
                residual: worst_agreement,
                tolerance: 1e-3,
            },
            CheckResult {
                name: "post-jump constraint exactness".into(),
                residual: worst_constraint,
                tolerance: 1e-12,
            },
        ],
    })
}

/// Control-energy / relative-entropy agreement on one smooth zero-mean
/// segment with zero state cost: `E int |u|^2 dt / (2 eps)` against the KL
/// divergence between the controlled and prior joint boundary Gaussians.
pub fn girsanov_residual(
    seg: &Segment,
    sigma0: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
    eps: f64,
) -> Result<f64> {
    let n = seg.state_dim();
    let kernel = hamiltonian_kernel(seg)?;
    let (pi0, _) = solve_smooth_cs(sigma0, sigma_f, &kernel, eps)?;
    // joint pass: Pi, closed-loop transition, Sigma
    let mut y0 = DMatrix::zeros(n, 3 * n);
    y0.view_mut((0, 0), (n, n)).copy_from(&pi0);
    y0.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    y0.view_mut((0, 2 * n), (n, n)).copy_from(sigma0);
    let rhs = |t: f64, y: &DMatrix<f64>| {
        let pi: DMatrix<f64> = y.view((0, 0), (n, n)).into();
        let phi: DMatrix<f64> = y.view((0, n), (n, n)).into();
        let sigma: DMatrix<f64> = y.view((0, 2 * n), (n, n)).into();
        let a = seg.a.at(t);
        let b = seg.b.at(t);
        let bbt = &b * b.transpose();
        let acl = &a - &bbt * &pi;
        let dpi = -(a.transpose() * &pi + &pi * &a - &pi * &bbt * &pi + seg.q.at(t));
        let dphi = &acl * &phi;
        let dsigma = &acl * &sigma + &sigma * acl.transpose() + &bbt * eps;
        let mut dy = DMatrix::zeros(n, 3 * n);
        dy.view_mut((0, 0), (n, n)).copy_from(&dpi);
        dy.view_mut((0, n), (n, n)).copy_from(&dphi);
        dy.view_mut((0, 2 * n), (n, n)).copy_from(&dsigma);
        dy
    };
    let joint = crate::linalg::rk4_span(seg.t0, seg.tf, seg.dt, y0, &rhs, &|_t, y| Ok(y))?;
    // control energy by trapezoid on the joint path
    let mut samples = Vec::with_capacity(joint.len());
    for (i, &t) in joint.times().iter().enumerate() {
        let y = &joint.values()[i];
        let pi: DMatrix<f64> = y.view((0, 0), (n, n)).into();
        let sigma: DMatrix<f64> = y.view((0, 2 * n), (n, n)).into();
        let b = seg.b.at(t);
        let bbt = &b * b.transpose();
        samples.push((&pi * &bbt * &pi * &sigma).trace());
    }
    let energy = crate::linalg::trapezoid(joint.times(), &samples) / (2.0 * eps);
    // endpoint KL against the uncontrolled prior
    let prior = build_prior(seg)?;
    let phi_cl: DMatrix<f64> = joint.last().view((0, n), (n, n)).into();
    let sigma_t: DMatrix<f64> = joint.last().view((0, 2 * n), (n, n)).into();
    let cross = &phi_cl * sigma0;
    let mut joint_p = DMatrix::zeros(2 * n, 2 * n);
    joint_p.view_mut((0, 0), (n, n)).copy_from(sigma0);
    joint_p.view_mut((0, n), (n, n)).copy_from(&cross.transpose());
    joint_p.view_mut((n, 0), (n, n)).copy_from(&cross);
    joint_p.view_mut((n, n), (n, n)).copy_from(&sigma_t);
    let joint_q = joint_prior_covariance(&prior, sigma0, eps);
    let d = (2 * n) as f64;
    let kl = 0.5
        * ((sym(&joint_q).try_inverse().unwrap() * &joint_p).trace() - d
            + crate::linalg::logdet_pd(&joint_q).unwrap()
            - crate::linalg::logdet_pd(&joint_p).unwrap());
    Ok((energy - kl).abs() / kl.abs().max(1e-12))
}

/// Runs the named suite(s).
pub fn run_suites(which: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut reports = Vec::new();
    match which {
        "kernels" => reports.push(kernels_suite(seed, 20)?),
        "riccati" => reports.push(riccati_suite(seed, 10)?),
        "sdp" => reports.push(sdp_suite(seed, 5)?),
        "all" => {
            reports.push(kernels_suite(seed, 20)?);
            reports.push(riccati_suite(seed, 10)?);
            reports.push(sdp_suite(seed, 5)?);
        }
        other => {
            return Err(crate::error::Error::Config(format!(
                "unknown suite '{other}' (kernels|riccati|sdp|all)"
            )))
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_fresh_build() {
        for report in run_suites("all", 7).unwrap() {
            for check in &report.checks {
                assert!(
                    check.pass(),
                    "{}/{} residual {} > {}",
                    report.suite,
                    check.name,
                    check.residual,
                    check.tolerance
                );
            }
        }
    }

    #[test]
    fn corrupted_kernel_fails_identity_check() {
        // negative control: flipping the sign of phi12 breaks the identities
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = random_segment(&mut rng, 2, 2, 0.0, 0.8, 1e-3, true);
        let mut k = hamiltonian_kernel(&seg).unwrap();
        let clean = kernel_identity_residuals(&k)
            .into_iter()
            .fold(0.0, f64::max);
        assert!(clean <= 1e-8);
        k.phi12 = -k.phi12;
        let corrupted = kernel_identity_residuals(&k)
            .into_iter()
            .fold(0.0, f64::max);
        assert!(
            corrupted > 1e-4,
            "corruption went undetected: residual {corrupted}"
        );
    }

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(run_suites("nope", 1).is_err());
    }
}
