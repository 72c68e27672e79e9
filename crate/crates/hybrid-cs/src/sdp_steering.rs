//! Convex solver for hybrid covariance steering with general jump maps.
//!
//! When the saltation matrix is rectangular or singular the closed-form path
//! breaks down: the post-jump covariance `Sigma+ = Xi Sigma- Xi'` may be
//! singular and the phase-space jump kernel does not exist. The problem is
//! instead posed over path distributions. Each smooth segment contributes
//! the relative entropy between the joint boundary Gaussian of the
//! controlled process and that of a fixed prior — the closed-loop system of
//! the unconstrained LQG solution for that segment. Collecting the kept
//! (candidate-dependent) terms gives a finite convex objective in
//!
//! * the pre-jump covariances `Sigma-_i` (one per jump),
//! * the per-segment boundary cross-covariances `W_j`,
//!
//! with `Sigma+_i = Xi_i Sigma-_i Xi_i'` substituted exactly. Log-det terms
//! of singular post-jump covariances cancel between the controlled and prior
//! joints, which is what keeps the objective finite; residual singular
//! inverses are handled by an `eta`-regularization `Sigma+ + eta I` with
//! continuation `eta -> 0`.
//!
//! The minimizer is found by a damped Newton interior iteration: analytic
//! gradients, per-segment finite-differenced Hessian blocks, Cholesky
//! success as the domain membership test, and backtracking line search.
//! Problem data couples only adjacent segments, so assembly cost grows
//! linearly with the number of jumps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hybrid_analytic::{HybridSteeringProblem, HybridSteeringSolution, JumpRecord};
use crate::linalg::{inverse, is_pd, logdet_pd, rank, rk4_span, sym, Schedule};
use crate::smooth_steering::{
    hamiltonian_kernel, riccati_integrate, solve_segment_from_initial,
    solve_segment_from_terminal, solve_smooth_cs, terminal_pi, RiccatiKind, Segment,
};

/// Prior data of one segment: the unconstrained-LQG closed loop, its state
/// transition over the segment, and the noise Gramian.
#[derive(Debug, Clone)]
pub struct PriorSegment {
    /// Closed-loop drift `A_hat(t) = A - B B' Pi_hat` on the segment grid.
    pub a_hat: Schedule,
    /// Transition matrix of `A_hat` over the whole segment.
    pub phi_ahat: DMatrix<f64>,
    /// `int Phi(t,t0) B B' Phi(t,t0)' dt` over the segment.
    pub gramian: DMatrix<f64>,
    /// LQG Riccati solution with zero terminal value.
    pub pi_hat_schedule: Schedule,
}

/// Solves the unconstrained LQG prior of a segment: backward Riccati from a
/// zero terminal value, then a joint forward pass for the closed-loop
/// transition matrix and the Gramian.
pub fn build_prior(segment: &Segment) -> Result<PriorSegment> {
    let n = segment.state_dim();
    let zero = DMatrix::zeros(n, n);
    let pi_hat = riccati_integrate(&zero, segment, false, RiccatiKind::Pi)?;
    let pi_hat0 = pi_hat.first().clone();
    // joint forward system [Pi_hat | Phi | S]: stage-consistent closed loop
    let mut y0 = DMatrix::zeros(n, 3 * n);
    y0.view_mut((0, 0), (n, n)).copy_from(&pi_hat0);
    y0.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    let rhs = |t: f64, y: &DMatrix<f64>| {
        let pi: DMatrix<f64> = y.view((0, 0), (n, n)).into();
        let phi: DMatrix<f64> = y.view((0, n), (n, n)).into();
        let a = segment.a.at(t);
        let b = segment.b.at(t);
        let q = segment.q.at(t);
        let bbt = &b * b.transpose();
        let a_hat = &a - &bbt * &pi;
        let dpi = -(a.transpose() * &pi + &pi * &a - &pi * &bbt * &pi + q);
        let dphi = &a_hat * &phi;
        let ds = &phi * &bbt * phi.transpose();
        let mut dy = DMatrix::zeros(n, 3 * n);
        dy.view_mut((0, 0), (n, n)).copy_from(&dpi);
        dy.view_mut((0, n), (n, n)).copy_from(&dphi);
        dy.view_mut((0, 2 * n), (n, n)).copy_from(&ds);
        dy
    };
    let joint = rk4_span(segment.t0, segment.tf, segment.dt, y0, &rhs, &|_t, y| Ok(y))?;
    let phi_ahat: DMatrix<f64> = joint.last().view((0, n), (n, n)).into();
    let gramian = sym(&joint.last().view((0, 2 * n), (n, n)).into());
    let evs = gramian.symmetric_eigenvalues();
    let max_ev = evs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_ev = evs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_ev > 1e-12 * max_ev.max(0.0)) {
        return Err(Error::GramianSingular {
            ratio: if max_ev > 0.0 { min_ev / max_ev } else { 0.0 },
        });
    }
    let a_hat_values: Vec<DMatrix<f64>> = pi_hat
        .times()
        .iter()
        .zip(pi_hat.values())
        .map(|(&t, p)| {
            let b = segment.b.at(t);
            segment.a.at(t) - &b * b.transpose() * p
        })
        .collect();
    Ok(PriorSegment {
        a_hat: Schedule::new(pi_hat.times().to_vec(), a_hat_values),
        phi_ahat,
        gramian,
        pi_hat_schedule: pi_hat,
    })
}

/// Joint boundary covariance of the prior process started at `sigma_start`:
/// `[[S, S Phi'], [Phi S, Phi S Phi' + eps G]]`.
pub fn joint_prior_covariance(
    prior: &PriorSegment,
    sigma_start: &DMatrix<f64>,
    epsilon: f64,
) -> DMatrix<f64> {
    let n = sigma_start.nrows();
    let phi = &prior.phi_ahat;
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    let cross = phi * sigma_start;
    out.view_mut((0, 0), (n, n)).copy_from(sigma_start);
    out.view_mut((0, n), (n, n)).copy_from(&cross.transpose());
    out.view_mut((n, 0), (n, n)).copy_from(&cross);
    out.view_mut((n, n), (n, n))
        .copy_from(&(phi * sigma_start * phi.transpose() + &prior.gramian * epsilon));
    out
}

/// Single-jump convex program data.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma_f: DMatrix<f64>,
    pub epsilon: f64,
    /// Regularizer continuation values; empty selects them automatically
    /// from the rank of `xi`.
    pub eta_schedule: Vec<f64>,
}

impl SdpProblem {
    /// Assembles the program from two segments and the jump between them.
    pub fn from_segments(
        seg1: &Segment,
        seg2: &Segment,
        xi: &DMatrix<f64>,
        sigma0: &DMatrix<f64>,
        sigma_f: &DMatrix<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let p1 = build_prior(seg1)?;
        let p2 = build_prior(seg2)?;
        Ok(SdpProblem {
            s1: p1.gramian,
            s2: p2.gramian,
            phi1: p1.phi_ahat,
            phi2: p2.phi_ahat,
            xi: xi.clone(),
            sigma0: sigma0.clone(),
            sigma_f: sigma_f.clone(),
            epsilon,
            eta_schedule: Vec::new(),
        })
    }

    fn chain(&self) -> ChainSpec {
        ChainSpec {
            phis: vec![self.phi1.clone(), self.phi2.clone()],
            gramians: vec![self.s1.clone(), self.s2.clone()],
            jumps: vec![self.xi.clone()],
            sigma0: self.sigma0.clone(),
            sigma_f: self.sigma_f.clone(),
            epsilon: self.epsilon,
        }
    }
}

/// Solver controls shared by the single-jump and chain entry points.
#[derive(Debug, Clone)]
pub struct SdpSettings {
    pub gradient_tol: f64,
    pub max_iterations: usize,
    pub eta_schedule: Vec<f64>,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            gradient_tol: 1e-9,
            max_iterations: 300,
            eta_schedule: Vec::new(),
        }
    }
}

/// Stationarity and feasibility diagnostics at the returned solution.
#[derive(Debug, Clone)]
pub struct KktResidual {
    pub gradient_norm: f64,
    /// `|Sigma+ - Xi Sigma- Xi'|`; zero by substitution, reported anyway.
    pub constraint_violation: f64,
    /// Smallest eigenvalue margin over the log-det domain blocks.
    pub min_domain_margin: f64,
}

/// Optimizers of the single-jump program.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub sigma_minus: DMatrix<f64>,
    pub sigma_plus: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    /// Joint feasibility certificate `[[Sigma0, W1'], [W1, Sigma-]]`.
    pub y1: DMatrix<f64>,
    /// Schur-complement slack `SigmaT - W2 (Sigma+ + eta I)^{-1} W2'`.
    pub y2: DMatrix<f64>,
    pub objective: f64,
    pub kkt_residual: KktResidual,
    pub iterations: usize,
    /// `(eta, Sigma- at eta)` for every continuation stage.
    pub eta_solutions: Vec<(f64, DMatrix<f64>)>,
}

/// Chain program over `k+1` prior segments and `k` jumps.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub phis: Vec<DMatrix<f64>>,
    pub gramians: Vec<DMatrix<f64>>,
    pub jumps: Vec<DMatrix<f64>>,
    pub sigma0: DMatrix<f64>,
    pub sigma_f: DMatrix<f64>,
    pub epsilon: f64,
}

/// Chain solution: one pre-jump covariance per junction, one boundary
/// cross-covariance per segment.
#[derive(Debug, Clone)]
pub struct ChainSolution {
    pub sigma_minus: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub kkt_residual: KktResidual,
    pub iterations: usize,
    pub eta_solutions: Vec<(f64, Vec<DMatrix<f64>>)>,
}

impl ChainSolution {
    pub fn sigma_plus(&self, spec: &ChainSpec, junction: usize) -> DMatrix<f64> {
        sym(&(&spec.jumps[junction] * &self.sigma_minus[junction]
            * spec.jumps[junction].transpose()))
    }
}

// ---------------------------------------------------------------------------
// objective machinery

struct ChainWork {
    k: usize,                 // number of jumps
    dims: Vec<usize>,         // state dim per segment, len k+1
    s_inv: Vec<DMatrix<f64>>, // Gramian inverses
    g: Vec<DMatrix<f64>>,     // S^-1 Phi
    t_mat: Vec<DMatrix<f64>>, // Phi' S^-1 Phi
    spec: ChainSpec,
    // flat layout offsets
    w_offsets: Vec<usize>,
    sm_offsets: Vec<usize>,
    n_vars: usize,
}

#[derive(Debug, Clone)]
struct Vars {
    w: Vec<DMatrix<f64>>,
    sm: Vec<DMatrix<f64>>, // sm[i] = Sigma-_{i+1}, dimension dims[i]
}

impl ChainWork {
    fn new(spec: ChainSpec) -> Result<Self> {
        let k = spec.jumps.len();
        assert_eq!(spec.phis.len(), k + 1);
        assert_eq!(spec.gramians.len(), k + 1);
        let dims: Vec<usize> = spec.phis.iter().map(|p| p.nrows()).collect();
        let mut s_inv = Vec::with_capacity(k + 1);
        let mut g = Vec::with_capacity(k + 1);
        let mut t_mat = Vec::with_capacity(k + 1);
        for (s, phi) in spec.gramians.iter().zip(&spec.phis) {
            let si = sym(&inverse(&sym(s), "segment Gramian")?);
            g.push(&si * phi);
            t_mat.push(sym(&(phi.transpose() * &si * phi)));
            s_inv.push(si);
        }
        let mut w_offsets = Vec::with_capacity(k + 1);
        let mut sm_offsets = Vec::with_capacity(k);
        let mut cursor = 0usize;
        for (j, &n) in dims.iter().enumerate() {
            w_offsets.push(cursor);
            cursor += n * n;
            if j < k {
                sm_offsets.push(cursor);
                cursor += n * (n + 1) / 2;
            }
        }
        Ok(ChainWork {
            k,
            dims,
            s_inv,
            g,
            t_mat,
            spec,
            w_offsets,
            sm_offsets,
            n_vars: cursor,
        })
    }

    fn flatten(&self, vars: &Vars) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_vars);
        for (j, w) in vars.w.iter().enumerate() {
            let off = self.w_offsets[j];
            for (idx, v) in w.iter().enumerate() {
                x[off + idx] = *v;
            }
        }
        for (i, s) in vars.sm.iter().enumerate() {
            let off = self.sm_offsets[i];
            let n = s.nrows();
            let mut c = 0;
            for col in 0..n {
                for row in col..n {
                    x[off + c] = s[(row, col)];
                    c += 1;
                }
            }
        }
        x
    }

    fn unflatten(&self, x: &DVector<f64>) -> Vars {
        let mut w = Vec::with_capacity(self.k + 1);
        for (j, &n) in self.dims.iter().enumerate() {
            let off = self.w_offsets[j];
            w.push(DMatrix::from_fn(n, n, |r, c| x[off + c * n + r]));
        }
        let mut sm = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let n = self.dims[i];
            let off = self.sm_offsets[i];
            let mut s = DMatrix::zeros(n, n);
            let mut c = 0;
            for col in 0..n {
                for row in col..n {
                    s[(row, col)] = x[off + c];
                    s[(col, row)] = x[off + c];
                    c += 1;
                }
            }
            sm.push(s);
        }
        Vars { w, sm }
    }

    /// Start covariance of segment `j` (with the regularizer for `j >= 1`).
    fn start(&self, vars: &Vars, j: usize, eta: f64) -> DMatrix<f64> {
        if j == 0 {
            self.spec.sigma0.clone()
        } else {
            let xi = &self.spec.jumps[j - 1];
            let mut s = sym(&(xi * &vars.sm[j - 1] * xi.transpose()));
            for d in 0..s.nrows() {
                s[(d, d)] += eta;
            }
            s
        }
    }

    fn end<'a>(&'a self, vars: &'a Vars, j: usize) -> &'a DMatrix<f64> {
        if j == self.k {
            &self.spec.sigma_f
        } else {
            &vars.sm[j]
        }
    }

    /// Segment contribution to the objective and its domain margin, or
    /// `None` outside the log-det domain.
    fn segment_objective(&self, vars: &Vars, j: usize, eta: f64) -> Option<(f64, f64)> {
        let eps = self.spec.epsilon;
        let start = self.start(vars, j, eta);
        let end = self.end(vars, j);
        let start_chol = sym(&start).cholesky()?;
        let w = &vars.w[j];
        let p = sym(&(end - w * start_chol.solve(&w.transpose())));
        let logdet_p = logdet_pd(&p)?;
        let mut val = -logdet_p - (2.0 / eps) * (self.g[j].transpose() * w).trace();
        if j > 0 {
            val += (&self.t_mat[j] * &start).trace() / eps;
        }
        if j < self.k {
            val += (&self.s_inv[j] * end).trace() / eps;
        }
        let margin = crate::linalg::min_eigenvalue(&p);
        Some((val, margin))
    }

    fn objective(&self, vars: &Vars, eta: f64) -> Option<f64> {
        let mut total = 0.0;
        for j in 0..=self.k {
            total += self.segment_objective(vars, j, eta)?.0;
        }
        Some(total)
    }

    /// Analytic gradient of segment `j`'s contribution, accumulated into
    /// the flat gradient vector. Returns `None` outside the domain.
    fn accumulate_segment_gradient(
        &self,
        vars: &Vars,
        j: usize,
        eta: f64,
        grad: &mut DVector<f64>,
    ) -> Option<()> {
        let eps = self.spec.epsilon;
        let start = self.start(vars, j, eta);
        let end = self.end(vars, j);
        let start_inv = sym(&sym(&start).cholesky()?.inverse());
        let w = &vars.w[j];
        let p = sym(&(end - w * &start_inv * w.transpose()));
        let p_inv = sym(&sym(&p).cholesky()?.inverse());
        // dJ/dW_j = -(2/eps) S^-1 Phi + 2 P^-1 W start^-1
        let dw = &self.g[j] * (-2.0 / eps) + &p_inv * w * &start_inv * 2.0;
        let off = self.w_offsets[j];
        for (idx, v) in dw.iter().enumerate() {
            grad[off + idx] += *v;
        }
        // dJ/d end_j = (1/eps) S^-1 - P^-1   (only while end is a variable)
        if j < self.k {
            let dend = sym(&(&self.s_inv[j] / eps - &p_inv));
            self.scatter_sym_grad(&dend, j, grad);
        }
        // dJ/d Sigma-_j via start_j = Xi Sigma- Xi' + eta I
        if j > 0 {
            let xi = &self.spec.jumps[j - 1];
            let inner =
                &self.t_mat[j] / eps - &start_inv * w.transpose() * &p_inv * w * &start_inv;
            let dsm = sym(&(xi.transpose() * inner * xi));
            self.scatter_sym_grad(&dsm, j - 1, grad);
        }
        Some(())
    }

    /// Adds the matrix gradient of a symmetric variable block into the flat
    /// parametrization (off-diagonals carry a factor 2: they appear twice).
    fn scatter_sym_grad(&self, dmat: &DMatrix<f64>, block: usize, grad: &mut DVector<f64>) {
        let off = self.sm_offsets[block];
        let n = dmat.nrows();
        let mut c = 0;
        for col in 0..n {
            for row in col..n {
                grad[off + c] += if row == col {
                    dmat[(row, col)]
                } else {
                    2.0 * dmat[(row, col)]
                };
                c += 1;
            }
        }
    }

    fn gradient(&self, vars: &Vars, eta: f64) -> Option<DVector<f64>> {
        let mut grad = DVector::zeros(self.n_vars);
        for j in 0..=self.k {
            self.accumulate_segment_gradient(vars, j, eta, &mut grad)?;
        }
        Some(grad)
    }

    /// Flat variable indices touched by segment `j`.
    fn segment_var_indices(&self, j: usize) -> Vec<usize> {
        let mut idx = Vec::new();
        if j > 0 {
            let n = self.dims[j - 1];
            let off = self.sm_offsets[j - 1];
            idx.extend(off..off + n * (n + 1) / 2);
        }
        let n = self.dims[j];
        let off = self.w_offsets[j];
        idx.extend(off..off + n * n);
        if j < self.k {
            let off = self.sm_offsets[j];
            idx.extend(off..off + n * (n + 1) / 2);
        }
        idx
    }

    /// Hessian by central differences of the analytic per-segment gradient,
    /// assembled block-by-block. Cost is linear in the number of segments.
    fn hessian(&self, x: &DVector<f64>, eta: f64) -> Option<DMatrix<f64>> {
        let mut hess = DMatrix::zeros(self.n_vars, self.n_vars);
        for j in 0..=self.k {
            let idx = self.segment_var_indices(j);
            let seg_grad = |xx: &DVector<f64>| -> Option<DVector<f64>> {
                let vars = self.unflatten(xx);
                let mut g = DVector::zeros(self.n_vars);
                self.accumulate_segment_gradient(&vars, j, eta, &mut g)?;
                Some(DVector::from_iterator(idx.len(), idx.iter().map(|&i| g[i])))
            };
            for (_col_pos, &col_var) in idx.iter().enumerate() {
                let h = 3e-6 * (1.0 + x[col_var].abs());
                let mut xp = x.clone();
                xp[col_var] += h;
                let mut xm = x.clone();
                xm[col_var] -= h;
                let (gp, gm, denom) = match (seg_grad(&xp), seg_grad(&xm)) {
                    (Some(a), Some(b)) => (a, b, 2.0 * h),
                    // near the domain boundary fall back to one-sided
                    (Some(a), None) => (a, seg_grad(x)?, h),
                    (None, Some(b)) => (seg_grad(x)?, b, h),
                    (None, None) => return None,
                };
                let col = (gp - gm) / denom;
                for (row_pos, &row_var) in idx.iter().enumerate() {
                    hess[(row_var, col_var)] += col[row_pos];
                }
            }
        }
        Some(sym(&hess))
    }

    /// Strictly feasible start: prior-propagated junction covariances and
    /// contracted prior cross-covariances.
    fn initial_vars(&self, eta: f64) -> Result<Vars> {
        let mut w = Vec::with_capacity(self.k + 1);
        let mut sm = Vec::with_capacity(self.k);
        let mut start = self.spec.sigma0.clone();
        for j in 0..=self.k {
            let eps = self.spec.epsilon;
            let end_prior = sym(
                &(&self.spec.phis[j] * &start * self.spec.phis[j].transpose()
                    + &self.spec.gramians[j] * eps),
            );
            let end = if j == self.k {
                self.spec.sigma_f.clone()
            } else {
                end_prior.clone()
            };
            // back off the prior cross-covariance until the Schur block is PD
            let start_inv = inverse(&start, "segment start covariance")?;
            let w_full = &self.spec.phis[j] * &start;
            let mut rho = 0.99;
            let mut chosen = None;
            for _ in 0..60 {
                let cand = &w_full * rho;
                let p = sym(&(&end - &cand * &start_inv * cand.transpose()));
                if is_pd(&p) {
                    chosen = Some(cand);
                    break;
                }
                rho *= 0.5;
            }
            let cand = chosen.unwrap_or_else(|| DMatrix::zeros(end.nrows(), start.nrows()));
            w.push(cand);
            if j < self.k {
                sm.push(end_prior.clone());
                let xi = &self.spec.jumps[j];
                start = sym(&(xi * &end_prior * xi.transpose()));
                for d in 0..start.nrows() {
                    start[(d, d)] += eta;
                }
            }
        }
        let vars = Vars { w, sm };
        if self.objective(&vars, eta).is_none() {
            return Err(Error::Infeasible);
        }
        Ok(vars)
    }

    /// Damped-Newton minimization at fixed `eta` from a feasible start.
    fn minimize(
        &self,
        x0: DVector<f64>,
        eta: f64,
        settings: &SdpSettings,
    ) -> Result<(DVector<f64>, f64, f64, usize)> {
        let mut x = x0;
        let mut lambda = 0.0_f64;
        let mut iterations = 0;
        for _ in 0..settings.max_iterations {
            iterations += 1;
            let vars = self.unflatten(&x);
            let obj = self.objective(&vars, eta).ok_or(Error::Infeasible)?;
            let grad = self.gradient(&vars, eta).ok_or(Error::Infeasible)?;
            let gnorm = grad.norm();
            if std::env::var("HCS_SDP_TRACE").is_ok() {
                eprintln!("iter {iterations}: obj {obj:.12e} gnorm {gnorm:.3e} lambda {lambda:.1e}");
            }
            if gnorm <= settings.gradient_tol * (1.0 + obj.abs()) {
                return Ok((x, obj, gnorm, iterations));
            }
            let hess = self.hessian(&x, eta).ok_or(Error::Infeasible)?;
            // damped Newton direction: escalate damping until the
            // factorization succeeds and a descent step is accepted
            let mut step_taken = false;
            for _ in 0..40 {
                let mut h = hess.clone();
                for d in 0..self.n_vars {
                    h[(d, d)] += lambda;
                }
                let Some(chol) = h.cholesky() else {
                    lambda = (lambda * 10.0).max(1e-10);
                    continue;
                };
                let dir = chol.solve(&(-&grad));
                let slope = grad.dot(&dir);
                if slope >= 0.0 {
                    lambda = (lambda * 10.0).max(1e-10);
                    continue;
                }
                let mut alpha = 1.0_f64;
                for _ in 0..60 {
                    let x_try = &x + &dir * alpha;
                    let vars_try = self.unflatten(&x_try);
                    if let Some(obj_try) = self.objective(&vars_try, eta) {
                        if obj_try <= obj + 1e-4 * alpha * slope {
                            x = x_try;
                            step_taken = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if step_taken {
                    lambda *= 0.25;
                    if lambda < 1e-12 {
                        lambda = 0.0;
                    }
                    break;
                }
                lambda = (lambda * 10.0).max(1e-10);
            }
            if !step_taken {
                return Err(Error::MaxIterations {
                    iterations,
                    gradient_norm: gnorm,
                });
            }
        }
        let vars = self.unflatten(&x);
        let gnorm = self
            .gradient(&vars, eta)
            .map(|g| g.norm())
            .unwrap_or(f64::NAN);
        Err(Error::MaxIterations {
            iterations,
            gradient_norm: gnorm,
        })
    }
}

/// Whether any jump in the chain is rank-deficient (needs `eta > 0`).
fn needs_continuation(spec: &ChainSpec) -> bool {
    spec.jumps.iter().any(|xi| rank(xi, 1e-10) < xi.nrows())
}

/// Solves the chain program with `eta`-continuation and Richardson
/// extrapolation of the final two stages when the jumps are rank-deficient.
pub fn solve_chain(spec: &ChainSpec, settings: &SdpSettings) -> Result<ChainSolution> {
    let work = ChainWork::new(spec.clone())?;
    let etas: Vec<f64> = if !settings.eta_schedule.is_empty() {
        settings.eta_schedule.clone()
    } else if needs_continuation(spec) {
        vec![1e-2, 1e-4, 1e-6]
    } else {
        vec![0.0]
    };
    let mut x = work.flatten(&work.initial_vars(etas[0])?);
    let mut eta_solutions = Vec::new();
    let mut stage_results: Vec<(f64, DVector<f64>, f64, f64)> = Vec::new();
    let mut total_iterations = 0;
    for &eta in &etas {
        let (x_new, obj, gnorm, iters) = work.minimize(x.clone(), eta, settings)?;
        total_iterations += iters;
        let vars = work.unflatten(&x_new);
        eta_solutions.push((eta, vars.sm.clone()));
        stage_results.push((eta, x_new.clone(), obj, gnorm));
        x = x_new;
    }
    // Richardson extrapolation to eta -> 0 across the last two stages
    let (x_final, obj_final, gnorm_final) = if etas.len() >= 2 && etas[etas.len() - 1] > 0.0 {
        let (eta1, x1, _, _) = &stage_results[stage_results.len() - 2];
        let (eta2, x2, obj2, g2) = &stage_results[stage_results.len() - 1];
        let factor = eta2 / (eta1 - eta2);
        (x2 + (x2 - x1) * factor, *obj2, *g2)
    } else {
        let (_, xl, obj, g) = stage_results.last().unwrap().clone();
        (xl, obj, g)
    };
    let vars = work.unflatten(&x_final);
    // domain margin reported at the smallest positive eta (the extrapolated
    // point may sit on the boundary when Sigma+ is singular)
    let margin_eta = *etas.last().unwrap();
    let last_x = &stage_results.last().unwrap().1;
    let margin = (0..=work.k)
        .map(|j| {
            work.segment_objective(&work.unflatten(last_x), j, margin_eta)
                .map(|(_, m)| m)
                .unwrap_or(f64::NAN)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(ChainSolution {
        sigma_minus: vars.sm.iter().map(sym).collect(),
        w: vars.w,
        objective: obj_final,
        kkt_residual: KktResidual {
            gradient_norm: gnorm_final,
            constraint_violation: 0.0,
            min_domain_margin: margin,
        },
        iterations: total_iterations,
        eta_solutions,
    })
}

/// Six-term convex objective of the single-jump program at a candidate
/// point. Finite exactly on the log-det domain; anything else is an error.
pub fn objective_eval(
    sigma_minus: &DMatrix<f64>,
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    problem: &SdpProblem,
    eta: f64,
) -> Result<f64> {
    let work = ChainWork::new(problem.chain())?;
    let vars = Vars {
        w: vec![w1.clone(), w2.clone()],
        sm: vec![sigma_minus.clone()],
    };
    work.objective(&vars, eta)
        .ok_or_else(|| Error::InfeasibleLogdetDomain {
            context: "candidate leaves the log-det cone".into(),
        })
}

/// The candidate-independent constant relating the six-term objective to
/// the exact sum of joint-boundary KL divergences:
/// `KL_1 + KL_2 = (objective + constant) / 2`.
pub fn objective_constant(problem: &SdpProblem) -> Result<f64> {
    let n1 = problem.sigma0.nrows() as f64;
    let n2 = problem.sigma_f.nrows() as f64;
    let eps = problem.epsilon;
    let s1_inv = inverse(&sym(&problem.s1), "gramian 1")?;
    let s2_inv = inverse(&sym(&problem.s2), "gramian 2")?;
    let t1 = problem.phi1.transpose() * &s1_inv * &problem.phi1;
    let c = -n1 - n2
        + (t1 * &problem.sigma0).trace() / eps
        + (&s2_inv * &problem.sigma_f).trace() / eps
        + logdet_pd(&(&problem.s1 * eps)).ok_or(Error::GramianSingular { ratio: 0.0 })?
        + logdet_pd(&(&problem.s2 * eps)).ok_or(Error::GramianSingular { ratio: 0.0 })?;
    Ok(c)
}

/// Solves the single-jump program.
pub fn solve_sdp(problem: &SdpProblem) -> Result<SdpSolution> {
    let settings = SdpSettings {
        eta_schedule: problem.eta_schedule.clone(),
        ..SdpSettings::default()
    };
    let spec = problem.chain();
    let chain = solve_chain(&spec, &settings)?;
    let sigma_minus = chain.sigma_minus[0].clone();
    let sigma_plus = sym(&(&problem.xi * &sigma_minus * problem.xi.transpose()));
    let w1 = chain.w[0].clone();
    let w2 = chain.w[1].clone();
    let n1 = problem.sigma0.nrows();
    let mut y1 = DMatrix::zeros(2 * n1, 2 * n1);
    y1.view_mut((0, 0), (n1, n1)).copy_from(&problem.sigma0);
    y1.view_mut((0, n1), (n1, n1)).copy_from(&w1.transpose());
    y1.view_mut((n1, 0), (n1, n1)).copy_from(&w1);
    y1.view_mut((n1, n1), (n1, n1)).copy_from(&sigma_minus);
    // slack behind the terminal log-det, at the smallest regularizer used
    let eta_min = chain
        .eta_solutions
        .iter()
        .map(|(e, _)| *e)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let mut sigma_plus_eta = sigma_plus.clone();
    for d in 0..sigma_plus_eta.nrows() {
        sigma_plus_eta[(d, d)] += eta_min;
    }
    let y2 = sym(&(&problem.sigma_f
        - &w2
            * inverse(&sigma_plus_eta, "regularized post-jump covariance")?
            * w2.transpose()));
    Ok(SdpSolution {
        sigma_minus,
        sigma_plus,
        w1,
        w2,
        y1,
        y2,
        objective: chain.objective,
        kkt_residual: chain.kkt_residual,
        iterations: chain.iterations,
        eta_solutions: chain
            .eta_solutions
            .into_iter()
            .map(|(e, sm)| (e, sm[0].clone()))
            .collect(),
    })
}

/// Recovers the per-segment optimal controllers from solved junction
/// covariances.
///
/// The first segment is solved forward from `sigma0`. Every later segment
/// starts at a post-jump covariance that may be singular, so its Riccati
/// value is recovered at the terminal end (which never inverts the start)
/// and integrated backward. The discrete-Riccati jump identity is reported
/// as a residual, not asserted: for rank-deficient jumps it cannot hold in
/// all directions.
pub fn recover_controllers(
    chain: &ChainSolution,
    problem: &HybridSteeringProblem,
) -> Result<HybridSteeringSolution> {
    problem.validate()?;
    let k = problem.jumps.len();
    assert_eq!(chain.sigma_minus.len(), k);
    let mut segments = Vec::with_capacity(k + 1);
    let mut cost = 0.0;
    for (j, seg) in problem.segments.iter().enumerate() {
        let start = if j == 0 {
            problem.sigma0.clone()
        } else {
            let xi = &problem.jumps[j - 1];
            sym(&(xi * &chain.sigma_minus[j - 1] * xi.transpose()))
        };
        let target = if j == k {
            problem.sigma_f.clone()
        } else {
            chain.sigma_minus[j].clone()
        };
        let sol = if j == 0 {
            let kernel = hamiltonian_kernel(seg)?;
            let (pi0, h0) = solve_smooth_cs(&start, &target, &kernel, problem.epsilon)?;
            solve_segment_from_initial(seg, &start, &target, &pi0, &h0, problem.epsilon)?
        } else {
            let kernel = hamiltonian_kernel(seg)?;
            let pi_f = terminal_pi(&start, &target, &kernel, problem.epsilon)?;
            solve_segment_from_terminal(seg, &start, &target, &pi_f, problem.epsilon)?
        };
        cost += sol.expected_cost(seg);
        segments.push(sol);
    }
    let mut jumps = Vec::with_capacity(k);
    for i in 0..k {
        let xi = &problem.jumps[i];
        let pre = &segments[i];
        let post = &segments[i + 1];
        let sigma_minus = pre.sigma_schedule.last().clone();
        let sigma_plus = sym(&(xi * &sigma_minus * xi.transpose()));
        let pi_minus = pre.pi_schedule.last().clone();
        let pi_plus = post.pi_schedule.first().clone();
        let h_minus = pre.h_schedule.last().clone();
        let h_plus = post.h_schedule.first().clone();
        let jump_cost_residual =
            (&pi_plus * &sigma_plus).trace() - (&pi_minus * &sigma_minus).trace();
        jumps.push(JumpRecord {
            t: problem.segments[i].tf,
            xi: xi.clone(),
            sigma_minus,
            sigma_plus,
            pi_minus,
            pi_plus,
            h_minus,
            h_plus,
            jump_cost_residual,
        });
    }
    Ok(HybridSteeringSolution {
        segments,
        jumps,
        cost,
    })
}

/// End-to-end convex solve of a hybrid steering problem: priors, chain
/// program, controller recovery.
pub fn solve_general_path(
    problem: &HybridSteeringProblem,
    settings: &SdpSettings,
) -> Result<(ChainSolution, HybridSteeringSolution)> {
    problem.validate()?;
    let mut phis = Vec::with_capacity(problem.segments.len());
    let mut gramians = Vec::with_capacity(problem.segments.len());
    for seg in &problem.segments {
        let prior = build_prior(seg)?;
        phis.push(prior.phi_ahat);
        gramians.push(prior.gramian);
    }
    let spec = ChainSpec {
        phis,
        gramians,
        jumps: problem.jumps.clone(),
        sigma0: problem.sigma0.clone(),
        sigma_f: problem.sigma_f.clone(),
        epsilon: problem.epsilon,
    };
    let chain = solve_chain(&spec, settings)?;
    let plan = recover_controllers(&chain, problem)?;
    Ok((chain, plan))
}
