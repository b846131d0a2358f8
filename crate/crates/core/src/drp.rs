//! Distortion-rate-perception solver.
//!
//! Same alternating structure as [`crate::rdp`], with the roles of the multipliers
//! following the DRP Lagrangian: `gamma` prices the rate constraint and enters the
//! channel kernel as `K = exp(-d / gamma)`, while `lambda` prices the perception
//! constraint with `M = exp(-lambda c / eps)`. In the returned [`ResidualReport`],
//! `r_gamma` is the rate slackness and `r_lambda` the perception slackness.
//!
//! `R = 0` is solved exactly by [`zero_rate_distortion`], since it forces rank-one
//! channels and the problem becomes a linear program over `r`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numeric::decreasing_root;
use crate::prob::{self, entropy, Channel, CostMatrix, Coupling, Distribution};
use crate::rdp::{
    balance_gauge, channel_from_state, check_overflow, column_mass, coupling_from_state,
    eta_root, gamma_terms, h_value, multiplier_root, pi_block_residuals, relax, slackness,
    update_phi, update_psi, update_varphi, update_xi, w_block_residuals, DualState, Kernels,
    Relaxation, ResidualReport, SolverConfig, SolverResult,
};

/// Lower bound on the rate multiplier.
pub const GAMMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct DrpProblem {
    pub p: Distribution,
    pub d: CostMatrix,
    pub c: CostMatrix,
    /// Rate budget `R` in nats.
    pub rate: f64,
    /// Perception budget `P`.
    pub perception: f64,
    pub epsilon: f64,
}

impl DrpProblem {
    pub fn new(
        p: Distribution,
        d: CostMatrix,
        c: CostMatrix,
        rate: f64,
        perception: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let prob = Self {
            p,
            d,
            c,
            rate,
            perception,
            epsilon,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.p.len();
        if self.d.rows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.d.rows(),
            });
        }
        if self.c.rows() != m || self.c.cols() != self.d.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.d.cols(),
                got: self.c.cols(),
            });
        }
        for (name, v) in [("R", self.rate), ("P", self.perception)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidProblem(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidProblem("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Exact zero-rate solution: `w` has identical rows `r`.
#[derive(Clone, Debug)]
pub struct ZeroRateSolution {
    pub distortion: f64,
    pub r: Distribution,
    /// Optimal perception-side transport plan from `p` to `r`.
    pub plan: Coupling,
}

/// `min_r sum_j r_j sum_i p_i d_ij` subject to `W_c(p, r) <= P`.
///
/// Solved through the concave piecewise-linear dual
/// `max_mu sum_i p_i min_j (a_j + mu c_ij) - mu P`, bisecting on the sign of its
/// right derivative and mixing the two plans on either side of the optimal breakpoint.
pub fn zero_rate_distortion(
    p: &Distribution,
    d: &CostMatrix,
    c: &CostMatrix,
    perception: f64,
) -> Result<ZeroRateSolution> {
    let pv = p.probs();
    let (m, n) = (pv.len(), d.cols());
    if d.rows() != m || c.rows() != m || c.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: d.rows().max(c.rows()),
        });
    }
    if !(perception >= 0.0) {
        return Err(Error::InvalidProblem("P must be non-negative".into()));
    }
    let de = d.entries();
    let ce = c.entries();
    let a: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| pv[i] * de[[i, j]]).sum())
        .collect();
    let floor: f64 = (0..m)
        .map(|i| pv[i] * (0..n).map(|j| ce[[i, j]]).fold(f64::INFINITY, f64::min))
        .sum();
    if perception < floor - 1e-12 {
        return Err(Error::Infeasible(format!(
            "P = {perception} is below the least transport cost {floor}"
        )));
    }
    // Column choice per row on the right of mu: minimal a_j + mu c_ij, ties to smaller c.
    let select = |mu: f64| -> Vec<usize> {
        (0..m)
            .map(|i| {
                let mut best = 0;
                for j in 1..n {
                    let vb = a[best] + mu * ce[[i, best]];
                    let vj = a[j] + mu * ce[[i, j]];
                    if vj < vb || (vj == vb && ce[[i, j]] < ce[[i, best]]) {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let cost_of = |sel: &[usize]| -> f64 { (0..m).map(|i| pv[i] * ce[[i, sel[i]]]).sum() };
    let obj_of = |sel: &[usize]| -> f64 { (0..m).map(|i| pv[i] * a[sel[i]]).sum() };

    let s0 = select(0.0);
    let (sel_a, sel_b, theta) = if cost_of(&s0) <= perception {
        (s0.clone(), s0, 1.0)
    } else {
        let scale = a.iter().copied().fold(1.0, f64::max);
        let mut lo = 0.0;
        let mut hi = scale;
        while cost_of(&select(hi)) > perception && hi < 1e18 * scale {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if cost_of(&select(mid)) > perception {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (sa, sb) = (select(lo), select(hi));
        let (ca, cb) = (cost_of(&sa), cost_of(&sb));
        // theta * ca + (1 - theta) * cb = P
        let theta = if ca > cb {
            ((perception - cb) / (ca - cb)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (sa, sb, theta)
    };
    let mut plan = Array2::zeros((m, n));
    for i in 0..m {
        plan[[i, sel_a[i]]] += theta * pv[i];
        plan[[i, sel_b[i]]] += (1.0 - theta) * pv[i];
    }
    let distortion = theta * obj_of(&sel_a) + (1.0 - theta) * obj_of(&sel_b);
    let r: Vec<f64> = (0..n).map(|j| plan.column(j).sum()).collect();
    Ok(ZeroRateSolution {
        distortion,
        r: Distribution::normalized_with_support(
            prob::SupportGrid::indices(n),
            r,
        )?,
        plan: Coupling::unchecked(plan)?,
    })
}

/// Root of the rate equation in `kappa = gamma_old / gamma` with `alpha`, `beta` held fixed.
///
/// With `u_ij = ln(phi_i K_ij psi_j) + 1` at the current state, the scaled rate is
/// `sum_ij p_i r_j exp(kappa u - 1) (kappa u - 1)`, increasing in `kappa`.
fn rate_root(st: &DualState, ker: &Kernels, ln_r: &[f64], budget: f64, cfg: &SolverConfig) -> f64 {
    let mut terms = Vec::new();
    for i in 0..ker.m {
        if ker.lp[i] == f64::NEG_INFINITY {
            continue;
        }
        for j in 0..ker.n {
            let l = st.ln_phi[i] + ker.lk.log[[i, j]] + st.ln_psi[j];
            if ln_r[j].is_finite() && l.is_finite() {
                terms.push((ker.lp[i] + ln_r[j], l + 1.0));
            }
        }
    }
    let f = |kappa: f64| {
        let (mut v, mut dv) = (budget, 0.0);
        for &(lw, u) in &terms {
            let x = kappa * u - 1.0;
            let e = (lw + x).exp();
            v -= e * x;
            dv -= e * kappa * u * u;
        }
        (v, dv)
    };
    let (kappa, _) = decreasing_root(f, 0.0, None, 1.0, cfg.newton_tol, cfg.newton_max_steps);
    let gamma = st.gamma / kappa;
    if gamma.is_finite() {
        gamma.max(GAMMA_FLOOR)
    } else {
        f64::MAX
    }
}

/// Rate functional `sum_ij p_i w_ij ln(phi_i K_ij psi_j)` at the current state.
fn lagrangian_rate(st: &DualState, ker: &Kernels, ln_r: &[f64]) -> f64 {
    let mut v = 0.0;
    for i in 0..ker.m {
        if ker.lp[i] == f64::NEG_INFINITY {
            continue;
        }
        for j in 0..ker.n {
            let l = st.ln_phi[i] + ker.lk.log[[i, j]] + st.ln_psi[j];
            if l.is_finite() && ln_r[j].is_finite() {
                v += (ker.lp[i] + l + ln_r[j]).exp() * l;
            }
        }
    }
    v
}

fn offsets(st: &DualState, eps: f64) -> Vec<f64> {
    let g = st.gamma;
    (0..st.ln_psi.len())
        .map(|j| -(st.ln_psi[j] + 0.5) - eps / g * (st.ln_varphi[j] + 0.5))
        .collect()
}

fn kkt(st: &DualState, ker: &Kernels, prob: &DrpProblem, pinned: bool) -> ResidualReport {
    let ln_r = st.ln_r();
    let p = prob.p.probs();
    let (r_psi, r_phi, _) = w_block_residuals(st, ker, &ln_r);
    let r_gamma = slackness(st.gamma, lagrangian_rate(st, ker, &ln_r) - prob.rate);
    let mut r_eta = 0.0;
    if !pinned {
        let s = column_mass(st, ker, &ln_r);
        r_eta = h_value(&s, &offsets(st, prob.epsilon), st.eta / st.gamma).abs();
    }
    let (r_varphi, r_xi, cost) = pi_block_residuals(st, ker, p, prob.c.entries());
    let r_lambda = slackness(st.lambda, cost - prob.perception);
    ResidualReport::new([r_psi, r_phi, r_lambda, r_eta, r_varphi, r_xi, r_gamma])
}

fn shortcut(
    prob: &DrpProblem,
    w: Channel,
    r: Distribution,
    plan: Coupling,
    gamma: f64,
) -> Result<SolverResult> {
    let mut state = DualState::initial(prob.p.probs(), prob.d.cols());
    state.gamma = gamma;
    state.r = r.probs().to_vec();
    Ok(SolverResult {
        rate: prob::mutual_information(&w, &prob.p)?,
        achieved_distortion: prob::expected_distortion(&w, &prob.p, &prob.d)?,
        achieved_perception: plan.cost(&prob.c),
        r,
        w,
        pi: Some(plan),
        residual_trace: Vec::new(),
        iterations: 0,
        converged: true,
        state,
    })
}

/// Minimize expected distortion subject to rate and perception budgets.
pub fn solve_drp(prob: &DrpProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    prob.validate()?;
    cfg.validate()?;
    let p = prob.p.probs();
    let (m, n) = (p.len(), prob.d.cols());
    let eps = prob.epsilon;

    if prob.rate == 0.0 {
        let z = zero_rate_distortion(&prob.p, &prob.d, &prob.c, prob.perception)?;
        let w = Channel::constant(m, &z.r);
        return shortcut(prob, w, z.r.clone(), z.plan, f64::INFINITY);
    }
    // Rate can never exceed H(p); with a zero-diagonal distortion the identity is optimal.
    if m == n && prob.rate >= entropy(&prob.p) && prob.d.is_zero_iff_equal() {
        let plan = Coupling::unchecked(Array2::from_diag(&ndarray::Array1::from(p.to_vec())))?;
        return shortcut(prob, Channel::identity(m), prob.p.clone(), plan, GAMMA_FLOOR);
    }

    let pinned = prob.perception == 0.0 && prob.c.is_zero_iff_equal();
    let mut st = DualState::initial(p, n);
    if pinned {
        st.r = p.to_vec();
    }
    let mut ker = Kernels::new(p, prob.d.entries(), Some(prob.c.entries()));
    ker.set_k(1.0 / st.gamma);
    ker.set_m(st.lambda / eps);
    let mut trace = Vec::with_capacity(cfg.max_iter.min(4096));
    let mut converged = false;
    let mut iterations = 0;
    let mut relaxation = Relaxation::new(cfg.r_relaxation);
    for it in 1..=cfg.max_iter {
        iterations = it;
        let ln_r = st.ln_r();
        update_psi(&ker, &st.ln_phi, &mut st.ln_psi);
        update_phi(&ker, &st.ln_psi, &ln_r, &mut st.ln_phi);
        balance_gauge(&mut st.ln_phi, &mut st.ln_psi);
        let gamma = rate_root(&st, &ker, &ln_r, prob.rate, cfg);
        // phi and psi carry alpha / gamma and beta / gamma; rescale them with gamma.
        let k = st.gamma / gamma;
        st.ln_phi.iter_mut().for_each(|x| *x = k * (*x + 0.5) - 0.5);
        st.ln_psi.iter_mut().for_each(|x| *x = k * (*x + 0.5) - 0.5);
        st.gamma = gamma;
        ker.set_k(1.0 / st.gamma);
        let s = column_mass(&st, &ker, &ln_r);

        for _ in 0..cfg.pi_sweeps {
            let before = st.ln_xi.clone();
            let lambda_before = st.lambda;
            update_varphi(&ker, &st.ln_xi, &ln_r, &mut st.ln_varphi);
            update_xi(&ker, &st.ln_varphi, &mut st.ln_xi);
            balance_gauge(&mut st.ln_xi, &mut st.ln_varphi);
            st.lambda = if pinned {
                f64::INFINITY
            } else {
                let terms = gamma_terms(&st, &ker, eps);
                multiplier_root(&terms, prob.perception, st.lambda, cfg)
            };
            ker.set_m(st.lambda / eps);
            let moved = before
                .iter()
                .zip(&st.ln_xi)
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved < 1e-14
                && (st.lambda == lambda_before || (st.lambda - lambda_before).abs() < 1e-14)
            {
                break;
            }
        }

        if !pinned {
            let b = offsets(&st, eps);
            let eta = eta_root(&s, &b, cfg);
            st.eta = eta * st.gamma;
            let r: Vec<f64> = s
                .iter()
                .zip(&b)
                .map(|(sj, bj)| if *sj > 0.0 { sj / (eta - bj) } else { 0.0 })
                .collect();
            st.r = relax(&st.r, r, relaxation.omega);
        }
        for v in [&st.ln_phi, &st.ln_psi, &st.ln_xi, &st.ln_varphi] {
            check_overflow(v, "scaling vector")?;
        }
        let rep = kkt(&st, &ker, prob, pinned);
        trace.push(rep);
        if rep.overall.is_nan() {
            return Err(Error::NumericalOverflow("residual is NaN"));
        }
        if rep.overall <= cfg.residual_tol {
            converged = true;
            break;
        }
        relaxation.observe(rep.overall);
    }

    let ln_r = st.ln_r();
    let w = channel_from_state(&st.ln_phi, &st.ln_psi, &ln_r, &ker)?;
    let pi = coupling_from_state(&st, &ker)?;
    Ok(SolverResult {
        rate: prob::mutual_information(&w, &prob.p)?,
        achieved_distortion: prob::expected_distortion(&w, &prob.p, &prob.d)?,
        achieved_perception: pi.cost(&prob.c),
        r: prob::marginal(&w, &prob.p)?,
        w,
        pi: Some(pi),
        residual_trace: trace,
        iterations,
        converged,
        state: st,
    })
}
