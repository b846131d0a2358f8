//! Improved alternating Sinkhorn solver for the entropy-regularized barycenter form
//! of the rate-distortion-perception function.
//!
//! All scaling vectors are kept as logarithms. `K = exp(-lambda d)` and
//! `M = exp(-gamma c / eps)` are stored as log-kernels, so infinite multipliers
//! (zero budgets) simply restrict the kernels to zero-cost entries.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{decreasing_root, logsumexp, merge_equal_slopes, safe_ln, LogKernel};
use crate::prob::{
    self, hamming_matrix, xlogx, Channel, CostMatrix, Coupling, Distribution,
};

/// Marginals inside the iteration are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;
const LOG_OVERFLOW: f64 = 690.775_527_898_213_7; // ln(1e300)

/// Instance data for one RDP solve.
#[derive(Clone, Debug)]
pub struct RdpProblem {
    pub p: Distribution,
    /// Distortion `d_ij`.
    pub d: CostMatrix,
    /// Perception transport cost `c_ij`; unused by the KL variant.
    pub c: Option<CostMatrix>,
    /// Distortion budget `D`.
    pub distortion: f64,
    /// Perception budget `P`.
    pub perception: f64,
    pub epsilon: f64,
}

impl RdpProblem {
    pub fn new(
        p: Distribution,
        d: CostMatrix,
        c: Option<CostMatrix>,
        distortion: f64,
        perception: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let prob = Self {
            p,
            d,
            c,
            distortion,
            perception,
            epsilon,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("D", self.distortion),
            ("P", self.perception),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidProblem(format!("{name} = {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidProblem("epsilon must be positive".into()));
        }
        if self.d.rows() != self.p.len() {
            return Err(Error::DimensionMismatch {
                expected: self.p.len(),
                got: self.d.rows(),
            });
        }
        if let Some(c) = &self.c {
            if c.rows() != self.d.rows() || c.cols() != self.d.cols() {
                return Err(Error::InvalidProblem(format!(
                    "perception cost is {}x{}, distortion is {}x{}",
                    c.rows(),
                    c.cols(),
                    self.d.rows(),
                    self.d.cols()
                )));
            }
        }
        Ok(())
    }

    /// Same instance with a different perception budget.
    pub fn with_perception(&self, perception: f64) -> Self {
        Self {
            perception,
            ..self.clone()
        }
    }

    pub fn with_distortion(&self, distortion: f64) -> Self {
        Self {
            distortion,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub residual_tol: f64,
    pub newton_tol: f64,
    pub newton_max_steps: usize,
    /// Passes over the coupling block per outer iteration. Values above 1 leave the
    /// fixed points unchanged and help when the perception constraint is tight.
    pub pi_sweeps: usize,
    /// Exponent `omega` in `r <- r_old * (r_new / r_old)^omega` (renormalized).
    /// 1 is the plain update.
    pub r_relaxation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            residual_tol: 1e-10,
            newton_tol: 1e-12,
            newton_max_steps: 50,
            pi_sweeps: 1,
            r_relaxation: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidProblem("max_iter must be at least 1".into()));
        }
        if !(self.residual_tol > 0.0) || !(self.newton_tol > 0.0) {
            return Err(Error::InvalidProblem("tolerances must be positive".into()));
        }
        if self.pi_sweeps == 0 {
            return Err(Error::InvalidProblem("pi_sweeps must be at least 1".into()));
        }
        if !(self.r_relaxation > 0.0 && self.r_relaxation < 4.0) {
            return Err(Error::InvalidProblem("r_relaxation must lie in (0, 4)".into()));
        }
        Ok(())
    }
}

/// Dual variables in scaling form, stored as logarithms, plus the current `r`.
#[derive(Clone, Debug)]
pub struct DualState {
    pub ln_phi: Vec<f64>,
    pub ln_psi: Vec<f64>,
    pub ln_xi: Vec<f64>,
    pub ln_varphi: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub r: Vec<f64>,
}

impl DualState {
    /// All scalings 1, multipliers 1; `r = p` on square instances with full support.
    pub fn initial(p: &[f64], n: usize) -> Self {
        let m = p.len();
        let r = if m == n && p.iter().all(|&x| x > 0.0) {
            p.to_vec()
        } else {
            vec![1.0 / n as f64; n]
        };
        Self {
            ln_phi: vec![0.0; m],
            ln_psi: vec![0.0; n],
            ln_xi: vec![0.0; m],
            ln_varphi: vec![0.0; n],
            lambda: 1.0,
            gamma: 1.0,
            eta: 1.0,
            r,
        }
    }

    pub fn phi(&self) -> Vec<f64> {
        self.ln_phi.iter().map(|x| x.exp()).collect()
    }
    pub fn psi(&self) -> Vec<f64> {
        self.ln_psi.iter().map(|x| x.exp()).collect()
    }
    pub fn xi(&self) -> Vec<f64> {
        self.ln_xi.iter().map(|x| x.exp()).collect()
    }
    pub fn varphi(&self) -> Vec<f64> {
        self.ln_varphi.iter().map(|x| x.exp()).collect()
    }

    /// `alpha_i = -p_i (ln phi_i + 1/2)`.
    pub fn alpha(&self, p: &[f64]) -> Vec<f64> {
        self.ln_phi
            .iter()
            .zip(p)
            .map(|(l, pi)| -pi * (l + 0.5))
            .collect()
    }
    /// `beta_j = -ln psi_j - 1/2`.
    pub fn beta(&self) -> Vec<f64> {
        self.ln_psi.iter().map(|l| -l - 0.5).collect()
    }
    /// `theta_i = -eps (ln xi_i + 1/2)`.
    pub fn theta(&self, eps: f64) -> Vec<f64> {
        self.ln_xi.iter().map(|l| -eps * (l + 0.5)).collect()
    }
    /// `tau_j = -eps (ln varphi_j + 1/2)`.
    pub fn tau(&self, eps: f64) -> Vec<f64> {
        self.ln_varphi.iter().map(|l| -eps * (l + 0.5)).collect()
    }

    pub(crate) fn ln_r(&self) -> Vec<f64> {
        self.r.iter().map(|&x| x.max(PROB_FLOOR).ln()).collect()
    }
}

/// L1 violations of the first-order conditions, one per block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ResidualReport {
    pub r_psi: f64,
    pub r_phi: f64,
    pub r_lambda: f64,
    pub r_eta: f64,
    pub r_varphi: f64,
    pub r_xi: f64,
    pub r_gamma: f64,
    pub overall: f64,
}

impl ResidualReport {
    pub fn new(parts: [f64; 7]) -> Self {
        let overall = (parts.iter().map(|x| x * x).sum::<f64>() / 7.0).sqrt();
        Self {
            r_psi: parts[0],
            r_phi: parts[1],
            r_lambda: parts[2],
            r_eta: parts[3],
            r_varphi: parts[4],
            r_xi: parts[5],
            r_gamma: parts[6],
            overall,
        }
    }

    pub fn components(&self) -> [f64; 7] {
        [
            self.r_psi,
            self.r_phi,
            self.r_lambda,
            self.r_eta,
            self.r_varphi,
            self.r_xi,
            self.r_gamma,
        ]
    }
}

/// Outcome of a solve. `converged = false` results are still complete.
#[derive(Clone, Debug)]
pub struct SolverResult {
    pub rate: f64,
    pub achieved_distortion: f64,
    pub achieved_perception: f64,
    pub r: Distribution,
    pub w: Channel,
    /// Perception-side coupling; `None` for the KL and pure RD variants.
    pub pi: Option<Coupling>,
    pub residual_trace: Vec<ResidualReport>,
    pub iterations: usize,
    pub converged: bool,
    pub state: DualState,
}

impl SolverResult {
    /// Last overall residual; 0 for closed-form solutions, which run no iterations.
    pub fn final_residual(&self) -> f64 {
        match self.residual_trace.last() {
            Some(r) => r.overall,
            None if self.converged => 0.0,
            None => f64::INFINITY,
        }
    }

    /// Turn a non-converged result into `NonConvergence`.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                residual: self.final_residual(),
                iterations: self.iterations,
            })
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Mode {
    Transport,
    Kl,
    RdOnly,
}

/// Log-kernels and cached per-instance data.
pub(crate) struct Kernels {
    pub m: usize,
    pub n: usize,
    pub lp: Vec<f64>,
    pub lk: LogKernel,
    pub lm: LogKernel,
}

impl Kernels {
    /// Kernels of `d` and `c` (a zero perception cost when absent), both at `t = 0`.
    pub fn new(p: &[f64], d: &Array2<f64>, c: Option<&Array2<f64>>) -> Self {
        let (m, n) = d.dim();
        Self {
            m,
            n,
            lp: p.iter().map(|&x| safe_ln(x)).collect(),
            lk: LogKernel::new(d),
            lm: LogKernel::new(c.unwrap_or(&Array2::zeros((m, n)))),
        }
    }

    pub fn set_k(&mut self, t: f64) {
        self.lk.set(t);
    }

    pub fn set_m(&mut self, t: f64) {
        self.lm.set(t);
    }

    /// `ln sum_i K_ij phi_i p_i` for every column.
    pub fn k_cols(&self, ln_phi: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = ln_phi.iter().zip(&self.lp).map(|(a, b)| a + b).collect();
        self.lk.col_lse(&x)
    }

    /// `ln sum_j K_ij psi_j r_j` for every row.
    pub fn k_rows(&self, ln_psi: &[f64], ln_r: &[f64]) -> Vec<f64> {
        let y: Vec<f64> = ln_psi.iter().zip(ln_r).map(|(a, b)| a + b).collect();
        self.lk.row_lse(&y)
    }
}

/// `ln psi_j = -ln sum_i K_ij phi_i p_i`; columns no kernel reaches keep their value.
pub(crate) fn update_psi(ker: &Kernels, ln_phi: &[f64], ln_psi: &mut [f64]) {
    for (j, s) in ker.k_cols(ln_phi).into_iter().enumerate() {
        if s.is_finite() {
            ln_psi[j] = -s;
        }
    }
}

/// `ln phi_i = -ln sum_j K_ij psi_j r_j`.
pub(crate) fn update_phi(ker: &Kernels, ln_psi: &[f64], ln_r: &[f64], ln_phi: &mut [f64]) {
    for (i, s) in ker.k_rows(ln_psi, ln_r).into_iter().enumerate() {
        if s.is_finite() {
            ln_phi[i] = -s;
        }
    }
}

/// `ln varphi_j = ln r_j - ln sum_i M_ij xi_i`.
pub(crate) fn update_varphi(ker: &Kernels, ln_xi: &[f64], ln_r: &[f64], ln_varphi: &mut [f64]) {
    for (j, s) in ker.lm.col_lse(ln_xi).into_iter().enumerate() {
        if s.is_finite() {
            ln_varphi[j] = ln_r[j] - s;
        }
    }
}

/// `ln xi_i = ln p_i - ln sum_j M_ij varphi_j`.
pub(crate) fn update_xi(ker: &Kernels, ln_varphi: &[f64], ln_xi: &mut [f64]) {
    for (i, s) in ker.lm.row_lse(ln_varphi).into_iter().enumerate() {
        if s.is_finite() {
            ln_xi[i] = ker.lp[i] - s;
        }
    }
}

/// Shift a gauge pair `(a, b) -> (a - k, b + k)` so both maxima agree.
pub(crate) fn balance_gauge(a: &mut [f64], b: &mut [f64]) {
    let fin_max = |v: &[f64]| {
        v.iter()
            .copied()
            .filter(|x| x.is_finite())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (ma, mb) = (fin_max(a), fin_max(b));
    if !ma.is_finite() || !mb.is_finite() {
        return;
    }
    let k = 0.5 * (ma - mb);
    a.iter_mut().for_each(|x| *x -= k);
    b.iter_mut().for_each(|x| *x += k);
}

pub(crate) fn check_overflow(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().any(|&x| x.is_nan() || (x.is_finite() && x > LOG_OVERFLOW)) {
        return Err(Error::NumericalOverflow(what));
    }
    Ok(())
}

/// Solve `sum_k exp(a_k - t s_k) = target` for `t >= 0`, where every `s_k > 0`.
///
/// Newton runs on the log form, which is convex and decreasing in `t`. Returns 0 when the
/// left side at `t = 0` is already at most `target`, and infinity when `target = 0`.
pub(crate) fn multiplier_root(
    terms: &[(f64, f64)],
    target: f64,
    start: f64,
    cfg: &SolverConfig,
) -> f64 {
    let terms = &merge_equal_slopes(terms);
    let at0 = logsumexp(terms.iter().map(|&(a, _)| a));
    if at0 == f64::NEG_INFINITY || at0.exp() <= target {
        return 0.0;
    }
    if target <= 0.0 {
        return f64::INFINITY;
    }
    let lt = target.ln();
    let g = |t: f64| {
        let mx = terms
            .iter()
            .map(|&(a, s)| a - t * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut zs) = (0.0, 0.0);
        for &(a, s) in terms {
            let e = (a - t * s - mx).exp();
            z += e;
            zs += e * s;
        }
        (mx + z.ln() - lt, -zs / z)
    };
    let tol = cfg.newton_tol / target;
    let start = if start.is_finite() && start > 0.0 { start } else { 1.0 };
    decreasing_root(g, 0.0, None, start, tol, cfg.newton_max_steps).0
}

fn lambda_terms(st: &DualState, ker: &Kernels, ln_r: &[f64]) -> Vec<(f64, f64)> {
    let x: Vec<f64> = st.ln_phi.iter().zip(&ker.lp).map(|(a, b)| a + b).collect();
    let y: Vec<f64> = st.ln_psi.iter().zip(ln_r).map(|(a, b)| a + b).collect();
    ker.lk.slope_terms(&x, &y, 1.0)
}

pub(crate) fn gamma_terms(st: &DualState, ker: &Kernels, eps: f64) -> Vec<(f64, f64)> {
    ker.lm.slope_terms(&st.ln_xi, &st.ln_varphi, 1.0 / eps)
}

/// Root of `F(lambda) = sum d p phi exp(-lambda d) psi r - D`, or 0 when `F(0) <= 0`.
pub fn newton_lambda(state: &DualState, prob: &RdpProblem, cfg: &SolverConfig) -> f64 {
    let ker = Kernels::new(prob.p.probs(), prob.d.entries(), None);
    let ln_r = state.ln_r();
    let terms = lambda_terms(state, &ker, &ln_r);
    multiplier_root(&terms, prob.distortion, state.lambda, cfg)
}

/// Root of `G(gamma) = sum c xi exp(-gamma c / eps) varphi - P`, or 0 when `G(0) <= 0`.
pub fn newton_gamma(state: &DualState, prob: &RdpProblem, cfg: &SolverConfig) -> Result<f64> {
    let c = prob
        .c
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("perception cost required".into()))?;
    let ker = Kernels::new(prob.p.probs(), prob.d.entries(), Some(c.entries()));
    let terms = gamma_terms(state, &ker, prob.epsilon);
    Ok(multiplier_root(&terms, prob.perception, state.gamma, cfg))
}

/// Root of `sum_j s_j / (eta - b_j) = 1` on `(max{b_j : s_j > 0}, inf)`.
pub(crate) fn eta_root(s: &[f64], b: &[f64], cfg: &SolverConfig) -> f64 {
    let mut lo = f64::NEG_INFINITY;
    let mut s_at_lo = 0.0;
    for (&sj, &bj) in s.iter().zip(b) {
        if sj > 0.0 && bj > lo {
            lo = bj;
            s_at_lo = sj;
        }
    }
    if lo == f64::NEG_INFINITY {
        return 0.0;
    }
    let h = |eta: f64| {
        let (mut v, mut dv) = (-1.0, 0.0);
        for (&sj, &bj) in s.iter().zip(b) {
            if sj > 0.0 {
                let g = eta - bj;
                v += sj / g;
                dv -= sj / (g * g);
            }
        }
        (v, dv)
    };
    // At lo + s_at_lo the pole term alone is 1, so H >= 0 there.
    let total: f64 = s.iter().filter(|&&x| x > 0.0).sum();
    let start = lo + s_at_lo;
    let hi = lo + total.max(s_at_lo) + 1.0;
    let hi = if h(hi).0 <= 0.0 { Some(hi) } else { None };
    decreasing_root(h, lo, hi, start, cfg.newton_tol, cfg.newton_max_steps).0
}

/// Column masses `s_j = sum_i phi_i K_ij psi_j r_j p_i`.
pub(crate) fn column_mass(st: &DualState, ker: &Kernels, ln_r: &[f64]) -> Vec<f64> {
    ker.k_cols(&st.ln_phi)
        .into_iter()
        .enumerate()
        .map(|(j, l)| l + st.ln_psi[j] + ln_r[j])
        .map(|l| if l.is_nan() { 0.0 } else { l.exp() })
        .collect()
}

fn barycenter_offsets(st: &DualState, mode: Mode, eps: f64) -> Vec<f64> {
    (0..st.ln_psi.len())
        .map(|j| {
            let beta = -st.ln_psi[j] - 0.5;
            match mode {
                Mode::Transport => beta - eps * (st.ln_varphi[j] + 0.5),
                Mode::Kl | Mode::RdOnly => beta,
            }
        })
        .collect()
}

/// Root of `H(eta) = sum_j s_j / (eta - beta_j - tau_j) - 1` for the current state.
pub fn newton_eta(state: &DualState, prob: &RdpProblem, cfg: &SolverConfig) -> Result<f64> {
    let mut ker = Kernels::new(prob.p.probs(), prob.d.entries(), prob.c.as_ref().map(|c| c.entries()));
    ker.set_k(state.lambda);
    let ln_r = state.ln_r();
    let s = column_mass(state, &ker, &ln_r);
    let mode = if prob.c.is_some() {
        Mode::Transport
    } else {
        Mode::RdOnly
    };
    let b = barycenter_offsets(state, mode, prob.epsilon);
    Ok(eta_root(&s, &b, cfg))
}

/// Joint `(gamma, eta)` solve of the KL variant; returns `(gamma, eta, r)`.
fn kl_update(
    s: &[f64],
    beta: &[f64],
    p: &[f64],
    budget: f64,
    gamma0: f64,
    cfg: &SolverConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let target = p.iter().map(|&x| xlogx(x)).sum::<f64>() - budget;
    let solve = |gamma: f64| -> (f64, Vec<f64>) {
        let num: Vec<f64> = s.iter().zip(p).map(|(sj, pj)| gamma * pj + sj).collect();
        let eta = eta_root(&num, beta, cfg);
        let r: Vec<f64> = num
            .iter()
            .zip(beta)
            .map(|(nj, bj)| if *nj > 0.0 { nj / (eta - bj) } else { 0.0 })
            .collect();
        (eta, r)
    };
    let g_of = |r: &[f64]| -> f64 {
        p.iter()
            .zip(r)
            .filter(|(pj, _)| **pj > 0.0)
            .map(|(pj, rj)| pj * safe_ln(*rj))
            .sum::<f64>()
            - target
    };
    let (eta0, r0) = solve(0.0);
    if g_of(&r0) >= 0.0 {
        return Ok((0.0, eta0, r0));
    }
    // -G is decreasing in gamma.
    let f = |gamma: f64| {
        let (eta, r) = solve(gamma);
        let g = g_of(&r);
        let (mut a, mut b) = (0.0, 0.0);
        for ((rj, pj), bj) in r.iter().zip(p).zip(beta) {
            if *rj > 0.0 {
                let den = eta - bj;
                a += pj / den;
                b += rj / den;
            }
        }
        let deta = if b > 0.0 { a / b } else { 0.0 };
        let mut dg = 0.0;
        for ((rj, pj), bj) in r.iter().zip(p).zip(beta) {
            if *rj > 0.0 && *pj > 0.0 {
                let drj = (pj - rj * deta) / (eta - bj);
                dg += pj / rj * drj;
            }
        }
        (-g, -dg)
    };
    let start = if gamma0 > 0.0 && gamma0.is_finite() { gamma0 } else { 1.0 };
    let (gamma, _) = decreasing_root(f, 0.0, None, start, cfg.newton_tol, cfg.newton_max_steps);
    if !gamma.is_finite() {
        return Err(Error::KlDomain);
    }
    let (eta, r) = solve(gamma);
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::KlDomain);
    }
    Ok((gamma, eta, r))
}

fn kkt(
    st: &DualState,
    ker: &Kernels,
    prob: &RdpProblem,
    mode: Mode,
    fixed_r: bool,
) -> ResidualReport {
    let ln_r = st.ln_r();
    let d = prob.d.entries();
    let (r_psi, r_phi, col_lse) = w_block_residuals(st, ker, &ln_r);
    let x: Vec<f64> = st.ln_phi.iter().zip(&ker.lp).map(|(a, b)| a + b).collect();
    let y: Vec<f64> = st.ln_psi.iter().zip(&ln_r).map(|(a, b)| a + b).collect();
    let dist = ker.lk.weighted_total(d, &x, &y);
    let f = dist - prob.distortion;
    let r_lambda = slackness(st.lambda, f);

    // s'_j evaluated with the updated r.
    let s: Vec<f64> = (0..ker.n)
        .map(|j| (col_lse[j] + st.ln_psi[j] + ln_r[j]).exp())
        .collect();
    let (mut r_eta, mut r_varphi, mut r_xi, mut r_gamma) = (0.0, 0.0, 0.0, 0.0);
    match mode {
        Mode::Transport => {
            if !fixed_r {
                let b = barycenter_offsets(st, mode, prob.epsilon);
                r_eta = h_value(&s, &b, st.eta).abs();
            }
            let c = prob.c.as_ref().expect("transport mode has a cost").entries();
            let (rv, rx, cost) = pi_block_residuals(st, ker, prob.p.probs(), c);
            r_varphi = rv;
            r_xi = rx;
            r_gamma = slackness(st.gamma, cost - prob.perception);
        }
        Mode::Kl => {
            if !fixed_r {
                let p = prob.p.probs();
                let num: Vec<f64> = s.iter().zip(p).map(|(sj, pj)| st.gamma * pj + sj).collect();
                let b = barycenter_offsets(st, mode, prob.epsilon);
                r_eta = h_value(&num, &b, st.eta).abs();
                let kl: f64 = p
                    .iter()
                    .zip(&st.r)
                    .filter(|(pj, _)| **pj > 0.0)
                    .map(|(pj, rj)| pj * (pj / rj.max(PROB_FLOOR)).ln())
                    .sum();
                r_gamma = slackness(st.gamma, kl - prob.perception);
            }
        }
        Mode::RdOnly => {
            let b = barycenter_offsets(st, mode, prob.epsilon);
            r_eta = h_value(&s, &b, st.eta).abs();
        }
    }
    ResidualReport::new([r_psi, r_phi, r_lambda, r_eta, r_varphi, r_xi, r_gamma])
}

/// Row and column violations of the channel scalings, plus the column log-sums.
pub(crate) fn w_block_residuals(
    st: &DualState,
    ker: &Kernels,
    ln_r: &[f64],
) -> (f64, f64, Vec<f64>) {
    let cols = ker.k_cols(&st.ln_phi);
    let mut r_psi = 0.0;
    for (j, s) in cols.iter().enumerate() {
        if s.is_finite() && st.r[j] > 0.0 {
            r_psi += ((st.ln_psi[j] + s).exp() - 1.0).abs();
        }
    }
    let mut r_phi = 0.0;
    for (i, s) in ker.k_rows(&st.ln_psi, ln_r).into_iter().enumerate() {
        if ker.lp[i] > f64::NEG_INFINITY {
            r_phi += ((st.ln_phi[i] + s).exp() - 1.0).abs();
        }
    }
    (r_psi, r_phi, cols)
}

/// Marginal violations of the perception coupling and its transport cost.
pub(crate) fn pi_block_residuals(
    st: &DualState,
    ker: &Kernels,
    p: &[f64],
    c: &Array2<f64>,
) -> (f64, f64, f64) {
    let r_varphi = ker
        .lm
        .col_lse(&st.ln_xi)
        .iter()
        .enumerate()
        .map(|(j, v)| ((st.ln_varphi[j] + v).exp() - st.r[j]).abs())
        .sum();
    let r_xi = ker
        .lm
        .row_lse(&st.ln_varphi)
        .iter()
        .enumerate()
        .map(|(i, v)| ((st.ln_xi[i] + v).exp() - p[i]).abs())
        .sum();
    let cost = ker.lm.weighted_total(c, &st.ln_xi, &st.ln_varphi);
    (r_varphi, r_xi, cost)
}

/// `|mu g| + max(g, 0)` with `mu = inf` meaning the constraint holds with equality.
pub(crate) fn slackness(mu: f64, g: f64) -> f64 {
    if mu.is_infinite() {
        g.abs()
    } else {
        (mu * g).abs() + g.max(0.0)
    }
}

pub(crate) fn h_value(s: &[f64], b: &[f64], eta: f64) -> f64 {
    s.iter()
        .zip(b)
        .filter(|(sj, _)| **sj > 0.0)
        .map(|(sj, bj)| sj / (eta - bj))
        .sum::<f64>()
        - 1.0
}

/// Build the row-normalized channel from the current scalings.
pub(crate) fn channel_from_state(
    ln_phi: &[f64],
    ln_psi: &[f64],
    ln_r: &[f64],
    ker: &Kernels,
) -> Result<Channel> {
    let mut w = Array2::zeros((ker.m, ker.n));
    for i in 0..ker.m {
        let row: Vec<f64> = (0..ker.n)
            .map(|j| ln_phi[i] + ker.lk.log[[i, j]] + ln_psi[j] + ln_r[j])
            .collect();
        let z = logsumexp(row.iter().copied());
        for j in 0..ker.n {
            w[[i, j]] = if z.is_finite() { (row[j] - z).exp() } else { 0.0 };
        }
        if !z.is_finite() {
            // Unreachable row (zero source mass): map to the first column.
            w[[i, 0]] = 1.0;
        }
        let s: f64 = w.row(i).sum();
        w.row_mut(i).mapv_inplace(|x| x / s);
    }
    Channel::new(w)
}

pub(crate) fn coupling_from_state(st: &DualState, ker: &Kernels) -> Result<Coupling> {
    let pi = Array2::from_shape_fn((ker.m, ker.n), |(i, j)| {
        let l = st.ln_xi[i] + ker.lm.log[[i, j]] + st.ln_varphi[j];
        if l.is_nan() {
            0.0
        } else {
            l.exp()
        }
    });
    Coupling::unchecked(pi)
}

fn finish(
    st: DualState,
    ker: &Kernels,
    prob: &RdpProblem,
    mode: Mode,
    trace: Vec<ResidualReport>,
    iterations: usize,
    converged: bool,
) -> Result<SolverResult> {
    let ln_r = st.ln_r();
    let w = channel_from_state(&st.ln_phi, &st.ln_psi, &ln_r, ker)?;
    let rate = prob::mutual_information(&w, &prob.p)?;
    let achieved_distortion = prob::expected_distortion(&w, &prob.p, &prob.d)?;
    let r = prob::marginal(&w, &prob.p)?;
    let (pi, achieved_perception) = match mode {
        Mode::Transport => {
            let pi = coupling_from_state(&st, ker)?;
            let cost = pi.cost(prob.c.as_ref().expect("cost"));
            (Some(pi), cost)
        }
        Mode::Kl => (None, prob::kl_divergence(&prob.p, &r).unwrap_or(f64::INFINITY)),
        Mode::RdOnly => (None, 0.0),
    };
    Ok(SolverResult {
        rate,
        achieved_distortion,
        achieved_perception,
        r,
        w,
        pi,
        residual_trace: trace,
        iterations,
        converged,
        state: st,
    })
}

fn identity_solution(prob: &RdpProblem, mode: Mode) -> Result<SolverResult> {
    let p = prob.p.probs();
    let mut state = DualState::initial(p, p.len());
    state.lambda = f64::INFINITY;
    state.r = p.to_vec();
    let w = Channel::identity(p.len());
    let pi = match mode {
        Mode::Transport => Some(Coupling::unchecked(Array2::from_diag(
            &ndarray::Array1::from(p.to_vec()),
        ))?),
        _ => None,
    };
    Ok(SolverResult {
        rate: prob::entropy(&prob.p),
        achieved_distortion: 0.0,
        achieved_perception: 0.0,
        r: prob.p.clone(),
        w,
        pi,
        residual_trace: Vec::new(),
        iterations: 0,
        converged: true,
        state,
    })
}

/// Geometric over-relaxation of the output marginal; `omega = 1` returns `new` as is.
pub(crate) fn relax(old: &[f64], new: Vec<f64>, omega: f64) -> Vec<f64> {
    if omega == 1.0 {
        return new;
    }
    let mut r: Vec<f64> = new
        .iter()
        .zip(old)
        .map(|(&a, &o)| if a > 0.0 && o > 0.0 { o * (a / o).powf(omega) } else { a })
        .collect();
    let z: f64 = r.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return new;
    }
    r.iter_mut().for_each(|x| *x /= z);
    r
}

/// Relaxation exponent that backs off towards the plain update (`omega = 1`) whenever
/// the residual climbs an order of magnitude above its best value so far.
pub(crate) struct Relaxation {
    pub omega: f64,
    best: f64,
}

impl Relaxation {
    pub fn new(omega: f64) -> Self {
        Self { omega, best: f64::INFINITY }
    }

    pub fn observe(&mut self, residual: f64) {
        if self.omega != 1.0 && residual > 10.0 * self.best {
            self.omega = 1.0 + 0.5 * (self.omega - 1.0);
            if (self.omega - 1.0).abs() < 0.05 {
                self.omega = 1.0;
            }
        }
        self.best = self.best.min(residual);
    }
}

fn run(prob: &RdpProblem, cfg: &SolverConfig, mode: Mode) -> Result<SolverResult> {
    prob.validate()?;
    cfg.validate()?;
    let p = prob.p.probs();
    let n = prob.d.cols();
    let eps = prob.epsilon;
    if mode == Mode::Kl && n != p.len() {
        return Err(Error::InvalidProblem(
            "KL perception needs a square instance".into(),
        ));
    }
    let c = match mode {
        Mode::Transport => Some(
            prob.c
                .as_ref()
                .ok_or_else(|| Error::InvalidProblem("perception cost required".into()))?
                .entries(),
        ),
        _ => None,
    };
    // A zero perception budget pins r to p when the cost vanishes only on the diagonal.
    let pinned = match mode {
        Mode::Kl => prob.perception == 0.0,
        Mode::Transport => {
            prob.perception == 0.0
                && prob.c.as_ref().is_some_and(|c| c.is_zero_iff_equal())
        }
        Mode::RdOnly => false,
    };

    // Zero distortion with a zero-iff-equal distortion forces the identity channel. The
    // kernel is then diagonal and the scalings have one free gauge per symbol, so the
    // iteration is skipped.
    if prob.distortion == 0.0 && prob.d.is_zero_iff_equal() {
        return identity_solution(prob, mode);
    }
    let mut st = DualState::initial(p, n);
    if pinned {
        st.r = p.to_vec();
    }
    let mut ker = Kernels::new(p, prob.d.entries(), c);
    ker.set_k(st.lambda);
    if c.is_some() {
        ker.set_m(st.gamma / eps);
    }
    let mut trace = Vec::with_capacity(cfg.max_iter.min(4096));
    let mut converged = false;
    let mut iterations = 0;
    let mut relaxation = Relaxation::new(cfg.r_relaxation);
    for it in 1..=cfg.max_iter {
        iterations = it;
        let ln_r = st.ln_r();
        // w block
        update_psi(&ker, &st.ln_phi, &mut st.ln_psi);
        update_phi(&ker, &st.ln_psi, &ln_r, &mut st.ln_phi);
        balance_gauge(&mut st.ln_phi, &mut st.ln_psi);
        let terms = lambda_terms(&st, &ker, &ln_r);
        st.lambda = multiplier_root(&terms, prob.distortion, st.lambda, cfg);
        ker.set_k(st.lambda);
        let s = column_mass(&st, &ker, &ln_r);

        // Pi block
        if c.is_some() {
            for _ in 0..cfg.pi_sweeps {
                let before = st.ln_xi.clone();
                let gamma_before = st.gamma;
                update_varphi(&ker, &st.ln_xi, &ln_r, &mut st.ln_varphi);
                update_xi(&ker, &st.ln_varphi, &mut st.ln_xi);
                balance_gauge(&mut st.ln_xi, &mut st.ln_varphi);
                if pinned {
                    st.gamma = f64::INFINITY;
                } else {
                    let terms = gamma_terms(&st, &ker, eps);
                    st.gamma = multiplier_root(&terms, prob.perception, st.gamma, cfg);
                }
                ker.set_m(st.gamma / eps);
                let moved = before
                    .iter()
                    .zip(&st.ln_xi)
                    .filter(|(a, b)| a.is_finite() && b.is_finite())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if moved < 1e-14 && (st.gamma == gamma_before || (st.gamma - gamma_before).abs() < 1e-14) {
                    break;
                }
            }
        }

        // r block
        if !pinned {
            match mode {
                Mode::Kl => {
                    let beta = barycenter_offsets(&st, mode, eps);
                    let (g, eta, r) = kl_update(&s, &beta, p, prob.perception, st.gamma, cfg)?;
                    st.gamma = g;
                    st.eta = eta;
                    st.r = r;
                }
                _ => {
                    let b = barycenter_offsets(&st, mode, eps);
                    st.eta = eta_root(&s, &b, cfg);
                    let r: Vec<f64> = s
                        .iter()
                        .zip(&b)
                        .map(|(sj, bj)| if *sj > 0.0 { sj / (st.eta - bj) } else { 0.0 })
                        .collect();
                    st.r = relax(&st.r, r, relaxation.omega);
                }
            }
        } else if mode == Mode::Kl {
            st.gamma = f64::INFINITY;
        }
        for v in [&st.ln_phi, &st.ln_psi, &st.ln_xi, &st.ln_varphi] {
            check_overflow(v, "scaling vector")?;
        }
        let rep = kkt(&st, &ker, prob, mode, pinned);
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
    finish(st, &ker, prob, mode, trace, iterations, converged)
}

/// Alternating Sinkhorn solve with a Wasserstein perception constraint given by `prob.c`.
pub fn solve_rdp_wasserstein(prob: &RdpProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    run(prob, cfg, Mode::Transport)
}

/// TV perception: indicator transport cost; achieved perception is `tv(p, r)`.
pub fn solve_rdp_tv(prob: &RdpProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    let n = prob.d.cols();
    if n != prob.p.len() {
        return Err(Error::InvalidProblem("TV perception needs a square instance".into()));
    }
    let tv_prob = RdpProblem {
        c: Some(hamming_matrix(n, n)),
        ..prob.clone()
    };
    let mut res = run(&tv_prob, cfg, Mode::Transport)?;
    res.achieved_perception = prob::tv_distance(&prob.p, &res.r)?;
    Ok(res)
}

/// KL perception `KL(p || r) <= P`; no transport block.
pub fn solve_rdp_kl(prob: &RdpProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    run(prob, cfg, Mode::Kl)
}

/// Plain rate-distortion solve (no perception constraint).
pub fn solve_rd(prob: &RdpProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    run(prob, cfg, Mode::RdOnly)
}

/// Perception divergence between `p` and `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptionKind {
    /// Optimal transport under `prob.c`.
    Wasserstein,
    Tv,
    Kl,
}

/// Dispatch to the solver for `kind`.
pub fn solve_rdp(prob: &RdpProblem, kind: PerceptionKind, cfg: &SolverConfig) -> Result<SolverResult> {
    match kind {
        PerceptionKind::Wasserstein => solve_rdp_wasserstein(prob, cfg),
        PerceptionKind::Tv => solve_rdp_tv(prob, cfg),
        PerceptionKind::Kl => solve_rdp_kl(prob, cfg),
    }
}

/// Residuals of an arbitrary state against `prob` (Wasserstein form when `prob.c` is set).
pub fn kkt_residuals(state: &DualState, prob: &RdpProblem) -> ResidualReport {
    let p = prob.p.probs();
    let mut ker = Kernels::new(p, prob.d.entries(), prob.c.as_ref().map(|c| c.entries()));
    ker.set_k(state.lambda);
    let mode = match &prob.c {
        Some(_) => {
            ker.set_m(state.gamma / prob.epsilon);
            Mode::Transport
        }
        None => Mode::RdOnly,
    };
    kkt(state, &ker, prob, mode, false)
}
