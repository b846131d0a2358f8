//! Critical transition curves between the distortion and perception constraints.
//!
//! `f(D)` is traced by solving the unconstrained-perception (pure RD) problem and
//! measuring the perception of its output marginal. `h(P)` is the zero-rate
//! distortion, solved exactly by [`crate::drp::zero_rate_distortion`].

use serde::Serialize;

use crate::drp::{solve_drp, zero_rate_distortion, DrpProblem};
use crate::error::{Error, Result};
use crate::ot::wasserstein;
use crate::prob::{self, CostMatrix, Distribution};
use crate::rdp::{solve_rd, solve_rdp, PerceptionKind, RdpProblem, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionMethod {
    SecantSlope,
    RdPushforward,
    ZeroRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransitionPoint {
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub rate: f64,
    pub method: TransitionMethod,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SampleMeta {
    pub rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// One point of a curve. On DRP cross-sections the abscissa is `P` and the ordinate `D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveSample {
    pub abscissa: f64,
    pub ordinate: f64,
    pub meta: SampleMeta,
}

/// Perception of `r` relative to `p`; KL is infinite when `r` misses mass of `p`.
pub fn perception_of(
    p: &Distribution,
    r: &Distribution,
    kind: PerceptionKind,
    c: Option<&CostMatrix>,
) -> Result<f64> {
    match kind {
        PerceptionKind::Wasserstein => {
            let c = c.ok_or_else(|| Error::InvalidProblem("perception cost required".into()))?;
            wasserstein(p, r, c)
        }
        PerceptionKind::Tv => prob::tv_distance(p, r),
        PerceptionKind::Kl => match prob::kl_divergence(p, r) {
            Err(Error::AbsoluteContinuityViolation(_)) => Ok(f64::INFINITY),
            other => other,
        },
    }
}

/// One sample of `f`: the perception of the RD-optimal output marginal at distortion `D`.
pub fn rd_pushforward_point(
    p: &Distribution,
    d: &CostMatrix,
    c: Option<&CostMatrix>,
    kind: PerceptionKind,
    distortion: f64,
    cfg: &SolverConfig,
) -> Result<TransitionPoint> {
    // The perception constraint is dropped entirely rather than set to a large budget.
    let prob = RdpProblem::new(p.clone(), d.clone(), None, distortion, 0.0, 1.0)?;
    let res = solve_rd(&prob, cfg)?;
    let pp = perception_of(p, &res.r, kind, c)?;
    Ok(TransitionPoint {
        d: distortion,
        p: pp,
        rate: res.rate,
        method: TransitionMethod::RdPushforward,
    })
}

/// Samples of the critical transition curve `f` on `d_grid`.
pub fn transition_curve_via_rd(
    p: &Distribution,
    d: &CostMatrix,
    c: Option<&CostMatrix>,
    kind: PerceptionKind,
    d_grid: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<TransitionPoint>> {
    d_grid
        .iter()
        .map(|&x| rd_pushforward_point(p, d, c, kind, x, cfg))
        .collect()
}

/// First sample whose secant slope to its successor is below `slope_tol` in magnitude.
pub fn detect_transition_point(samples: &[CurveSample], slope_tol: f64) -> Result<TransitionPoint> {
    if samples.len() < 3 {
        return Err(Error::InvalidProblem("need at least 3 samples".into()));
    }
    if samples.windows(2).any(|w| !(w[1].abscissa > w[0].abscissa)) {
        return Err(Error::InvalidProblem(
            "samples must be strictly increasing in abscissa".into(),
        ));
    }
    for w in samples.windows(2) {
        let slope = (w[1].ordinate - w[0].ordinate) / (w[1].abscissa - w[0].abscissa);
        if slope.abs() < slope_tol {
            return Ok(TransitionPoint {
                d: w[0].ordinate,
                p: w[0].abscissa,
                rate: w[0].meta.rate,
                method: TransitionMethod::SecantSlope,
            });
        }
    }
    Err(Error::NoTransitionFound)
}

/// One point of a DRP cross-section at the template's rate, with `P` replaced.
pub fn drp_sample(template: &DrpProblem, perception: f64, cfg: &SolverConfig) -> Result<CurveSample> {
    let prob = DrpProblem {
        perception,
        ..template.clone()
    };
    let res = solve_drp(&prob, cfg)?;
    Ok(CurveSample {
        abscissa: perception,
        ordinate: res.achieved_distortion,
        meta: SampleMeta {
            rate: res.rate,
            iterations: res.iterations,
            converged: res.converged,
            residual: res.final_residual(),
        },
    })
}

/// Distortion against perception at fixed rate.
pub fn drp_cross_section(
    template: &DrpProblem,
    p_grid: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<CurveSample>> {
    p_grid.iter().map(|&x| drp_sample(template, x, cfg)).collect()
}

/// Zero-rate distortion `h(P)` on `p_grid`.
pub fn upper_bound_h(
    p: &Distribution,
    d: &CostMatrix,
    c: &CostMatrix,
    p_grid: &[f64],
) -> Result<Vec<TransitionPoint>> {
    p_grid
        .iter()
        .map(|&x| {
            let z = zero_rate_distortion(p, d, c, x)?;
            Ok(TransitionPoint {
                d: z.distortion,
                p: x,
                rate: 0.0,
                method: TransitionMethod::ZeroRate,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EndpointReport {
    /// `min_j sum_i p_i d_ij`.
    pub d_inf: f64,
    /// Perception of the one-hot marginal at the minimizing column.
    pub p_endpoint: f64,
    pub difference: f64,
    /// Largest `f(D) - D` seen on the grid.
    pub max_excess: f64,
    pub f_below_diagonal: bool,
    pub samples: Vec<TransitionPoint>,
}

/// Check that the transition curve ends on the diagonal and stays below it, with `c = d`.
pub fn endpoint_identity_check(
    p: &Distribution,
    d: &CostMatrix,
    grid_points: usize,
    cfg: &SolverConfig,
) -> Result<EndpointReport> {
    let pv = p.probs();
    let de = d.entries();
    let (m, n) = (pv.len(), d.cols());
    let col_cost = |j: usize| (0..m).map(|i| pv[i] * de[[i, j]]).sum::<f64>();
    let jstar = (0..n)
        .min_by(|&a, &b| col_cost(a).total_cmp(&col_cost(b)))
        .ok_or_else(|| Error::InvalidProblem("empty cost matrix".into()))?;
    let d_inf = col_cost(jstar);
    let mut onehot = vec![0.0; n];
    onehot[jstar] = 1.0;
    let r = Distribution::with_support(prob::SupportGrid::indices(n), onehot)?;
    let p_endpoint = wasserstein(p, &r, d)?;
    let k = grid_points.max(2);
    let grid: Vec<f64> = (0..k).map(|t| d_inf * t as f64 / (k - 1) as f64).collect();
    let samples = transition_curve_via_rd(p, d, Some(d), PerceptionKind::Wasserstein, &grid, cfg)?;
    let max_excess = samples
        .iter()
        .map(|s| s.p - s.d)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EndpointReport {
        d_inf,
        p_endpoint,
        difference: (d_inf - p_endpoint).abs(),
        max_excess,
        f_below_diagonal: max_excess <= 1e-6,
        samples,
    })
}

/// Rate of the n-letter problem, which equals the single-letter rate at budget `P / n`.
pub fn n_letter_rate(
    n: usize,
    prob: &RdpProblem,
    kind: PerceptionKind,
    cfg: &SolverConfig,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidProblem("n must be at least 1".into()));
    }
    let scaled = prob.with_perception(prob.perception / n as f64);
    Ok(solve_rdp(&scaled, kind, cfg)?.rate)
}
