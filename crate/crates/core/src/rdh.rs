//! Reversible data hiding with a perception budget.
//!
//! The embedding rate `H(Y) - H(X)` depends on the channel only through the marked law
//! `r`, and a channel with `E[d] <= D` and output `r` exists exactly when the optimal
//! transport cost from `p` to `r` under `d` is at most `D`. The problem is therefore
//!
//! ```text
//! min_r  sum_j r_j ln r_j
//! s.t.   Pi1 in C(p, r), <Pi1, d> <= D
//!        Pi2 in C(p, r), <Pi2, c> <= P
//! ```
//!
//! which is solved with entropic penalties `eps * sum Pi ln Pi` on both couplings. With
//! `Pi_k = diag(xi_k) M_k diag(varphi_k)`, `M_k = exp(-lambda_k cost_k / eps)`, the joint
//! minimization over `(r, varphi_1, varphi_2)` has the closed form
//!
//! ```text
//! (1 + 2 eps) ln r_j = eps (A1_j + A2_j) + const,   A_k = ln(M_k^T xi_k)
//! ln varphi_k,j      = ln r_j - A_k,j
//! ```
//!
//! and the row scalings and multipliers are updated as in the transport block of the RDP
//! solver.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, safe_ln, LogKernel};
use crate::ot::wasserstein;
use crate::pgm::GrayImage;
use crate::prob::{self, CostMatrix, Coupling, Distribution, SupportGrid};
use crate::rdp::{balance_gauge, multiplier_root, slackness, ResidualReport, SolverConfig};

pub const SYMBOLS: usize = 256;

/// Prediction errors in raster order and their histogram over the 256 symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionErrors {
    pub errors: Vec<u8>,
    pub predictions: Vec<u8>,
    pub histogram: Distribution,
}

/// Causal prediction: mean of left and top, floored; one neighbor on the first row and
/// column; 0 at the origin.
pub fn predict(img: &GrayImage, row: usize, col: usize) -> u8 {
    match (row, col) {
        (0, 0) => 0,
        (0, _) => img.get(0, col - 1),
        (_, 0) => img.get(row - 1, 0),
        _ => ((img.get(row, col - 1) as u16 + img.get(row - 1, col) as u16) / 2) as u8,
    }
}

/// `e = (h - h_hat + 128) mod 256`.
pub fn prediction_errors(img: &GrayImage) -> Result<PredictionErrors> {
    let (w, h) = (img.width(), img.height());
    if w < 2 || h < 2 {
        return Err(Error::TooSmall(w, h));
    }
    let mut errors = Vec::with_capacity(w * h);
    let mut predictions = Vec::with_capacity(w * h);
    let mut counts = vec![0usize; SYMBOLS];
    for r in 0..h {
        for c in 0..w {
            let hat = predict(img, r, c);
            let e = img.get(r, c).wrapping_sub(hat).wrapping_add(128);
            counts[e as usize] += 1;
            errors.push(e);
            predictions.push(hat);
        }
    }
    let total = (w * h) as f64;
    let histogram = Distribution::with_support(
        SupportGrid::indices(SYMBOLS),
        counts.iter().map(|&k| k as f64 / total).collect(),
    )?;
    Ok(PredictionErrors {
        errors,
        predictions,
        histogram,
    })
}

/// `(i - j)^2` on the 256 error symbols.
pub fn symbol_squared_error() -> CostMatrix {
    let g = SupportGrid::indices(SYMBOLS);
    prob::squared_error_matrix(&g, &g)
}

#[derive(Clone, Debug)]
pub struct RdhSolution {
    pub r: Distribution,
    /// Distortion-side and perception-side couplings.
    pub couplings: (Coupling, Coupling),
    /// `H(r) - H(p)` in nats.
    pub embedding_rate: f64,
    pub achieved_d: f64,
    pub achieved_p: f64,
    /// Exact transport costs from `p` to `r`, which never exceed the entropic ones.
    pub certified_d: f64,
    pub certified_p: f64,
    pub lambda_d: f64,
    pub lambda_p: f64,
    /// Slots: `r_psi`/`r_phi` are the column/row violations of the distortion coupling,
    /// `r_varphi`/`r_xi` those of the perception coupling, `r_lambda`/`r_gamma` the two
    /// slackness terms. `r_eta` is always 0 since `r` is normalized exactly.
    pub residual_trace: Vec<ResidualReport>,
    pub iterations: usize,
    pub converged: bool,
}

impl RdhSolution {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().map_or(0.0, |r| r.overall)
    }
}

struct Side<'a> {
    cost: &'a Array2<f64>,
    budget: f64,
    ker: LogKernel,
    ln_xi: Vec<f64>,
    ln_varphi: Vec<f64>,
    lambda: f64,
}

impl<'a> Side<'a> {
    fn new(cost: &'a Array2<f64>, budget: f64, lp: &[f64], eps: f64) -> Self {
        let n = cost.ncols();
        let mut ker = LogKernel::new(cost);
        let lambda = 1.0;
        ker.set(lambda / eps);
        Self {
            cost,
            budget,
            ker,
            ln_xi: lp.to_vec(),
            ln_varphi: vec![0.0; n],
            lambda,
        }
    }

    /// Row scaling, gauge, multiplier.
    fn step(&mut self, lp: &[f64], eps: f64, cfg: &SolverConfig) {
        for (i, s) in self.ker.row_lse(&self.ln_varphi).into_iter().enumerate() {
            if s.is_finite() {
                self.ln_xi[i] = lp[i] - s;
            }
        }
        balance_gauge(&mut self.ln_xi, &mut self.ln_varphi);
        let terms = self.ker.slope_terms(&self.ln_xi, &self.ln_varphi, 1.0 / eps);
        self.lambda = multiplier_root(&terms, self.budget, self.lambda, cfg);
        self.ker.set(self.lambda / eps);
    }

    /// `(row violation, column violation, cost)`.
    fn residuals(&self, p: &[f64], r: &[f64]) -> (f64, f64, f64) {
        let rows: f64 = self
            .ker
            .row_lse(&self.ln_varphi)
            .iter()
            .enumerate()
            .map(|(i, v)| ((self.ln_xi[i] + v).exp() - p[i]).abs())
            .sum();
        let cols: f64 = self
            .ker
            .col_lse(&self.ln_xi)
            .iter()
            .enumerate()
            .map(|(j, v)| ((self.ln_varphi[j] + v).exp() - r[j]).abs())
            .sum();
        let cost = self.ker.weighted_total(self.cost, &self.ln_xi, &self.ln_varphi);
        (rows, cols, cost)
    }

    fn coupling(&self) -> Result<Coupling> {
        let (m, n) = self.cost.dim();
        Coupling::unchecked(Array2::from_shape_fn((m, n), |(i, j)| {
            let l = self.ln_xi[i] + self.ker.log[[i, j]] + self.ln_varphi[j];
            if l.is_nan() {
                0.0
            } else {
                l.exp()
            }
        }))
    }
}

fn least_cost(p: &[f64], c: &Array2<f64>) -> f64 {
    p.iter()
        .enumerate()
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(i, &pi)| pi * c.row(i).iter().copied().fold(f64::INFINITY, f64::min))
        .sum()
}

fn validate(p: &Distribution, d: &CostMatrix, c: &CostMatrix, dd: f64, pp: f64, eps: f64) -> Result<()> {
    let n = p.len();
    for cm in [d, c] {
        if cm.rows() != n || cm.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if cm.rows() != n { cm.rows() } else { cm.cols() },
            });
        }
    }
    if !(dd >= 0.0 && dd.is_finite()) || !(pp >= 0.0 && pp.is_finite()) {
        return Err(Error::InvalidProblem("budgets must be finite and non-negative".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidProblem("epsilon must be positive".into()));
    }
    for (cm, budget, name) in [(d, dd, "distortion"), (c, pp, "perception")] {
        let least = least_cost(p.probs(), cm.entries());
        if least > budget {
            return Err(Error::Infeasible(format!(
                "{name} budget {budget} is below the least possible cost {least}"
            )));
        }
    }
    Ok(())
}

fn unmarked(p: &Distribution, d: &CostMatrix, c: &CostMatrix) -> Result<RdhSolution> {
    let diag = Array2::from_diag(&ndarray::Array1::from(p.probs().to_vec()));
    let pi = Coupling::unchecked(diag)?;
    Ok(RdhSolution {
        r: p.clone(),
        achieved_d: pi.cost(d),
        achieved_p: pi.cost(c),
        couplings: (pi.clone(), pi),
        embedding_rate: 0.0,
        certified_d: 0.0,
        certified_p: 0.0,
        lambda_d: f64::INFINITY,
        lambda_p: f64::INFINITY,
        residual_trace: Vec::new(),
        iterations: 0,
        converged: true,
    })
}

/// Marked-signal law of maximal entropy under a distortion budget `D` (cost `d`) and a
/// transport perception budget `P` (cost `c`).
pub fn solve_rdh_rdp(
    p: &Distribution,
    d: &CostMatrix,
    c: &CostMatrix,
    distortion: f64,
    perception: f64,
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<RdhSolution> {
    validate(p, d, c, distortion, perception, epsilon)?;
    cfg.validate()?;
    if (distortion == 0.0 && d.is_zero_iff_equal()) || (perception == 0.0 && c.is_zero_iff_equal()) {
        return unmarked(p, d, c);
    }
    let pv = p.probs();
    let n = pv.len();
    let eps = epsilon;
    let lp: Vec<f64> = pv.iter().map(|&x| safe_ln(x)).collect();
    let mut sides = [
        Side::new(d.entries(), distortion, &lp, eps),
        Side::new(c.entries(), perception, &lp, eps),
    ];
    let mut r = pv.to_vec();
    let mut trace = Vec::with_capacity(cfg.max_iter.min(4096));
    let mut converged = false;
    let mut iterations = 0;
    let shrink = eps / (1.0 + 2.0 * eps);
    for it in 1..=cfg.max_iter {
        iterations = it;
        for s in sides.iter_mut() {
            for _ in 0..cfg.pi_sweeps {
                s.step(&lp, eps, cfg);
            }
        }
        let a: Vec<Vec<f64>> = sides.iter().map(|s| s.ker.col_lse(&s.ln_xi)).collect();
        let ln_r_raw: Vec<f64> = (0..n).map(|j| shrink * (a[0][j] + a[1][j])).collect();
        let z = logsumexp(ln_r_raw.iter().copied());
        let ln_r: Vec<f64> = ln_r_raw.iter().map(|x| x - z).collect();
        r = ln_r.iter().map(|x| x.exp()).collect();
        for (k, s) in sides.iter_mut().enumerate() {
            for j in 0..n {
                if a[k][j].is_finite() {
                    s.ln_varphi[j] = ln_r[j] - a[k][j];
                }
            }
            balance_gauge(&mut s.ln_xi, &mut s.ln_varphi);
            // The scalings live in the log domain, where a wide spread is harmless.
            if s.ln_xi.iter().chain(&s.ln_varphi).any(|x| x.is_nan()) {
                return Err(Error::NumericalOverflow("scaling vector"));
            }
        }
        let (rows_d, cols_d, cost_d) = sides[0].residuals(pv, &r);
        let (rows_p, cols_p, cost_p) = sides[1].residuals(pv, &r);
        let rep = ResidualReport::new([
            cols_d,
            rows_d,
            slackness(sides[0].lambda, cost_d - distortion),
            0.0,
            cols_p,
            rows_p,
            slackness(sides[1].lambda, cost_p - perception),
        ]);
        trace.push(rep);
        if rep.overall.is_nan() {
            return Err(Error::NumericalOverflow("residual is NaN"));
        }
        if rep.overall <= cfg.residual_tol {
            converged = true;
            break;
        }
    }
    let r = Distribution::with_support(p.support().clone(), r)?;
    let pi_d = sides[0].coupling()?;
    let pi_p = sides[1].coupling()?;
    Ok(RdhSolution {
        embedding_rate: prob::entropy(&r) - prob::entropy(p),
        achieved_d: pi_d.cost(d),
        achieved_p: pi_p.cost(c),
        certified_d: wasserstein(p, &r, d)?,
        certified_p: wasserstein(p, &r, c)?,
        r,
        couplings: (pi_d, pi_p),
        lambda_d: sides[0].lambda,
        lambda_p: sides[1].lambda,
        residual_trace: trace,
        iterations,
        converged,
    })
}

/// `10 log10(255^2 / MSE)`; infinite for identical images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch {
            expected: a.pixels().len(),
            got: b.pixels().len(),
        });
    }
    let se: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / a.pixels().len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

#[derive(Clone, Debug)]
pub struct Marking {
    pub image: GrayImage,
    pub marked_errors: Vec<u8>,
    pub psnr: f64,
}

/// Draw a marked error for every pixel from `w_ij = Pi1_ij / p_i` and rebuild the image
/// as `z = (y + h_hat - 128) mod 256`, with `h_hat` the prediction from the cover.
///
/// The generator is ChaCha8 seeded from `seed`, so the output is a function of the seed.
pub fn simulate_marking(img: &GrayImage, solution: &RdhSolution, seed: Option<u64>) -> Result<Marking> {
    let seed = seed.ok_or(Error::SeedRequired)?;
    let pe = prediction_errors(img)?;
    let pi = solution.couplings.0.matrix();
    if pi.nrows() != SYMBOLS {
        return Err(Error::DimensionMismatch {
            expected: SYMBOLS,
            got: pi.nrows(),
        });
    }
    let n = pi.ncols();
    // Cumulative conditionals, only for symbols that occur.
    let mut cdf: Vec<Option<Vec<f64>>> = vec![None; SYMBOLS];
    for &e in &pe.errors {
        let i = e as usize;
        if cdf[i].is_some() {
            continue;
        }
        let row = pi.row(i);
        let total: f64 = row.sum();
        let mut acc = 0.0;
        let mut v: Vec<f64> = row
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        if !(total > 0.0) {
            // No mass on this row: leave the error unchanged.
            v = (0..n).map(|j| if j >= i { 1.0 } else { 0.0 }).collect();
        } else {
            v.iter_mut().for_each(|x| *x /= total);
        }
        cdf[i] = Some(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marked_errors = Vec::with_capacity(pe.errors.len());
    let mut pixels = Vec::with_capacity(pe.errors.len());
    for (&e, &hat) in pe.errors.iter().zip(&pe.predictions) {
        let v = cdf[e as usize].as_ref().expect("cdf built for every occurring symbol");
        let u: f64 = rng.random();
        let y = v.partition_point(|&x| x <= u).min(n - 1) as u8;
        marked_errors.push(y);
        pixels.push(y.wrapping_add(hat).wrapping_sub(128));
    }
    let image = GrayImage::new(img.width(), img.height(), pixels)?;
    let psnr = psnr(img, &image)?;
    Ok(Marking {
        image,
        marked_errors,
        psnr,
    })
}

/// Histogram of a symbol sequence over the 256 symbols.
pub fn symbol_histogram(symbols: &[u8]) -> Result<Distribution> {
    let mut counts = vec![0.0; SYMBOLS];
    for &s in symbols {
        counts[s as usize] += 1.0;
    }
    Distribution::normalized_with_support(SupportGrid::indices(SYMBOLS), counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_errors() {
        let img = GrayImage::new(3, 2, vec![0; 6]).unwrap();
        let pe = prediction_errors(&img).unwrap();
        assert!(pe.errors.iter().all(|&e| e == 128));
        assert_eq!(pe.histogram.probs()[128], 1.0);
    }

    #[test]
    fn diagonal_ramp_errors() {
        // pixel = 10 + row + col
        let px: Vec<u8> = (0..2).flat_map(|r| (0..5).map(move |c| 10 + r + c)).collect();
        let img = GrayImage::new(5, 2, px).unwrap();
        let pe = prediction_errors(&img).unwrap();
        assert_eq!(pe.errors[0], 138);
        assert!(pe.errors[1..].iter().all(|&e| e == 129));
    }

    #[test]
    fn too_small() {
        let img = GrayImage::new(5, 1, vec![1; 5]).unwrap();
        assert!(matches!(prediction_errors(&img), Err(Error::TooSmall(5, 1))));
    }

    #[test]
    fn psnr_sentinel_and_value() {
        let a = GrayImage::new(2, 2, vec![0, 0, 0, 0]).unwrap();
        let b = GrayImage::new(2, 2, vec![0, 0, 0, 2]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // MSE = 1
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
    }

    fn toy() -> (Distribution, CostMatrix) {
        (
            Distribution::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap(),
            prob::hamming_matrix(4, 4),
        )
    }

    #[test]
    fn zero_budget_leaves_source() {
        let (p, d) = toy();
        let cfg = SolverConfig::default();
        for (dd, pp) in [(0.0, 0.5), (0.5, 0.0)] {
            let s = solve_rdh_rdp(&p, &d, &d, dd, pp, 0.01, &cfg).unwrap();
            assert_eq!(s.embedding_rate, 0.0);
            assert_eq!(s.r.probs(), p.probs());
        }
    }

    #[test]
    fn loose_budgets_give_uniform() {
        let (p, d) = toy();
        let cfg = SolverConfig::default();
        let s = solve_rdh_rdp(&p, &d, &d, 1.0, 1.0, 0.01, &cfg).unwrap();
        assert!(s.converged);
        for &x in s.r.probs() {
            assert!((x - 0.25).abs() < 1e-9);
        }
        let h = prob::entropy(&p);
        assert!((s.embedding_rate - (4f64.ln() - h)).abs() < 1e-9);
    }

    #[test]
    fn infeasible_budget() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let d = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let z = prob::hamming_matrix(2, 2);
        assert!(matches!(
            solve_rdh_rdp(&p, &d, &z, 0.5, 1.0, 0.01, &SolverConfig::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn seed_required() {
        let img = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let pe = prediction_errors(&img).unwrap();
        let sq = symbol_squared_error();
        let s = solve_rdh_rdp(&pe.histogram, &sq, &sq, 0.0, 1.0, 0.01, &SolverConfig::default())
            .unwrap();
        assert!(matches!(simulate_marking(&img, &s, None), Err(Error::SeedRequired)));
        let m = simulate_marking(&img, &s, Some(1)).unwrap();
        assert_eq!(m.image, img);
        assert_eq!(m.psnr, f64::INFINITY);
    }
}
