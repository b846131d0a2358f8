//! Log-domain helpers and a safeguarded root finder for monotone scalar equations.

use std::collections::HashMap;

use ndarray::Array2;

/// `ln(sum exp(x))`, ignoring `-inf` terms; `-inf` for an empty or all `-inf` input.
pub fn logsumexp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = xs.into_iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-sum-exp over a slice.
#[inline]
pub fn lse(xs: &[f64]) -> f64 {
    logsumexp(xs.iter().copied())
}

/// `ln(x)` with `ln(0) = -inf`.
#[inline]
pub fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exponent `-t * c` with `c = 0` mapping to 0 even when `t` is infinite.
#[inline]
pub fn scaled_exponent(t: f64, c: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        -t * c
    }
}

/// Column and row sums below this value are recomputed exactly in the log domain.
const FAST_SUM_FLOOR: f64 = 1e-200;

fn shifted_exp(x: &[f64]) -> (f64, Vec<f64>) {
    let xm = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !xm.is_finite() {
        return (xm, vec![0.0; x.len()]);
    }
    (xm, x.iter().map(|v| (v - xm).exp()).collect())
}

/// The kernel `exp(-t c)` of a fixed cost matrix, kept both as logarithms and as plain
/// values.
///
/// Entries are grouped by distinct cost value, so refreshing `t` costs one exponential per
/// group. Sums are formed in the plain domain after shifting the scaling vector by its
/// maximum; a sum that comes out below `1e-200` may have lost terms to underflow and is
/// redone with a log-sum-exp.
#[derive(Clone, Debug)]
pub struct LogKernel {
    pub log: Array2<f64>,
    pub exp: Array2<f64>,
    group: Vec<usize>,
    values: Vec<f64>,
}

impl LogKernel {
    /// Kernel of `c` at `t = 0`.
    pub fn new(c: &Array2<f64>) -> Self {
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut values = Vec::new();
        let group = c
            .iter()
            .map(|&v| {
                *index.entry(v.to_bits()).or_insert_with(|| {
                    values.push(v);
                    values.len() - 1
                })
            })
            .collect();
        Self {
            log: Array2::zeros(c.dim()),
            exp: Array2::ones(c.dim()),
            group,
            values,
        }
    }

    /// `log = -t c` (with `0 * inf = 0`).
    pub fn set(&mut self, t: f64) {
        let logs: Vec<f64> = self.values.iter().map(|&v| scaled_exponent(t, v)).collect();
        let exps: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
        for ((l, e), &g) in self.log.iter_mut().zip(self.exp.iter_mut()).zip(&self.group) {
            *l = logs[g];
            *e = exps[g];
        }
    }

    /// Terms `(ln(c_g sum_{c_ij = c_g} exp(x_i + y_j)), scale c_g)` over positive costs,
    /// ready for [`decreasing_root`]-style multiplier equations.
    pub fn slope_terms(&self, x: &[f64], y: &[f64], scale: f64) -> Vec<(f64, f64)> {
        let n = self.log.ncols();
        let (xm, ex) = shifted_exp(x);
        let (ym, ey) = shifted_exp(y);
        if !xm.is_finite() || !ym.is_finite() {
            return Vec::new();
        }
        let mut acc = vec![0.0; self.values.len()];
        let mut members = vec![false; self.values.len()];
        for (k, &g) in self.group.iter().enumerate() {
            let (i, j) = (k / n, k % n);
            if x[i] > f64::NEG_INFINITY && y[j] > f64::NEG_INFINITY {
                acc[g] += ex[i] * ey[j];
                members[g] = true;
            }
        }
        let mut log_mass: Vec<f64> = acc
            .iter()
            .map(|&a| if a > FAST_SUM_FLOOR { xm + ym + a.ln() } else { f64::NAN })
            .collect();
        // Exact two-pass log-sum-exp for the groups the shifted sums could not resolve.
        let redo: Vec<bool> = (0..acc.len()).map(|g| members[g] && log_mass[g].is_nan()).collect();
        if redo.iter().any(|&b| b) {
            let mut mx = vec![f64::NEG_INFINITY; acc.len()];
            for (k, &g) in self.group.iter().enumerate() {
                if redo[g] {
                    mx[g] = mx[g].max(x[k / n] + y[k % n]);
                }
            }
            let mut z = vec![0.0; acc.len()];
            for (k, &g) in self.group.iter().enumerate() {
                if redo[g] && mx[g].is_finite() {
                    z[g] += (x[k / n] + y[k % n] - mx[g]).exp();
                }
            }
            for g in 0..acc.len() {
                if redo[g] {
                    log_mass[g] = if mx[g].is_finite() { mx[g] + z[g].ln() } else { f64::NEG_INFINITY };
                }
            }
        }
        self.values
            .iter()
            .zip(&log_mass)
            .zip(&members)
            .filter(|((&v, &l), &mem)| v > 0.0 && mem && l > f64::NEG_INFINITY)
            .map(|((&v, &l), _)| (v.ln() + l, v * scale))
            .collect()
    }

    /// `out_j = ln sum_i exp(log_ij + x_i)`.
    pub fn col_lse(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = self.log.dim();
        let (xm, ex) = shifted_exp(x);
        if !xm.is_finite() {
            return vec![f64::NEG_INFINITY; n];
        }
        let mut acc = vec![0.0; n];
        for i in 0..m {
            let e = ex[i];
            if e == 0.0 {
                continue;
            }
            for (a, k) in acc.iter_mut().zip(self.exp.row(i)) {
                *a += k * e;
            }
        }
        acc.iter()
            .enumerate()
            .map(|(j, &a)| {
                if a > FAST_SUM_FLOOR {
                    xm + a.ln()
                } else {
                    logsumexp((0..m).map(|i| self.log[[i, j]] + x[i]))
                }
            })
            .collect()
    }

    /// `out_i = ln sum_j exp(log_ij + y_j)`.
    pub fn row_lse(&self, y: &[f64]) -> Vec<f64> {
        let (m, n) = self.log.dim();
        let (ym, ey) = shifted_exp(y);
        if !ym.is_finite() {
            return vec![f64::NEG_INFINITY; m];
        }
        (0..m)
            .map(|i| {
                let a: f64 = self.exp.row(i).iter().zip(&ey).map(|(k, e)| k * e).sum();
                if a > FAST_SUM_FLOOR {
                    ym + a.ln()
                } else {
                    logsumexp((0..n).map(|j| self.log[[i, j]] + y[j]))
                }
            })
            .collect()
    }

    /// `sum_ij w_ij exp(log_ij + x_i + y_j)` for non-negative `w`.
    pub fn weighted_total(&self, w: &Array2<f64>, x: &[f64], y: &[f64]) -> f64 {
        let (m, n) = self.log.dim();
        let (xm, ex) = shifted_exp(x);
        let (ym, ey) = shifted_exp(y);
        if !xm.is_finite() || !ym.is_finite() {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..m {
            if ex[i] == 0.0 {
                continue;
            }
            let row: f64 = (0..n).map(|j| w[[i, j]] * self.exp[[i, j]] * ey[j]).sum();
            total += ex[i] * row;
        }
        let wmax = w.iter().copied().fold(1.0, f64::max);
        if total > FAST_SUM_FLOOR * wmax {
            return (total.ln() + xm + ym).exp();
        }
        let mut exact = 0.0;
        for i in 0..m {
            for j in 0..n {
                if w[[i, j]] > 0.0 {
                    exact += w[[i, j]] * (self.log[[i, j]] + x[i] + y[j]).exp();
                }
            }
        }
        exact
    }
}

/// Merge `(a, s)` pairs with equal `s` into `(ln sum exp(a), s)`.
pub fn merge_equal_slopes(terms: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut owner = Vec::with_capacity(terms.len());
    for &(a, s) in terms {
        let g = *index.entry(s.to_bits()).or_insert_with(|| {
            groups.push((f64::NEG_INFINITY, s));
            groups.len() - 1
        });
        if a > groups[g].0 {
            groups[g].0 = a;
        }
        owner.push(g);
    }
    let mut sums = vec![0.0; groups.len()];
    for (&(a, _), &g) in terms.iter().zip(&owner) {
        sums[g] += (a - groups[g].0).exp();
    }
    groups
        .iter()
        .zip(&sums)
        .filter(|((m, _), _)| m.is_finite())
        .map(|(&(m, s), &z)| (m + z.ln(), s))
        .collect()
}

/// Root of a strictly decreasing function by Newton steps inside a bisection bracket.
///
/// `f` returns the value and derivative. `lo` must satisfy `f(lo) > 0` (or be the left
/// end of the domain, where `f` tends to a positive limit). If `hi` is `None` the bracket
/// is grown geometrically from `start`. Iteration stops at `|f| <= tol`, at
/// `max_newton` Newton steps followed by plain bisection, or when the bracket collapses.
/// The second return value is false when Newton stalled and bisection had to finish.
pub fn decreasing_root<F>(
    f: F,
    lo: f64,
    hi: Option<f64>,
    start: f64,
    tol: f64,
    max_newton: usize,
) -> (f64, bool)
where
    F: Fn(f64) -> (f64, f64),
{
    let mut lo = lo;
    let mut hi = match hi {
        Some(h) => h,
        None => {
            let mut step = (start - lo).abs().max(1.0);
            let mut x = lo + step;
            loop {
                let (v, _) = f(x);
                if v <= 0.0 || !x.is_finite() {
                    break x;
                }
                lo = x;
                step *= 2.0;
                x = lo + step;
                if step > 1e300 {
                    break x;
                }
            }
        }
    };
    let mut x = if start > lo && start < hi {
        start
    } else {
        0.5 * (lo + hi)
    };
    let mut newton_ok = true;
    let mut steps = 0usize;
    for _ in 0..(max_newton + 400) {
        let (v, dv) = f(x);
        if v.abs() <= tol {
            return (x, newton_ok);
        }
        if v > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= f64::EPSILON * x.abs().max(1e-300) * 4.0 {
            return (x, newton_ok);
        }
        steps += 1;
        let mut next = f64::NAN;
        if steps <= max_newton && dv < 0.0 && dv.is_finite() {
            next = x - v / dv;
        }
        if !(next > lo && next < hi) {
            if steps > max_newton {
                newton_ok = false;
            }
            next = 0.5 * (lo + hi);
        }
        x = next;
    }
    (x, false)
}
