//! Closed-form RDP functions and transition curves for the binary and Gaussian benchmarks,
//! and the Gaussian discretization.

use crate::error::{Error, Result};
use crate::prob::{xlogx, Distribution, SupportGrid};

/// Binary entropy in nats.
pub fn binary_entropy(a: f64) -> f64 {
    -xlogx(a) - xlogx(1.0 - a)
}

/// Entropy of `(a, b, 1 - a - b)` in nats.
pub fn ternary_entropy(a: f64, b: f64) -> f64 {
    -xlogx(a) - xlogx(b) - xlogx(1.0 - a - b)
}

fn check_binary_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::DomainError(format!("p = {p} outside (0, 1/2]")));
    }
    Ok(())
}

fn check_budget(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || v.is_nan() {
        return Err(Error::DomainError(format!("{name} = {v} is negative")));
    }
    Ok(())
}

/// Binary source, Hamming distortion, TV perception.
pub fn binary_rdp_closed_form(p: f64, d: f64, pp: f64) -> Result<f64> {
    check_binary_p(p)?;
    check_budget("D", d)?;
    check_budget("P", pp)?;
    let q = 1.0 - p;
    if pp > p {
        return Ok(if d < p {
            binary_entropy(p) - binary_entropy(d)
        } else {
            0.0
        });
    }
    let s1 = pp / (1.0 - 2.0 * (p - pp));
    let s3 = 2.0 * p * q - (q - p) * pp;
    let v = if d < s1 {
        binary_entropy(p) - binary_entropy(d)
    } else if d < s3 {
        2.0 * binary_entropy(p) + binary_entropy(p - pp)
            - ternary_entropy((d - pp) / 2.0, p)
            - ternary_entropy((d + pp) / 2.0, q)
    } else {
        0.0
    };
    Ok(v)
}

/// Gaussian source, squared error, squared W2 perception.
pub fn gaussian_rdp_closed_form(sigma: f64, d: f64, pp: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma}")));
    }
    check_budget("D", d)?;
    check_budget("P", pp)?;
    let s2 = sigma * sigma;
    let sp = pp.sqrt();
    // On the switching surface both branches agree; the RD branch avoids the 0/0 at P = sigma^2.
    if sp < sigma - (s2 - d).abs().sqrt() {
        let a = (sigma - sp).powi(2);
        let num = s2 * a;
        let h = (s2 + a - d) / 2.0;
        let den = num - h * h;
        if !(den > 0.0) || !(num > 0.0) {
            return Err(Error::DomainError(format!(
                "log argument not positive at D = {d}, P = {pp}"
            )));
        }
        Ok(0.5 * (num / den).ln())
    } else {
        if d == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok((0.5 * (s2 / d).ln()).max(0.0))
    }
}

/// Binary critical transition curve on `[0, p]`.
pub fn binary_transition_f(p: f64, d: f64) -> Result<f64> {
    check_binary_p(p)?;
    if !(0.0..=p).contains(&d) {
        return Err(Error::DomainError(format!("D = {d} outside [0, {p}]")));
    }
    Ok(d * (1.0 - 2.0 * p) / (1.0 - 2.0 * d))
}

/// Binary zero-rate upper bound `D(0, P)`.
pub fn binary_upper_h(p: f64, pp: f64) -> Result<f64> {
    check_binary_p(p)?;
    check_budget("P", pp)?;
    Ok(if pp < p {
        2.0 * p * (1.0 - p) - (1.0 - 2.0 * p) * pp
    } else {
        p
    })
}

/// Gaussian critical transition curve on `[0, sigma^2]`.
pub fn gaussian_transition_f(sigma: f64, d: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma}")));
    }
    let s2 = sigma * sigma;
    if !(0.0..=s2).contains(&d) {
        return Err(Error::DomainError(format!("D = {d} outside [0, {s2}]")));
    }
    Ok((sigma - (s2 - d).abs().sqrt()).powi(2))
}

/// Gaussian zero-rate upper bound.
pub fn gaussian_upper_h(sigma: f64, pp: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma}")));
    }
    check_budget("P", pp)?;
    let s2 = sigma * sigma;
    Ok(if pp < s2 {
        s2 + (sigma - pp.sqrt()).powi(2)
    } else {
        s2
    })
}

/// Truncated, discretized Gaussian source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mu: f64,
    pub sigma: f64,
    /// Truncation half-width.
    pub s: f64,
    pub delta: f64,
}

impl GaussianSpec {
    pub fn new(mu: f64, sigma: f64, s: f64, delta: f64) -> Result<Self> {
        let spec = Self { mu, sigma, s, delta };
        spec.points()?;
        Ok(spec)
    }

    /// Number of grid points `2S/delta + 1`.
    pub fn points(&self) -> Result<usize> {
        if !(self.sigma > 0.0 && self.s > 0.0 && self.delta > 0.0) || !self.mu.is_finite() {
            return Err(Error::DomainError("sigma, S and delta must be positive".into()));
        }
        if self.delta >= self.s {
            return Err(Error::DomainError("delta must be smaller than S".into()));
        }
        let k = 2.0 * self.s / self.delta;
        let kr = k.round();
        if (k - kr).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::DomainError(format!(
                "2S/delta = {k} is not an integer"
            )));
        }
        Ok(kr as usize + 1)
    }

    pub fn grid(&self) -> Result<SupportGrid> {
        let n = self.points()?;
        SupportGrid::new(
            (0..n)
                .map(|i| self.mu - self.s + i as f64 * self.delta)
                .collect(),
        )
    }
}

/// Upper tail `P(Z > z)` of a standard normal.
fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Cell probabilities `F(x + delta/2) - F(x - delta/2)`, renormalized to unit mass.
pub fn discretize_gaussian(spec: &GaussianSpec) -> Result<Distribution> {
    let grid = spec.grid()?;
    let h = spec.delta / 2.0;
    let weights: Vec<f64> = grid
        .points()
        .iter()
        .map(|&x| {
            let a = (x - h - spec.mu) / spec.sigma;
            let b = (x + h - spec.mu) / spec.sigma;
            // Difference of tails on the side away from the mean keeps both halves exact.
            if a >= 0.0 {
                upper_tail(a) - upper_tail(b)
            } else if b <= 0.0 {
                upper_tail(-b) - upper_tail(-a)
            } else {
                1.0 - upper_tail(-a) - upper_tail(b)
            }
        })
        .collect();
    Distribution::normalized_with_support(grid, weights)
}
