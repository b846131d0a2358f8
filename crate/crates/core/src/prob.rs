//! Finite-alphabet probability primitives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;
const ROW_TOL: f64 = 1e-10;
const MARGINAL_TOL: f64 = 1e-8;

/// `x * ln(x)` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Ordered support points of a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    points: Vec<f64>,
}

impl SupportGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite support point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDistribution(
                "support must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// The index grid 0, 1, ..., n-1.
    pub fn indices(n: usize) -> Self {
        Self {
            points: (0..n).map(|i| i as f64).collect(),
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A probability vector on a finite support grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
    support: SupportGrid,
}

impl Distribution {
    /// Distribution on the index grid.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let n = probs.len();
        if n == 0 {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        Self::with_support(SupportGrid::indices(n), probs)
    }

    pub fn with_support(support: SupportGrid, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                got: probs.len(),
            });
        }
        if let Some(i) = probs.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is negative or not finite"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs, support })
    }

    /// Rescale non-negative weights to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        Self::normalized_with_support(SupportGrid::indices(n.max(1)), weights)
    }

    pub fn normalized_with_support(support: SupportGrid, mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDistribution("weights have zero mass".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        Self::with_support(support, weights)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::normalized(vec![1.0; n])
    }

    /// Two-point distribution `(p, 1 - p)`.
    pub fn bernoulli(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidDistribution(format!("p = {p} outside [0, 1]")));
        }
        Self::new(vec![p, 1.0 - p])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> &SupportGrid {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Non-negative cost (distortion or transport) matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidCost("empty matrix".into()));
        }
        if entries.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidCost("entries must be finite and non-negative".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((m, n), flat)
            .map_err(|e| Error::InvalidCost(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        Self {
            entries: self.entries.t().to_owned(),
        }
    }

    /// Square with zero diagonal and positive off-diagonal entries.
    pub fn is_zero_iff_equal(&self) -> bool {
        let n = self.rows();
        if n != self.cols() {
            return false;
        }
        self.entries
            .indexed_iter()
            .all(|((i, j), &x)| if i == j { x == 0.0 } else { x > 0.0 })
    }
}

/// Row-stochastic conditional matrix `w[i][j] = W(j | i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    w: Array2<f64>,
}

impl Channel {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidChannel("entries must be finite and non-negative".into()));
        }
        for (i, row) in w.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidChannel(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { w })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: Array2::eye(n),
        }
    }

    /// Every row equal to `q`.
    pub fn constant(m: usize, q: &Distribution) -> Self {
        let n = q.len();
        Self {
            w: Array2::from_shape_fn((m, n), |(_, j)| q.probs()[j]),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }
}

/// Joint matrix with prescribed marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pi: Array2<f64>,
}

impl Coupling {
    /// Checks both marginals to within 1e-8.
    pub fn new(pi: Array2<f64>, left: &Distribution, right: &Distribution) -> Result<Self> {
        let c = Self::unchecked(pi)?;
        if c.pi.nrows() != left.len() {
            return Err(Error::DimensionMismatch {
                expected: left.len(),
                got: c.pi.nrows(),
            });
        }
        if c.pi.ncols() != right.len() {
            return Err(Error::DimensionMismatch {
                expected: right.len(),
                got: c.pi.ncols(),
            });
        }
        for (i, &s) in c.row_sums().iter().enumerate() {
            if (s - left.probs()[i]).abs() > MARGINAL_TOL {
                return Err(Error::InvalidCoupling(format!("row {i} sums to {s}")));
            }
        }
        for (j, &s) in c.col_sums().iter().enumerate() {
            if (s - right.probs()[j]).abs() > MARGINAL_TOL {
                return Err(Error::InvalidCoupling(format!("column {j} sums to {s}")));
            }
        }
        Ok(c)
    }

    /// Only checks entries; used for intermediate iterates.
    pub fn unchecked(pi: Array2<f64>) -> Result<Self> {
        if pi.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidCoupling("entries must be finite and non-negative".into()));
        }
        Ok(Self { pi })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.pi
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.pi.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.pi.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// `sum_ij pi_ij c_ij`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.pi
            .iter()
            .zip(c.entries().iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

fn check_channel(ch: &Channel, p: &Distribution) -> Result<()> {
    same_len(p.len(), ch.rows())
}

pub fn entropy(dist: &Distribution) -> f64 {
    -dist.probs().iter().map(|&x| xlogx(x)).sum::<f64>()
}

pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&a, &b)) in p.probs().iter().zip(q.probs()).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuityViolation(i));
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// `sum_ij w_ij p_i ln(w_ij / r_j)` with `r` the induced output marginal.
pub fn mutual_information(ch: &Channel, p: &Distribution) -> Result<f64> {
    check_channel(ch, p)?;
    let r = marginal_weights(ch.matrix(), p.probs());
    let w = ch.matrix();
    let mut acc = 0.0;
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, &rj) in r.iter().enumerate() {
            let wij = w[[i, j]];
            if wij > 0.0 {
                acc += pi * wij * (wij / rj).ln();
            }
        }
    }
    Ok(acc.max(0.0))
}

pub fn expected_distortion(ch: &Channel, p: &Distribution, d: &CostMatrix) -> Result<f64> {
    check_channel(ch, p)?;
    same_len(ch.rows(), d.rows())?;
    same_len(ch.cols(), d.cols())?;
    let w = ch.matrix();
    let mut acc = 0.0;
    for (i, &pi) in p.probs().iter().enumerate() {
        for j in 0..ch.cols() {
            acc += pi * w[[i, j]] * d.get(i, j);
        }
    }
    Ok(acc)
}

pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    same_len(p.len(), q.len())?;
    Ok(0.5
        * p.probs()
            .iter()
            .zip(q.probs())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

pub(crate) fn marginal_weights(w: &Array2<f64>, p: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; w.ncols()];
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, rj) in r.iter_mut().enumerate() {
            *rj += w[[i, j]] * pi;
        }
    }
    r
}

/// Output marginal `r_j = sum_i w_ij p_i`.
pub fn marginal(ch: &Channel, p: &Distribution) -> Result<Distribution> {
    check_channel(ch, p)?;
    let r = marginal_weights(ch.matrix(), p.probs());
    Distribution::normalized(r)
}

/// Append zero-probability symbols up to `target_size`.
pub fn zero_pad(p: &Distribution, target_size: usize) -> Result<Distribution> {
    let m = p.len();
    if target_size < m {
        return Err(Error::ShrinkNotAllowed {
            from: m,
            to: target_size,
        });
    }
    if target_size == m {
        return Ok(p.clone());
    }
    let mut probs = p.probs().to_vec();
    probs.resize(target_size, 0.0);
    let mut pts = p.support().points().to_vec();
    let last = *pts.last().unwrap_or(&0.0);
    pts.extend((1..=target_size - m).map(|k| last + k as f64));
    Distribution::with_support(SupportGrid::new(pts)?, probs)
}

pub fn hamming_matrix(m: usize, n: usize) -> CostMatrix {
    CostMatrix {
        entries: Array2::from_shape_fn((m.max(1), n.max(1)), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0
            }
        }),
    }
}

pub fn squared_error_matrix(g1: &SupportGrid, g2: &SupportGrid) -> CostMatrix {
    let (a, b) = (g1.points(), g2.points());
    CostMatrix {
        entries: Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
            let e = a[i] - b[j];
            e * e
        }),
    }
}
