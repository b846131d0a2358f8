//! Exact discrete optimal transport by the transportation simplex method.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::prob::{CostMatrix, Coupling, Distribution};

/// Optimal value and an optimal basic plan.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub value: f64,
    pub plan: Coupling,
}

const MASS_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots before switching to the lowest-index entering rule.
const DEGENERATE_RUN: usize = 64;

struct Simplex<'a> {
    m: usize,
    n: usize,
    c: &'a Array2<f64>,
    flow: Vec<f64>,
    basic: Vec<bool>,
    cells: Vec<(usize, usize)>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl<'a> Simplex<'a> {
    fn northwest(p: &[f64], r: &[f64], c: &'a Array2<f64>) -> Self {
        let (m, n) = (p.len(), r.len());
        let mut supply = p.to_vec();
        let mut demand = r.to_vec();
        let mut flow = vec![0.0; m * n];
        let mut basic = vec![false; m * n];
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            flow[i * n + j] = x;
            basic[i * n + j] = true;
            cells.push((i, j));
            supply[i] -= x;
            demand[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (supply[i] <= demand[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            m,
            n,
            c,
            flow,
            basic,
            cells,
            u: vec![0.0; m],
            v: vec![0.0; n],
        }
    }

    /// Adjacency of the spanning tree: nodes 0..m are rows, m..m+n columns.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for &(i, j) in &self.cells {
            adj[i].push(self.m + j);
            adj[self.m + j].push(i);
        }
        adj
    }

    fn potentials(&mut self, adj: &[Vec<usize>]) {
        let m = self.m;
        let mut seen = vec![false; m + self.n];
        let mut queue = VecDeque::new();
        self.u[0] = 0.0;
        seen[0] = true;
        queue.push_back(0);
        while let Some(a) = queue.pop_front() {
            for &b in &adj[a] {
                if seen[b] {
                    continue;
                }
                seen[b] = true;
                if a < m {
                    let j = b - m;
                    self.v[j] = self.c[[a, j]] - self.u[a];
                } else {
                    let j = a - m;
                    self.u[b] = self.c[[b, j]] - self.v[j];
                }
                queue.push_back(b);
            }
        }
    }

    fn entering(&self, tol: f64, bland: bool) -> Option<(usize, usize)> {
        let mut best = None;
        let mut best_rc = -tol;
        for i in 0..self.m {
            for j in 0..self.n {
                if self.basic[i * self.n + j] {
                    continue;
                }
                let rc = self.c[[i, j]] - self.u[i] - self.v[j];
                if rc < best_rc {
                    if bland {
                        return Some((i, j));
                    }
                    best_rc = rc;
                    best = Some((i, j));
                }
            }
        }
        best
    }

    /// Tree path from column node `j` to row node `i`, as a list of cells.
    fn path(&self, adj: &[Vec<usize>], i: usize, j: usize) -> Vec<(usize, usize)> {
        let m = self.m;
        let src = m + j;
        let mut parent = vec![usize::MAX; m + self.n];
        parent[src] = src;
        let mut queue = VecDeque::from([src]);
        while let Some(a) = queue.pop_front() {
            if a == i {
                break;
            }
            for &b in &adj[a] {
                if parent[b] == usize::MAX {
                    parent[b] = a;
                    queue.push_back(b);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = i;
        while node != src {
            let prev = parent[node];
            let cell = if node < m {
                (node, prev - m)
            } else {
                (prev, node - m)
            };
            cells.push(cell);
            node = prev;
        }
        cells.reverse();
        cells
    }

    fn run(&mut self) {
        let scale = self.c.iter().copied().fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        let mut degenerate = 0usize;
        let max_pivots = 50 * (self.m + self.n) * (self.m + self.n) + 1000;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            self.potentials(&adj);
            let Some((ei, ej)) = self.entering(tol, degenerate >= DEGENERATE_RUN) else {
                return;
            };
            let path = self.path(&adj, ei, ej);
            // Path edges alternate -, +, -, ... starting from column ej.
            let mut leave: Option<(usize, usize)> = None;
            let mut theta = f64::INFINITY;
            for (k, &(i, j)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    let f = self.flow[i * self.n + j];
                    let better = match leave {
                        None => true,
                        Some((li, lj)) => {
                            f < theta || (f == theta && i * self.n + j < li * self.n + lj)
                        }
                    };
                    if better {
                        theta = f;
                        leave = Some((i, j));
                    }
                }
            }
            let (li, lj) = leave.expect("cycle has a decreasing edge");
            let theta = theta.max(0.0);
            for (k, &(i, j)) in path.iter().enumerate() {
                let idx = i * self.n + j;
                if k % 2 == 0 {
                    self.flow[idx] = (self.flow[idx] - theta).max(0.0);
                } else {
                    self.flow[idx] += theta;
                }
            }
            self.flow[ei * self.n + ej] = theta;
            self.basic[li * self.n + lj] = false;
            self.basic[ei * self.n + ej] = true;
            self.flow[li * self.n + lj] = 0.0;
            let pos = self
                .cells
                .iter()
                .position(|&c| c == (li, lj))
                .expect("leaving cell is basic");
            self.cells[pos] = (ei, ej);
            if theta > 0.0 {
                degenerate = 0;
            } else {
                degenerate += 1;
            }
        }
    }
}

fn check_inputs(a: &[f64], b: &[f64], c: &CostMatrix) -> Result<()> {
    if c.rows() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: c.rows(),
        });
    }
    if c.cols() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            got: c.cols(),
        });
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution("masses must be finite and non-negative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > MASS_TOL {
        return Err(Error::InfeasibleMass(sa, sb));
    }
    Ok(())
}

/// Transport between raw non-negative mass vectors of equal total.
pub fn solve_transport_masses(a: &[f64], b: &[f64], c: &CostMatrix) -> Result<TransportSolution> {
    check_inputs(a, b, c)?;
    let mut s = Simplex::northwest(a, b, c.entries());
    s.run();
    let (m, n) = (s.m, s.n);
    let plan = Array2::from_shape_vec((m, n), s.flow).expect("shape");
    let value = plan.iter().zip(c.entries().iter()).map(|(x, y)| x * y).sum();
    Ok(TransportSolution {
        value,
        plan: Coupling::unchecked(plan)?,
    })
}

/// Solve `min sum pi_ij c_ij` over couplings of `p` and `r`.
pub fn solve_transport(p: &Distribution, r: &Distribution, c: &CostMatrix) -> Result<TransportSolution> {
    solve_transport_masses(p.probs(), r.probs(), c)
}

/// Optimal transport cost between `p` and `r` under `c`.
pub fn wasserstein(p: &Distribution, r: &Distribution, c: &CostMatrix) -> Result<f64> {
    Ok(solve_transport(p, r, c)?.value)
}
