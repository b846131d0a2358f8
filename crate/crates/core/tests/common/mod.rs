//! Brute-force oracles and fixtures shared by the integration tests.
//!
//! Everything here is written from the definitions and does not call the solvers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdp_core::pgm::GrayImage;

pub fn h(xs: &[f64]) -> f64 {
    -xs.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Golden-section minimum of a unimodal `f` on `[lo, hi]`.
pub fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    let fx = f(x);
    [(x1, f1), (x2, f2), (x, fx)]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// `I(X;Y)` of a square channel, by explicit double loop.
pub fn mi(p: &[f64], w: &[Vec<f64>]) -> f64 {
    let n = w[0].len();
    let r: Vec<f64> = (0..n)
        .map(|j| (0..p.len()).map(|i| p[i] * w[i][j]).sum())
        .collect();
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in 0..n {
            let v = p[i] * w[i][j];
            if v > 0.0 {
                s += v * (w[i][j] / r[j]).ln();
            }
        }
    }
    s
}

/// Minimum rate of a binary source `(p0, 1 - p0)` under Hamming distortion `D` and an
/// output law constrained to `r0 in [lo, hi]`.
///
/// The channel is `[[1 - a, a], [b, 1 - b]]`; the rate is convex in `(a, b)`, so the
/// inner minimum over `b` is a golden section and the outer one a grid plus golden
/// refinement.
pub fn binary_oracle(p0: f64, d: f64, r0_lo: f64, r0_hi: f64) -> f64 {
    let p1 = 1.0 - p0;
    let p = [p0, p1];
    let rate = |a: f64, b: f64| mi(&p, &[vec![1.0 - a, a], vec![b, 1.0 - b]]);
    let inner = |a: f64| -> f64 {
        // r0 = p0 (1 - a) + p1 b
        let lo = ((r0_lo - p0 * (1.0 - a)) / p1).max(0.0);
        let hi = ((r0_hi - p0 * (1.0 - a)) / p1).min(1.0).min((d - p0 * a) / p1);
        if lo > hi + 1e-15 {
            return f64::INFINITY;
        }
        let hi = hi.max(lo);
        golden(|b| rate(a, b), lo, hi).1
    };
    let amax = (d / p0).min(1.0);
    let k = 2000;
    let (mut best_a, mut best) = (0.0, f64::INFINITY);
    for t in 0..=k {
        let a = amax * t as f64 / k as f64;
        let v = inner(a);
        if v < best {
            best = v;
            best_a = a;
        }
    }
    let step = amax / k as f64;
    let (_, refined) = golden(&inner, (best_a - step).max(0.0), (best_a + step).min(amax));
    best.min(refined)
}

/// Output-law interval `r0` with `KL(p || r) <= P`, found by bisection on each side of `p0`.
pub fn kl_interval(p0: f64, budget: f64) -> (f64, f64) {
    let kl = |r0: f64| {
        let mut s = 0.0;
        for (a, b) in [(p0, r0), (1.0 - p0, 1.0 - r0)] {
            if a > 0.0 {
                s += a * (a / b).ln();
            }
        }
        s
    };
    let edge = |mut inside: f64, mut outside: f64| {
        if kl(outside) <= budget {
            return outside;
        }
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if kl(mid) <= budget {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    (edge(p0, 0.0), edge(p0, 1.0))
}

/// Minimum rate over square channels with Hamming distortion `<= D` and TV output shift
/// `<= P`.
///
/// TV is the largest `sum_{j in S} (r_j - p_j)` over subsets `S`, so every constraint is
/// linear in the channel. The convex program is solved by a log-barrier method: damped
/// Newton steps on the free entries (last column eliminated by the row sums), with the
/// barrier weight driven from 1 down to 1e-12.
pub fn channel_oracle(p: &[f64], d: f64, tv: f64) -> f64 {
    let n = p.len();
    let nv = n * (n - 1);
    // Constraints a . vec(W) <= b over all n*n entries.
    let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
    for k in 0..n * n {
        let mut a = vec![0.0; n * n];
        a[k] = -1.0;
        cons.push((a, 0.0));
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * n + j] = p[i];
            }
        }
    }
    cons.push((a, d));
    for mask in 1..(1usize << n) - 1 {
        let mut a = vec![0.0; n * n];
        let mut b = tv;
        for j in 0..n {
            if mask >> j & 1 == 1 {
                b += p[j];
                for i in 0..n {
                    a[i * n + j] = p[i];
                }
            }
        }
        cons.push((a, b));
    }
    let full = |x: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n - 1 {
                w[i * n + j] = x[i * (n - 1) + j];
                s += x[i * (n - 1) + j];
            }
            w[i * n + n - 1] = 1.0 - s;
        }
        w
    };
    // d vec(W) / d x: entry (i, j) moves +1, entry (i, n-1) moves -1.
    let lift = |g: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; nv];
        for i in 0..n {
            for j in 0..n - 1 {
                out[i * (n - 1) + j] = g[i * n + j] - g[i * n + n - 1];
            }
        }
        out
    };
    let column = |v: usize| -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        let (i, j) = (v / (n - 1), v % (n - 1));
        g[i * n + j] = 1.0;
        g[i * n + n - 1] = -1.0;
        g
    };
    let objective = |x: &[f64], mu: f64| -> f64 {
        let w = full(x);
        let mut bar = 0.0;
        for (a, b) in &cons {
            let s = b - a.iter().zip(&w).map(|(u, v)| u * v).sum::<f64>();
            if s <= 0.0 {
                return f64::INFINITY;
            }
            bar -= s.ln();
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| w[i * n..(i + 1) * n].to_vec()).collect();
        mi(p, &rows) + mu * bar
    };
    // Strictly feasible start between the identity and the product channel.
    let purity: f64 = p.iter().map(|x| x * x).sum();
    let s = 0.5 * (d / (1.0 - purity)).min(1.0);
    let mut x = vec![0.0; nv];
    for i in 0..n {
        for j in 0..n - 1 {
            x[i * (n - 1) + j] = s * p[j] + if i == j { 1.0 - s } else { 0.0 };
        }
    }
    let mut mu = 1.0;
    while mu > 1e-12 {
        for _ in 0..100 {
            let w = full(&x);
            let r: Vec<f64> = (0..n).map(|j| (0..n).map(|i| p[i] * w[i * n + j]).sum()).collect();
            // Gradient and Hessian in vec(W) coordinates.
            let mut g = vec![0.0; n * n];
            let mut hess = vec![vec![0.0; n * n]; n * n];
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    if w[k] > 0.0 {
                        g[k] = p[i] * (w[k] / r[j]).ln();
                        hess[k][k] += p[i] / w[k];
                    }
                    for l in 0..n {
                        hess[k][l * n + j] -= p[i] * p[l] / r[j];
                    }
                }
            }
            for (a, b) in &cons {
                let sl = b - a.iter().zip(&w).map(|(u, v)| u * v).sum::<f64>();
                for k in 0..n * n {
                    if a[k] == 0.0 {
                        continue;
                    }
                    g[k] += mu * a[k] / sl;
                    for l in 0..n * n {
                        hess[k][l] += mu * a[k] * a[l] / (sl * sl);
                    }
                }
            }
            let gx = lift(&g);
            let cols: Vec<Vec<f64>> = (0..nv).map(column).collect();
            let mut hx = vec![vec![0.0; nv]; nv];
            for u in 0..nv {
                for v in 0..nv {
                    let mut acc = 0.0;
                    for k in 0..n * n {
                        if cols[u][k] == 0.0 {
                            continue;
                        }
                        for l in 0..n * n {
                            acc += cols[u][k] * hess[k][l] * cols[v][l];
                        }
                    }
                    hx[u][v] = acc;
                }
            }
            let step = solve_linear(hx, gx.iter().map(|v| -v).collect());
            let decrement: f64 = -step.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>();
            if !(decrement > 1e-20) {
                break;
            }
            let f0 = objective(&x, mu);
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                let fc = objective(&cand, mu);
                if fc <= f0 - 0.25 * t * decrement {
                    x = cand;
                    break;
                }
                t *= 0.5;
                if t < 1e-20 {
                    break;
                }
            }
            if t < 1e-20 {
                break;
            }
        }
        mu *= 0.1;
    }
    let w = full(&x);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| w[i * n..(i + 1) * n].to_vec()).collect();
    mi(p, &rows)
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Grid search for `max H(r)` over the simplex, keeping points `feasible(r)` accepts.
/// A coarse pass is followed by a fine pass around the best coarse point.
pub fn simplex_max_entropy(n: usize, coarse: usize, fine: f64, feasible: impl Fn(&[f64]) -> bool) -> (Vec<f64>, f64) {
    fn visit(n: usize, steps: usize, prefix: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if prefix.len() == n - 1 {
            let used: usize = prefix.iter().sum();
            let mut full = prefix.clone();
            full.push(steps - used);
            f(&full);
            return;
        }
        let used: usize = prefix.iter().sum();
        for k in 0..=(steps - used) {
            prefix.push(k);
            visit(n, steps, prefix, f);
            prefix.pop();
        }
    }
    let mut best = (vec![], f64::NEG_INFINITY);
    visit(n, coarse, &mut Vec::new(), &mut |ks| {
        let r: Vec<f64> = ks.iter().map(|&k| k as f64 / coarse as f64).collect();
        if feasible(&r) {
            let v = h(&r);
            if v > best.1 {
                best = (r, v);
            }
        }
    });
    // Fine pass: perturb the first n-1 coordinates on a local lattice.
    let center = best.0.clone();
    let span = (1.0 / coarse as f64 / fine).round() as i64;
    let mut idx = vec![-span; n - 1];
    loop {
        let mut r: Vec<f64> = (0..n - 1).map(|k| center[k] + idx[k] as f64 * fine).collect();
        let last = 1.0 - r.iter().sum::<f64>();
        if r.iter().all(|&x| x >= 0.0) && last >= 0.0 {
            r.push(last);
            if feasible(&r) {
                let v = h(&r);
                if v > best.1 {
                    best = (r, v);
                }
            }
        }
        let mut k = 0;
        loop {
            if k == n - 1 {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= span {
                break;
            }
            idx[k] = -span;
            k += 1;
        }
    }
}

/// Smooth shading plus small uniform noise, as a stand-in for a natural image.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let base = 128.0 + 60.0 * (r as f64 / 40.0).sin() * (c as f64 / 55.0).cos();
            let noise = rng.random_range(-3i32..=3) as f64;
            px.push((base + noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(width, height, px).unwrap()
}
