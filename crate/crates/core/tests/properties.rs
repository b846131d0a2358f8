use proptest::prelude::*;
use rdp_core::drp::{solve_drp, zero_rate_distortion, DrpProblem};
use rdp_core::ot::wasserstein;
use rdp_core::pgm::{encode_pgm, parse_pgm, GrayImage, PgmEncoding};
use rdp_core::prob::{
    self, entropy, hamming_matrix, kl_divergence, mutual_information, squared_error_matrix,
    tv_distance, Channel, CostMatrix, Distribution, SupportGrid,
};
use rdp_core::rdh::{prediction_errors, solve_rdh_rdp};
use rdp_core::rdp::{solve_rdp_wasserstein, RdpProblem, SolverConfig};
use rdp_core::transitions::upper_bound_h;

fn cfg() -> SolverConfig {
    SolverConfig {
        max_iter: 5000,
        pi_sweeps: 20,
        r_relaxation: 2.0,
        ..SolverConfig::default()
    }
}

fn dist(n: usize) -> impl Strategy<Value = Distribution> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|w| Distribution::normalized(w).unwrap())
}

fn channel(m: usize, n: usize) -> impl Strategy<Value = Channel> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), m).prop_map(move |rows| {
        let mut w = ndarray::Array2::zeros((m, n));
        for (i, row) in rows.iter().enumerate() {
            let z: f64 = row.iter().sum();
            for (j, v) in row.iter().enumerate() {
                w[[i, j]] = v / z;
            }
        }
        Channel::new(w).unwrap()
    })
}

fn binary_rate(d: f64, pp: f64) -> f64 {
    let h = hamming_matrix(2, 2);
    let prob =
        RdpProblem::new(Distribution::bernoulli(0.1).unwrap(), h.clone(), Some(h), d, pp, 0.01)
            .unwrap();
    solve_rdp_wasserstein(&prob, &cfg()).unwrap().rate
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded(p in (2usize..8).prop_flat_map(dist)) {
        let h = entropy(&p);
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative((p, q) in (2usize..6).prop_flat_map(|n| (dist(n), dist(n)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mutual_information_bounds((p, w) in (2usize..5, 2usize..5).prop_flat_map(|(m, n)| (dist(m), channel(m, n)))) {
        let i = mutual_information(&w, &p).unwrap();
        prop_assert!(i >= -1e-12);
        prop_assert!(i <= entropy(&p) + 1e-12);
        let r = prob::marginal(&w, &p).unwrap();
        prop_assert!(i <= entropy(&r) + 1e-12);
        // A channel that ignores its input carries nothing.
        let flat = Channel::constant(p.len(), &r);
        prop_assert!(mutual_information(&flat, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tv_is_a_metric((p, q, s) in (2usize..6).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
        prop_assert!((pq - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(pq <= tv_distance(&p, &s).unwrap() + tv_distance(&s, &q).unwrap() + 1e-12);
    }

    #[test]
    fn hamming_transport_is_tv((p, q) in (2usize..6).prop_flat_map(|n| (dist(n), dist(n)))) {
        let n = p.len();
        let w = wasserstein(&p, &q, &hamming_matrix(n, n)).unwrap();
        prop_assert!((w - tv_distance(&p, &q).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn transport_is_symmetric_under_transpose(
        (p, q, c) in (2usize..5, 2usize..5).prop_flat_map(|(m, n)| (
            dist(m),
            dist(n),
            prop::collection::vec(prop::collection::vec(0.0f64..5.0, n), m),
        ))
    ) {
        let c = CostMatrix::from_rows(&c).unwrap();
        let pq = wasserstein(&p, &q, &c).unwrap();
        let qp = wasserstein(&q, &p, &c.transpose()).unwrap();
        prop_assert!((pq - qp).abs() < 1e-9, "{} vs {}", pq, qp);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..9, h in 1usize..9, pixels in prop::collection::vec(any::<u8>(), 64), ascii in any::<bool>()) {
        let img = GrayImage::new(w, h, pixels[..w * h].to_vec()).unwrap();
        let enc = if ascii { PgmEncoding::Ascii } else { PgmEncoding::Binary };
        let back = parse_pgm(&encode_pgm(&img, enc)).unwrap();
        prop_assert_eq!(&back, &img);
        let other = if ascii { PgmEncoding::Binary } else { PgmEncoding::Ascii };
        prop_assert_eq!(parse_pgm(&encode_pgm(&img, other)).unwrap(), back);
    }

    #[test]
    fn error_histogram_is_a_distribution(w in 2usize..10, h in 2usize..10, pixels in prop::collection::vec(any::<u8>(), 100)) {
        let img = GrayImage::new(w, h, pixels[..w * h].to_vec()).unwrap();
        let pe = prediction_errors(&img).unwrap();
        prop_assert_eq!(pe.errors.len(), w * h);
        let total: f64 = pe.histogram.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rate_is_nonincreasing_in_both_budgets(d in 0.01f64..0.09, pp in 0.0f64..0.1, step in 0.002f64..0.02) {
        let base = binary_rate(d, pp);
        prop_assert!(base >= -1e-9);
        prop_assert!(binary_rate(d + step, pp) <= base + 1e-6);
        prop_assert!(binary_rate(d, pp + step) <= base + 1e-6);
    }

    #[test]
    fn zero_distortion_keeps_the_source(p in (2usize..5).prop_flat_map(dist), pp in 0.0f64..1.0) {
        let n = p.len();
        let h = hamming_matrix(n, n);
        let prob = RdpProblem::new(p.clone(), h.clone(), Some(h), 0.0, pp, 0.01).unwrap();
        let res = solve_rdp_wasserstein(&prob, &cfg()).unwrap();
        for (a, b) in res.r.probs().iter().zip(p.probs()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((res.rate - entropy(&p)).abs() < 1e-6);
    }

    #[test]
    fn distortion_is_nonincreasing_in_rate(r in 0.01f64..0.3, step in 0.01f64..0.1) {
        let h = hamming_matrix(2, 2);
        let at = |rate: f64| {
            let prob = DrpProblem::new(Distribution::bernoulli(0.1).unwrap(), h.clone(), h.clone(), rate, 0.03, 0.01).unwrap();
            solve_drp(&prob, &cfg()).unwrap().achieved_distortion
        };
        prop_assert!(at(r + step) <= at(r) + 1e-6);
    }

    #[test]
    fn zero_rate_distortion_of_the_source_itself(p in (2usize..5).prop_flat_map(dist)) {
        // With no perception slack the output must be p, which costs sum_ij p_i p_j d_ij.
        let n = p.len();
        let grid = SupportGrid::indices(n);
        let d = squared_error_matrix(&grid, &grid);
        let z = zero_rate_distortion(&p, &d, &hamming_matrix(n, n), 0.0).unwrap();
        let expected: f64 = (0..n)
            .map(|i| (0..n).map(|j| p.probs()[i] * p.probs()[j] * d.get(i, j)).sum::<f64>())
            .sum();
        prop_assert!((z.distortion - expected).abs() < 1e-9);
        prop_assert!(wasserstein(&p, &z.r, &hamming_matrix(n, n)).unwrap() < 1e-9);
    }

    #[test]
    fn upper_bound_h_is_nonincreasing_and_convex(a in 0.0f64..0.06, gap in 0.005f64..0.03) {
        let p = Distribution::bernoulli(0.1).unwrap();
        let h = hamming_matrix(2, 2);
        let v: Vec<f64> = upper_bound_h(&p, &h, &h, &[a, a + gap, a + 2.0 * gap])
            .unwrap()
            .iter()
            .map(|t| t.d)
            .collect();
        prop_assert!(v[1] <= v[0] + 1e-9);
        prop_assert!(v[2] <= v[1] + 1e-9);
        prop_assert!(v[1] <= 0.5 * (v[0] + v[2]) + 1e-9);
    }

    #[test]
    fn rdh_rate_grows_with_the_budgets(dd in 0.05f64..0.3, pp in 0.02f64..0.2, step in 0.01f64..0.1) {
        let p = Distribution::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let d = hamming_matrix(4, 4);
        let grid = SupportGrid::indices(4);
        let c = squared_error_matrix(&grid, &grid);
        // Both constraints active converges slowly; the tolerance covers the remaining error.
        let long = SolverConfig { max_iter: 20_000, ..cfg() };
        let rate = |a: f64, b: f64| solve_rdh_rdp(&p, &d, &c, a, b, 0.01, &long).unwrap().embedding_rate;
        let base = rate(dd, pp);
        prop_assert!(base >= -1e-9);
        prop_assert!(rate(dd, pp + step) >= base - 1e-4);
        prop_assert!(rate(dd + step, pp) >= base - 1e-4);
        prop_assert!(rate(dd, 0.0).abs() < 1e-9);
    }
}
