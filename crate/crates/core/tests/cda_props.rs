use driftbench_core::cda::{alpha_from_distance, ipca_update, tradeoff_objective, AlphaPolicy, DomainTracker};
use driftbench_core::engine::ema_update;
use driftbench_core::linalg::{covariance, frobenius_norm_sq, sym_eig, Matrix};
use driftbench_core::model::{ModelDims, ModelParams};
use driftbench_core::rng::{rng_for, standard_normal};
use proptest::prelude::*;
use rand::Rng;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, &[]);
    let scales: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.2..3.0)).collect();
    let offsets: Vec<f64> = (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
    Matrix::from_fn(rows, cols, |_, j| offsets[j] + scales[j] * standard_normal(&mut rng))
}

fn chunks(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng_for(seed, &[1]);
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + rng.gen_range(1..=n.max(2) / 2)).min(n);
        out.push((lo, hi));
        lo = hi;
    }
    out
}

fn rows(x: &Matrix, lo: usize, hi: usize) -> Matrix {
    Matrix::from_fn(hi - lo, x.cols(), |i, j| x[(lo + i, j)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn chunked_ipca_matches_batch(n in 1usize..=500, d in 1usize..=32, seed in any::<u64>()) {
        let x = gaussian(n, d, seed);
        let mut t = DomainTracker::new(d, 1).unwrap();
        for (lo, hi) in chunks(n, seed) {
            t.update(&rows(&x, lo, hi)).unwrap();
        }
        let (m, c) = covariance(&x).unwrap();
        let mean_err = t.mean.iter().zip(&m).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        prop_assert!(mean_err <= 1e-10);
        prop_assert!(t.cov.max_abs_diff(&c) <= 1e-10);
        prop_assert_eq!(t.n_seen, n as u64);
    }

    #[test]
    fn tracker_invariants_hold(d in 2usize..10, seed in any::<u64>()) {
        let k = 1 + (seed as usize) % d;
        let mut t = DomainTracker::new(d, k).unwrap();
        let mut seen = 0;
        for s in 0..8u64 {
            let x = gaussian(1 + (s as usize * 3) % 11, d, seed ^ s);
            let d_out = t.update(&x).unwrap();
            prop_assert!(d_out >= 0.0 && d_out <= 4.0 * k as f64);
            prop_assert!(t.n_seen > seen);
            seen = t.n_seen;
            let g = t.components.transpose().matmul(&t.components).unwrap();
            prop_assert!(g.max_abs_diff(&Matrix::identity(k)) <= 1e-9);
            prop_assert_eq!(&t.cov, &t.cov.transpose());
            let e = sym_eig(&t.cov).unwrap();
            prop_assert!(e.values.iter().all(|&v| v >= -1e-10));
        }
    }

    #[test]
    fn small_updates_are_nearly_skew(d in 2usize..8, seed in any::<u64>()) {
        let k = 1 + (seed as usize) % d;
        let base = gaussian(400, d, seed);
        let t = DomainTracker::new(d, k).unwrap();
        let (t, _) = ipca_update(&t, &base).unwrap();
        let extra = gaussian(4, d, seed.wrapping_add(1));
        let (next, dist) = ipca_update(&t, &extra).unwrap();
        let dv = next.components.sub(&t.components).unwrap();
        let vt_dv = t.components.transpose().matmul(&dv).unwrap();
        let sym = Matrix::from_fn(k, k, |i, j| vt_dv[(i, j)] + vt_dv[(j, i)]);
        prop_assert!(frobenius_norm_sq(&sym).sqrt() <= 10.0 * dist + 1e-12);
    }

    #[test]
    fn alpha_is_monotone_and_bounded(a in 0.0..10.0f64, b in 0.0..10.0f64, bound in 0.5..0.999f64, kappa in 0.01..5.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for p in [AlphaPolicy::LinearClamp { alpha_bound: bound }, AlphaPolicy::ExpDecay { alpha_bound: bound, kappa }] {
            let (x, y) = (alpha_from_distance(lo, &p), alpha_from_distance(hi, &p));
            prop_assert!(x >= y);
            prop_assert!((bound..=1.0).contains(&x) && (bound..=1.0).contains(&y));
        }
    }
}

#[test]
fn ema_point_minimizes_the_tradeoff() {
    let dims = ModelDims::linear(4, 3);
    let s = ModelParams::init(dims, 1).unwrap();
    let t = ModelParams::init(dims, 2).unwrap();
    let d = 0.3;
    let best = ema_update(&t, &s, 1.0 - d).unwrap();
    let f_best = tradeoff_objective(&best, &s, &t, d).unwrap();
    let mut rng = rng_for(3, &[]);
    for _ in 0..1000 {
        let data = best.as_slice().iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let probe = ModelParams::from_vec(dims, data).unwrap();
        assert!(f_best <= tradeoff_objective(&probe, &s, &t, d).unwrap());
    }
}

#[test]
fn abrupt_rotation_spikes_the_distance() {
    let d = 6;
    let mut rng = rng_for(5, &[]);
    let scales = [3.0, 2.0, 1.5, 1.0, 0.6, 0.3];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut draw = |rotated: bool| {
        let mut x = Matrix::from_fn(32, d, |_, j| scales[j] * standard_normal(&mut rng));
        if rotated {
            // 45° in the planes (0,3), (1,4), (2,5).
            for i in 0..32 {
                let r = x.row_mut(i);
                for a in 0..3 {
                    let (p, q) = (r[a], r[a + 3]);
                    r[a] = h * (p - q);
                    r[a + 3] = h * (p + q);
                }
            }
        }
        x
    };
    let mut t = DomainTracker::new(d, 3).unwrap();
    let mut dist = Vec::new();
    for step in 0..40 {
        dist.push(t.update(&draw(step >= 30)).unwrap());
    }
    let before = dist[25..30].iter().sum::<f64>() / 5.0;
    assert!(dist[30] > before, "{} vs {before}", dist[30]);
}
