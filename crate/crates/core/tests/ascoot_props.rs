use driftbench_core::ascoot::{
    bcd_solve, bcd_solve_from, cost_from_plan, dual_objective, generalized_kl, objective, sinkhorn_asym,
    subproblem_objective, BcdOptions, TransportProblem,
};
use driftbench_core::linalg::Matrix;
use driftbench_core::rng::rng_for;
use proptest::prelude::*;
use rand::Rng;

const EPS: f64 = 0.05;

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>())
}

fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn random_problem(seed: u64) -> TransportProblem {
    let mut rng = rng_for(seed, &[]);
    let (n, d1, m, d2) = (rng.gen_range(2..6), rng.gen_range(2..5), rng.gen_range(2..6), rng.gen_range(2..5));
    TransportProblem::uniform(random_matrix(n, d1, &mut rng), random_matrix(m, d2, &mut rng))
}

/// Coupling whose column `j` is `ν_j` split across rows at random.
fn feasible_coupling(rows: usize, nu: &[f64], rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, nu.len());
    for (j, &t) in nu.iter().enumerate() {
        let w = random_simplex(rows, rng);
        for i in 0..rows {
            m[(i, j)] = w[i] * t;
        }
    }
    m
}

/// Plain balanced Sinkhorn with both marginals enforced.
fn balanced_sinkhorn(c: &Matrix, mu: &[f64], nu: &[f64], eps: f64) -> Matrix {
    let (n, m) = c.shape();
    let k = Matrix::from_fn(n, m, |i, j| (-c[(i, j)] / eps).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    for _ in 0..20_000 {
        for i in 0..n {
            u[i] = mu[i] / (0..m).map(|j| k[(i, j)] * v[j]).sum::<f64>();
        }
        for j in 0..m {
            v[j] = nu[j] / (0..n).map(|i| k[(i, j)] * u[i]).sum::<f64>();
        }
    }
    Matrix::from_fn(n, m, |i, j| u[i] * k[(i, j)] * v[j])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn columns_match_nu_after_convergence(seed in any::<u64>(), lambda in 0.1..10.0f64) {
        let mut rng = rng_for(seed, &[]);
        let (n, m) = (rng.gen_range(2..8), rng.gen_range(2..8));
        let c = random_matrix(n, m, &mut rng).scale(rng.gen_range(0.1..5.0));
        let mu = random_simplex(n, &mut rng);
        let nu = random_simplex(m, &mut rng);
        let p = sinkhorn_asym(&c, &mu, &nu, lambda, EPS, 1e-10, 100_000).unwrap();
        prop_assert!(p.converged);
        prop_assert!(p.marginal_residual <= 1e-9);
        for i in 0..n {
            for j in 0..m {
                let want = (p.log_u[i] + p.log_v[j] - c[(i, j)] / EPS).exp() * mu[i] * nu[j];
                prop_assert!((p.pi[(i, j)] - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn one_sweep_already_fixes_the_columns(seed in any::<u64>()) {
        let mut rng = rng_for(seed, &[]);
        let c = random_matrix(4, 5, &mut rng).scale(3.0);
        let mu = random_simplex(4, &mut rng);
        let nu = random_simplex(5, &mut rng);
        for iters in 1..4 {
            let p = sinkhorn_asym(&c, &mu, &nu, 1.0, EPS, 0.0, iters).unwrap();
            for (j, &t) in nu.iter().enumerate() {
                let s: f64 = (0..4).map(|i| p.pi[(i, j)]).sum();
                prop_assert!((s - t).abs() <= 1e-12 * t);
            }
        }
    }

    #[test]
    fn dual_never_exceeds_primal(seed in any::<u64>(), lambda in 0.1..10.0f64) {
        let mut rng = rng_for(seed, &[]);
        let (n, m) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let c = random_matrix(n, m, &mut rng);
        let mu = random_simplex(n, &mut rng);
        let nu = random_simplex(m, &mut rng);
        let p = sinkhorn_asym(&c, &mu, &nu, lambda, EPS, 1e-12, 100_000).unwrap();
        let primal = subproblem_objective(&c, &p.pi, &mu, &nu, lambda, EPS);
        let alpha: Vec<f64> = p.log_u.iter().map(|v| EPS * v).collect();
        let beta: Vec<f64> = p.log_v.iter().map(|v| EPS * v).collect();
        let at_opt = dual_objective(&alpha, &beta, &c, &mu, &nu, lambda, EPS).unwrap();
        prop_assert!(at_opt <= primal + 1e-6);
        prop_assert!((at_opt + EPS - primal).abs() <= 1e-8, "{} vs {}", at_opt + EPS, primal);
        for _ in 0..20 {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert!(dual_objective(&a, &b, &c, &mu, &nu, lambda, EPS).unwrap() + EPS <= primal + 1e-9);
        }
    }
}

#[test]
fn large_lambda_matches_balanced_sinkhorn() {
    let mut rng = rng_for(17, &[]);
    for _ in 0..10 {
        let c = random_matrix(3, 3, &mut rng);
        let mu = random_simplex(3, &mut rng);
        let nu = random_simplex(3, &mut rng);
        let p = sinkhorn_asym(&c, &mu, &nu, 1e6, EPS, 1e-13, 200_000).unwrap();
        let oracle = balanced_sinkhorn(&c, &mu, &nu, EPS);
        assert!(p.pi.max_abs_diff(&oracle) <= 1e-6, "{}", p.pi.max_abs_diff(&oracle));
    }
}

#[test]
fn exponent_is_continuous_at_infinity() {
    let mut rng = rng_for(23, &[]);
    for _ in 0..10 {
        let c = random_matrix(4, 3, &mut rng).scale(2.0);
        let mu = random_simplex(4, &mut rng);
        let nu = random_simplex(3, &mut rng);
        let big = sinkhorn_asym(&c, &mu, &nu, 1e8, EPS, 1e-13, 200_000).unwrap();
        let inf = sinkhorn_asym(&c, &mu, &nu, f64::INFINITY, EPS, 1e-13, 200_000).unwrap();
        assert!(big.pi.max_abs_diff(&inf.pi) <= 1e-6);
    }
}

#[test]
fn extreme_cost_ratios_stay_finite() {
    let mut rng = rng_for(29, &[]);
    let c = Matrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { rng.gen_range(0.0..1.0) * 500.0 });
    let mu = random_simplex(4, &mut rng);
    let nu = random_simplex(4, &mut rng);
    for lambda in [1.0, f64::INFINITY] {
        let p = sinkhorn_asym(&c, &mu, &nu, lambda, EPS, 1e-10, 100_000).unwrap();
        assert!(p.pi.is_finite() && p.log_u.iter().chain(&p.log_v).all(|v| v.is_finite()));
        assert!(p.marginal_residual <= 1e-9);
    }
}

#[test]
fn objective_matches_naive_sum() {
    let mut rng = rng_for(31, &[]);
    let x = random_matrix(3, 2, &mut rng);
    let e = random_matrix(2, 3, &mut rng);
    let mut prob = TransportProblem::uniform(x.clone(), e.clone());
    prob.mu = random_simplex(3, &mut rng);
    prob.nu = random_simplex(2, &mut rng);
    prob.mu_f = random_simplex(2, &mut rng);
    prob.nu_f = random_simplex(3, &mut rng);
    let ps = feasible_coupling(3, &prob.nu, &mut rng);
    let pf = feasible_coupling(2, &prob.nu_f, &mut rng);

    let mut coupling = 0.0;
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..3 {
                    coupling += (x[(i, k)] - e[(j, l)]).powi(2) * ps[(i, j)] * pf[(k, l)];
                }
            }
        }
    }
    let rows = |m: &Matrix| (0..m.rows()).map(|i| m.row(i).iter().sum()).collect::<Vec<f64>>();
    let outer = |a: &[f64], b: &[f64]| a.iter().flat_map(|p| b.iter().map(move |q| p * q)).collect::<Vec<f64>>();
    let want = coupling
        + prob.lambda1 * (generalized_kl(&rows(&ps), &prob.mu) + generalized_kl(&rows(&pf), &prob.mu_f))
        + EPS * (generalized_kl(ps.as_slice(), &outer(&prob.mu, &prob.nu))
            + generalized_kl(pf.as_slice(), &outer(&prob.mu_f, &prob.nu_f)));
    assert!((objective(&ps, &pf, &prob).unwrap() - want).abs() <= 1e-10);
}

#[test]
fn bcd_is_monotone_with_exact_columns() {
    for seed in 0..50 {
        let prob = random_problem(seed);
        let sol = bcd_solve(&prob, &BcdOptions::default()).unwrap();
        assert!(sol.history.is_monotone(1e-12), "seed {seed}: {:?}", sol.history.objectives);
        assert!(sol.pi_s.marginal_residual <= 1e-9 && sol.pi_f.marginal_residual <= 1e-9);
        assert!(sol.history.converged, "seed {seed}");
    }
}

#[test]
fn bcd_beats_random_feasible_couplings() {
    let mut rng = rng_for(37, &[]);
    let prob = TransportProblem::uniform(random_matrix(2, 2, &mut rng), random_matrix(2, 2, &mut rng));
    let sol = bcd_solve(&prob, &BcdOptions::default()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..100_000 {
        let ps = feasible_coupling(2, &prob.nu, &mut rng);
        let pf = feasible_coupling(2, &prob.nu_f, &mut rng);
        best = best.min(objective(&ps, &pf, &prob).unwrap());
    }
    assert!(sol.history.final_objective() <= best + 1e-6, "{} vs {best}", sol.history.final_objective());
}

#[test]
fn random_starts_reach_the_same_plans() {
    let opts = BcdOptions {
        tol: 1e-15,
        max_outer: 5000,
        inner_tol: 1e-13,
        ..BcdOptions::default()
    };
    for seed in 0..5 {
        let prob = random_problem(100 + seed);
        let mut rng = rng_for(seed, &[7]);
        let a = bcd_solve_from(&prob, &feasible_coupling(prob.mu_f.len(), &prob.nu_f, &mut rng), &opts).unwrap();
        let b = bcd_solve_from(&prob, &feasible_coupling(prob.mu_f.len(), &prob.nu_f, &mut rng), &opts).unwrap();
        assert!(a.pi_s.pi.max_abs_diff(&b.pi_s.pi) <= 1e-5, "seed {seed}");
        assert!(a.pi_f.pi.max_abs_diff(&b.pi_f.pi) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn cost_contraction_handles_rectangular_plans() {
    let mut rng = rng_for(41, &[]);
    let x = random_matrix(4, 3, &mut rng);
    let e = random_matrix(5, 2, &mut rng);
    let pf = random_matrix(3, 2, &mut rng);
    let c = cost_from_plan(&x, &e, &pf).unwrap();
    assert_eq!(c.shape(), (4, 5));
    let naive = (0..3).map(|k| (0..2).map(|l| (x[(1, k)] - e[(2, l)]).powi(2) * pf[(k, l)]).sum::<f64>()).sum::<f64>();
    assert!((c[(1, 2)] - naive).abs() < 1e-12);
}
