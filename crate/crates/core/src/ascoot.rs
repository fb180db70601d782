//! Asymmetric co-optimal transport.
//!
//! Two couplings are sought jointly: `π^s` between the `N` rows of `X` and
//! the `M` rows of `E`, and `π^f` between their `d₁` and `d₂` columns. Each
//! coupling has a KL-penalized row marginal and an exactly enforced column
//! marginal, plus entropic smoothing. With one coupling fixed the problem in
//! the other is an entropic OT problem solved by a generalized Sinkhorn
//! iteration; the solver alternates between the two blocks.
//!
//! The ground cost is `L_ijkl = (X_ik − E_jl)²`.

use crate::error::{check_dim, invalid, Result};
use crate::linalg::Matrix;

pub const MARGINAL_TOL: f64 = 1e-12;
/// Column-marginal violation beyond which the objective is `+∞`.
pub const HARD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    /// `N × d₁`.
    pub x: Matrix,
    /// `M × d₂`.
    pub e: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu_f: Vec<f64>,
    pub nu_f: Vec<f64>,
    pub lambda1: f64,
    pub epsilon: f64,
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(invalid(format!("{name} has length {}, expected {len}", m.len())));
    }
    if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("{name} must be strictly positive")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > MARGINAL_TOL {
        return Err(invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl TransportProblem {
    /// Uniform marginals on both sides, `λ₁ = 1`, `ε = 0.05`.
    pub fn uniform(x: Matrix, e: Matrix) -> Self {
        Self {
            mu: uniform(x.rows()),
            nu: uniform(e.rows()),
            mu_f: uniform(x.cols()),
            nu_f: uniform(e.cols()),
            x,
            e,
            lambda1: 1.0,
            epsilon: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d1) = self.x.shape();
        let (m, d2) = self.e.shape();
        if n == 0 || d1 == 0 || m == 0 || d2 == 0 {
            return Err(invalid("transport problem has an empty feature matrix"));
        }
        if !self.x.is_finite() || !self.e.is_finite() {
            return Err(invalid("feature matrices must be finite"));
        }
        check_marginal("mu", &self.mu, n)?;
        check_marginal("nu", &self.nu, m)?;
        check_marginal("mu_f", &self.mu_f, d1)?;
        check_marginal("nu_f", &self.nu_f, d2)?;
        if !(self.lambda1 > 0.0) {
            return Err(invalid("lambda1 must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon must be positive and finite"));
        }
        Ok(())
    }
}

/// Output of one generalized Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub pi: Matrix,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub iterations: usize,
    /// `‖πᵀ1 − ν‖_∞`.
    pub marginal_residual: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|v| v.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|v| v.exp()).collect()
    }
}

fn row_sums(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// `C^s_ij = Σ_kl (X_ik − E_jl)² π^f_kl`, contracted in closed form.
pub fn cost_from_plan(x: &Matrix, e: &Matrix, pi_f: &Matrix) -> Result<Matrix> {
    check_dim("pi_f rows vs x columns", x.cols(), pi_f.rows())?;
    check_dim("pi_f columns vs e columns", e.cols(), pi_f.cols())?;
    let r = row_sums(pi_f);
    let c = col_sums(pi_f);
    let xr: Vec<f64> = (0..x.rows())
        .map(|i| x.row(i).iter().zip(&r).map(|(v, w)| v * v * w).sum())
        .collect();
    let ec: Vec<f64> = (0..e.rows())
        .map(|j| e.row(j).iter().zip(&c).map(|(v, w)| v * v * w).sum())
        .collect();
    let cross = x.matmul(pi_f)?.matmul(&e.transpose())?;
    Ok(Matrix::from_fn(x.rows(), e.rows(), |i, j| xr[i] + ec[j] - 2.0 * cross[(i, j)]))
}

/// `C^f_kl = Σ_ij (X_ik − E_jl)² π^s_ij`.
pub fn feature_cost_from_plan(x: &Matrix, e: &Matrix, pi_s: &Matrix) -> Result<Matrix> {
    check_dim("pi_s rows vs x rows", x.rows(), pi_s.rows())?;
    check_dim("pi_s columns vs e rows", e.rows(), pi_s.cols())?;
    cost_from_plan(&x.transpose(), &e.transpose(), pi_s)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Generalized Sinkhorn for a soft row marginal `μ` (KL weight `λ₁`) and a
/// hard column marginal `ν`. `λ₁ = +∞` enforces both marginals exactly.
///
/// Iterates in the log domain:
/// `log u_i = −λ₁/(λ₁+ε) · LSE_j(−C_ij/ε + log ν_j + log v_j)`, then
/// `log v_j = −LSE_i(−C_ij/ε + log μ_i + log u_i)`.
pub fn sinkhorn_asym(
    c: &Matrix,
    mu: &[f64],
    nu: &[f64],
    lambda1: f64,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    let (n, m) = c.shape();
    check_dim("mu length vs cost rows", n, mu.len())?;
    check_dim("nu length vs cost columns", m, nu.len())?;
    if n == 0 || m == 0 {
        return Err(invalid("empty cost matrix"));
    }
    if !c.is_finite() {
        return Err(invalid("cost matrix has non-finite entries"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon must be positive and finite"));
    }
    if !(lambda1 > 0.0) {
        return Err(invalid("lambda1 must be positive"));
    }
    if mu.iter().chain(nu).any(|&v| !(v > 0.0)) {
        return Err(invalid("marginals must be strictly positive"));
    }
    let exponent = if lambda1.is_infinite() {
        1.0
    } else {
        lambda1 / (lambda1 + epsilon)
    };
    let log_k = c.scale(-1.0 / epsilon);
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let mut change: f64 = 0.0;
        for i in 0..n {
            let row = log_k.row(i);
            let lse = log_sum_exp((0..m).map(|j| row[j] + log_nu[j] + log_v[j]));
            let next = -exponent * lse;
            change = change.max((next - log_u[i]).abs());
            log_u[i] = next;
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| log_k[(i, j)] + log_mu[i] + log_u[i]));
            let next = -lse;
            change = change.max((next - log_v[j]).abs());
            log_v[j] = next;
        }
        if change <= tol {
            converged = true;
            break;
        }
    }

    let pi = Matrix::from_fn(n, m, |i, j| (log_u[i] + log_v[j] + log_k[(i, j)]).exp() * mu[i] * nu[j]);
    let marginal_residual = col_sums(&pi)
        .iter()
        .zip(nu)
        .fold(0.0_f64, |acc, (s, t)| acc.max((s - t).abs()));
    Ok(TransportPlan {
        pi,
        log_u,
        log_v,
        iterations,
        marginal_residual,
        converged,
    })
}

/// Generalized KL `Σ p log(p/q) − p + q`, with `0 log 0 = 0`.
pub fn generalized_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() - a + b } else { b })
        .sum()
}

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

/// Regularizer of one block: soft row KL, hard column indicator, entropy.
fn block_regularizer(pi: &Matrix, row_ref: &[f64], col_ref: &[f64], lambda1: f64, epsilon: f64) -> f64 {
    let cols = col_sums(pi);
    if cols.iter().zip(col_ref).any(|(s, t)| (s - t).abs() > HARD_TOL) {
        return f64::INFINITY;
    }
    let row_kl = generalized_kl(&row_sums(pi), row_ref);
    let soft = if lambda1.is_infinite() {
        if row_kl > HARD_TOL {
            return f64::INFINITY;
        }
        0.0
    } else {
        lambda1 * row_kl
    };
    soft + epsilon * generalized_kl(pi.as_slice(), &outer(row_ref, col_ref))
}

/// Full objective `J(π^s, π^f)`; `+∞` when a hard column marginal fails.
pub fn objective(pi_s: &Matrix, pi_f: &Matrix, problem: &TransportProblem) -> Result<f64> {
    check_dim("pi_s rows", problem.x.rows(), pi_s.rows())?;
    check_dim("pi_s columns", problem.e.rows(), pi_s.cols())?;
    if pi_s.as_slice().iter().chain(pi_f.as_slice()).any(|&v| v < 0.0) {
        return Err(invalid("couplings must be nonnegative"));
    }
    let rs = block_regularizer(pi_s, &problem.mu, &problem.nu, problem.lambda1, problem.epsilon);
    let rf = block_regularizer(pi_f, &problem.mu_f, &problem.nu_f, problem.lambda1, problem.epsilon);
    if rs.is_infinite() || rf.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let cs = cost_from_plan(&problem.x, &problem.e, pi_f)?;
    let coupling: f64 = cs.as_slice().iter().zip(pi_s.as_slice()).map(|(a, b)| a * b).sum();
    Ok(coupling + rs + rf)
}

/// Value of the sub-problem for a fixed cost: `⟨C, π⟩` plus the block
/// regularizer.
pub fn subproblem_objective(c: &Matrix, pi: &Matrix, mu: &[f64], nu: &[f64], lambda1: f64, epsilon: f64) -> f64 {
    let reg = block_regularizer(pi, mu, nu, lambda1, epsilon);
    reg + c.as_slice().iter().zip(pi.as_slice()).map(|(a, b)| a * b).sum::<f64>()
}

/// `−λ₁ Σ μ_i (e^{−α_i/λ₁} − 1) + ⟨β, ν⟩ − ε Σ μ_i ν_j e^{(α_i+β_j−C_ij)/ε}`.
///
/// With generalized-KL entropy the exact Fenchel dual is this plus `ε`, so
/// at the optimum this value sits `ε` below the primal.
pub fn dual_objective(
    alpha: &[f64],
    beta: &[f64],
    c: &Matrix,
    mu: &[f64],
    nu: &[f64],
    lambda1: f64,
    epsilon: f64,
) -> Result<f64> {
    let (n, m) = c.shape();
    check_dim("alpha length", n, alpha.len())?;
    check_dim("beta length", m, beta.len())?;
    check_dim("mu length", n, mu.len())?;
    check_dim("nu length", m, nu.len())?;
    let soft = if lambda1.is_infinite() {
        // Limit λ(e^{−α/λ} − 1) → −α.
        alpha.iter().zip(mu).map(|(a, w)| -w * a).sum::<f64>()
    } else {
        alpha
            .iter()
            .zip(mu)
            .map(|(a, w)| w * lambda1 * (-a / lambda1).exp_m1())
            .sum::<f64>()
    };
    let linear: f64 = beta.iter().zip(nu).map(|(b, w)| b * w).sum();
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..m {
            mass += mu[i] * nu[j] * ((alpha[i] + beta[j] - c[(i, j)]) / epsilon).exp();
        }
    }
    Ok(-soft + linear - epsilon * mass)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdOptions {
    /// Relative tolerance on successive objective values.
    pub tol: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 200,
            inner_tol: 1e-10,
            inner_max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BcdHistory {
    /// `J` at the initial couplings, then after each outer iteration.
    pub objectives: Vec<f64>,
    pub sample_residuals: Vec<f64>,
    pub feature_residuals: Vec<f64>,
    pub inner_iterations: Vec<(usize, usize)>,
    /// Outer loop met its tolerance and every inner solve converged.
    pub converged: bool,
}

impl BcdHistory {
    pub fn outer_iterations(&self) -> usize {
        self.objectives.len().saturating_sub(1)
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().unwrap_or(&f64::NAN)
    }

    /// Whether `J_{k+1} ≤ J_k + slack` for every k.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.objectives.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdSolution {
    pub pi_s: TransportPlan,
    pub pi_f: TransportPlan,
    pub history: BcdHistory,
}

pub fn bcd_solve(problem: &TransportProblem, opts: &BcdOptions) -> Result<BcdSolution> {
    let init = Matrix::from_vec(
        problem.mu_f.len(),
        problem.nu_f.len(),
        outer(&problem.mu_f, &problem.nu_f),
    )?;
    bcd_solve_from(problem, &init, opts)
}

/// Block coordinate descent starting from a given feature coupling.
pub fn bcd_solve_from(problem: &TransportProblem, pi_f_init: &Matrix, opts: &BcdOptions) -> Result<BcdSolution> {
    problem.validate()?;
    check_dim("initial pi_f rows", problem.mu_f.len(), pi_f_init.rows())?;
    check_dim("initial pi_f columns", problem.nu_f.len(), pi_f_init.cols())?;
    let (lambda, eps) = (problem.lambda1, problem.epsilon);
    let mut history = BcdHistory::default();

    let pi_s0 = Matrix::from_vec(problem.mu.len(), problem.nu.len(), outer(&problem.mu, &problem.nu))?;
    history.objectives.push(objective(&pi_s0, pi_f_init, problem)?);

    let mut pi_f_mat = pi_f_init.clone();
    let mut last: Option<(TransportPlan, TransportPlan)> = None;
    let mut inner_ok = true;
    let mut outer_ok = false;
    for _ in 0..opts.max_outer.max(1) {
        let cs = cost_from_plan(&problem.x, &problem.e, &pi_f_mat)?;
        let ps = sinkhorn_asym(&cs, &problem.mu, &problem.nu, lambda, eps, opts.inner_tol, opts.inner_max_iter)?;
        let cf = feature_cost_from_plan(&problem.x, &problem.e, &ps.pi)?;
        let pf = sinkhorn_asym(&cf, &problem.mu_f, &problem.nu_f, lambda, eps, opts.inner_tol, opts.inner_max_iter)?;
        inner_ok &= ps.converged && pf.converged;

        let j = objective(&ps.pi, &pf.pi, problem)?;
        let prev = history.final_objective();
        history.objectives.push(j);
        history.sample_residuals.push(ps.marginal_residual);
        history.feature_residuals.push(pf.marginal_residual);
        history.inner_iterations.push((ps.iterations, pf.iterations));
        pi_f_mat = pf.pi.clone();
        last = Some((ps, pf));
        if (j - prev).abs() <= opts.tol * (1.0 + j.abs()) {
            outer_ok = true;
            break;
        }
    }
    history.converged = outer_ok && inner_ok;
    let (pi_s, pi_f) = last.expect("at least one outer iteration");
    Ok(BcdSolution { pi_s, pi_f, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, &[]);
        Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>())
    }

    fn naive_cost(x: &Matrix, e: &Matrix, pi_f: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), e.rows(), |i, j| {
            let mut s = 0.0;
            for k in 0..x.cols() {
                for l in 0..e.cols() {
                    s += (x[(i, k)] - e[(j, l)]).powi(2) * pi_f[(k, l)];
                }
            }
            s
        })
    }

    #[test]
    fn cost_contraction_matches_naive_sum() {
        let x = random(3, 2, 1);
        let e = random(2, 3, 2);
        let pf = random(2, 3, 3);
        let fast = cost_from_plan(&x, &e, &pf).unwrap();
        assert!(fast.max_abs_diff(&naive_cost(&x, &e, &pf)) < 1e-12);
    }

    #[test]
    fn constant_features_give_constant_cost() {
        let x = Matrix::from_fn(3, 2, |_, _| 1.5);
        let e = Matrix::from_fn(4, 3, |_, _| -0.5);
        let pf = Matrix::from_fn(2, 3, |_, _| 1.0 / 6.0);
        let c = cost_from_plan(&x, &e, &pf).unwrap();
        assert!(c.as_slice().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn identical_spaces_have_zero_diagonal_cost() {
        let x = random(3, 3, 4);
        let pf = Matrix::diag(&[1.0 / 3.0; 3]);
        let c = cost_from_plan(&x, &x, &pf).unwrap();
        for i in 0..3 {
            assert!(c[(i, i)].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_gives_independent_plan() {
        let mu = [0.2, 0.3, 0.5];
        let nu = [0.6, 0.4];
        let p = sinkhorn_asym(&Matrix::zeros(3, 2), &mu, &nu, 1.0, 0.05, 1e-12, 1000).unwrap();
        assert!(p.converged);
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.pi[(i, j)] - mu[i] * nu[j]).abs() < 1e-12);
            }
        }
        assert!(p.log_u.iter().chain(&p.log_v).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn columns_hit_target_marginal() {
        let c = random(4, 5, 9).scale(3.0);
        let mu = uniform(4);
        let nu = [0.1, 0.2, 0.3, 0.15, 0.25];
        let p = sinkhorn_asym(&c, &mu, &nu, 1.0, 0.05, 1e-10, 100_000).unwrap();
        assert!(p.converged);
        assert!(p.marginal_residual <= 1e-9);
    }

    #[test]
    fn survives_large_cost_ratio() {
        let mut c = random(3, 3, 5);
        c[(0, 0)] = 500.0;
        let p = sinkhorn_asym(&c, &uniform(3), &uniform(3), 1.0, 0.05, 1e-10, 100_000).unwrap();
        assert!(p.pi.is_finite());
        assert!(p.marginal_residual < 1e-9);
    }

    #[test]
    fn objective_zero_at_independent_coupling_with_zero_cost() {
        let x = Matrix::from_fn(2, 2, |_, _| 1.0);
        let prob = TransportProblem::uniform(x.clone(), x);
        let ps = Matrix::from_fn(2, 2, |_, _| 0.25);
        assert_eq!(objective(&ps, &ps, &prob).unwrap(), 0.0);
        let mut bad = ps.clone();
        bad[(0, 0)] += 1e-3;
        assert_eq!(objective(&bad, &ps, &prob).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dual_hand_values() {
        let c = Matrix::zeros(2, 3);
        let mu = uniform(2);
        let nu = uniform(3);
        let v = dual_objective(&[0.0; 2], &[0.0; 3], &c, &mu, &nu, 1.0, 0.05).unwrap();
        assert!((v + 0.05).abs() < 1e-15);

        let huge = Matrix::from_fn(2, 3, |_, _| 1e4);
        let base = dual_objective(&[0.0; 2], &[0.0; 3], &huge, &mu, &nu, 1.0, 0.05).unwrap();
        let bumped = dual_objective(&[0.0; 2], &[0.0, 0.7, 0.0], &huge, &mu, &nu, 1.0, 0.05).unwrap();
        assert!((bumped - base - nu[1] * 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_problem_stops_after_one_outer_iteration() {
        let x = Matrix::from_fn(3, 2, |_, _| 0.7);
        let e = Matrix::from_fn(4, 3, |_, _| 0.7);
        let prob = TransportProblem::uniform(x, e);
        let sol = bcd_solve(&prob, &BcdOptions::default()).unwrap();
        assert_eq!(sol.history.outer_iterations(), 1);
        assert!(sol.history.final_objective().abs() < 1e-12);
        assert!(sol.history.converged);
    }
}
